"""Mixture-of-Attention layer.

Each attention expert runs full causal self-attention over the sequence; the
layer output at every position is the gate-weighted sum of the experts'
per-position outputs. Two weight layouts are supported: expert_kv (each
expert owns q/k/v/o) and shared_kv (one k/v pair serves all experts).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tt
from .errors import ShapeError, SurgeryError
from .model import Checkpoint, LayerTrace, mha_forward
from .moe import route
from .tensor import Tensor


@dataclass
class MoaLayer:
    kv_mode: str                # expert_kv | shared_kv
    wq: list[Tensor]
    wk: list[Tensor]            # length n_experts, or 1 when shared
    wv: list[Tensor]
    wo: list[Tensor]
    w_router: Tensor
    n_heads: int

    def __post_init__(self):
        n = len(self.wq)
        if len(self.wo) != n:
            raise ShapeError(f"MoaLayer: {n} q experts vs {len(self.wo)} o experts")
        if self.kv_mode == "expert_kv":
            if len(self.wk) != n or len(self.wv) != n:
                raise ShapeError("expert_kv requires one k/v pair per expert")
        elif self.kv_mode == "shared_kv":
            if len(self.wk) != 1 or len(self.wv) != 1:
                raise ShapeError("shared_kv requires exactly one shared k/v pair")
        else:
            raise ShapeError(f"unknown kv_mode {self.kv_mode!r}")

    @property
    def n_experts(self) -> int:
        return len(self.wq)

    def expert_kv_pair(self, e: int) -> tuple[Tensor, Tensor]:
        if self.kv_mode == "shared_kv":
            return self.wk[0], self.wv[0]
        return self.wk[e], self.wv[e]


def moa_combine(x: Tensor, layer: MoaLayer, weights: Tensor) -> Tensor:
    """Sum_e weights[..., e] * MHA_e(x); weights is (B, T, N)."""
    B, T, d = x.data.shape
    out = None
    for e in range(layer.n_experts):
        wk, wv = layer.expert_kv_pair(e)
        ye = mha_forward(x, layer.wq[e], wk, wv, layer.wo[e], layer.n_heads)
        ge = tt.tslice(weights, (slice(None), slice(None), slice(e, e + 1)))
        term = ye * ge
        out = term if out is None else out + term
    return out


def moa_forward(x, layer: MoaLayer, routing: str = "soft", topk: int = 1,
                trace: LayerTrace | None = None) -> Tensor:
    """Route x (B, T, d) through the layer's attention experts.

    Soft routing weights every expert by its gate; top-k keeps only the k
    largest gates per position (raw values, no renormalization).
    """
    x = tt.as_tensor(x)
    B, T, d = x.data.shape
    n = layer.n_experts
    flat = x.reshape(B * T, d)
    mode = "soft" if routing == "soft" else "topk"
    k = n if mode == "soft" else topk
    decision = route(flat, layer.w_router, k=k, mode=mode)
    if mode == "soft":
        weights = decision.gates
    else:
        mask = np.zeros_like(decision.gates.data)
        np.put_along_axis(mask, decision.selected, 1.0, axis=-1)
        weights = decision.gates * Tensor(mask)
    if trace is not None:
        trace.attn_logits = decision.logits
        trace.attn_gates = decision.gates
        trace.attn_top1 = decision.top1
        trace.attn_sparse = mode == "topk"
    return moa_combine(x, layer, weights.reshape(B, T, n))


def moa_block_forward(x: Tensor, ckpt: Checkpoint, block: int,
                      trace: LayerTrace | None) -> Tensor:
    """In-model MoA branch: weights come from the checkpoint's block params."""
    layer = moa_layer_view(ckpt, block)
    cfg = ckpt.config
    return moa_forward(x, layer, cfg.attn_routing, cfg.attn_topk, trace)


def moa_layer_view(ckpt: Checkpoint, block: int) -> MoaLayer:
    """Assemble a MoaLayer over the checkpoint's parameters for one block."""
    cfg = ckpt.config
    p = ckpt.params
    pref = f"blocks.{block}"
    n = cfg.n_experts
    shared = cfg.arch == "bam_shared_kv"
    return MoaLayer(
        kv_mode="shared_kv" if shared else "expert_kv",
        wq=[p[f"{pref}.attn_q.{e}"] for e in range(n)],
        wk=[p[f"{pref}.attn_k.shared"]] if shared else [p[f"{pref}.attn_k.{e}"] for e in range(n)],
        wv=[p[f"{pref}.attn_v.shared"]] if shared else [p[f"{pref}.attn_v.{e}"] for e in range(n)],
        wo=[p[f"{pref}.attn_o.{e}"] for e in range(n)],
        w_router=p[f"{pref}.router_attn"],
        n_heads=cfg.n_heads,
    )


def build_shared_kv(expert_sets: list[dict[str, np.ndarray]], w_router,
                    n_heads: int) -> MoaLayer:
    """Shared-KV layer from N dense attention weight sets.

    Per-expert q/o projections are copied verbatim; the shared k/v pair is the
    elementwise mean over the sources (the same uniform-average treatment used
    for every other non-expert parameter).
    """
    if not expert_sets:
        raise SurgeryError("build_shared_kv: no source weight sets")
    shapes = {k: v.shape for k, v in expert_sets[0].items()}
    for i, s in enumerate(expert_sets):
        for key in ("attn_q", "attn_k", "attn_v", "attn_o"):
            if key not in s:
                raise SurgeryError(f"source {i} missing {key}")
            if s[key].shape != shapes[key]:
                raise SurgeryError(f"source {i} {key} shape {s[key].shape} != {shapes[key]}")
    n = len(expert_sets)
    wk = sum(s["attn_k"] for s in expert_sets) / n
    wv = sum(s["attn_v"] for s in expert_sets) / n
    return MoaLayer(
        kv_mode="shared_kv",
        wq=[Tensor(s["attn_q"].copy(), requires_grad=True) for s in expert_sets],
        wk=[Tensor(wk, requires_grad=True)],
        wv=[Tensor(wv, requires_grad=True)],
        wo=[Tensor(s["attn_o"].copy(), requires_grad=True) for s in expert_sets],
        w_router=tt.as_tensor(w_router),
        n_heads=n_heads,
    )
