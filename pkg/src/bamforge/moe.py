"""FFN-expert layer: linear router, top-k selection, gated combination, and
the auxiliary losses that keep the router healthy.

Selected experts are weighted by their *raw* softmax gates; there is no
renormalization after selection, so with identical experts the layer output
equals the dense FFN only under soft routing (all gates participate).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tt
from .errors import ConfigError
from .model import Checkpoint, LayerTrace, ffn_forward
from .tensor import Tensor

DEFAULT_ALPHA = 0.01  # load-balance weight
DEFAULT_BETA = 0.001  # z-loss weight


@dataclass
class RouterDecision:
    """Gate values and the selected expert set for each routed token."""

    logits: Tensor       # (M, N) raw router outputs
    gates: Tensor        # (M, N) post-softmax
    selected: np.ndarray  # (M, k) expert indices, largest gate first, ties -> lowest index

    @property
    def top1(self) -> np.ndarray:
        return self.selected[:, 0]


def route(x, w_router, k: int, mode: str = "topk") -> RouterDecision:
    """Route token representations x (.., d) through a d x N linear router.

    mode "soft" selects every expert (in index order); "topk" selects the k
    largest gates with ties broken toward the lowest expert index.
    """
    x = tt.as_tensor(x)
    w_router = tt.as_tensor(w_router)
    n_experts = w_router.data.shape[-1]
    if mode not in ("soft", "topk"):
        raise ConfigError(f"unknown routing mode {mode!r}")
    if not 1 <= k <= n_experts:
        raise ConfigError(f"k={k} outside [1, {n_experts}]")
    flat = x.reshape(-1, x.data.shape[-1]) if x.data.ndim != 2 else x
    logits = flat @ w_router
    gates = tt.softmax(logits, axis=-1)
    if mode == "soft":
        m = gates.data.shape[0]
        selected = np.tile(np.arange(n_experts), (m, 1))
    else:
        # stable sort on negated gates: equal gates keep ascending index order
        selected = np.argsort(-gates.data, axis=-1, kind="stable")[:, :k]
    return RouterDecision(logits=logits, gates=gates, selected=selected)


def moe_ffn_forward(x, experts, decision: RouterDecision) -> Tensor:
    """Weighted sum of the selected experts' outputs for token batch x (M, d).

    experts: list of (w_gate, w_up, w_down) triples, one per expert.
    """
    x = tt.as_tensor(x)
    single = x.data.ndim == 1
    flat = x.reshape(1, -1) if single else x
    m, _ = flat.data.shape
    n_experts = len(experts)
    out = Tensor(np.zeros((m, flat.data.shape[-1])))
    for e in range(n_experts):
        rows = np.nonzero((decision.selected == e).any(axis=-1))[0]
        if rows.size == 0:
            continue
        xe = flat if rows.size == m else tt.take_rows(flat, rows)  # nonzero yields sorted rows
        ye = ffn_forward(xe, *experts[e])
        we = tt.gather_pairs(decision.gates, rows, np.full(rows.shape, e))
        out = tt.index_add(out, rows, ye * we.reshape(-1, 1))
    return out.reshape(-1) if single else out


def moe_ffn_layer(xn: Tensor, ckpt: Checkpoint, block: int, trace: LayerTrace) -> Tensor:
    """In-model MoE layer over the normalized residual stream (B, T, d)."""
    cfg = ckpt.config
    p = ckpt.params
    pref = f"blocks.{block}"
    B, T, d = xn.data.shape
    flat = xn.reshape(B * T, d)
    decision = route(flat, p[f"{pref}.router_ffn"], k=cfg.ffn_topk, mode="topk")
    trace.ffn_logits = decision.logits
    trace.ffn_gates = decision.gates
    trace.ffn_top1 = decision.top1
    experts = [
        (p[f"{pref}.ffn_gate.{e}"], p[f"{pref}.ffn_up.{e}"], p[f"{pref}.ffn_down.{e}"])
        for e in range(cfg.n_experts)
    ]
    out = moe_ffn_forward(flat, experts, decision)
    return out.reshape(B, T, d)


def load_balance_loss(assignments: np.ndarray, gates: Tensor) -> Tensor:
    """N * sum_i f_i P_i over one layer's batch.

    f_i is the fraction of tokens whose primary (top-1) assignment is expert i;
    P_i is expert i's mean gate mass. Minimized (== 1) at a uniform split.
    """
    assignments = np.asarray(assignments)
    if assignments.size == 0:
        raise ConfigError("load_balance_loss: empty batch")
    n_experts = gates.data.shape[-1]
    f = np.bincount(assignments, minlength=n_experts) / assignments.size
    p_mean = gates.mean(axis=0)
    return (p_mean * Tensor(f)).sum() * float(n_experts)


def router_z_loss(batch_logits) -> Tensor:
    """Mean over tokens of squared log-sum-exp of the router logits."""
    logits = tt.as_tensor(batch_logits)
    if logits.data.ndim == 1:
        logits = logits.reshape(1, -1)
    lse = tt.logsumexp(logits, axis=-1)
    return (lse * lse).mean()


@dataclass
class LossBreakdown:
    nll: float
    lb: float
    z: float
    alpha: float
    beta: float
    total: float


def total_loss(nll: Tensor, traces: list[LayerTrace],
               alpha: float = DEFAULT_ALPHA, beta: float = DEFAULT_BETA):
    """Combined training loss: nll + sum over routed layers of (alpha*LB + beta*Z).

    FFN routers contribute both terms. Attention routers contribute the z-loss
    always, and the load-balance term only under sparse (top-k) routing, where
    a discrete assignment exists.

    Returns (total tensor for backward, float breakdown for logging).
    """
    if alpha < 0 or beta < 0:
        raise ConfigError(f"loss weights must be nonnegative, got alpha={alpha} beta={beta}")
    lb_terms: list[Tensor] = []
    z_terms: list[Tensor] = []
    for tr in traces:
        if tr.ffn_gates is not None:
            lb_terms.append(load_balance_loss(tr.ffn_top1, tr.ffn_gates))
            z_terms.append(router_z_loss(tr.ffn_logits))
        if tr.attn_logits is not None:
            z_terms.append(router_z_loss(tr.attn_logits))
            if tr.attn_sparse:
                lb_terms.append(load_balance_loss(tr.attn_top1, tr.attn_gates))
    total = nll
    lb_val = 0.0
    z_val = 0.0
    if lb_terms:
        lb = lb_terms[0]
        for t in lb_terms[1:]:
            lb = lb + t
        lb_val = lb.item()
        total = total + lb * alpha
    if z_terms:
        z = z_terms[0]
        for t in z_terms[1:]:
            z = z + t
        z_val = z.item()
        total = total + z * beta
    breakdown = LossBreakdown(nll=nll.item(), lb=lb_val, z=z_val,
                              alpha=alpha, beta=beta, total=total.item())
    return total, breakdown
