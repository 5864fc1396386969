"""Dense parallel-attention transformer and the mixture variants built on it.

Every block computes attention and FFN from the *same* normalized input:

    y = x + Attn(norm(x)) + FFN(norm(x))

with one scale-only norm per block. Mixture architectures swap the attention
branch for attention experts and the FFN branch for routed FFN experts.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterator

import numpy as np

from . import tensor as tt
from .errors import ConfigError, ShapeError
from .tensor import Tensor

ARCHS = ("dense", "btx", "bam_expert_kv", "bam_shared_kv")
PARAM_ROLES = (
    "embedding_in", "embedding_out", "norm",
    "attn_q", "attn_k", "attn_v", "attn_o",
    "ffn_gate", "ffn_up", "ffn_down",
    "router_ffn", "router_attn",
)


@dataclass
class ModelConfig:
    d_model: int = 64
    d_ff: int = 256
    n_heads: int = 4
    n_layers: int = 2
    vocab: int = 256
    n_ctx: int = 256
    arch: str = "dense"
    n_experts: int = 1
    ffn_topk: int = 1
    attn_routing: str = "soft"  # "soft" or "topk"
    attn_topk: int = 1
    tie_embeddings: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.arch not in ARCHS:
            raise ConfigError(f"unknown arch {self.arch!r}")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.d_ff % 2:
            raise ConfigError(f"d_ff {self.d_ff} must be even")
        if (self.d_model // self.n_heads) % 2:
            raise ConfigError("head dim must be even for rotary embedding")
        if self.arch == "dense" and self.n_experts != 1:
            raise ConfigError("dense arch requires n_experts == 1")
        if self.arch != "dense" and self.n_experts < 2:
            raise ConfigError(f"{self.arch} requires n_experts >= 2")
        if not 1 <= self.ffn_topk <= self.n_experts:
            raise ConfigError(f"ffn_topk {self.ffn_topk} not in [1, {self.n_experts}]")
        if self.attn_routing not in ("soft", "topk"):
            raise ConfigError(f"attn_routing must be soft or topk, got {self.attn_routing!r}")
        if self.attn_routing == "topk" and not 1 <= self.attn_topk <= self.n_experts:
            raise ConfigError(f"attn_topk {self.attn_topk} not in [1, {self.n_experts}]")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def is_bam(self) -> bool:
        return self.arch in ("bam_expert_kv", "bam_shared_kv")

    @property
    def n_attn_experts(self) -> int:
        return self.n_experts if self.is_bam else 1

    def to_dict(self) -> dict:
        return {
            "d_model": self.d_model, "d_ff": self.d_ff, "n_heads": self.n_heads,
            "n_layers": self.n_layers, "vocab": self.vocab, "n_ctx": self.n_ctx,
            "arch": self.arch, "n_experts": self.n_experts, "ffn_topk": self.ffn_topk,
            "attn_routing": self.attn_routing, "attn_topk": self.attn_topk,
            "tie_embeddings": self.tie_embeddings,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class CheckpointMeta:
    phase: str = "seed"  # seed | specialized | mixture
    domain_tag: str = ""
    tokens_trained: int = 0
    rng_seed: int = 0

    def to_dict(self) -> dict:
        return {
            "phase": self.phase, "domain_tag": self.domain_tag,
            "tokens_trained": self.tokens_trained, "rng_seed": self.rng_seed,
        }


def param_shapes(config: ModelConfig) -> Iterator[tuple[str, tuple[int, ...]]]:
    """Canonical (name, shape) sequence implied by a config.

    Names are hierarchical paths whose components include exactly one role
    string; expert-owned weights carry a trailing expert index.
    """
    d, ff = config.d_model, config.d_ff
    yield "embedding_in", (config.vocab, d)
    if not config.tie_embeddings:
        yield "embedding_out", (d, config.vocab)
    for b in range(config.n_layers):
        p = f"blocks.{b}"
        yield f"{p}.norm", (d,)
        if config.arch == "bam_shared_kv":
            for e in range(config.n_experts):
                yield f"{p}.attn_q.{e}", (d, d)
            yield f"{p}.attn_k.shared", (d, d)
            yield f"{p}.attn_v.shared", (d, d)
            for e in range(config.n_experts):
                yield f"{p}.attn_o.{e}", (d, d)
        else:
            for e in range(config.n_attn_experts):
                yield f"{p}.attn_q.{e}", (d, d)
                yield f"{p}.attn_k.{e}", (d, d)
                yield f"{p}.attn_v.{e}", (d, d)
                yield f"{p}.attn_o.{e}", (d, d)
        for e in range(config.n_experts):
            yield f"{p}.ffn_gate.{e}", (d, ff // 2)
            yield f"{p}.ffn_up.{e}", (d, ff // 2)
            yield f"{p}.ffn_down.{e}", (ff // 2, d)
        if config.n_experts > 1:
            yield f"{p}.router_ffn", (d, config.n_experts)
        if config.is_bam:
            yield f"{p}.router_attn", (d, config.n_experts)
    yield "final.norm", (d,)


def param_role(name: str) -> str:
    for part in name.split("."):
        if part in PARAM_ROLES:
            return part
    raise ConfigError(f"parameter name {name!r} encodes no known role")


def param_count(config: ModelConfig) -> int:
    return sum(int(np.prod(s)) for _, s in param_shapes(config))


@dataclass
class Checkpoint:
    """A model state moved between pipeline phases: config + named params + meta."""

    config: ModelConfig
    params: dict[str, Tensor]
    meta: CheckpointMeta = field(default_factory=CheckpointMeta)

    def validate(self) -> None:
        expected = dict(param_shapes(self.config))
        if set(expected) != set(self.params):
            missing = sorted(set(expected) - set(self.params))
            extra = sorted(set(self.params) - set(expected))
            raise ShapeError(f"parameter set mismatch: missing={missing} extra={extra}")
        for name, shape in expected.items():
            if tuple(self.params[name].data.shape) != tuple(shape):
                raise ShapeError(f"{name}: shape {self.params[name].data.shape} != {shape}")

    def clone(self) -> "Checkpoint":
        params = {n: Tensor(p.data.copy(), requires_grad=True) for n, p in self.params.items()}
        return Checkpoint(replace(self.config), params, replace(self.meta))

    def trainable(self) -> list[tuple[str, Tensor]]:
        return sorted(self.params.items())


def init_model(config: ModelConfig, seed: int = 0) -> Checkpoint:
    """Fresh model: normal(0, 0.02), residual output projections scaled by 1/sqrt(2 L)."""
    rng = np.random.default_rng(seed)
    scale_residual = 1.0 / np.sqrt(2.0 * config.n_layers)
    params: dict[str, Tensor] = {}
    for name, shape in param_shapes(config):
        role = param_role(name)
        if role == "norm":
            data = np.ones(shape)
        else:
            data = rng.normal(0.0, 0.02, size=shape)
            if role in ("attn_o", "ffn_down"):
                data *= scale_residual
        params[name] = Tensor(data, requires_grad=True)
    ckpt = Checkpoint(config, params, CheckpointMeta(rng_seed=seed))
    ckpt.validate()
    return ckpt


# -- forward passes -------------------------------------------------------------


def mha_forward(x: Tensor, wq: Tensor, wk: Tensor, wv: Tensor, wo: Tensor,
                n_heads: int) -> Tensor:
    """Causal multi-head self-attention over x: (B, T, d) -> (B, T, d).

    Rotary encoding is applied to queries and keys before scoring; per-head
    scores are scaled by 1/sqrt(head_dim); heads are concatenated and
    projected by wo.
    """
    B, T, d = x.data.shape
    if wq.data.shape != (d, d):
        raise ShapeError(f"mha: wq shape {wq.data.shape} != ({d}, {d})")
    hd = d // n_heads

    def split(t: Tensor) -> Tensor:
        return t.reshape(B, T, n_heads, hd).swapaxes(1, 2)  # (B, H, T, hd)

    q = split(x @ wq)
    k = split(x @ wk)
    v = split(x @ wv)
    q = tt.rope_rotate(q)
    k = tt.rope_rotate(k)
    out = tt.causal_attention(q, k, v)
    out = out.swapaxes(1, 2).reshape(B, T, d)
    return out @ wo


def ffn_forward(x: Tensor, w_gate: Tensor, w_up: Tensor, w_down: Tensor) -> Tensor:
    """SwiGLU feed-forward: w_down applied to swiglu(x @ w_gate, x @ w_up)."""
    return tt.swiglu(x @ w_gate, x @ w_up) @ w_down


@dataclass
class LayerTrace:
    """Per-block routing byproducts needed for auxiliary losses and metrics."""

    ffn_logits: Tensor | None = None
    ffn_gates: Tensor | None = None     # (M, N) flattened over batch*positions
    ffn_top1: np.ndarray | None = None  # (M,) primary assignment
    attn_logits: Tensor | None = None
    attn_gates: Tensor | None = None
    attn_top1: np.ndarray | None = None
    attn_sparse: bool = False           # top-k routed MoA (discrete assignment)


def parallel_block_forward(ckpt: Checkpoint, block: int, x: Tensor,
                           trace: LayerTrace) -> Tensor:
    """One parallel block: y = x + Attn(norm(x)) + FFN(norm(x)).

    The attention and FFN branches (expert or dense, per the config) read the
    identical normalized input; one scale-norm serves the whole block.
    """
    from .moa import moa_block_forward  # local import: models below, layers above
    from .moe import moe_ffn_layer

    cfg = ckpt.config
    p = ckpt.params
    pref = f"blocks.{block}"
    xn = tt.rms_norm(x, p[f"{pref}.norm"])
    if cfg.is_bam:
        attn = moa_block_forward(xn, ckpt, block, trace)
    else:
        attn = mha_forward(xn, p[f"{pref}.attn_q.0"], p[f"{pref}.attn_k.0"],
                           p[f"{pref}.attn_v.0"], p[f"{pref}.attn_o.0"], cfg.n_heads)
    if cfg.n_experts > 1:
        ffn = moe_ffn_layer(xn, ckpt, block, trace)
    else:
        ffn = ffn_forward(xn, p[f"{pref}.ffn_gate.0"], p[f"{pref}.ffn_up.0"],
                          p[f"{pref}.ffn_down.0"])
    return x + attn + ffn


def forward(ckpt: Checkpoint, tokens: np.ndarray) -> tuple[Tensor, list[LayerTrace]]:
    """Logits over the vocabulary for a (B, T) token batch, plus routing traces."""
    cfg = ckpt.config
    p = ckpt.params
    tokens = np.asarray(tokens)
    if tokens.ndim == 1:
        tokens = tokens[None, :]
    if tokens.shape[1] > cfg.n_ctx:
        raise ConfigError(f"sequence length {tokens.shape[1]} exceeds n_ctx {cfg.n_ctx}")
    if tokens.max() >= cfg.vocab:
        raise IndexError(f"token id {tokens.max()} >= vocab {cfg.vocab}")

    x = tt.take_rows(p["embedding_in"], tokens)
    traces: list[LayerTrace] = []
    for b in range(cfg.n_layers):
        trace = LayerTrace()
        x = parallel_block_forward(ckpt, b, x, trace)
        traces.append(trace)
    x = tt.rms_norm(x, p["final.norm"])
    if cfg.tie_embeddings:
        logits = x @ p["embedding_in"].T
    else:
        logits = x @ p["embedding_out"]
    return logits, traces


def dense_forward_loss(ckpt: Checkpoint, tokens: np.ndarray):
    """Mean next-token NLL with the full auxiliary-loss breakdown.

    tokens: (B, T+1) or (T+1,); inputs/targets are shifted by one position.
    """
    from .moe import total_loss

    tokens = np.asarray(tokens)
    if tokens.ndim == 1:
        tokens = tokens[None, :]
    logits, traces = forward(ckpt, tokens[:, :-1])
    nll = tt.cross_entropy_nll(logits, tokens[:, 1:])
    return total_loss(nll, traces)


def greedy_decode(ckpt: Checkpoint, prompt: np.ndarray, n_new: int) -> np.ndarray:
    """Greedy continuation, recomputing the full prefix each step (smoke-test aid)."""
    seq = list(np.asarray(prompt).reshape(-1))
    with tt.no_grad():
        for _ in range(n_new):
            window = np.array(seq[-ckpt.config.n_ctx:])
            logits, _ = forward(ckpt, window[None, :])
            seq.append(int(np.argmax(logits.data[0, -1])))
    return np.array(seq)
