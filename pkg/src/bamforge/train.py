"""Optimizer, learning-rate schedule, training loop, and perplexity eval."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator

import numpy as np

from . import tensor as tt
from .corpus import DomainCorpus
from .errors import ConfigError, NumericError
from .model import Checkpoint, param_role
from .moe import DEFAULT_ALPHA, DEFAULT_BETA

METRICS_HEADER = "phase,step,domain,metric,value"
DECAYED_ROLES = ("attn_q", "attn_k", "attn_v", "attn_o",
                 "ffn_gate", "ffn_up", "ffn_down", "router_ffn", "router_attn")


@dataclass
class Schedule:
    peak_lr: float
    warmup_steps: int
    total_steps: int
    floor_fraction: float = 0.1

    def __post_init__(self):
        if not 0.0 < self.floor_fraction <= 1.0:
            raise ConfigError(f"floor_fraction {self.floor_fraction} not in (0, 1]")
        if self.warmup_steps > self.total_steps:
            raise ConfigError("warmup_steps exceeds total_steps")


def lr_at(step: int, sched: Schedule) -> float:
    """Linear warmup 0 -> peak, then cosine decay to floor_fraction * peak.

    Steps past total_steps clamp to the floor value.
    """
    if step <= 0:
        return 0.0 if sched.warmup_steps > 0 else sched.peak_lr
    if step < sched.warmup_steps:
        return sched.peak_lr * step / sched.warmup_steps
    if step >= sched.total_steps:
        return sched.peak_lr * sched.floor_fraction
    span = sched.total_steps - sched.warmup_steps
    progress = (step - sched.warmup_steps) / span
    cos_part = 0.5 * (1.0 + math.cos(math.pi * progress))
    f = sched.floor_fraction
    return sched.peak_lr * (f + (1.0 - f) * cos_part)


class MetricsLog:
    """Long-format metric rows with the fixed header {phase,step,domain,metric,value}."""

    def __init__(self):
        self.rows: list[tuple[str, int, str, str, float]] = []

    def add(self, phase: str, step: int, domain: str, metric: str, value: float):
        self.rows.append((phase, int(step), domain, metric, float(value)))

    def to_csv(self) -> str:
        lines = [METRICS_HEADER]
        for phase, step, domain, metric, value in self.rows:
            lines.append(f"{phase},{step},{domain},{metric},{value!r}")
        return "\n".join(lines) + "\n"

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_csv())


class AdamW:
    """Decoupled-weight-decay Adam over a checkpoint's parameters.

    Weight decay touches matmul weights only; norm gains and embeddings are
    exempt. Updates run in canonical (sorted-name) order, and a parameter
    that received no gradient this step (an expert no token selected) is
    skipped entirely, moments included.
    """

    def __init__(self, ckpt: Checkpoint, beta1: float = 0.9, beta2: float = 0.95,
                 eps: float = 1e-8, weight_decay: float = 0.1):
        self.names = [n for n, _ in ckpt.trainable()]
        self.params = dict(ckpt.trainable())
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.m = {n: np.zeros_like(self.params[n].data) for n in self.names}
        self.v = {n: np.zeros_like(self.params[n].data) for n in self.names}
        self.t = 0

    def clip_gradients(self, max_norm: float) -> float:
        sq = 0.0
        for n in self.names:
            g = self.params[n].grad
            if g is not None:
                sq += float((g * g).sum())
        norm = math.sqrt(sq)
        if max_norm > 0 and norm > max_norm:
            scale = max_norm / norm
            for n in self.names:
                if self.params[n].grad is not None:
                    self.params[n].grad *= scale
        return norm

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for n in self.names:
            p = self.params[n]
            g = p.grad
            if g is None:
                continue
            m = self.m[n]
            v = self.v[n]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay and param_role(n) in DECAYED_ROLES:
                update = update + self.weight_decay * p.data
            p.data -= lr * update

    def zero_grad(self) -> None:
        for n in self.names:
            self.params[n].grad = None


@dataclass
class TrainOptions:
    alpha: float = DEFAULT_ALPHA
    beta: float = DEFAULT_BETA
    beta1: float = 0.9
    beta2: float = 0.95
    adam_eps: float = 1e-8
    weight_decay: float = 0.1
    clip: float = 1.0
    log_loads: bool = True


@dataclass
class TrainReport:
    steps: int = 0
    tokens: int = 0
    final_nll: float = float("nan")
    final_total: float = float("nan")
    nll_history: list[float] = field(default_factory=list)


def train(ckpt: Checkpoint, sampler: Iterator, sched: Schedule, budget_tokens: int,
          opts: TrainOptions | None = None, log: MetricsLog | None = None,
          phase: str = "train", domain: str = "", dump_dir: str | Path | None = None,
          on_step: Callable[[int], None] | None = None) -> TrainReport:
    """Train in place until the token budget is consumed (whole batches only).

    A non-finite loss aborts with a NumericError after dumping the offending
    batch next to the run outputs.
    """
    opts = opts or TrainOptions()
    report = TrainReport()
    if budget_tokens <= 0:
        return report
    first = next(sampler)
    batch, domains = first
    tokens_per_step = batch.shape[0] * (batch.shape[1] - 1)
    n_steps = budget_tokens // tokens_per_step
    if n_steps == 0:
        return report
    opt = AdamW(ckpt, beta1=opts.beta1, beta2=opts.beta2,
                eps=opts.adam_eps, weight_decay=opts.weight_decay)
    n_exp = ckpt.config.n_experts
    for step in range(1, n_steps + 1):
        if step > 1:
            batch, domains = next(sampler)
        opt.zero_grad()
        total, breakdown, traces = batch_loss(ckpt, batch, opts)
        if not math.isfinite(breakdown.total):
            if dump_dir is not None:
                dump = Path(dump_dir)
                dump.mkdir(parents=True, exist_ok=True)
                np.save(dump / f"bad_batch_{phase}_{step}.npy", batch)
            raise NumericError(f"non-finite loss at {phase} step {step}: {breakdown}")
        total.backward()
        opt.clip_gradients(opts.clip)
        lr = lr_at(step, sched)
        opt.step(lr)
        report.nll_history.append(breakdown.nll)
        if log is not None:
            log.add(phase, step, domain, "lr", lr)
            log.add(phase, step, domain, "nll", breakdown.nll)
            log.add(phase, step, domain, "lb", breakdown.lb)
            log.add(phase, step, domain, "z", breakdown.z)
            log.add(phase, step, domain, "total", breakdown.total)
            if opts.log_loads and n_exp > 1:
                for e, frac in enumerate(expert_loads(traces, n_exp)):
                    log.add(phase, step, domain, f"load_expert{e}", frac)
        if on_step is not None:
            on_step(step)
        report.steps = step
        report.final_nll = breakdown.nll
        report.final_total = breakdown.total
    report.tokens = report.steps * tokens_per_step
    ckpt.meta.tokens_trained += report.tokens
    return report


def batch_loss(ckpt: Checkpoint, tokens: np.ndarray, opts: TrainOptions):
    """Forward + combined loss for one (B, T+1) batch; returns traces too."""
    from . import model
    from .moe import total_loss

    tokens = np.asarray(tokens)
    if tokens.ndim == 1:
        tokens = tokens[None, :]
    logits, traces = model.forward(ckpt, tokens[:, :-1])
    nll = tt.cross_entropy_nll(logits, tokens[:, 1:])
    total, breakdown = total_loss(nll, traces, alpha=opts.alpha, beta=opts.beta)
    return total, breakdown, traces


def expert_loads(traces, n_experts: int) -> np.ndarray:
    """Mean over layers of the top-1 FFN assignment fractions."""
    loads = np.zeros(n_experts)
    layers = 0
    for tr in traces:
        if tr.ffn_top1 is not None:
            loads += np.bincount(tr.ffn_top1, minlength=n_experts) / tr.ffn_top1.size
            layers += 1
    return loads / layers if layers else loads


def gate_entropy(gates: np.ndarray) -> float:
    """Mean per-token entropy of a gate matrix (router health metric)."""
    p = np.clip(gates, 1e-12, 1.0)
    return float((-p * np.log(p)).sum(axis=-1).mean())


def eval_perplexity(ckpt: Checkpoint, corpus: DomainCorpus, seq_len: int | None = None,
                    max_tokens: int = 65536, batch_size: int = 16,
                    log: MetricsLog | None = None, phase: str = "eval") -> float:
    """exp(mean NLL) over non-overlapping eval-split windows; deterministic."""
    from . import model
    from .moe import total_loss

    if corpus.eval.size == 0:
        raise ConfigError(f"domain {corpus.name!r} has an empty eval split")
    L = seq_len if seq_len is not None else ckpt.config.n_ctx
    stream = corpus.eval
    n_windows = min(stream.size, max_tokens) // (L + 1)
    if n_windows == 0:
        raise ConfigError(f"eval split of {corpus.name!r} shorter than one window")
    windows = stream[: n_windows * (L + 1)].reshape(n_windows, L + 1).astype(np.int64)
    total_nll = 0.0
    total_pos = 0
    load_acc = np.zeros(ckpt.config.n_experts)
    ent_acc = 0.0
    ent_count = 0
    with tt.no_grad():
        for i in range(0, n_windows, batch_size):
            chunk = windows[i:i + batch_size]
            logits, traces = model.forward(ckpt, chunk[:, :-1])
            nll = tt.cross_entropy_nll(logits, chunk[:, 1:])
            total_nll += nll.item() * chunk[:, 1:].size
            total_pos += chunk[:, 1:].size
            for tr in traces:
                if tr.ffn_top1 is not None:
                    load_acc += np.bincount(tr.ffn_top1, minlength=load_acc.size) / tr.ffn_top1.size
                    ent_acc += gate_entropy(tr.ffn_gates.data)
                    ent_count += 1
    ppl = math.exp(total_nll / total_pos)
    if log is not None:
        log.add(phase, 0, corpus.name, "ppl", ppl)
        log.add(phase, 0, corpus.name, "nll", total_nll / total_pos)
        if ent_count:
            for e, frac in enumerate(load_acc / ent_count):
                log.add(phase, 0, corpus.name, f"load_expert{e}", frac)
            log.add(phase, 0, corpus.name, "gate_entropy", ent_acc / ent_count)
    return ppl
