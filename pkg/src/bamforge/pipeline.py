"""Three-phase experiment orchestration: pretrain a dense seed, branch and
specialize per-domain experts, upcycle into mixture models, train the
mixtures under data- or compute-matched budgets, and evaluate everything on
every domain.

All randomness flows from one master seed through named substreams, so any
phase (and the whole run) is reproducible bit-for-bit.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .analysis import compute_match, flops_per_token
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ExperimentFile
from .corpus import DomainCorpus, MixtureSpec, mixture_sampler, substream, synth_corpus
from .model import Checkpoint, init_model
from .train import MetricsLog, Schedule, TrainOptions, eval_perplexity, train
from .upcycle import UpcycleRecipe, branch, build_mixture

BACKWARD_FLOPS_MULTIPLIER = 3   # forward + backward ~ 3x inference cost
CPT_GENERAL_FRACTION = 0.1      # specialization mixes 10% general text back in


@dataclass
class PipelineReport:
    grid: dict[str, dict[str, float]] = field(default_factory=dict)
    domains: list[str] = field(default_factory=list)
    token_budgets: dict[str, int] = field(default_factory=dict)
    training_flops: dict[str, float] = field(default_factory=dict)
    wall_seconds: float = 0.0
    out_dir: Path | None = None

    def average(self, model: str) -> float:
        vals = list(self.grid[model].values())
        return float(np.mean(vals))


def seed_int(master: int, *names) -> int:
    return int(substream(master, *names).integers(2**31))


def train_options(exp: ExperimentFile) -> TrainOptions:
    return TrainOptions(alpha=exp.alpha, beta=exp.beta, beta1=exp.beta1,
                        beta2=exp.beta2, adam_eps=exp.adam_eps,
                        weight_decay=exp.weight_decay, clip=exp.clip)


def make_schedule(exp: ExperimentFile, budget_tokens: int, lr_scale: float = 1.0) -> Schedule:
    total = max(1, budget_tokens // exp.batch_tokens())
    warmup = min(exp.warmup_steps, total)
    return Schedule(peak_lr=exp.peak_lr * lr_scale, warmup_steps=warmup,
                    total_steps=total, floor_fraction=exp.floor_fraction)


def training_flops(cfg, tokens: int) -> float:
    """Measured training cost: forward+backward ~= 3x the inference FLOPs."""
    return BACKWARD_FLOPS_MULTIPLIER * flops_per_token(cfg).model_total * tokens


def build_corpora(exp: ExperimentFile, master_seed: int) -> dict[str, DomainCorpus]:
    out = {}
    for name in exp.domain_names:
        out[name] = synth_corpus(name, exp.corpus_tokens, substream(master_seed, "corpus", name))
    return out


def pretrain_phase(exp: ExperimentFile, corpora, master_seed: int,
                   log: MetricsLog, out_dir: Path | None = None) -> Checkpoint:
    ckpt = init_model(exp.model, seed=seed_int(master_seed, "init"))
    ckpt.meta.domain_tag = "general"
    sampler = mixture_sampler(corpora, MixtureSpec({"general": 1.0}),
                              substream(master_seed, "sampler", "pretrain"),
                              exp.model.n_ctx, exp.batch_sequences)
    sched = make_schedule(exp, exp.pretrain_tokens)
    train(ckpt, sampler, sched, exp.pretrain_tokens, train_options(exp), log,
          phase="pretrain", domain="general", dump_dir=out_dir)
    if out_dir is not None:
        save_checkpoint(ckpt, out_dir / "checkpoints" / "seed")
    return ckpt


def cpt_phase(exp: ExperimentFile, seed_ckpt: Checkpoint, corpora, master_seed: int,
              log: MetricsLog, out_dir: Path | None = None,
              domains: list[str] | None = None) -> dict[str, Checkpoint]:
    """Continued pretraining: 90% own domain, 10% general, half the peak lr.

    Domains are independent; training them in any order (or concurrently in
    separate invocations) yields identical experts.
    """
    domains = domains if domains is not None else exp.expert_domains
    tags = list(domains)
    copies = branch(seed_ckpt, len(tags), domain_tags=tags,
                    rng_seeds=[seed_int(master_seed, "cpt", t) for t in tags])
    experts: dict[str, Checkpoint] = {}
    for tag, ckpt in zip(tags, copies):
        spec = MixtureSpec({tag: 1.0 - CPT_GENERAL_FRACTION, "general": CPT_GENERAL_FRACTION})
        sampler = mixture_sampler(corpora, spec,
                                  substream(master_seed, "sampler", "cpt", tag),
                                  exp.model.n_ctx, exp.batch_sequences)
        sched = make_schedule(exp, exp.cpt_tokens, lr_scale=exp.cpt_lr_scale)
        train(ckpt, sampler, sched, exp.cpt_tokens, train_options(exp), log,
              phase="cpt", domain=tag, dump_dir=out_dir)
        ckpt.meta.phase = "specialized"
        if out_dir is not None:
            save_checkpoint(ckpt, out_dir / "checkpoints" / f"expert_{tag}")
        experts[tag] = ckpt
    return experts


def mixture_budget(exp: ExperimentFile, arch_cfg, reference_cfg) -> int:
    """Token budget for one mixture arch: DM copies the reference budget,
    CM scales it so total training FLOPs match the reference arch."""
    if exp.match == "DM":
        return exp.mixture_tokens
    ref_fpt = flops_per_token(reference_cfg).model_total
    cand_fpt = flops_per_token(arch_cfg).model_total
    return compute_match(ref_fpt, exp.mixture_tokens, cand_fpt, exp.batch_tokens())


def mixture_train(exp: ExperimentFile, mixture: Checkpoint, corpora,
                  master_seed: int, log: MetricsLog, out_dir: Path | None = None,
                  budget_tokens: int | None = None,
                  label: str | None = None) -> tuple[Checkpoint, int]:
    """Train an already-built mixture on the balanced all-domain mix.

    The sampler substream depends only on the master seed, so every
    architecture trained under one seed sees the identical token stream
    (the data-matched comparison is exact by construction).
    """
    label = label or mixture.config.arch
    mixture.meta.domain_tag = label
    weights = {d: 1.0 / len(exp.domain_names) for d in exp.domain_names}
    sampler = mixture_sampler(corpora, MixtureSpec(weights),
                              substream(master_seed, "sampler", "mixture"),
                              exp.model.n_ctx, exp.batch_sequences)
    if budget_tokens is None:
        reference = (mixture.config if mixture.config.arch == "btx"
                     else _btx_reference_cfg(exp, mixture.config))
        budget_tokens = mixture_budget(exp, mixture.config, reference)
    sched = make_schedule(exp, budget_tokens, lr_scale=exp.mix_lr_scale)
    rep = train(mixture, sampler, sched, budget_tokens, train_options(exp), log,
                phase="mixture", domain=label, dump_dir=out_dir)
    if out_dir is not None:
        save_checkpoint(mixture, out_dir / "checkpoints" / label)
    return mixture, rep.tokens


def mixture_phase(exp: ExperimentFile, seed_ckpt: Checkpoint,
                  experts: dict[str, Checkpoint], arch: str, corpora,
                  master_seed: int, log: MetricsLog, out_dir: Path | None = None,
                  attn_routing: str | None = None, attn_topk: int | None = None,
                  budget_tokens: int | None = None,
                  label: str | None = None) -> tuple[Checkpoint, int]:
    """Upcycle into `arch` and train on the balanced four-way domain mix."""
    label = label or arch
    recipe = UpcycleRecipe(
        seed=seed_ckpt,
        experts=[experts[d] for d in exp.expert_domains],
        target_arch=arch,
        extra_seed_ffn_copies=exp.extra_seed_ffn_copies if arch == "btx" else 0,
        ffn_topk=exp.ffn_topk,
        attn_routing=attn_routing if attn_routing is not None else exp.attn_routing,
        attn_topk=attn_topk if attn_topk is not None else exp.attn_topk,
        router_init_seed=seed_int(master_seed, "router", label),
    )
    mixture = build_mixture(recipe)
    return mixture_train(exp, mixture, corpora, master_seed, log, out_dir,
                         budget_tokens, label)


def _btx_reference_cfg(exp: ExperimentFile, mixture_cfg):
    """The BTX twin of a mixture config (CM budgets are anchored to BTX)."""
    d = mixture_cfg.to_dict()
    d.update(arch="btx", attn_routing="soft", attn_topk=1)
    from .model import ModelConfig

    return ModelConfig(**d)


def eval_grid(models: dict[str, Checkpoint], corpora, exp: ExperimentFile,
              log: MetricsLog | None = None) -> dict[str, dict[str, float]]:
    grid: dict[str, dict[str, float]] = {}
    for mname, ckpt in models.items():
        grid[mname] = {}
        for dname in exp.domain_names:
            ppl = eval_perplexity(ckpt, corpora[dname], max_tokens=exp.eval_tokens,
                                  log=log, phase=f"eval.{mname}")
            grid[mname][dname] = ppl
    return grid


def run_pipeline(exp: ExperimentFile, out_dir: str | Path, master_seed: int = 0) -> PipelineReport:
    """Full run: pretrain -> branch+CPT -> upcycle -> mixture train -> eval grid."""
    from . import reports

    exp.validate()
    t0 = time.perf_counter()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "experiment.resolved.cfg").write_text(exp.render())
    log = MetricsLog()
    report = PipelineReport(domains=list(exp.domain_names), out_dir=out)

    corpora = build_corpora(exp, master_seed)
    seed_ckpt = pretrain_phase(exp, corpora, master_seed, log, out)
    log.write(out / "metrics.csv")

    experts = cpt_phase(exp, seed_ckpt, corpora, master_seed, log, out)
    log.write(out / "metrics.csv")

    models: dict[str, Checkpoint] = {"seed": seed_ckpt}
    for tag, ck in experts.items():
        models[f"expert_{tag}"] = ck
    for arch in exp.target_archs:
        mixture, consumed = mixture_phase(exp, seed_ckpt, experts, arch, corpora,
                                          master_seed, log, out)
        models[arch] = mixture
        report.token_budgets[arch] = consumed
        report.training_flops[arch] = training_flops(mixture.config, consumed)
        log.write(out / "metrics.csv")

    report.grid = eval_grid(models, corpora, exp, log)
    log.write(out / "metrics.csv")
    reports.write_pipeline_reports(report, log, out)
    report.wall_seconds = time.perf_counter() - t0
    return report


@dataclass
class AblationReport:
    rows: dict[str, dict[str, float]] = field(default_factory=dict)  # label -> domain ppl
    domains: list[str] = field(default_factory=list)
    token_budgets: dict[str, int] = field(default_factory=dict)
    training_flops: dict[str, float] = field(default_factory=dict)
    out_dir: Path | None = None

    def average(self, label: str) -> float:
        return float(np.mean(list(self.rows[label].values())))


ABLATION_VARIANTS = (("bam_soft", "soft", 1), ("bam_top2", "topk", 2), ("bam_top1", "topk", 1))


def run_ablation(exp: ExperimentFile, out_dir: str | Path, master_seed: int = 0) -> AblationReport:
    """Attention-routing ablation under compute matching.

    BAM with soft / top-2 / top-1 MoA routing, each trained with the same
    total FLOPs as the BTX baseline row (within one batch of the budget).
    """
    from . import reports

    exp.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "experiment.resolved.cfg").write_text(exp.render())
    log = MetricsLog()
    corpora = build_corpora(exp, master_seed)

    seed_dir = out / "checkpoints" / "seed"
    if (seed_dir / "manifest.txt").is_file():
        seed_ckpt = load_checkpoint(seed_dir)
        experts = {d: load_checkpoint(out / "checkpoints" / f"expert_{d}")
                   for d in exp.expert_domains}
    else:
        seed_ckpt = pretrain_phase(exp, corpora, master_seed, log, out)
        experts = cpt_phase(exp, seed_ckpt, corpora, master_seed, log, out)
        log.write(out / "metrics.csv")

    report = AblationReport(domains=list(exp.domain_names), out_dir=out)
    models: dict[str, Checkpoint] = {}

    btx, btx_tokens = mixture_phase(exp, seed_ckpt, experts, "btx", corpora,
                                    master_seed, log, out, label="btx")
    models["btx"] = btx
    report.token_budgets["btx"] = btx_tokens
    report.training_flops["btx"] = training_flops(btx.config, btx_tokens)
    ref_fpt = flops_per_token(btx.config).model_total

    from .model import ModelConfig

    for label, routing, k in ABLATION_VARIANTS:
        recipe_arch = "bam_expert_kv"
        # budget: match BTX training FLOPs, floored to a whole batch
        cand_cfg = ModelConfig(**{**btx.config.to_dict(), "arch": recipe_arch,
                                  "attn_routing": routing, "attn_topk": k})
        cand_tokens = compute_match(ref_fpt, btx_tokens,
                                    flops_per_token(cand_cfg).model_total,
                                    exp.batch_tokens())
        mixture, consumed = mixture_phase(exp, seed_ckpt, experts, recipe_arch, corpora,
                                          master_seed, log, out, attn_routing=routing,
                                          attn_topk=k, budget_tokens=cand_tokens,
                                          label=label)
        models[label] = mixture
        report.token_budgets[label] = consumed
        report.training_flops[label] = training_flops(mixture.config, consumed)
        log.write(out / "metrics.csv")

    report.rows = eval_grid(models, corpora, exp, log)
    log.write(out / "metrics.csv")
    reports.write_ablation_reports(report, out)
    return report
