"""Command-line surface.

Subcommands: pretrain, branch-cpt, mix, eval, analyze, ablate, run.
Exit codes: 0 success, 2 config/usage error, 3 numeric failure, 4 I/O error.
Every command is deterministic given --seed; reruns into an empty output
directory reproduce artifacts byte for byte. BAMFORGE_THREADS caps workers.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import analysis, fused, reports
from .config import ExperimentFile, load_experiment
from .errors import ConfigError, NumericError
from .model import ModelConfig


def _add_common(p: argparse.ArgumentParser, out_required: bool = True) -> None:
    p.add_argument("--config", type=Path, help="experiment file")
    p.add_argument("--out", type=Path, required=out_required, help="output directory")
    p.add_argument("--seed", type=int, default=0, help="master experiment seed")
    p.add_argument("--precision", choices=("f64", "f32"), default="f64")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="bamforge",
                                 description="dense-to-mixture upcycling lab")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="train the dense seed model")
    _add_common(p)

    p = sub.add_parser("branch-cpt", help="branch the seed and specialize per domain")
    _add_common(p)
    p.add_argument("--seed-ckpt", type=Path, help="seed checkpoint (default <out>/checkpoints/seed)")
    p.add_argument("--domains", help="comma list; default: all expert domains")

    p = sub.add_parser("mix", help="upcycle sources into a mixture model")
    _add_common(p)
    p.add_argument("--recipe", type=Path, required=True, help="recipe file")
    p.add_argument("--arch", help="override the recipe's target arch")
    p.add_argument("--match", choices=("DM", "CM"), help="budget matching mode override")

    p = sub.add_parser("eval", help="per-domain perplexity grid for one checkpoint")
    _add_common(p, out_required=False)
    p.add_argument("--ckpt", type=Path, required=True)

    p = sub.add_parser("analyze", help="parameter and FLOPs tables")
    p.add_argument("--config", type=Path, help="experiment file (default: the reference small-scale dims)")
    p.add_argument("--out", type=Path, help="also write CSV tables + figure here")
    p.add_argument("--arch", help="restrict columns to one arch label")
    p.add_argument("--match", metavar="REF=TOKENS",
                   help="print compute-matched token budgets, e.g. btx=100e6")
    p.add_argument("--n-ctx", type=int, default=256, help="context for FLOPs estimates")
    p.add_argument("--precision", choices=("f64", "f32"), default="f64")

    p = sub.add_parser("ablate", help="attention-routing ablation under compute matching")
    _add_common(p)

    p = sub.add_parser("run", help="full pipeline: pretrain, branch-cpt, mix, eval")
    _add_common(p)
    p.add_argument("--match", choices=("DM", "CM"), help="override the config's matching mode")

    return ap


def _load_exp(args) -> ExperimentFile:
    if getattr(args, "config", None) is None:
        return ExperimentFile()
    return load_experiment(args.config)


def _set_precision(args) -> None:
    from . import tensor

    tensor.set_default_dtype(np.float64 if args.precision == "f64" else np.float32)


def cmd_pretrain(args) -> int:
    from .pipeline import build_corpora, pretrain_phase
    from .train import MetricsLog

    exp = _load_exp(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "experiment.resolved.cfg").write_text(exp.render())
    log = MetricsLog()
    corpora = build_corpora(exp, args.seed)
    ckpt = pretrain_phase(exp, corpora, args.seed, log, out)
    log.write(out / "metrics.csv")
    print(f"seed checkpoint: {out / 'checkpoints' / 'seed'} "
          f"({ckpt.meta.tokens_trained} tokens)")
    return 0


def cmd_branch_cpt(args) -> int:
    from .checkpoint import load_checkpoint
    from .pipeline import build_corpora, cpt_phase
    from .train import MetricsLog

    exp = _load_exp(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seed_path = args.seed_ckpt or out / "checkpoints" / "seed"
    seed_ckpt = load_checkpoint(seed_path)
    domains = None
    if args.domains:
        domains = [d.strip() for d in args.domains.split(",") if d.strip()]
        unknown = set(domains) - set(exp.expert_domains)
        if unknown:
            raise ConfigError(f"unknown expert domains: {sorted(unknown)}")
    log = MetricsLog()
    corpora = build_corpora(exp, args.seed)
    experts = cpt_phase(exp, seed_ckpt, corpora, args.seed, log, out, domains=domains)
    log.write(out / f"metrics_cpt_{'_'.join(sorted(experts))}.csv")
    for tag in experts:
        print(f"specialized checkpoint: {out / 'checkpoints' / ('expert_' + tag)}")
    return 0


def cmd_mix(args) -> int:
    from .checkpoint import save_checkpoint
    from .pipeline import build_corpora, mixture_train
    from .train import MetricsLog
    from .upcycle import RecipeFile, build_mixture

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rf = RecipeFile.parse(args.recipe)
    if args.arch:
        rf.target_arch = args.arch
    recipe = rf.load(base_dir=Path(args.recipe).parent)
    mixture = build_mixture(recipe)
    if args.config is None:
        save_checkpoint(mixture, out / "checkpoints" / rf.target_arch)
        print(f"mixture checkpoint (untrained): {out / 'checkpoints' / rf.target_arch}")
        return 0
    exp = load_experiment(args.config)
    if args.match:
        exp.match = args.match
    exp.ffn_topk = rf.ffn_topk
    exp.attn_routing = rf.attn_routing
    exp.attn_topk = rf.attn_topk
    exp.extra_seed_ffn_copies = rf.extra_seed_ffn_copies
    (out / "experiment.resolved.cfg").write_text(exp.render())
    log = MetricsLog()
    corpora = build_corpora(exp, args.seed)
    mixture, consumed = mixture_train(exp, mixture, corpora, args.seed, log, out)
    log.write(out / "metrics.csv")
    print(f"mixture checkpoint: {out / 'checkpoints' / rf.target_arch} "
          f"({consumed} mixture tokens, {exp.match})")
    return 0


def cmd_eval(args) -> int:
    from .checkpoint import load_checkpoint
    from .pipeline import build_corpora
    from .train import eval_perplexity

    exp = _load_exp(args)
    ckpt = load_checkpoint(args.ckpt)
    corpora = build_corpora(exp, args.seed)
    lines = ["corpus,ppl"]
    for name in exp.domain_names:
        ppl = eval_perplexity(ckpt, corpora[name], max_tokens=exp.eval_tokens)
        lines.append(f"{name},{ppl!r}")
    csv = "\n".join(lines) + "\n"
    sys.stdout.write(csv)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "eval_grid.csv").write_text(csv)
    return 0


def _analysis_columns(args):
    if args.config is not None:
        exp = load_experiment(args.config)
        base = exp.model
        dims = base.to_dict()
        for key in ("arch", "n_experts", "ffn_topk", "attn_routing", "attn_topk"):
            dims.pop(key)
        base = ModelConfig(**dims)
    else:
        base = None  # reference small-scale dims
    cols = analysis.small_scale_family(base)
    fcols = analysis.flops_family(base)
    if args.arch:
        cols = [c for c in cols if c.label == args.arch]
        fcols = [c for c in fcols if c.label == args.arch] or fcols
        if not cols:
            raise ConfigError(f"no arch column labelled {args.arch!r}")
    return cols, fcols


def cmd_analyze(args) -> int:
    cols, fcols = _analysis_columns(args)
    ptbl = analysis.param_table(cols)
    ftbl = analysis.flops_table(fcols, n_ctx=args.n_ctx)
    print(analysis.format_table(ptbl, "Per-block parameter accounting (active view)"))
    print()
    print(analysis.format_table(ftbl, f"Inference FLOPs per token per layer (n_ctx={args.n_ctx})"))
    print()
    print("Conventions:")
    for note in analysis.CONVENTION_NOTES:
        print(f"  - {note}")
    if args.match:
        if "=" not in args.match:
            raise ConfigError("--match expects REF=TOKENS, e.g. btx_top1=100e6")
        ref_label, raw_tokens = args.match.split("=", 1)
        ref_label = ref_label.strip()
        aliases = {"btx": "btx_top1"}
        ref_label = aliases.get(ref_label, ref_label)
        ref = {c.label: c for c in fcols}.get(ref_label)
        if ref is None:
            raise ConfigError(f"--match reference {ref_label!r} is not a FLOPs row")
        tokens = int(float(raw_tokens))
        ref_fpt = analysis.flops_per_token(ref.config, args.n_ctx).grand
        print()
        print(f"Compute-matched token budgets (reference {ref_label} at {tokens} tokens):")
        for c in fcols:
            fpt = analysis.flops_per_token(c.config, args.n_ctx).grand
            matched = analysis.compute_match(ref_fpt, tokens, fpt)
            print(f"  {c.label}: {matched}")
    if args.out:
        reports.write_analysis_reports(ptbl, ftbl, args.out)
    return 0


def cmd_ablate(args) -> int:
    from .pipeline import run_ablation

    exp = _load_exp(args)
    run_ablation(exp, args.out, args.seed)
    print((Path(args.out) / "reports" / "summary.txt").read_text())
    return 0


def cmd_run(args) -> int:
    from .pipeline import run_pipeline

    exp = _load_exp(args)
    if args.match:
        exp.match = args.match
    report = run_pipeline(exp, args.out, args.seed)
    print((Path(args.out) / "reports" / "summary.txt").read_text())
    print(f"wall time: {report.wall_seconds:.1f}s")
    return 0


_COMMANDS = {
    "pretrain": cmd_pretrain,
    "branch-cpt": cmd_branch_cpt,
    "mix": cmd_mix,
    "eval": cmd_eval,
    "analyze": cmd_analyze,
    "ablate": cmd_ablate,
    "run": cmd_run,
}


def main(argv: list[str] | None = None) -> int:
    fused.configure_threads()
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return 2 if e.code not in (0, None) else 0
    try:
        _set_precision(args)
        return _COMMANDS[args.command](args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 3
    except (OSError, FileNotFoundError) as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
