"""Run reports: perplexity grids as CSV, a readable summary, and rendered
figures (training curves, the evaluation grid, expert load trajectories)
written next to the delimited output."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

FIG_DPI = 130


def grid_csv(grid: dict[str, dict[str, float]], domains: list[str]) -> str:
    lines = ["model," + ",".join(domains) + ",average"]
    for model, row in grid.items():
        vals = [float(row[d]) for d in domains]
        cells = ",".join(repr(v) for v in vals)
        lines.append(f"{model},{cells},{float(np.mean(vals))!r}")
    return "\n".join(lines) + "\n"


def grid_summary(grid: dict[str, dict[str, float]], domains: list[str],
                 title: str) -> str:
    width = max(len(m) for m in grid) + 2
    cell = max(12, max(len(d) for d in domains) + 2)
    cols = [f"{d:>{cell}}" for d in domains] + [f"{'average':>{cell}}"]
    lines = [title, "-" * len(title), " " * width + "".join(cols)]
    for model, row in grid.items():
        vals = [row[d] for d in domains]
        cells = "".join(f"{v:>{cell}.3f}" for v in vals)
        lines.append(f"{model:<{width}}{cells}{np.mean(vals):>{cell}.3f}")
    return "\n".join(lines) + "\n"


def _series(log, phase: str, domain: str, metric: str) -> tuple[list[int], list[float]]:
    xs, ys = [], []
    for p, step, d, m, v in log.rows:
        if p == phase and d == domain and m == metric:
            xs.append(step)
            ys.append(v)
    return xs, ys


def render_loss_curves(log, path: Path) -> None:
    """One panel per phase: nll vs step for each domain trained in it."""
    phases = []
    for p, _, d, m, _ in log.rows:
        if m == "nll" and not p.startswith("eval") and (p, d) not in phases:
            phases.append((p, d))
    if not phases:
        return
    fig, ax = plt.subplots(figsize=(7.0, 4.2))
    for p, d in phases:
        xs, ys = _series(log, p, d, "nll")
        label = p if not d else f"{p}:{d}"
        ax.plot(xs, ys, label=label, linewidth=1.0)
    ax.set_xlabel("step")
    ax.set_ylabel("nll")
    ax.set_title("training loss by phase")
    ax.legend(fontsize=7, ncol=2)
    fig.tight_layout()
    fig.savefig(path, dpi=FIG_DPI)
    plt.close(fig)


def render_grid_heatmap(grid: dict[str, dict[str, float]], domains: list[str],
                        path: Path) -> None:
    models = list(grid)
    data = np.array([[grid[m][d] for d in domains] for m in models])
    fig, ax = plt.subplots(figsize=(1.4 + 1.1 * len(domains), 0.8 + 0.5 * len(models)))
    im = ax.imshow(np.log(data), cmap="viridis", aspect="auto")
    ax.set_xticks(range(len(domains)), domains, fontsize=8)
    ax.set_yticks(range(len(models)), models, fontsize=8)
    for i in range(len(models)):
        for j in range(len(domains)):
            ax.text(j, i, f"{data[i, j]:.2f}", ha="center", va="center",
                    fontsize=7, color="white")
    ax.set_title("per-domain perplexity (log color scale)")
    fig.colorbar(im, ax=ax, shrink=0.8)
    fig.tight_layout()
    fig.savefig(path, dpi=FIG_DPI)
    plt.close(fig)


def render_expert_loads(log, path: Path) -> None:
    """FFN expert load fractions over mixture training, one panel per model."""
    keys = []
    for p, _, d, m, _ in log.rows:
        if p == "mixture" and m.startswith("load_expert") and d not in keys:
            keys.append(d)
    if not keys:
        return
    fig, axes = plt.subplots(1, len(keys), figsize=(4.0 * len(keys), 3.2),
                             squeeze=False)
    for ax, d in zip(axes[0], keys):
        e = 0
        while True:
            xs, ys = _series(log, "mixture", d, f"load_expert{e}")
            if not xs:
                break
            ax.plot(xs, ys, label=f"e{e}", linewidth=0.9)
            e += 1
        if e:
            ax.axhline(1.0 / e, color="gray", linestyle=":", linewidth=0.8)
        ax.set_title(d, fontsize=9)
        ax.set_xlabel("step")
        ax.set_ylim(0, 1)
        ax.legend(fontsize=7)
    axes[0][0].set_ylabel("top-1 load fraction")
    fig.tight_layout()
    fig.savefig(path, dpi=FIG_DPI)
    plt.close(fig)


def write_pipeline_reports(report, log, out_dir: Path) -> None:
    rep_dir = out_dir / "reports"
    fig_dir = rep_dir / "figures"
    fig_dir.mkdir(parents=True, exist_ok=True)
    (rep_dir / "ppl_grid.csv").write_text(grid_csv(report.grid, report.domains))
    summary = grid_summary(report.grid, report.domains, "Per-domain perplexity")
    lines = [summary]
    if report.token_budgets:
        lines.append("Mixture training budgets:")
        for arch, tokens in report.token_budgets.items():
            flops = report.training_flops.get(arch, 0.0)
            lines.append(f"  {arch}: {tokens} tokens, {flops:.4g} training FLOPs")
    (rep_dir / "summary.txt").write_text("\n".join(lines) + "\n")
    render_loss_curves(log, fig_dir / "loss_curves.png")
    render_grid_heatmap(report.grid, report.domains, fig_dir / "ppl_grid.png")
    render_expert_loads(log, fig_dir / "expert_loads.png")


def write_ablation_reports(report, out_dir: Path) -> None:
    rep_dir = out_dir / "reports"
    fig_dir = rep_dir / "figures"
    fig_dir.mkdir(parents=True, exist_ok=True)
    (rep_dir / "ablation.csv").write_text(grid_csv(report.rows, report.domains))
    summary = grid_summary(report.rows, report.domains,
                           "Attention-routing ablation (compute matched)")
    lines = [summary, "Budgets and measured training FLOPs:"]
    for label, tokens in report.token_budgets.items():
        lines.append(f"  {label}: {tokens} tokens, {report.training_flops[label]:.6g} FLOPs")
    (rep_dir / "summary.txt").write_text("\n".join(lines) + "\n")
    render_grid_heatmap(report.rows, report.domains, fig_dir / "ablation_grid.png")


def write_analysis_reports(param_tbl, flops_tbl, out_dir: Path) -> None:
    """CSV tables plus a small cost-comparison figure for `analyze --out`."""
    from .analysis import table_csv

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "param_table.csv").write_text(table_csv(param_tbl))
    (out / "flops_table.csv").write_text(table_csv(flops_tbl))
    labels = list(param_tbl)
    totals = [param_tbl[m]["total_params"] for m in labels]
    actives = [param_tbl[m]["active_params"] for m in labels]
    x = np.arange(len(labels))
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9.2, 3.4))
    ax1.bar(x - 0.2, totals, width=0.4, label="total")
    ax1.bar(x + 0.2, actives, width=0.4, label="active")
    ax1.set_xticks(x, labels, rotation=20, fontsize=7)
    ax1.set_title("parameters")
    ax1.legend(fontsize=8)
    flabels = list(flops_tbl)
    fx = np.arange(len(flabels))
    ax2.bar(fx - 0.2, [flops_tbl[m]["attention"] for m in flabels], width=0.4, label="attention")
    ax2.bar(fx + 0.2, [flops_tbl[m]["ffn_total"] for m in flabels], width=0.4, label="ffn")
    ax2.set_xticks(fx, flabels, rotation=20, fontsize=7)
    ax2.set_title("FLOPs per token per layer")
    ax2.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out / "cost_comparison.png", dpi=FIG_DPI)
    plt.close(fig)
