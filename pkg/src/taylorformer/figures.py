"""Figure rendering for the command-line report paths.

Every reporting command drops a PNG next to its delimited output: loss
curves for training runs, per-variant validation curves for ablations,
the consistency histogram, and rollout fans for sampled trajectories.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

FIGSIZE = (7.0, 4.2)


def save_training_curves(metrics_rows, path):
    """Train/validation NLL against iteration."""
    iters = [row[0] for row in metrics_rows]
    fig, ax = plt.subplots(figsize=FIGSIZE)
    ax.plot(iters, [row[1] for row in metrics_rows], label="train NLL", lw=1.5)
    ax.plot(iters, [row[2] for row in metrics_rows], label="validation NLL", lw=1.5)
    ax.set_xlabel("iteration")
    ax.set_ylabel("NLL per target point")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_ablation_curves(variant_rows, path):
    """Validation NLL per ablation variant on shared axes."""
    fig, ax = plt.subplots(figsize=FIGSIZE)
    for name, rows in variant_rows.items():
        ax.plot([r[0] for r in rows], [r[2] for r in rows], label=name, lw=1.5)
    ax.set_xlabel("iteration")
    ax.set_ylabel("validation NLL per target point")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_consistency_histogram(report, path):
    """Histogram of per-sequence log-likelihood stds across permutations."""
    fig, ax = plt.subplots(figsize=FIGSIZE)
    widths = report.bin_edges[1:] - report.bin_edges[:-1]
    ax.bar(
        report.bin_edges[:-1],
        report.counts,
        width=widths,
        align="edge",
        edgecolor="black",
        linewidth=0.4,
    )
    ax.axvline(report.mean, color="crimson", lw=1.2, label=f"mean {report.mean:.3g}")
    ax.set_xlabel("std of joint target log likelihood over permutations")
    ax.set_ylabel("sequences")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_trajectory_plot(cases, path, max_panels=4):
    """Context, truth and rollouts for the first few sequences.

    cases: list of (task, Trajectories) pairs.
    """
    n = min(len(cases), max_panels)
    fig, axes = plt.subplots(n, 1, figsize=(7.0, 2.6 * n), squeeze=False)
    for ax, (task, out) in zip(axes[:, 0], cases[:n]):
        nc = task.n_context
        xc = task.x[0, :nc, 0]
        xt = task.x[0, nc:, 0]
        ax.scatter(xc, task.y[0, :nc, 0], s=14, color="black", label="context")
        ax.plot(xt, task.y[0, nc:, 0], color="black", lw=1.0, label="truth")
        for d in range(out.n_draws):
            ax.plot(xt, out.draws[d], color="tab:blue", lw=0.7, alpha=0.45)
        ax.plot(xt, out.mus[0], color="tab:orange", lw=1.2, label="mean")
        band = 2.0 * out.sigmas[0]
        ax.fill_between(
            xt, out.mus[0] - band, out.mus[0] + band,
            color="tab:orange", alpha=0.15, linewidth=0,
        )
        ax.set_xlabel("x")
        ax.set_ylabel("y")
    axes[0, 0].legend(loc="best", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
