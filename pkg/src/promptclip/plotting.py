"""Static figures written next to the delimited outputs."""

from __future__ import annotations

import math

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

RC = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
}


def figsize(width=5.0, ratio=None):
    ratio = ratio or (math.sqrt(5) - 1) / 2
    return width, width * ratio


def plot_length_histogram(stats, path, title="Caption length distribution"):
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=figsize())
        ax.bar(stats.bin_edges[:-1], stats.counts / max(stats.n, 1), width=stats.bin_edges[1] - stats.bin_edges[0],
               align="edge", color="0.55", edgecolor="white", linewidth=0.4)
        for limit, frac in stats.exceedance.items():
            ax.axvline(limit, color="C3", lw=1, ls="--")
            ax.text(limit, ax.get_ylim()[1] * 0.95, f" {limit}: {100 * frac:.1f}% over", color="C3",
                    va="top", fontsize=7)
        ax.axvline(stats.mean, color="C0", lw=1)
        ax.set_xlabel("tokens per caption")
        ax.set_ylabel("fraction of captions")
        ax.set_title(title)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)


def plot_metric_curves(reports, path):
    """Metric value against K, one line per task."""
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=figsize())
        for rep in reports:
            ks = sorted(rep.values)
            ax.plot(ks, [100 * rep.values[k] for k in ks], marker="o", ms=3, label=rep.task)
        ax.set_xscale("log")
        ax.set_xlabel("K")
        ax.set_ylabel("score (%)")
        ax.legend(frameon=False)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)


def plot_loss_trace(trace, path):
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=figsize())
        steps = [r["step"] for r in trace]
        for key in ("loss_i2t", "loss_t2i", "loss_total"):
            ax.plot(steps, [r[key] for r in trace], lw=1, label=key)
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        ax.legend(frameon=False)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
