"""Figures written next to the JSON reports."""

from __future__ import annotations

import math
from pathlib import Path

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
    "savefig.dpi": 120,
}
# no Software/date chunks, so identical data gives identical bytes
_METADATA = {"Software": None}


def figsize(scale=1.0, ratio=None):
    width = 6.0 * scale
    ratio = ratio or (math.sqrt(5) - 1) / 2
    return width, width * ratio


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, metadata=_METADATA if path.suffix == ".png" else None, bbox_inches="tight")
    plt.close(fig)
    return path


def smooth(values, window=50):
    out, acc = [], 0.0
    for i, v in enumerate(values):
        acc += v
        if i >= window:
            acc -= values[i - window]
        out.append(acc / min(i + 1, window))
    return out


def loss_curve(history, path, title="training loss", ylabel="loss"):
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=figsize(0.8))
        ax.plot(history, lw=0.5, alpha=0.35, color="C0", label="per step")
        ax.plot(smooth(history), lw=1.2, color="C0", label="moving mean")
        ax.set_xlabel("step")
        ax.set_ylabel(ylabel)
        ax.set_title(title)
        ax.legend(frameon=False)
        return _save(fig, path)


def per_dialog_accuracy(report, path):
    rows = report["per_dialog"]
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=figsize(1.0, 0.45))
        x = range(len(rows))
        ax.bar([i - 0.2 for i in x], [r["joint_goal"] for r in rows], width=0.4, label="joint goal")
        ax.bar([i + 0.2 for i in x], [r["turn_request"] for r in rows], width=0.4, label="turn request")
        ax.set_ylim(0, 1.05)
        ax.set_xlabel("dialog")
        ax.set_ylabel("accuracy")
        ax.set_title(f"joint goal {report['joint_goal']:.3f}, turn request {report['turn_request']:.3f}")
        ax.legend(frameon=False, loc="lower right")
        return _save(fig, path)


def latency_histogram(reports, path):
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=figsize(0.8))
        for i, r in enumerate(reports):
            ms = [s * 1e3 for s in r["samples_s"]]
            ax.hist(ms, bins=30, alpha=0.6, color=f"C{i}", label=f"{r['model_id']} (median {r['median_s'] * 1e3:.1f} ms)")
        ax.set_xlabel("per-turn latency (ms)")
        ax.set_ylabel("turns")
        ax.legend(frameon=False)
        return _save(fig, path)


def parameter_breakdown(reports, path):
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=figsize(0.8))
        names = [r["name"] for r in reports]
        body = [r["body_params"] / 1e6 for r in reports]
        mlm = [r["mlm_head_params"] / 1e6 for r in reports]
        ax.bar(names, body, label="encoder body")
        ax.bar(names, mlm, bottom=body, label="MLM head")
        for i, v in enumerate(body):
            ax.text(i, v / 2, f"{v:.1f}M", ha="center", va="center", color="white", fontsize=8)
        ax.set_ylabel("parameters (millions)")
        ax.legend(frameon=False)
        return _save(fig, path)
