"""SVG renderings of the CSV outputs. Optional: callers only use them when asked for plots."""
import math
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg")
    plt.close(fig)
    return path


def plot_latency_quality(rows: Sequence[dict], path, label: str = "CTC") -> Path:
    """BLEU against AL, one point per delay k."""
    # delays whose every trace was skipped have no AL
    rows = sorted((r for r in rows if math.isfinite(r["al"])), key=lambda r: r["k"])
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.plot([r["al"] for r in rows], [r["bleu"] for r in rows], marker="o", label=label)
    for r in rows:
        ax.annotate(f"k={r['k']}", (r["al"], r["bleu"]), textcoords="offset points", xytext=(4, 4), fontsize=8)
    ax.set_xlabel("AL (tokens)")
    ax.set_ylabel("BLEU")
    ax.grid(alpha=0.3)
    ax.legend()
    return _save(fig, path)


def plot_permutation(z, path, row_labels=None, col_labels=None) -> Path:
    values = z.detach().cpu().numpy() if hasattr(z, "detach") else z
    fig, ax = plt.subplots(figsize=(5, 5))
    image = ax.imshow(values, cmap="Blues", vmin=0.0, vmax=1.0)
    if row_labels is not None:
        ax.set_yticks(range(len(row_labels)), labels=list(row_labels), fontsize=7)
    if col_labels is not None:
        ax.set_xticks(range(len(col_labels)), labels=list(col_labels), fontsize=7, rotation=90)
    ax.set_xlabel("source position")
    ax.set_ylabel("reordered position")
    fig.colorbar(image, ax=ax, fraction=0.046)
    fig.tight_layout()
    return _save(fig, path)


def plot_anticipation(curve: Sequence[tuple[int, float]], path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot([k for k, _ in curve], [100.0 * rate for _, rate in curve], marker="s")
    ax.set_xlabel("k")
    ax.set_ylabel("k-anticipation rate (%)")
    ax.grid(alpha=0.3)
    return _save(fig, path)
