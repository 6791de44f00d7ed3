"""Matplotlib figures written next to the CSV/JSON reports."""

from __future__ import annotations

from pathlib import Path
from typing import Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# no Software/date entries so repeated renders are byte-identical
PNG_METADATA = {"Software": None}

STYLE = {
    "font.size": 9,
    "axes.titlesize": 9,
    "axes.labelsize": 9,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "legend.fontsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100, metadata=PNG_METADATA)
    plt.close(fig)
    return path


def image_grid(
    rows: Sequence[Sequence[Optional[np.ndarray]]],
    path,
    col_titles: Sequence[str] = (),
    row_titles: Sequence[str] = (),
    cell_titles: Optional[Sequence[Sequence[str]]] = None,
    cell: float = 1.6,
) -> Path:
    """Grid of images; ``None`` cells are left blank. ``cell_titles`` overrides ``col_titles``."""
    n_rows = len(rows)
    n_cols = max(len(r) for r in rows)
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(n_rows, n_cols, figsize=(cell * n_cols, cell * n_rows + 0.3), squeeze=False)
        for i, row in enumerate(rows):
            for j in range(n_cols):
                ax = axes[i][j]
                ax.set_xticks([])
                ax.set_yticks([])
                for spine in ax.spines.values():
                    spine.set_visible(False)
                img = row[j] if j < len(row) else None
                if img is not None:
                    ax.imshow(np.clip(img, 0.0, 1.0), interpolation="nearest")
                if cell_titles is not None:
                    if j < len(cell_titles[i]) and cell_titles[i][j]:
                        ax.set_title(cell_titles[i][j])
                elif i == 0 and j < len(col_titles):
                    ax.set_title(col_titles[j])
            if i < len(row_titles):
                axes[i][0].set_ylabel(row_titles[i], rotation=0, ha="right", va="center")
        fig.tight_layout()
        return _save(fig, path)


def analogy_grid(rows, path, row_titles: Sequence[str] = ()) -> Path:
    """One A | A' | B | B' row per triplet."""
    return image_grid(rows, path, col_titles=("A", "A'", "B", "B'"), row_titles=row_titles)


def loss_trace_figure(trace, path) -> Path:
    it = np.array([r.iteration for r in trace])
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(1, 3, figsize=(8.0, 2.4))
        for a, key, label in zip(ax, ("l_tc", "l_clip", "l_total"), ("token consistency", "clip alignment", "total")):
            a.plot(it, [getattr(r, key) for r in trace], lw=1.0, color="k")
            a.set_title(label)
            a.set_xlabel("iteration")
        fig.tight_layout()
        return _save(fig, path)


def score_figure(report, path) -> Path:
    ids = [row.triplet_id for row in report.per_triplet]
    clip = [row.clip_score for row in report.per_triplet]
    x = np.arange(len(ids))
    has_dino = report.mean_dino is not None
    width = 0.4 if has_dino else 0.8
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(max(3.0, 0.5 * len(ids) + 1.5), 2.6))
        ax.bar(x - (width / 2 if has_dino else 0), clip, width, color="0.3", label=f"CLIP (mean {report.mean_clip:.4f})")
        if has_dino:
            dino = [row.dino_score for row in report.per_triplet]
            ax.bar(x + width / 2, dino, width, color="0.7", label=f"DINO (mean {report.mean_dino:.4f})")
        ax.axhline(0.0, color="k", lw=0.6)
        ax.set_xticks(x)
        ax.set_xticklabels(ids, rotation=45, ha="right")
        ax.set_ylim(-1.05, 1.05)
        ax.set_ylabel("directional score")
        ax.legend(frameon=False, loc="lower right")
        fig.tight_layout()
        return _save(fig, path)
