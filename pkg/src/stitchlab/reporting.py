"""Heatmaps of similarity matrices."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .experiments import read_matrix_csv


def plot_matrix(entries: np.ndarray, out_path: str | Path, title: str | None = None) -> Path:
    """Render a similarity matrix with a fixed [0, 1] color scale.

    Rows are sender indices, columns receiver indices; NaN holes are hatched.
    Output bytes depend only on the input (no timestamps or software tag).
    """
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    from matplotlib.patches import Rectangle

    entries = np.asarray(entries, dtype=np.float64)
    rows, cols = entries.shape
    fig, ax = plt.subplots(figsize=(1.0 + 0.6 * cols, 0.8 + 0.6 * rows), dpi=100)
    masked = np.ma.masked_invalid(entries)
    im = ax.imshow(masked, cmap="viridis", vmin=0.0, vmax=1.0, origin="upper", interpolation="nearest")
    for i in range(rows):
        for j in range(cols):
            v = entries[i, j]
            if np.isnan(v):
                ax.add_patch(Rectangle((j - 0.5, i - 0.5), 1, 1, fill=False, hatch="///", edgecolor="0.5"))
                ax.text(j, i, "NA", ha="center", va="center", fontsize=7, color="0.3")
            else:
                ax.text(j, i, f"{v:.2f}", ha="center", va="center", fontsize=7,
                        color="white" if v < 0.5 else "black")
    ax.set_xticks(range(cols))
    ax.set_yticks(range(rows))
    ax.set_xlabel("receiver layer j")
    ax.set_ylabel("sender layer i")
    if title:
        ax.set_title(title, fontsize=9)
    fig.colorbar(im, ax=ax, fraction=0.046, pad=0.04)
    fig.tight_layout()
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out_path, metadata={"Software": None})
    plt.close(fig)
    return out_path


def plot_csv(csv_path: str | Path, out_path: str | Path) -> Path:
    return plot_matrix(read_matrix_csv(csv_path), out_path, title=Path(csv_path).stem)
