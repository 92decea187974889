"""Plot emission from metric CSVs.

The CSV echo is always written; images need matplotlib and are skipped with a
warning when it is missing.
"""

from __future__ import annotations

import logging
import os

import numpy as np

from .io import atomic_path, read_csv, write_csv

log = logging.getLogger(__name__)

PCA_COLUMNS = ("x", "y", "label", "source")
PATH_COLUMNS = ("step", "lambda", "x", "y")
SOURCE_STYLE = {
    "real": dict(marker="o", s=8, alpha=0.35),
    "synthetic-regular": dict(marker="^", s=10, alpha=0.5),
    "synthetic-superposed": dict(marker="o", s=14, c="black", alpha=0.9),
}


class PlotError(ValueError):
    pass


def percentile_markers(n_points: int) -> list[int]:
    """Indices of the 0th, 10th, ..., 100th percentile points of a path."""
    if n_points < 2:
        raise PlotError("path needs at least two points")
    return sorted({round(q * (n_points - 1) / 10) for q in range(11)})


def _pyplot():
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        log.warning("matplotlib not available; writing CSVs only")
        return None
    return plt


def _save(fig, path) -> None:
    with atomic_path(path, ".png") as tmp:
        fig.savefig(tmp, format="png", dpi=120, bbox_inches="tight")


def _read(csv_path, columns):
    try:
        rows = read_csv(csv_path, required=columns)
    except ValueError as e:
        raise PlotError(str(e)) from None
    return rows


def plot_pca(csv_path, out_dir) -> list[str]:
    """Scatter of projected features, styled per source tag."""
    rows = _read(csv_path, PCA_COLUMNS)
    os.makedirs(out_dir, exist_ok=True)
    echo = os.path.join(out_dir, "pca_points.csv")
    write_csv(echo, PCA_COLUMNS, [[r[c] for c in PCA_COLUMNS] for r in rows])
    written = [echo]
    plt = _pyplot()
    if plt is None:
        return written
    xy = np.array([[float(r["x"]), float(r["y"])] for r in rows])
    labels = np.array([int(r["label"]) for r in rows])
    sources = np.array([r["source"] for r in rows])
    fig, ax = plt.subplots(figsize=(6, 6))
    for source in dict.fromkeys(sources):
        sel = sources == source
        style = dict(SOURCE_STYLE.get(source, {}))
        if "c" not in style:
            style.update(c=labels[sel], cmap="tab10", vmin=0, vmax=max(labels.max(), 9))
        ax.scatter(xy[sel, 0], xy[sel, 1], label=source, **style)
    ax.set_xlabel("PC1")
    ax.set_ylabel("PC2")
    ax.legend(loc="best", fontsize=8)
    image = os.path.join(out_dir, "pca.png")
    _save(fig, image)
    plt.close(fig)
    return written + [image]


def path_plot_data(rows) -> dict:
    xy = np.array([[float(r["x"]), float(r["y"])] for r in rows])
    markers = percentile_markers(len(xy))
    return {"line": xy, "markers": xy[markers], "marker_index": markers}


def plot_path(csv_path, out_dir) -> list[str]:
    """Projected latent path, with enlarged dots every 10th percentile."""
    rows = _read(csv_path, PATH_COLUMNS)
    if len(rows) < 2:
        raise PlotError(f"{csv_path}: path needs at least two points")
    data = path_plot_data(rows)
    os.makedirs(out_dir, exist_ok=True)
    echo = os.path.join(out_dir, "path_points.csv")
    write_csv(echo, PATH_COLUMNS + ("marker",),
              [[r[c] for c in PATH_COLUMNS] + [int(i in data["marker_index"])] for i, r in enumerate(rows)])
    written = [echo]
    plt = _pyplot()
    if plt is None:
        return written
    fig, ax = plt.subplots(figsize=(6, 5))
    ax.plot(data["line"][:, 0], data["line"][:, 1], "-", lw=1, color="gray")
    ax.scatter(data["line"][:, 0], data["line"][:, 1], s=4, color="gray")
    ax.scatter(data["markers"][:, 0], data["markers"][:, 1], s=40, color="tab:red", zorder=3)
    ax.set_xlabel("PC1")
    ax.set_ylabel("PC2")
    image = os.path.join(out_dir, "path.png")
    _save(fig, image)
    plt.close(fig)
    return written + [image]


def emit_plots(csv_path, out_dir, kind: str) -> list[str]:
    if kind == "pca":
        return plot_pca(csv_path, out_dir)
    if kind == "path":
        return plot_path(csv_path, out_dir)
    raise PlotError(f"unknown plot kind {kind!r}")
