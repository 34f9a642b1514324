"""Report figures written next to the CSV outputs."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

params = {
    "font.size": 8,
    "axes.labelsize": 9,
    "axes.titlesize": 9,
    "xtick.labelsize": 7,
    "ytick.labelsize": 7,
    "legend.fontsize": 7,
    "figure.dpi": 150,
    "savefig.bbox": "tight",
    "axes.spines.top": False,
    "axes.spines.right": False,
}

_PALETTE = ["#4e79a7", "#f28e2b", "#e15759", "#76b7b2", "#59a14f",
            "#edc948", "#b07aa1", "#ff9da7", "#9c755f", "#bab0ac"]


def category_accuracy(rows: list[dict], path, title: str, key: str = "category") -> Path:
    """Horizontal bars of accuracy per category; rows without accuracy are drawn hollow."""
    path = Path(path)
    with plt.rc_context(params):
        fig, ax = plt.subplots(figsize=(4.0, 0.25 * max(len(rows), 2) + 0.8))
        names = [r[key] for r in rows]
        acc = [r["accuracy"] if r["accuracy"] is not None else 0.0 for r in rows]
        y = np.arange(len(rows))
        bars = ax.barh(y, acc, color=_PALETTE[0])
        for b, r in zip(bars, rows):
            if r["accuracy"] is None:
                b.set_fill(False)
            ax.text(b.get_width() + 0.01, b.get_y() + b.get_height() / 2,
                    f"n={r['annotated']}", va="center", fontsize=6)
        ax.set_yticks(y, names)
        ax.invert_yaxis()
        ax.set_xlim(0, 1.15)
        ax.set_xlabel("accuracy over annotated rooms")
        ax.set_title(title)
        path.parent.mkdir(parents=True, exist_ok=True)
        fig.savefig(path)
        plt.close(fig)
    return path


def plan_view(places, room_places: dict[str, list[int]], objects, path, free=None) -> Path:
    """Top-down view: free space, places coloured by room, object centroids."""
    path = Path(path)
    with plt.rc_context(params):
        fig, ax = plt.subplots(figsize=(5.0, 3.5))
        if free is not None:
            ny, nx = free.free.shape[1], free.free.shape[0]
            x0, y0 = free.origin_xy
            ax.imshow(~free.free.T, origin="lower", cmap="Greys", alpha=0.35,
                      extent=(x0, x0 + nx * free.voxel_size, y0, y0 + ny * free.voxel_size))
        pos = places.positions
        for a, b in places.edges:
            ax.plot(pos[[a, b], 0], pos[[a, b], 1], color="0.7", lw=0.3, zorder=1)
        for k, (rid, members) in enumerate(room_places.items()):
            m = np.asarray(members, int)
            ax.scatter(pos[m, 0], pos[m, 1], s=4, color=_PALETTE[k % len(_PALETTE)],
                       label=rid, zorder=2)
        for obj in objects:
            c = np.asarray(obj.centroid)
            ax.scatter([c[0]], [c[1]], marker="s", s=14, color="k", zorder=3)
            ax.annotate(obj.class_name, c[:2], xytext=(3, 3), textcoords="offset points", fontsize=6)
        ax.set_aspect("equal")
        ax.set_xlabel("x [m]")
        ax.set_ylabel("y [m]")
        if room_places:
            ax.legend(loc="upper left", bbox_to_anchor=(1.01, 1.0), markerscale=2, frameon=False)
        path.parent.mkdir(parents=True, exist_ok=True)
        fig.savefig(path)
        plt.close(fig)
    return path
