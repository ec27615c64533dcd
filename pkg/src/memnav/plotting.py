"""Figures for the CLI report paths. Uses the non-interactive Agg backend."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.colors import ListedColormap  # noqa: E402

from memnav.physical_space import AnnotatedExplorationMap, OccupancyGrid  # noqa: E402

_MAP_CMAP = ListedColormap(["#9e9e9e", "#ffffff", "#202020"])  # unknown, free, occupied


def _extent(grid: OccupancyGrid):
    x0, y0 = grid.origin
    return (x0, x0 + grid.width * grid.resolution, y0, y0 + grid.height * grid.resolution)


def plot_map(
    grid: OccupancyGrid,
    path: str | Path,
    trajectory: Sequence[tuple[float, float]] = (),
    amap: AnnotatedExplorationMap | None = None,
    gt: Sequence[tuple[float, float]] = (),
    title: str = "",
) -> Path:
    """Occupancy map with trajectory, reference route, frontiers and recalled poses."""
    if amap is not None:
        grid = amap.grid
    fig, ax = plt.subplots(figsize=(7, 7 * max(grid.height, 1) / max(grid.width, 1) + 0.6))
    ax.imshow(grid.cells.T, origin="lower", extent=_extent(grid), cmap=_MAP_CMAP, vmin=0, vmax=2,
              interpolation="nearest")
    if len(gt):
        g = np.asarray(gt)
        ax.plot(g[:, 0], g[:, 1], "--", color="tab:green", lw=1.2, label="reference route")
    if len(trajectory):
        t = np.asarray(trajectory)
        ax.plot(t[:, 0], t[:, 1], "-o", color="tab:blue", ms=3, lw=1.5, label="trajectory")
    if amap is not None:
        for f in amap.frontiers:
            ax.plot(*f.centroid, "^", color="tab:orange" if f.rho else "tab:red", ms=7)
        if amap.retrieved_poses:
            p = np.array([q.xy for q in amap.retrieved_poses])
            ax.plot(p[:, 0], p[:, 1], "*", color="tab:purple", ms=11, label="recalled views")
        ax.plot(*amap.agent_pose.xy, "o", color="tab:cyan", ms=9, mec="k", label="agent")
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    ax.set_aspect("equal")
    if title:
        ax.set_title(title)
    if ax.get_legend_handles_labels()[0]:
        ax.legend(loc="upper right", fontsize=8)
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(out, dpi=110)
    plt.close(fig)
    return out


def plot_suite(rows: Sequence[dict], out_dir: str | Path, name: str = "suite") -> list[Path]:
    """Per-episode steps and SPL bars plus an aggregate summary chart."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    labels = [str(r["script_id"]) for r in rows]
    x = np.arange(len(rows))
    colours = ["tab:green" if r["success"] else "tab:red" for r in rows]

    for metric, ylabel in (("steps", "steps"), ("spl", "SPL")):
        fig, ax = plt.subplots(figsize=(max(6, 0.35 * len(rows) + 2), 4))
        ax.bar(x, [r[metric] for r in rows], color=colours)
        ax.set_xticks(x, labels, rotation=75, ha="right", fontsize=7)
        ax.set_ylabel(ylabel)
        ax.set_title(f"{name}: {ylabel} per episode (green = success)")
        fig.tight_layout()
        p = out / f"{name}_{metric}.png"
        fig.savefig(p, dpi=100)
        plt.close(fig)
        paths.append(p)

    groups: dict[str, list[dict]] = {}
    for r in rows:
        groups.setdefault(r.get("group") or "all", []).append(r)
    names = sorted(groups)
    fig, ax = plt.subplots(figsize=(max(5, 1.5 * len(names) + 2), 4))
    width = 0.25
    for k, (metric, label) in enumerate((("success", "success"), ("spl", "SPL"), ("matched", "match"))):
        vals = [float(np.mean([float(r[metric]) for r in groups[g]])) if groups[g] else 0.0 for g in names]
        ax.bar(np.arange(len(names)) + (k - 1) * width, vals, width, label=label)
    ax.set_xticks(np.arange(len(names)), names)
    ax.set_ylim(0, 1.05)
    ax.legend(fontsize=8)
    ax.set_title(f"{name}: rates by group")
    fig.tight_layout()
    p = out / f"{name}_summary.png"
    fig.savefig(p, dpi=100)
    plt.close(fig)
    paths.append(p)
    return paths
