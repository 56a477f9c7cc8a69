"""Figure rendering for run artifacts.

Every report function takes data already produced by the pipeline and writes
a PNG next to the delimited outputs; nothing here feeds back into planning.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
from matplotlib.patches import Circle, Rectangle

from .core import FigureEightPath
from .gridmap import Box, Disc, DiscrepancyCostMap, ObstacleSet
from .simulator import RunLog


def _draw_obstacles(ax, obstacles: ObstacleSet):
    for ob in obstacles.obstacles:
        if isinstance(ob, Box):
            ax.add_patch(Rectangle((ob.xmin, ob.ymin), ob.xmax - ob.xmin,
                                   ob.ymax - ob.ymin, facecolor="k", alpha=0.85, zorder=4))
        elif isinstance(ob, Disc):
            ax.add_patch(Circle((ob.cx, ob.cy), ob.radius, facecolor="k",
                                alpha=0.85, zorder=4))


def _draw_costmap(ax, costmap: DiscrepancyCostMap):
    geo = costmap.geometry
    x0 = geo.origin[0] - geo.height / 2 * geo.resolution
    x1 = geo.origin[0] + geo.height / 2 * geo.resolution
    y0 = geo.origin[1] - geo.width / 2 * geo.resolution
    y1 = geo.origin[1] + geo.width / 2 * geo.resolution
    lethal = costmap.cells >= costmap.lethal_threshold
    soft = np.where(lethal, np.nan, costmap.cells)
    # rows follow world x, so transpose for a horizontal x-axis
    ax.imshow(soft.T, origin="lower", extent=(x0, x1, y0, y1), cmap="YlOrRd",
              alpha=0.8, zorder=1, interpolation="nearest")
    overlay = np.where(lethal.T, 1.0, np.nan)
    ax.imshow(overlay, origin="lower", extent=(x0, x1, y0, y1), cmap="Greys",
              vmin=0, vmax=1.2, alpha=0.5, zorder=2, interpolation="nearest")


def trajectory_figure(log: RunLog, obstacles: ObstacleSet = ObstacleSet(),
                      costmap: DiscrepancyCostMap | None = None,
                      lap_time: float = 30.0):
    fig, ax = plt.subplots(figsize=(7, 7))
    if costmap is not None:
        _draw_costmap(ax, costmap)
    _draw_obstacles(ax, obstacles)
    path = FigureEightPath(lap_time=lap_time)
    ts = np.linspace(0.0, lap_time, 400)
    ref = path.positions(ts)
    ax.plot(ref[:, 0], ref[:, 1], "--", color="tab:blue", lw=1.2, label="reference", zorder=5)
    ax.plot(log.poses[:, 0], log.poses[:, 1], color="tab:green", lw=1.0,
            label="executed", zorder=6)
    contacts = [e for e in log.events if e["kind"] == "contact"]
    if contacts:
        idx = [min(int(e["t"] / log.dt), len(log.poses) - 1) for e in contacts]
        ax.plot(log.poses[idx, 0], log.poses[idx, 1], "rx", ms=10, mew=2,
                label="contact", zorder=7)
    ax.set_aspect("equal")
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    ax.legend(loc="upper right", fontsize=8)
    ax.set_title(f"tracking run: buffer {log.n_eps} cells, "
                 f"r0 {log.r0:.3f} m, r_dT {log.r_dt:.3f} m")
    fig.tight_layout()
    return fig


def errors_figure(log: RunLog):
    fig, axes = plt.subplots(2, 1, figsize=(8, 6), sharex=True)
    err = np.linalg.norm(log.poses[:, :2] - log.references, axis=1)
    axes[0].plot(log.clock, err, lw=0.8, color="tab:green")
    axes[0].set_ylabel("position error [m]")
    axes[1].plot(log.clock, log.interval_deviation, lw=0.8, color="tab:orange",
                 label="interval deviation")
    axes[1].axhline(log.r_dt, color="k", ls="--", lw=1, label="tube radius")
    axes[1].plot(log.clock, log.e0_norms, lw=0.6, color="tab:blue", alpha=0.7,
                 label="entry error")
    axes[1].axhline(log.r0, color="tab:blue", ls=":", lw=1, label="entry radius")
    axes[1].set_ylabel("tracking deviation [m]")
    axes[1].set_xlabel("time [s]")
    axes[1].legend(fontsize=8, ncol=2)
    fig.tight_layout()
    return fig


def scores_figure(matched, unmatched, bounds, epsilon):
    fig, axes = plt.subplots(1, 2, figsize=(10, 4))
    for ax, scores, bound, label in [
        (axes[0], matched, bounds.z_matched, "matched input discrepancy"),
        (axes[1], unmatched, bounds.z_unmatched, "unmatched residual"),
    ]:
        ax.hist(scores, bins=60, color="tab:gray")
        if np.isfinite(bound):
            ax.axvline(bound, color="tab:red", lw=2,
                       label=f"bound at 1-{epsilon:g}: {bound:.4g}")
            ax.legend(fontsize=8)
        ax.set_xlabel(label)
        ax.set_ylabel("count")
    fig.tight_layout()
    return fig


def costmap_figure(costmap: DiscrepancyCostMap, obstacles: ObstacleSet = ObstacleSet()):
    fig, ax = plt.subplots(figsize=(7, 7))
    _draw_costmap(ax, costmap)
    _draw_obstacles(ax, obstacles)
    ax.set_aspect("equal")
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    ax.set_title(f"cost map: buffer {costmap.buffer_cells} cells, "
                 f"lethal {costmap.lethal_threshold:g}")
    fig.tight_layout()
    return fig


def save_figure(fig, path) -> None:
    fig.savefig(path, dpi=130)
    plt.close(fig)
