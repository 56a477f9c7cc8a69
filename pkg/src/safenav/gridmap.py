"""Occupancy grids, simulated range-sensor updates, and cost-map inflation.

Grids are snapshot values: updates return new instances so planners can hold
a consistent view for a full cycle. The inflated cost map has two tiers. The
lethal tier marks every cell whose center lies within the buffer distance of
an occupied cell (measured point-to-cell-area, so a disc of the buffer radius
around the cell center intersects the occupied cell exactly when the cell is
lethal). The soft tier accumulates a decaying shifted-occupancy sum that
shapes trajectories away from obstacles without forbidding them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import signal

from .core import Pose


@dataclass(frozen=True)
class GridGeometry:
    """Cell counts, resolution, and world coordinates of the grid center."""

    height: int = 200          # cells along world x (rows)
    width: int = 200           # cells along world y (columns)
    resolution: float = 0.05   # meters per cell
    origin: tuple = (0.0, 0.0)

    def world_to_cell(self, x: float, y: float) -> tuple:
        ix = math.floor((x - self.origin[0]) / self.resolution + self.height / 2)
        iy = math.floor((y - self.origin[1]) / self.resolution + self.width / 2)
        return ix, iy

    def cell_center(self, ix: int, iy: int) -> tuple:
        x = (ix - self.height / 2 + 0.5) * self.resolution + self.origin[0]
        y = (iy - self.width / 2 + 0.5) * self.resolution + self.origin[1]
        return x, y

    def in_bounds(self, ix, iy):
        return (0 <= ix < self.height) and (0 <= iy < self.width)

    def cells_to_indices(self, pts: np.ndarray) -> tuple:
        """Vectorized world (N,2) -> integer cell indices (ix, iy) arrays."""
        ix = np.floor((pts[..., 0] - self.origin[0]) / self.resolution + self.height / 2).astype(int)
        iy = np.floor((pts[..., 1] - self.origin[1]) / self.resolution + self.width / 2).astype(int)
        return ix, iy


@dataclass(frozen=True)
class OccupancyGrid:
    """Integer occupancy percentages in [0, 100]; unknown cells are 50."""

    geometry: GridGeometry
    cells: np.ndarray  # shape (height, width), dtype int16

    @staticmethod
    def unknown(geometry: GridGeometry) -> "OccupancyGrid":
        return OccupancyGrid(geometry, np.full((geometry.height, geometry.width), 50, dtype=np.int16))

    @staticmethod
    def empty(geometry: GridGeometry) -> "OccupancyGrid":
        return OccupancyGrid(geometry, np.zeros((geometry.height, geometry.width), dtype=np.int16))

    def occupied_mask(self, pessimistic_unknown: bool = False) -> np.ndarray:
        if pessimistic_unknown:
            return self.cells >= 50
        return self.cells > 50


@dataclass(frozen=True)
class DiscrepancyCostMap:
    """Real-valued cost map with a lethal tier at exactly ``lethal_threshold``."""

    geometry: GridGeometry
    cells: np.ndarray  # float64
    lethal_threshold: float
    buffer_cells: int


# ---------------------------------------------------------------------------
# Obstacles


@dataclass(frozen=True)
class Box:
    """Axis-aligned box in world coordinates."""

    xmin: float
    ymin: float
    xmax: float
    ymax: float

    def contains(self, pts: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(pts)
        return ((pts[:, 0] >= self.xmin) & (pts[:, 0] <= self.xmax)
                & (pts[:, 1] >= self.ymin) & (pts[:, 1] <= self.ymax))

    def distance(self, pts: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(pts)
        dx = np.maximum(np.maximum(self.xmin - pts[:, 0], pts[:, 0] - self.xmax), 0.0)
        dy = np.maximum(np.maximum(self.ymin - pts[:, 1], pts[:, 1] - self.ymax), 0.0)
        return np.hypot(dx, dy)


@dataclass(frozen=True)
class Disc:
    """Disc obstacle in world coordinates."""

    cx: float
    cy: float
    radius: float

    def contains(self, pts: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(pts)
        return np.hypot(pts[:, 0] - self.cx, pts[:, 1] - self.cy) <= self.radius

    def distance(self, pts: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(pts)
        return np.maximum(np.hypot(pts[:, 0] - self.cx, pts[:, 1] - self.cy) - self.radius, 0.0)


@dataclass(frozen=True)
class ObstacleSet:
    """Immutable collection of boxes and discs."""

    obstacles: tuple = ()

    def contains(self, pts: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(pts)
        hit = np.zeros(len(pts), dtype=bool)
        for ob in self.obstacles:
            hit |= ob.contains(pts)
        return hit

    def distance(self, pts: np.ndarray) -> np.ndarray:
        """Distance to the nearest obstacle boundary (0 inside)."""
        pts = np.atleast_2d(pts)
        if not self.obstacles:
            return np.full(len(pts), np.inf)
        return np.min(np.stack([ob.distance(pts) for ob in self.obstacles]), axis=0)

    def __len__(self):
        return len(self.obstacles)


# ---------------------------------------------------------------------------
# Operations


def buffer_cells(r_tube: float, r_ego: float, r_map: float) -> int:
    """Collision-buffer size in cells: ceil((r_tube + r_ego) / r_map).

    The 1e-9 slack guards against float noise pushing exact multiples up a cell.
    """
    if r_tube < 0.0 or r_ego <= 0.0 or r_map <= 0.0:
        raise ValueError("radii and resolution must be positive (r_tube may be zero)")
    return int(math.ceil((r_tube + r_ego) / r_map - 1e-9))


def rasterize(obstacles: ObstacleSet, geometry: GridGeometry) -> OccupancyGrid:
    """Ground-truth grid: cells whose center lies inside any obstacle are 100."""
    ix, iy = np.meshgrid(np.arange(geometry.height), np.arange(geometry.width), indexing="ij")
    cx = (ix - geometry.height / 2 + 0.5) * geometry.resolution + geometry.origin[0]
    cy = (iy - geometry.width / 2 + 0.5) * geometry.resolution + geometry.origin[1]
    pts = np.column_stack([cx.ravel(), cy.ravel()])
    inside = obstacles.contains(pts).reshape(geometry.height, geometry.width)
    cells = np.where(inside, 100, 0).astype(np.int16)
    return OccupancyGrid(geometry, cells)


@dataclass(frozen=True)
class ScanResult:
    """New grid snapshot plus bookkeeping from one simulated scan."""

    grid: OccupancyGrid
    hits: int
    changed_cells: int
    out_of_map: bool


def sensor_update(grid: OccupancyGrid, pose: Pose, obstacles: ObstacleSet,
                  beam_count: int = 60, max_range: float = 5.0,
                  free_step: int = 50, hit_step: int = 50) -> ScanResult:
    """Cast beams from the pose and update traversed/hit cells.

    Cells crossed before a hit move toward 0 by ``free_step``; hit cells move
    toward 100 by ``hit_step``. A static scene converges after a couple of
    scans, after which the update is idempotent. A pose outside the map
    updates nothing and flags out_of_map.
    """
    if beam_count < 1:
        raise ValueError(f"beam_count must be >= 1, got {beam_count}")
    geo = grid.geometry
    ix0, iy0 = geo.world_to_cell(pose.x, pose.y)
    if not geo.in_bounds(ix0, iy0):
        return ScanResult(grid, hits=0, changed_cells=0, out_of_map=True)

    step = geo.resolution / 4.0
    n_steps = int(math.ceil(max_range / step))
    angles = pose.theta + np.arange(beam_count) * (2.0 * math.pi / beam_count)
    ts = (np.arange(1, n_steps + 1) * step)                      # (S,)
    dx = np.cos(angles)[:, None] * ts[None, :]                   # (B, S)
    dy = np.sin(angles)[:, None] * ts[None, :]
    px = pose.x + dx
    py = pose.y + dy
    pts = np.column_stack([px.ravel(), py.ravel()])
    inside = obstacles.contains(pts).reshape(beam_count, n_steps)

    # first hit index per beam; beams with no hit run to max range
    any_hit = inside.any(axis=1)
    first_hit = np.where(any_hit, inside.argmax(axis=1), n_steps)

    ixs, iys = geo.cells_to_indices(pts.reshape(beam_count, n_steps, 2))
    in_map = (ixs >= 0) & (ixs < geo.height) & (iys >= 0) & (iys < geo.width)
    step_idx = np.broadcast_to(np.arange(n_steps), (beam_count, n_steps))
    free_mask = (step_idx < first_hit[:, None]) & in_map
    hit_mask = (step_idx == first_hit[:, None]) & in_map

    linear = ixs * geo.width + iys
    hit_lin = np.unique(linear[hit_mask])
    free_lin = np.setdiff1d(np.unique(linear[free_mask]), hit_lin, assume_unique=True)

    cells = grid.cells.copy()
    before = grid.cells
    flat = cells.ravel()
    flat[free_lin] = np.maximum(0, flat[free_lin] - free_step)
    flat[hit_lin] = np.minimum(100, flat[hit_lin] + hit_step)
    changed = int(np.count_nonzero(cells != before))
    return ScanResult(OccupancyGrid(geo, cells), hits=int(hit_lin.size),
                      changed_cells=changed, out_of_map=False)


def _lethal_structure(n_eps: int) -> np.ndarray:
    """Offsets whose cell area is reached by a disc of radius n_eps cells."""
    offs = np.arange(-n_eps, n_eps + 1)
    di, dj = np.meshgrid(offs, offs, indexing="ij")
    gap_i = np.maximum(np.abs(di) - 0.5, 0.0)
    gap_j = np.maximum(np.abs(dj) - 0.5, 0.0)
    return np.hypot(gap_i, gap_j) <= n_eps + 1e-12


def inflate(grid: OccupancyGrid, n_eps: int, alpha_shift: float = 0.1,
            lethal: float = 13500.0, pessimistic_unknown: bool = False) -> DiscrepancyCostMap:
    """Two-tier discrepancy-aware cost map.

    Lethal tier: every cell within the buffer distance (n_eps cells,
    point-to-cell-area metric) of an occupied cell is set to exactly
    ``lethal``. Soft tier: remaining cells get the shifted-occupancy sum
    sum_{i,j in [-n_eps, n_eps]} alpha_shift * occ/100 / sqrt(i^2 + j^2 + 1),
    capped at ``lethal``.
    """
    if n_eps < 0:
        raise ValueError(f"n_eps must be nonnegative, got {n_eps}")
    occ = grid.occupied_mask(pessimistic_unknown=pessimistic_unknown)

    offs = np.arange(-n_eps, n_eps + 1)
    di, dj = np.meshgrid(offs, offs, indexing="ij")
    kernel = alpha_shift / np.sqrt(di ** 2 + dj ** 2 + 1.0)
    # FFT convolutions: entries are counts/near-integers, so the threshold
    # sits far above the transform's rounding noise
    soft = signal.fftconvolve(grid.cells.astype(float) / 100.0, kernel, mode="same")
    soft = np.where(soft < 1e-12, 0.0, np.minimum(soft, lethal))

    hit = signal.fftconvolve(occ.astype(float), _lethal_structure(n_eps).astype(float), mode="same")
    lethal_mask = hit > 0.5
    cost = np.where(lethal_mask, float(lethal), soft)
    return DiscrepancyCostMap(grid.geometry, cost, float(lethal), n_eps)


def query_cost(costmap: DiscrepancyCostMap, x: float, y: float) -> float:
    """Cost at a world position; outside the map is lethal."""
    ix, iy = costmap.geometry.world_to_cell(x, y)
    if not costmap.geometry.in_bounds(ix, iy):
        return costmap.lethal_threshold
    return float(costmap.cells[ix, iy])


def query_costs(costmap: DiscrepancyCostMap, pts: np.ndarray) -> np.ndarray:
    """Vectorized query_cost over an (..., 2) array of world positions."""
    pts = np.asarray(pts, dtype=float)
    ix, iy = costmap.geometry.cells_to_indices(pts)
    geo = costmap.geometry
    inb = (ix >= 0) & (ix < geo.height) & (iy >= 0) & (iy < geo.width)
    out = np.full(ix.shape, costmap.lethal_threshold, dtype=float)
    out[inb] = costmap.cells[ix[inb], iy[inb]]
    return out


# ---------------------------------------------------------------------------
# Persistence

GRID_MAGIC = "safenav-grid 1"


def save_grid(path, grid) -> None:
    """Portable text format: header lines then a row-major payload."""
    is_cost = isinstance(grid, DiscrepancyCostMap)
    geo = grid.geometry
    with open(path, "w") as fh:
        fh.write(f"{GRID_MAGIC}\n")
        fh.write(f"kind {'costmap' if is_cost else 'occupancy'}\n")
        fh.write(f"height {geo.height}\nwidth {geo.width}\n")
        fh.write(f"resolution {geo.resolution!r}\n")
        fh.write(f"origin {geo.origin[0]!r} {geo.origin[1]!r}\n")
        if is_cost:
            fh.write(f"lethal {grid.lethal_threshold!r}\n")
            fh.write(f"buffer {grid.buffer_cells}\n")
        fh.write("data\n")
        fmt = "%.17g" if is_cost else "%d"
        np.savetxt(fh, grid.cells, fmt=fmt)


def load_grid(path):
    """Read a grid or cost map written by save_grid."""
    with open(path) as fh:
        magic = fh.readline().strip()
        if magic != GRID_MAGIC:
            raise ValueError(f"{path}: not a safenav grid file (header {magic!r})")
        header = {}
        for line in fh:
            line = line.strip()
            if line == "data":
                break
            key, *vals = line.split()
            header[key] = vals
        cells = np.loadtxt(fh, ndmin=2)
    geo = GridGeometry(
        height=int(header["height"][0]),
        width=int(header["width"][0]),
        resolution=float(header["resolution"][0]),
        origin=(float(header["origin"][0]), float(header["origin"][1])),
    )
    if header["kind"][0] == "costmap":
        return DiscrepancyCostMap(geo, cells.astype(float), float(header["lethal"][0]),
                                  int(header["buffer"][0]))
    return OccupancyGrid(geo, np.rint(cells).astype(np.int16))


def save_pgm(path, grid: OccupancyGrid) -> None:
    """Export an occupancy grid as an ASCII portable graymap for debugging."""
    geo = grid.geometry
    with open(path, "w") as fh:
        fh.write(f"P2\n{geo.width} {geo.height}\n100\n")
        np.savetxt(fh, grid.cells, fmt="%d")


def load_pgm(path, resolution: float = 0.05, origin=(0.0, 0.0)) -> OccupancyGrid:
    """Import an ASCII portable graymap as an occupancy grid."""
    with open(path) as fh:
        magic = fh.readline().strip()
        if magic != "P2":
            raise ValueError(f"{path}: only ASCII (P2) graymaps are supported")
        dims = fh.readline().split()
        width, height = int(dims[0]), int(dims[1])
        maxval = int(fh.readline().strip())
        cells = np.loadtxt(fh, ndmin=2)
    if maxval != 100:
        cells = cells * (100.0 / maxval)
    geo = GridGeometry(height=height, width=width, resolution=resolution, origin=tuple(origin))
    return OccupancyGrid(geo, np.rint(cells).astype(np.int16))
