import math

import numpy as np
import pytest

from safenav.core import Pose
from safenav.gridmap import (
    Box,
    Disc,
    DiscrepancyCostMap,
    GridGeometry,
    ObstacleSet,
    OccupancyGrid,
    buffer_cells,
    inflate,
    load_grid,
    load_pgm,
    query_cost,
    query_costs,
    rasterize,
    save_grid,
    save_pgm,
    sensor_update,
)

from helpers import brute_force_lethal_mask, soft_tier_oracle

SMALL = GridGeometry(height=20, width=20, resolution=0.05)


class TestBufferCells:
    def test_reference_case(self):
        assert buffer_cells(0.090, 0.39, 0.05) == 10

    def test_minimal(self):
        assert buffer_cells(0.0, 0.05, 0.05) == 1

    def test_formula_is_normative(self):
        assert buffer_cells(0.15, 0.40, 0.05) == 11

    def test_exact_multiple_not_bumped(self):
        assert buffer_cells(0.1, 0.4, 0.05) == 10


class TestRasterize:
    def test_empty(self):
        g = rasterize(ObstacleSet(), SMALL)
        assert not g.cells.any()

    def test_single_cell(self):
        # box around exactly one cell center
        geo = SMALL
        cx, cy = geo.cell_center(10, 10)
        g = rasterize(ObstacleSet((Box(cx - 0.01, cy - 0.01, cx + 0.01, cy + 0.01),)), geo)
        assert g.cells.sum() == 100
        assert g.cells[10, 10] == 100

    def test_four_cells(self):
        g = rasterize(ObstacleSet((Box(0.0, 0.0, 0.1, 0.1),)), SMALL)
        occ = np.argwhere(g.cells == 100)
        assert len(occ) == 4
        assert {tuple(c) for c in occ} == {(10, 10), (10, 11), (11, 10), (11, 11)}

    def test_disc(self):
        g = rasterize(ObstacleSet((Disc(0.0, 0.0, 0.08),)), SMALL)
        ix, iy = SMALL.world_to_cell(0.0, 0.0)
        assert g.cells[ix, iy] == 100


class TestSensorUpdate:
    def test_clear_scene(self):
        grid = OccupancyGrid.unknown(SMALL)
        res = sensor_update(grid, Pose(0, 0, 0), ObstacleSet(), beam_count=36, max_range=0.4)
        assert res.hits == 0
        assert not res.out_of_map
        touched = res.grid.cells != 50
        assert touched.any()
        assert np.all(res.grid.cells[touched] == 0)

    def test_wall_ahead(self):
        # ray-march oracle on a small grid: cells before the wall free, wall hit
        wall = ObstacleSet((Box(0.2, -0.5, 0.3, 0.5),))
        grid = OccupancyGrid.unknown(SMALL)
        res = sensor_update(grid, Pose(0, 0, 0), wall, beam_count=1, max_range=1.0)
        assert res.hits == 1
        wall_cell = SMALL.world_to_cell(0.2, 0.0)
        assert res.grid.cells[wall_cell] == 100
        for x in [0.05, 0.10, 0.15]:
            assert res.grid.cells[SMALL.world_to_cell(x, 0.0)] == 0

    def test_pose_outside(self):
        grid = OccupancyGrid.unknown(SMALL)
        res = sensor_update(grid, Pose(10.0, 10.0, 0.0), ObstacleSet())
        assert res.out_of_map
        assert res.grid is grid

    def test_idempotent_after_convergence(self):
        wall = ObstacleSet((Box(0.2, -0.5, 0.3, 0.5),))
        grid = OccupancyGrid.unknown(SMALL)
        pose = Pose(0, 0, 0)
        for _ in range(3):
            grid = sensor_update(grid, pose, wall, beam_count=24, max_range=1.0).grid
        res = sensor_update(grid, pose, wall, beam_count=24, max_range=1.0)
        assert res.changed_cells == 0


def single_cell_grid(n=15):
    geo = GridGeometry(height=n, width=n, resolution=0.05)
    cells = np.zeros((n, n), dtype=np.int16)
    cells[n // 2, n // 2] = 100
    return OccupancyGrid(geo, cells)


class TestInflate:
    def test_empty(self):
        cm = inflate(OccupancyGrid.empty(SMALL), 3, lethal=100.0)
        assert not cm.cells.any()

    def test_single_cell_neps1(self):
        g = single_cell_grid()
        cm = inflate(g, 1, alpha_shift=0.1, lethal=100.0)
        c = 7
        lethal = np.argwhere(cm.cells >= 100.0)
        assert {tuple(x) for x in lethal} == {(c + i, c + j) for i in (-1, 0, 1) for j in (-1, 0, 1)}
        assert cm.cells[c + 2, c] == 0.0

    def test_single_cell_neps2_brute_force(self):
        g = single_cell_grid()
        cm = inflate(g, 2, alpha_shift=0.1, lethal=100.0)
        c = 7
        assert cm.cells[c + 2, c] == 100.0           # straight offset 2 is buffered
        assert cm.cells[c + 3, c] == 0.0             # out of the shift window
        # corner of the shift window is soft, not lethal
        expected = soft_tier_oracle(g, 2, 0.1)
        assert cm.cells[c + 2, c + 2] == pytest.approx(expected[c + 2, c + 2])
        assert cm.cells[c + 2, c + 2] == pytest.approx(0.1 / 3.0)

    def test_soft_tier_matches_oracle(self):
        rng = np.random.default_rng(0)
        geo = GridGeometry(height=12, width=17, resolution=0.1)
        cells = (rng.uniform(size=(12, 17)) < 0.15).astype(np.int16) * 100
        grid = OccupancyGrid(geo, cells)
        n_eps = 2
        cm = inflate(grid, n_eps, alpha_shift=0.1, lethal=1e4)
        oracle = soft_tier_oracle(grid, n_eps, 0.1)
        soft = cm.cells < 1e4
        assert np.allclose(cm.cells[soft], oracle[soft])

    def test_lethal_iff_oracle_small(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            h, w = rng.integers(8, 30, size=2)
            geo = GridGeometry(height=int(h), width=int(w), resolution=0.05)
            cells = (rng.uniform(size=(h, w)) < 0.1).astype(np.int16) * 100
            grid = OccupancyGrid(geo, cells)
            n_eps = int(rng.integers(0, 6))
            cm = inflate(grid, n_eps, alpha_shift=0.1, lethal=1e4)
            assert np.array_equal(cm.cells >= 1e4, brute_force_lethal_mask(grid, n_eps))

    def test_monotone_in_neps(self):
        rng = np.random.default_rng(2)
        geo = GridGeometry(height=25, width=25, resolution=0.05)
        cells = (rng.uniform(size=(25, 25)) < 0.1).astype(np.int16) * 100
        grid = OccupancyGrid(geo, cells)
        prev = inflate(grid, 0, lethal=1e4).cells
        for n in range(1, 5):
            cur = inflate(grid, n, lethal=1e4).cells
            assert np.all(cur >= prev - 1e-12)
            prev = cur

    def test_translation_equivariance(self):
        geo = GridGeometry(height=30, width=30, resolution=0.05)
        box = Box(-0.2, -0.1, -0.1, 0.0)
        shifted = Box(-0.2 + 0.15, -0.1 + 0.2, -0.1 + 0.15, 0.0 + 0.2)  # 3 and 4 cells
        a = inflate(rasterize(ObstacleSet((box,)), geo), 2, lethal=1e4).cells
        b = inflate(rasterize(ObstacleSet((shifted,)), geo), 2, lethal=1e4).cells
        assert np.allclose(a[2:-5, 2:-6], b[5:-2, 6:-2])

    def test_unknown_cells_not_lethal_by_default(self):
        grid = OccupancyGrid.unknown(SMALL)
        cm = inflate(grid, 2, lethal=1e4)
        assert not (cm.cells >= 1e4).any()
        pess = inflate(grid, 2, lethal=1e4, pessimistic_unknown=True)
        assert (pess.cells >= 1e4).all()

    def test_soft_below_lethal(self):
        g = single_cell_grid()
        cm = inflate(g, 3, alpha_shift=0.1, lethal=1e4)
        soft = cm.cells < 1e4
        assert np.all(cm.cells[soft] >= 0.0)
        assert np.all(cm.cells[soft] < 1e4)


class TestQueryCost:
    def test_center_cell_index(self):
        geo = GridGeometry(height=200, width=200, resolution=0.05)
        assert geo.world_to_cell(0.0, 0.0) == (100, 100)

    def test_out_of_map_lethal(self):
        cm = inflate(OccupancyGrid.empty(SMALL), 1, lethal=777.0)
        assert query_cost(cm, 100.0, 0.0) == 777.0

    def test_floor_semantics_on_boundary(self):
        geo = GridGeometry(height=200, width=200, resolution=0.05)
        # a boundary position belongs to the cell whose interval starts there
        assert geo.world_to_cell(0.05, 0.0)[0] == 101
        assert geo.world_to_cell(0.05 - 1e-12, 0.0)[0] == 100

    def test_vectorized_matches_scalar(self):
        rng = np.random.default_rng(3)
        geo = GridGeometry(height=30, width=30, resolution=0.05)
        cells = (rng.uniform(size=(30, 30)) < 0.2).astype(np.int16) * 100
        cm = inflate(OccupancyGrid(geo, cells), 1, lethal=500.0)
        pts = rng.uniform(-1.0, 1.0, size=(50, 2))
        vec = query_costs(cm, pts)
        for p, v in zip(pts, vec):
            assert v == query_cost(cm, p[0], p[1])


class TestPersistence:
    def test_occupancy_roundtrip(self, tmp_path):
        rng = np.random.default_rng(4)
        cells = rng.integers(0, 101, size=(12, 9)).astype(np.int16)
        g = OccupancyGrid(GridGeometry(height=12, width=9, resolution=0.1, origin=(0.5, -0.25)), cells)
        path = tmp_path / "g.grid"
        save_grid(path, g)
        back = load_grid(path)
        assert back.geometry == g.geometry
        assert np.array_equal(back.cells, g.cells)

    def test_costmap_roundtrip(self, tmp_path):
        g = single_cell_grid()
        cm = inflate(g, 2, lethal=1234.5)
        path = tmp_path / "c.grid"
        save_grid(path, cm)
        back = load_grid(path)
        assert isinstance(back, DiscrepancyCostMap)
        assert back.lethal_threshold == 1234.5
        assert back.buffer_cells == 2
        assert np.allclose(back.cells, cm.cells)

    def test_pgm_roundtrip(self, tmp_path):
        g = single_cell_grid()
        path = tmp_path / "g.pgm"
        save_pgm(path, g)
        back = load_pgm(path, resolution=g.geometry.resolution)
        assert np.array_equal(back.cells, g.cells)
