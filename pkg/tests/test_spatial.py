import math
from collections import deque

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from subtad.spatial import (CellTrajectory, GeoPoint, H3Indexer, HexGridIndexer, InvalidCoordinateError,
                            RawTrajectory, ResolutionMismatchError, bfs_distances, dedup_cells,
                            hop_distance, indexer_from_manifest, iter_windows, k_hop_neighbors,
                            match_trajectory, read_cell_trajectories, read_trajectories,
                            write_cell_trajectories, write_trajectories_csv)


def bfs_oracle(indexer, start, depth):
    seen = {start: 0}
    q = deque([start])
    while q:
        c = q.popleft()
        for n in indexer.neighbors(c):
            if n not in seen:
                seen[n] = seen[c] + 1
                q.append(n)
    return {c for c, d in seen.items() if d <= depth}, seen


def scan_oracle(cells):
    out = []
    prev = object()
    for c in cells:
        if c != prev:
            out.append(c)
            prev = c
    return out


class TestHexGrid:
    def test_same_hexagon_same_id(self, grid):
        c = grid.cell_at(5, 5)
        lon, lat = grid.center(c)
        assert grid.index(lon + 1e-5, lat) == grid.index(lon, lat - 1e-5) == c

    def test_every_centre_maps_to_its_cell(self, grid):
        for c in grid.universe():
            assert grid.index(*grid.center(c)) == c

    def test_boundary_points_stay_near(self, grid):
        c = grid.cell_at(4, 6)
        cx, cy = grid.center(c)
        for x, y in grid.boundary(c):
            # pull each vertex slightly toward the centre: still inside
            assert grid.index(cx + 0.95 * (x - cx), cy + 0.95 * (y - cy)) == c

    def test_disk_sizes(self, grid):
        c = grid.cell_at(6, 6)
        assert grid.disk(c, 0) == {c}
        assert len(grid.disk(c, 1)) == 7
        assert len(grid.disk(c, 2)) == 19

    @pytest.mark.parametrize("k", [1, 2, 3])
    def test_disk_matches_bfs(self, grid, k):
        rng = np.random.default_rng(k)
        for c in rng.choice(grid.universe(), 20, replace=False):
            assert k_hop_neighbors(int(c), k, grid) == bfs_oracle(grid, int(c), k)[0]

    def test_distance_matches_bfs(self, grid):
        rng = np.random.default_rng(7)
        cells = grid.universe()
        for _ in range(50):
            a, b = (int(x) for x in rng.choice(cells, 2))
            assert hop_distance(a, b, grid) == bfs_oracle(grid, a, 100)[1][b]

    def test_distance_basics(self, grid):
        c = grid.cell_at(3, 3)
        assert hop_distance(c, c, grid) == 0
        for n in grid.neighbors(c):
            assert hop_distance(c, n, grid) == 1

    @settings(max_examples=200, deadline=None)
    @given(st.integers(0, 143), st.integers(0, 143), st.integers(0, 143))
    def test_triangle_inequality(self, a, b, c):
        g = HexGridIndexer(12, 12)
        assert g.distance(a, c) <= g.distance(a, b) + g.distance(b, c)

    def test_bfs_distances_depth_limited(self, grid):
        c = grid.cell_at(6, 6)
        d = bfs_distances(c, grid, 2)
        assert set(d) == grid.disk(c, 2)
        assert all(v == grid.distance(c, x) for x, v in d.items())

    def test_edge_cells_have_fewer_neighbours(self, grid):
        assert len(grid.neighbors(0)) < 6

    def test_invalid_cell_rejected(self, grid):
        with pytest.raises(ResolutionMismatchError):
            hop_distance(0, 10_000, grid)

    def test_bad_coordinates(self, grid):
        with pytest.raises(InvalidCoordinateError):
            grid.index(float("nan"), 0.0)
        with pytest.raises(InvalidCoordinateError):
            grid.index(0.0, 95.0)

    def test_manifest_round_trip(self):
        g = HexGridIndexer(7, 9, 0.002, (1.5, -2.25), resolution=3)
        h = indexer_from_manifest(g.manifest())
        assert (h.width, h.height, h.size, h.origin, h.resolution) == (7, 9, 0.002, (1.5, -2.25), 3)


class TestH3:
    def test_parent_of_finer_cell(self):
        # aperture-7 children overhang their parent, so the hierarchy is
        # checked through the child's centre rather than the raw point
        rng = np.random.default_rng(0)
        fine, coarse = H3Indexer(10), H3Indexer(9)
        for lon, lat in zip(rng.uniform(-8.7, -8.5, 100), rng.uniform(41.1, 41.2, 100)):
            child = fine.index(lon, lat)
            assert fine.parent(child, 9) == coarse.index(*fine.center(child))

    def test_disk_and_distance(self):
        h = H3Indexer(9)
        c = h.index(-8.61, 41.15)
        assert len(h.disk(c, 1)) == 7
        assert all(h.distance(c, n) == 1 for n in h.neighbors(c))
        assert k_hop_neighbors(c, 3, h) == bfs_oracle_h3(h, c, 3)

    def test_centre_identity(self):
        h = H3Indexer(9)
        c = h.index(-8.61, 41.15)
        assert h.index(*h.center(c)) == c

    def test_resolution_mismatch(self):
        a = H3Indexer(9).index(-8.61, 41.15)
        b = H3Indexer(10).index(-8.61, 41.15)
        with pytest.raises(ResolutionMismatchError):
            hop_distance(a, b, H3Indexer(9))


def bfs_oracle_h3(h, c, k):
    frontier, seen = {c}, {c}
    for _ in range(k):
        frontier = {n for f in frontier for n in h.neighbors(f)} - seen
        seen |= frontier
    return seen


class TestMatching:
    def test_dedup_example(self):
        assert dedup_cells([1, 1, 2, 2, 1]) == [1, 2, 1]

    def test_single_cell_trajectory(self, grid):
        lon, lat = grid.center(30)
        t = RawTrajectory("a", "r", [GeoPoint(lon, lat, i) for i in range(5)])
        assert match_trajectory(t, grid).cells == [30]

    def test_matches_scan_oracle(self, grid, rng):
        for _ in range(20):
            # a bounded random walk over cell centres with repeated fixes
            c = int(rng.choice(grid.universe()))
            pts = []
            for _ in range(50):
                if rng.random() < 0.4:
                    c = int(rng.choice(grid.neighbors(c)))
                lon, lat = grid.center(c)
                pts.append(GeoPoint(lon + rng.normal(0, 1e-5), lat + rng.normal(0, 1e-5)))
            t = RawTrajectory("x", "r", pts)
            assert match_trajectory(t, grid).cells == scan_oracle([grid.index(p.lon, p.lat) for p in pts])

    def test_empty_trajectory(self, grid):
        with pytest.raises(ValueError):
            match_trajectory(RawTrajectory("e", "r", []), grid)

    def test_windows(self):
        assert list(iter_windows([1, 2, 3, 4], 3)) == [(1, 2, 3), (2, 3, 4)]
        assert list(iter_windows([1, 2], 3)) == [(1, 2)]


class TestIO:
    def test_csv_round_trip(self, tmp_path):
        trajs = [RawTrajectory("t1", "A", [GeoPoint(0.1, 0.2, 1.0), GeoPoint(0.3, 0.4, 2.0)]),
                 RawTrajectory("t2", "B", [GeoPoint(-1.0, 1.0, 5.0)])]
        p = tmp_path / "pts.csv"
        write_trajectories_csv(trajs, p)
        back = read_trajectories(p)
        assert [(t.traj_id, t.od, t.points) for t in back] == [(t.traj_id, t.od, t.points) for t in trajs]

    def test_cell_ndjson_round_trip(self, tmp_path):
        trajs = [CellTrajectory("a", "R0", [1, 2, 3]), CellTrajectory("b", "R1", [4])]
        p = tmp_path / "cells.ndjson"
        write_cell_trajectories(trajs, p)
        assert read_cell_trajectories(p) == trajs

    def test_ndjson_points(self, tmp_path):
        p = tmp_path / "pts.ndjson"
        p.write_text('{"traj_id": "a", "route_id": "R", "lon": 0.5, "lat": 0.5, "timestamp": 3}\n'
                     '{"traj_id": "a", "route_id": "R", "lon": 0.6, "lat": 0.5, "timestamp": 4}\n')
        (t,) = read_trajectories(p)
        assert len(t.points) == 2 and math.isclose(t.points[1].lon, 0.6)
