import itertools

import numpy as np
import pytest

from subtad.graphs import (CONTEXT, MOBILITY, ROAD, HierarchicalGraph, SourceGraph, WalkParams,
                           build_mobility_graph, load_embeddings, map_graph, merge_graphs,
                           random_embedding_table, random_walks, read_context_graph, read_graph,
                           read_road_network, road_graph_from_grid, save_embeddings,
                           train_cell_embeddings, write_graph)
from subtad.spatial import CellTrajectory, GeoPoint, HexGridIndexer, ResolutionMismatchError


def random_source(rng, kind, n_vertices=15, n_edges=30, universe=60):
    verts = set(int(v) for v in rng.choice(universe, n_vertices, replace=False))
    vl = sorted(verts)
    edges = {(int(a), int(b)) for a, b in rng.choice(vl, (n_edges, 2)) if a != b}
    return SourceGraph(kind, verts, edges, 0)


class TestMapGraph:
    def test_intra_cell_edge_dropped(self, grid):
        lon, lat = grid.center(40)
        a, b = GeoPoint(lon, lat), GeoPoint(lon + 1e-5, lat)
        g = map_graph(SourceGraph("road", {a, b}, {(a, b)}), grid)
        assert g.vertices == {40} and g.edges == set()

    def test_parallel_edges_collapse(self, grid):
        pa = [GeoPoint(*grid.center(40)), GeoPoint(grid.center(40)[0] + 1e-5, grid.center(40)[1])]
        pb = [GeoPoint(*grid.center(41)), GeoPoint(grid.center(41)[0] + 1e-5, grid.center(41)[1])]
        g = map_graph(SourceGraph("road", set(pa + pb), {(pa[0], pb[0]), (pa[1], pb[1])}), grid)
        assert g.edges == {(40, 41)}

    def test_rule_oracle(self, grid, rng):
        centres = [grid.center(int(c)) for c in rng.choice(grid.universe(), 80)]
        pts = [GeoPoint(x + rng.uniform(-3e-4, 3e-4), y + rng.uniform(-3e-4, 3e-4)) for x, y in centres]
        edges = {(pts[i], pts[j]) for i, j in rng.integers(0, 80, (150, 2)) if i != j}
        g = map_graph(SourceGraph("context", set(pts), edges), grid)
        want_e = set()
        for u, v in edges:
            cu, cv = grid.index(u.lon, u.lat), grid.index(v.lon, v.lat)
            if cu != cv:
                want_e.add((cu, cv))
        assert g.vertices == {grid.index(p.lon, p.lat) for p in pts}
        assert g.edges == want_e
        assert g.resolution == grid.resolution


class TestMobility:
    def test_simple(self):
        g = build_mobility_graph([CellTrajectory("a", "r", [1, 2, 3])], 0)
        assert g.edges == {(1, 2), (2, 3)} and g.vertices == {1, 2, 3}

    def test_empty(self):
        g = build_mobility_graph([], 0)
        assert g.vertices == set() and g.edges == set()

    def test_pair_scan_oracle(self, rng):
        trajs = [CellTrajectory(str(i), "r", [int(c) for c in rng.integers(0, 40, rng.integers(1, 12))])
                 for i in range(100)]
        g = build_mobility_graph(trajs, 0)
        want = set()
        for t in trajs:
            for i in range(len(t.cells) - 1):
                if t.cells[i] != t.cells[i + 1]:
                    want.add((t.cells[i], t.cells[i + 1]))
        assert g.edges == want


class TestMerge:
    def test_idempotent(self, rng):
        g = merge_graphs([random_source(rng, "road")])
        assert merge_graphs([g, g]) == g

    def test_vertex_union(self, rng):
        a, b = random_source(rng, "road"), random_source(rng, "mobility")
        assert merge_graphs([a, b]).vertices == a.vertices | b.vertices

    def test_order_independent(self, rng):
        parts = [random_source(rng, k) for k in ("road", "context", "mobility")]
        results = [merge_graphs([merge_graphs([p[0], p[1]]), p[2]]) for p in itertools.permutations(parts)]
        assert all(r == results[0] for r in results)
        # tags are the OR of the sources containing the edge
        for e, tag in results[0].edges.items():
            want = (ROAD if e in parts[0].edges else 0) | (CONTEXT if e in parts[1].edges else 0) \
                | (MOBILITY if e in parts[2].edges else 0)
            assert tag == want

    def test_resolution_mismatch(self):
        with pytest.raises(ResolutionMismatchError):
            merge_graphs([SourceGraph("road", {1}, set(), 0), SourceGraph("road", {1}, set(), 1)])

    def test_geo_keyed_rejected(self):
        with pytest.raises(ResolutionMismatchError):
            merge_graphs([SourceGraph("road", set(), set(), None)])


class TestWalks:
    def test_unbiased_transition_frequencies(self):
        g = HierarchicalGraph(set(range(16)), {e: 1 for e in map_graph(
            road_graph_from_grid(HexGridIndexer(4, 4), range(16)), HexGridIndexer(4, 4)).edges}, 0)
        walks = random_walks(g, WalkParams(walks_per_node=75, walk_length=90, p=1.0, q=1.0, seed=3))
        counts: dict = {}
        steps = 0
        for w in walks:
            for a, b in zip(w, w[1:]):
                counts.setdefault(a, {}).setdefault(b, 0)
                counts[a][b] += 1
                steps += 1
        assert steps >= 100_000
        adj = g.out_neighbors()
        for a, row in counts.items():
            total = sum(row.values())
            assert set(row) <= set(adj[a])
            for b in adj[a]:
                assert abs(row.get(b, 0) / total - 1 / len(adj[a])) < 0.05

    def test_return_parameter_biases_backtracking(self):
        idx = HexGridIndexer(5, 5)
        g = HierarchicalGraph(set(range(25)), {e: 1 for e in map_graph(road_graph_from_grid(idx, range(25)), idx).edges}, 0)

        def back_rate(p):
            ws = random_walks(g, WalkParams(walks_per_node=20, walk_length=30, p=p, q=1.0, seed=0))
            back = sum(w[i] == w[i - 2] for w in ws for i in range(2, len(w)))
            return back / sum(len(w) - 2 for w in ws)

        assert back_rate(0.1) > back_rate(10.0)

    def test_deterministic(self):
        idx = HexGridIndexer(4, 4)
        g = HierarchicalGraph(set(range(16)), {e: 1 for e in map_graph(road_graph_from_grid(idx, range(16)), idx).edges}, 0)
        params = WalkParams(walks_per_node=2, walk_length=10, p=0.5, q=2.0, seed=9)
        assert random_walks(g, params) == random_walks(g, params)


def cos(a, b):
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


class TestEmbeddings:
    def test_cliques_separate(self):
        edges = {}
        for base in (0, 10):
            for i in range(base, base + 6):
                for j in range(base, base + 6):
                    if i != j:
                        edges[(i, j)] = MOBILITY
        g = HierarchicalGraph({*range(6), *range(10, 16)}, edges, 0)
        emb = train_cell_embeddings(g, 16, WalkParams(walks_per_node=10, walk_length=20, epochs=5, seed=0))
        a, b = list(range(6)), list(range(10, 16))
        intra = np.mean([cos(emb.vector(i), emb.vector(j)) for grp in (a, b) for i in grp for j in grp if i != j])
        inter = np.mean([cos(emb.vector(i), emb.vector(j)) for i in a for j in b])
        assert intra > inter

    def test_single_vertex(self):
        emb = train_cell_embeddings(HierarchicalGraph({5}, {}, 0), 8, WalkParams(walks_per_node=2))
        assert emb.cells() == [5] and np.isfinite(emb.vector(5)).all()

    def test_empty_graph_rejected(self):
        with pytest.raises(ValueError):
            train_cell_embeddings(HierarchicalGraph(set(), {}, 0), 8)

    def test_unknown_cell_gets_fallback(self):
        emb = random_embedding_table([1, 2], 4, 0)
        assert np.array_equal(emb.vector(99), emb.vector(-3))

    def test_binary_round_trip(self, tmp_path):
        emb = random_embedding_table([3, 1, 7], 5, 2, seed=4)
        save_embeddings(emb, tmp_path / "e.bin")
        back = load_embeddings(tmp_path / "e.bin")
        assert back.dim == 5 and back.resolution == 2 and back.cells() == [1, 3, 7]
        for c in (1, 3, 7, -1, -2, -3):
            assert np.array_equal(back.vector(c), emb.vector(c))

    def test_corrupt_file(self, tmp_path):
        (tmp_path / "x.bin").write_bytes(b"nope")
        with pytest.raises(ValueError):
            load_embeddings(tmp_path / "x.bin")


class TestFiles:
    def test_graph_round_trip(self, tmp_path, rng):
        g = merge_graphs([random_source(rng, "road"), random_source(rng, "context"),
                          SourceGraph("mobility", {500}, set(), 0)])
        write_graph(g, tmp_path / "g.csv")
        assert read_graph(tmp_path / "g.csv") == g

    def test_road_network_csv(self, tmp_path, grid):
        (tmp_path / "n.csv").write_text("node_id,lon,lat\na,%r,%r\nb,%r,%r\n" % (*grid.center(20), *grid.center(21)))
        (tmp_path / "e.csv").write_text("src,dst\na,b\n")
        g = map_graph(read_road_network(tmp_path / "n.csv", tmp_path / "e.csv"), grid)
        assert g.edges == {(20, 21), (21, 20)}

    def test_context_csv_links_consecutive_stops(self, tmp_path, grid):
        rows = ["route_id,seq,lon,lat"] + [f"R,{i},{grid.center(c)[0]!r},{grid.center(c)[1]!r}"
                                           for i, c in ((1, 31), (0, 30), (2, 32))]
        (tmp_path / "ctx.csv").write_text("\n".join(rows) + "\n")
        g = map_graph(read_context_graph(tmp_path / "ctx.csv"), grid)
        assert g.edges == {(30, 31), (31, 30), (31, 32), (32, 31)}
