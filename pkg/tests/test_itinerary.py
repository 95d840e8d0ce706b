import json

import pytest

from subtad.graphs import HierarchicalGraph
from subtad.itinerary import (frequent_cells, load_stats, normality_score, pair_weight, route_subgraph,
                              save_stats, stats_by_od)
from subtad.spatial import CellTrajectory

A, B, C, D = 1, 2, 3, 4


def three_trips():
    return [CellTrajectory("1", "r", [A, B, C]), CellTrajectory("2", "r", [A, C]),
            CellTrajectory("3", "r", [A, C, D])]


class TestFrequentCells:
    def test_hand_counts(self):
        s = frequent_cells(three_trips(), 0.5)
        assert s.visit_freq[A] == 1.0 and A in s.s_pos
        assert s.visit_freq[B] == pytest.approx(1 / 3) and B not in s.s_pos
        assert s.s_pos == {A, C}

    def test_multiplicity(self):
        s = frequent_cells([CellTrajectory("1", "r", [A, B, A, B, A])], 1.0)
        assert s.visit_freq[A] == 3.0 and A in s.s_pos
        assert s.visit_freq[B] == 2.0 and B in s.s_pos

    def test_threshold_is_strict(self):
        s = frequent_cells([CellTrajectory(str(i), "r", [A] if i < 2 else [B]) for i in range(4)], 0.5)
        assert A not in s.s_pos

    def test_single_od_required(self):
        with pytest.raises(ValueError):
            frequent_cells([CellTrajectory("1", "a", [A]), CellTrajectory("2", "b", [A])])
        with pytest.raises(ValueError):
            frequent_cells([])
        with pytest.raises(ValueError):
            frequent_cells(three_trips(), 0.0)

    def test_grouping(self):
        trajs = three_trips() + [CellTrajectory("4", "q", [D])]
        stats = stats_by_od(trajs, 0.5)
        assert set(stats) == {"r", "q"} and stats["q"].s_pos == {D}


class TestNormality:
    def test_examples(self):
        s = frequent_cells([CellTrajectory("1", "r", [A, B, C])], 0.5)
        assert normality_score([A, B, C, D], s) == 0.75
        assert normality_score([A, B], s) == 1.0
        assert normality_score([D, D], s) == 0.0
        with pytest.raises(ValueError):
            normality_score([], s)


class TestPairWeight:
    def test_bands(self):
        assert pair_weight(0.95, 0.9, 0.5) == 1
        assert pair_weight(0.7, 0.9, 0.5) == 0
        assert pair_weight(0.3, 0.9, 0.5) == -1
        assert pair_weight(0.5, 0.9, 0.5) == -1
        assert pair_weight(0.9, 0.9, 0.5) == 1

    def test_bad_deltas(self):
        with pytest.raises(ValueError):
            pair_weight(0.5, 0.4, 0.5)


class TestRouteSubgraph:
    def graph(self, rng):
        verts = set(range(30))
        edges = {(int(a), int(b)): 1 for a, b in rng.integers(0, 30, (80, 2)) if a != b}
        return HierarchicalGraph(verts, edges, 0)

    def stats_with(self, cells):
        trajs = [CellTrajectory("1", "r", list(cells) or [999])]
        s = frequent_cells(trajs, 0.5)
        return s if cells else type(s)(s.od, {}, frozenset(), 0.5, 1)

    def test_empty(self, rng):
        sg = route_subgraph(self.stats_with([]), self.graph(rng))
        assert sg.vertices == () and sg.edges == frozenset()

    def test_full(self, rng):
        g = self.graph(rng)
        sg = route_subgraph(self.stats_with(sorted(g.vertices)), g)
        assert sg.edges == set(g.edges)

    def test_filter_oracle(self, rng):
        g = self.graph(rng)
        for _ in range(10):
            pos = [int(c) for c in rng.choice(30, 12, replace=False)]
            sg = route_subgraph(self.stats_with(pos), g)
            assert sg.edges == {(u, v) for (u, v) in g.edges if u in pos and v in pos}
            assert sg.vertices == tuple(sorted(pos))


def test_stats_file_round_trip(tmp_path):
    stats = stats_by_od(three_trips() + [CellTrajectory("4", "q", [D, A])], 0.5)
    save_stats(stats, tmp_path / "s.json", 0.8, 0.5)
    back = load_stats(tmp_path / "s.json")
    assert set(back) == set(stats)
    for od in stats:
        assert back[od].s_pos == stats[od].s_pos
        assert back[od].visit_freq == stats[od].visit_freq
    assert json.loads((tmp_path / "s.json").read_text())["delta1"] == 0.8
