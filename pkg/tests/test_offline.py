import json

import numpy as np
import pytest

from subtad.offline import (NOISE, ClusterAssignment, cluster_embeddings, label_all,
                            label_offline, label_rule, load_pseudo_labels, pseudo_label_dataset,
                            save_pseudo_labels, training_windows)
from subtad.spatial import CellTrajectory

from helpers import tiny_encoder


def naive_dbscan(x, eps, min_pts, w):
    """Textbook density clustering under cosine distance, O(n^2)."""
    x = x / np.linalg.norm(x, axis=1, keepdims=True)
    n = len(x)
    dist = 1.0 - x @ x.T
    nbrs = [np.flatnonzero(dist[i] <= eps) for i in range(n)]
    core = np.array([w[nb].sum() >= min_pts for nb in nbrs])
    labels = np.full(n, NOISE)
    cid = 0
    for i in range(n):
        if not core[i] or labels[i] != NOISE:
            continue
        stack = [i]
        labels[i] = cid
        while stack:
            j = stack.pop()
            for k in nbrs[j]:
                if labels[k] == NOISE:
                    labels[k] = cid
                    if core[k]:
                        stack.append(k)
        cid += 1
    return labels, core, nbrs


def blobs(rng, centres, n, spread):
    return np.concatenate([c + spread * rng.normal(size=(n, len(c))) for c in centres])


class TestClustering:
    def test_two_blobs(self, rng):
        x = blobs(rng, [np.array([1.0, 0, 0]), np.array([0, 1.0, 0])], 50, 0.02)
        a = cluster_embeddings(x, eps=0.05, min_pts=5)
        assert a.k == 2 and sorted(a.cluster_sizes.values()) == [50, 50]

    def test_identical_points(self):
        a = cluster_embeddings(np.ones((30, 4)), eps=0.1, min_pts=5)
        assert a.k == 1 and a.cluster_sizes == {0: 30}

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_naive_reference(self, seed):
        rng = np.random.default_rng(seed)
        x = np.concatenate([blobs(rng, rng.normal(size=(4, 5)), 40, 0.15), rng.normal(size=(40, 5))])
        w = rng.integers(1, 3, len(x))
        eps, min_pts = 0.05, 4
        a = cluster_embeddings(x, eps, min_pts, weights=w)
        ref, core, nbrs = naive_dbscan(x, eps, min_pts, w)
        assert set(np.flatnonzero(a.labels == NOISE)) == set(np.flatnonzero(ref == NOISE))
        # the partition of core points is unique; border points may join any adjacent cluster
        ci = np.flatnonzero(core)
        mapping = {}
        for i in ci:
            assert mapping.setdefault(ref[i], a.labels[i]) == a.labels[i]
        assert len(set(mapping.values())) == len(mapping)
        for i in np.flatnonzero(~core & (ref != NOISE)):
            assert a.labels[i] in {a.labels[j] for j in nbrs[i] if core[j]}
        assert a.k == len(mapping)

    def test_weights_count_instances(self):
        x = np.array([[1.0, 0.0]] * 2 + [[0.0, 1.0]])
        a = cluster_embeddings(x, eps=0.01, min_pts=5, weights=[3, 2, 1])
        assert a.k == 1 and a.cluster_sizes[0] == 5 and a.total == 6
        assert a.labels[2] == NOISE

    def test_sample_cap_at_or_above_size_is_exact(self, rng):
        x = blobs(rng, [np.array([1.0, 0, 0]), np.array([0, 0, 1.0])], 30, 0.05)
        full = cluster_embeddings(x, 0.05, 4)
        capped = cluster_embeddings(x, 0.05, 4, sample_cap=len(x), rng=np.random.default_rng(9))
        assert np.array_equal(full.labels, capped.labels)

    def test_sample_cap_assigns_to_nearest_core(self, rng):
        x = blobs(rng, [np.array([1.0, 0, 0]), np.array([0, 0, 1.0])], 200, 0.02)
        x = np.concatenate([x, [[0.0, 1.0, 0.0]]])
        a = cluster_embeddings(x, 0.05, 4, sample_cap=100, rng=np.random.default_rng(0))
        assert a.k == 2 and a.labels[-1] == NOISE
        assert len(set(a.labels[:200])) == 1 and len(set(a.labels[200:400])) == 1

    def test_input_checks(self):
        with pytest.raises(ValueError):
            cluster_embeddings(np.zeros((0, 3)))
        with pytest.raises(ValueError):
            cluster_embeddings(np.ones((3, 2)), eps=0)
        with pytest.raises(ValueError):
            cluster_embeddings(np.ones((3, 2)), weights=[1, 0, 1])


class TestRule:
    def test_arithmetic(self):
        assert label_rule(10, 101, 2) == 1
        assert label_rule(91, 101, 2) == 0
        assert label_rule(50, 100, 2) == 0
        assert label_rule(49, 100, 2) == 1

    def test_single_cluster(self):
        a = ClusterAssignment("r", np.zeros(5, dtype=int), np.ones(5, dtype=int), {0: 5}, 1)
        assert label_all(a).tolist() == [0] * 5

    def test_noise_is_singleton(self):
        labels = np.array([0, 0, 0, 0, 1, 1, 1, NOISE])
        a = ClusterAssignment("r", labels, np.ones(8, dtype=int), {0: 4, 1: 3, NOISE: 1}, 2)
        assert label_offline(a, 7) == 1 and label_offline(a, 0) == 0 and label_offline(a, 4) == 1

    def test_noise_does_not_count_as_a_cluster(self):
        # one real cluster plus noise: k = 1, so the cluster is below total / k as well
        labels = np.array([0, 0, 0, NOISE])
        a = ClusterAssignment("r", labels, np.ones(4, dtype=int), {0: 3, NOISE: 1}, 1)
        assert label_all(a).tolist() == [1, 1, 1, 1]

    def test_all_noise(self):
        a = ClusterAssignment("r", np.full(3, NOISE), np.ones(3, dtype=int), {NOISE: 3}, 0)
        assert label_all(a).tolist() == [1, 1, 1]

    def test_monotone_in_size(self):
        for total in (50, 101, 1000):
            for k in (1, 2, 3, 7):
                labs = [label_rule(s, total, k) for s in range(1, total + 1)]
                assert labs == sorted(labs, reverse=True)

    def test_integer_division_free(self):
        # size * k < total, exactly, without a float threshold
        assert label_rule(33, 100, 3) == 1 and label_rule(34, 100, 3) == 0


class TestDataset:
    def trajs(self):
        a = [CellTrajectory(f"a{i}", "A", [100, 101, 102, 103, 104, 105]) for i in range(30)]
        b = [CellTrajectory(f"b{i}", "B", [112, 113, 114, 115, 116]) for i in range(30)]
        return a + b + [CellTrajectory("odd", "A", [100, 120, 121, 122, 105])]

    def test_training_windows_are_states(self):
        tw = training_windows([CellTrajectory("x", "A", [1, 2, 3])], 2)
        assert sorted(tw["A"]) == [(1,), (1, 2), (2, 3), (3,)]
        assert tw["A"][(1,)] == 1

    def test_counts_and_floor(self):
        model = tiny_encoder(window=3)
        pl = pseudo_label_dataset(self.trajs()[:60], model, eps=0.5, min_pts=2)
        for od, p in pl.items():
            assert p.N == 1  # floor: nothing anomalous
            assert p.P == p.assignment.total
            assert p.P == sum(len(t.cells) + 2 for t in self.trajs()[:60] if t.od == od)

    def test_lookup_covers_every_state(self):
        model = tiny_encoder(window=3)
        pl = pseudo_label_dataset(self.trajs(), model, eps=0.05, min_pts=3)
        lk = pl.lookup()
        from subtad.online import make_states
        for t in self.trajs():
            for s in make_states(t.cells, 3):
                assert (t.od, s) in lk

    def test_file_round_trip(self, tmp_path):
        model = tiny_encoder(window=3)
        pl = pseudo_label_dataset(self.trajs(), model, eps=0.05, min_pts=3)
        paths = save_pseudo_labels(pl, tmp_path)
        header = json.loads(paths[0].read_text().splitlines()[0][2:])
        assert header["format"] == "pseudo-labels" and {"k", "P", "N", "eps", "min_pts"} <= set(header)
        back = load_pseudo_labels(tmp_path)
        assert back.lookup() == pl.lookup() and back.counts() == pl.counts()
        for od in pl:
            assert np.array_equal(back[od].assignment.labels, pl[od].assignment.labels)

    def test_missing_files(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_pseudo_labels(tmp_path)
