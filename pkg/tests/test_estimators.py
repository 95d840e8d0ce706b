import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from subtad.estimators import CellSequencer, SubTrajectoryDetector
from subtad.synth import MicroWorldConfig, build_micro_world, to_gps

TINY = (
    "encoder.d_c=8", "encoder.d=16", "encoder.d_z=8", "encoder.gat_dim=8", "encoder.gat_heads=2",
    "encoder.attn_dim=4", "encoder.window=3", "graph.walks_per_node=1", "graph.walk_length=10",
    "graph.epochs=1", "pretrain.epochs=1", "pretrain.steps_per_epoch=2", "dqn.steps=20",
    "dqn.learn_start=10", "dqn.batch_size=16",
)


@pytest.fixture(scope="module")
def world():
    return build_micro_world(MicroWorldConfig(n_train=30, n_val=4, n_test_base=4))


@pytest.fixture(scope="module")
def fitted(world):
    return SubTrajectoryDetector(overrides=TINY, seed=1).fit([lt.traj for lt in world.train])


def test_params_round_trip():
    det = SubTrajectoryDetector(overrides=TINY, seed=3, delta_p=2)
    params = det.get_params()
    assert params == {"preset": "micro", "overrides": TINY, "seed": 3, "grid_road": True, "delta_p": 2}
    twin = clone(det)
    assert twin.get_params() == params and twin is not det
    assert det.set_params(seed=5).seed == 5


def test_unfitted():
    with pytest.raises(NotFittedError):
        SubTrajectoryDetector().predict([{"traj_id": "a", "route_id": "R0", "cells": [1, 2]}])


def test_outputs(fitted, world):
    trajs = [t for ts in world.test_bases.values() for t in ts]
    L = fitted.window_
    pred = fitted.predict(trajs)
    votes = fitted.decision_function(trajs)
    wins = fitted.predict_windows(trajs)
    emb = fitted.transform(trajs)
    for t, p, v, w, z in zip(trajs, pred, votes, wins, emb):
        n = len(t.cells)
        assert p.shape == (n,) and set(p.tolist()) <= {0, 1}
        assert v.shape == (n,) and v.min() >= 0 and v.max() <= L
        assert w.shape == (n + L - 1,)
        assert z.shape == (n + L - 1, 8)
    assert 1 <= fitted.delta_p_ <= L


def test_score_matches_predict(fitted, world):
    items = world.train[:20]
    s = fitted.score([lt.traj for lt in items], [lt.point_labels for lt in items])
    assert 0.0 <= s <= 1.0


def test_mapping_input(fitted, world):
    t = world.test_bases["R0"][0]
    a = fitted.predict([t])[0]
    b = fitted.predict([{"traj_id": t.traj_id, "route_id": t.od, "cells": t.cells}])[0]
    assert np.array_equal(a, b)


def test_input_checks(fitted, world):
    with pytest.raises(TypeError):
        fitted.predict("R0")
    with pytest.raises(ValueError):
        fitted.predict([])
    with pytest.raises(TypeError):
        fitted.predict([{"traj_id": "x", "route_id": "R0", "cells": [1.5, 2.0]}])
    t = world.test_bases["R0"][0]
    with pytest.raises(ValueError):
        fitted.score([t], [[0]])


def test_deterministic(fitted, world):
    again = SubTrajectoryDetector(overrides=TINY, seed=1).fit([lt.traj for lt in world.train])
    trajs = world.test_bases["R1"]
    assert all(np.array_equal(a, b) for a, b in zip(fitted.predict(trajs), again.predict(trajs)))


def test_fixed_threshold(world):
    det = SubTrajectoryDetector(overrides=TINY, delta_p=3)
    assert det._config()["detect"]["delta_p"] == 3


def test_cell_sequencer(world):
    cfg = world.config
    seq = CellSequencer(width=cfg.width, height=cfg.height, size=cfg.cell_size,
                        origin_lon=cfg.origin[0], origin_lat=cfg.origin[1]).fit()
    rng = np.random.default_rng(0)
    trajs = world.test_bases["R2"]
    out = seq.transform([to_gps(t, world.indexer, rng) for t in trajs])
    assert [o.cells for o in out] == [t.cells for t in trajs]
    with pytest.raises(ValueError):
        seq.transform([])
