"""Input checks shared by the estimator wrappers."""
from __future__ import annotations

from collections.abc import Mapping, Sequence

import numpy as np

from .spatial import CellTrajectory, GeoPoint, RawTrajectory


def check_cell_trajectories(X, min_length: int = 1) -> list[CellTrajectory]:
    """Accept ``CellTrajectory`` objects or ``{traj_id, route_id, cells}`` mappings."""
    if isinstance(X, (str, bytes)) or not isinstance(X, Sequence):
        raise TypeError(f"expected a sequence of trajectories, got {type(X).__name__}")
    if len(X) == 0:
        raise ValueError("no trajectories given")
    out = []
    for i, t in enumerate(X):
        if isinstance(t, Mapping):
            t = CellTrajectory(str(t["traj_id"]), t["route_id"], list(t["cells"]))
        if not isinstance(t, CellTrajectory):
            raise TypeError(f"item {i} is a {type(t).__name__}, not a cell trajectory")
        if len(t.cells) < min_length:
            raise ValueError(f"trajectory {t.traj_id!r} has fewer than {min_length} cells")
        if any(not isinstance(c, (int, np.integer)) or isinstance(c, bool) for c in t.cells):
            raise TypeError(f"trajectory {t.traj_id!r} has non-integer cell ids")
        out.append(CellTrajectory(t.traj_id, t.od, [int(c) for c in t.cells]))
    return out


def check_raw_trajectories(X) -> list[RawTrajectory]:
    if isinstance(X, (str, bytes)) or not isinstance(X, Sequence) or len(X) == 0:
        raise ValueError("expected a non-empty sequence of raw trajectories")
    for i, t in enumerate(X):
        if not isinstance(t, RawTrajectory):
            raise TypeError(f"item {i} is a {type(t).__name__}, not a raw trajectory")
        if not t.points or not all(isinstance(p, GeoPoint) for p in t.points):
            raise ValueError(f"trajectory {t.traj_id!r} has no GPS points")
    return list(X)


def check_point_labels(y, X: Sequence[CellTrajectory]) -> list[np.ndarray]:
    if len(y) != len(X):
        raise ValueError(f"{len(y)} label sequences for {len(X)} trajectories")
    out = []
    for labels, t in zip(y, X):
        a = np.asarray(labels, dtype=np.int64)
        if a.shape != (len(t.cells),):
            raise ValueError(f"labels of {t.traj_id!r} do not align with its cells")
        if not np.isin(a, (0, 1)).all():
            raise ValueError("point labels must be 0 or 1")
        out.append(a)
    return out
