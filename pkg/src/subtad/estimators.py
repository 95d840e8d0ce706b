"""scikit-learn style wrappers around the pipeline."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .config import load_config, merge, parse_override, validate
from .evaluation import prf1
from .online import classify_states, detect_trajectory, make_states
from .pipeline import fit_pipeline, make_indexer
from .spatial import match_trajectory
from .synth import LabeledTrajectory
from .validation import check_cell_trajectories, check_point_labels, check_raw_trajectories


class CellSequencer(TransformerMixin, BaseEstimator):
    """Raw GPS trajectories to deduplicated cell sequences."""

    def __init__(self, indexer: str = "hexgrid", resolution: int = 0, width: int = 20, height: int = 20,
                 size: float = 0.001, origin_lon: float = 0.0, origin_lat: float = 0.0):
        self.indexer = indexer
        self.resolution = resolution
        self.width = width
        self.height = height
        self.size = size
        self.origin_lon = origin_lon
        self.origin_lat = origin_lat

    def fit(self, X=None, y=None):
        self.indexer_ = make_indexer({"spatial": self.get_params()})
        return self

    def transform(self, X):
        check_is_fitted(self, "indexer_")
        return [match_trajectory(t, self.indexer_) for t in check_raw_trajectories(X)]


class SubTrajectoryDetector(BaseEstimator):
    """Point- and window-level anomaly labels for cell trajectories.

    ``fit`` runs graph construction, pre-training, clustering and DQN
    training on normal-dominated trajectories. ``predict`` returns one 0/1
    array per trajectory.
    """

    def __init__(self, preset: str = "micro", overrides: tuple[str, ...] = (), seed: int = 0,
                 grid_road: bool = True, delta_p: int | None = None):
        self.preset = preset
        self.overrides = overrides
        self.seed = seed
        self.grid_road = grid_road
        self.delta_p = delta_p

    def _config(self) -> dict:
        cfg = load_config(None, self.overrides, base=self.preset)
        cfg = merge(cfg, parse_override(f"seed={self.seed}"))
        if self.delta_p is not None:
            cfg = merge(cfg, {"detect": {"delta_p": int(self.delta_p)}})
        validate(cfg)
        return cfg

    def fit(self, X, y=None, context=None, validation: list[LabeledTrajectory] | None = None):
        trajs = check_cell_trajectories(X)
        cfg = self._config()
        fitted = fit_pipeline(trajs, make_indexer(cfg), cfg, context=context, grid_road=self.grid_road,
                              val_items=validation)
        self.config_ = cfg
        self.stats_ = fitted.stats
        self.encoder_ = fitted.encoder
        self.qmodel_ = fitted.qmodel
        self.pseudo_labels_ = fitted.pseudo
        self.delta_p_ = fitted.delta_p
        self.window_ = fitted.qmodel.window
        return self

    def predict(self, X) -> list[np.ndarray]:
        check_is_fitted(self, "qmodel_")
        return [detect_trajectory(self.qmodel_, t, self.stats_[t.od], self.delta_p_).point_labels
                for t in check_cell_trajectories(X)]

    def decision_function(self, X) -> list[np.ndarray]:
        """Anomalous-window votes per point, in ``[0, L]``."""
        check_is_fitted(self, "qmodel_")
        return [detect_trajectory(self.qmodel_, t, self.stats_[t.od], self.delta_p_).votes
                for t in check_cell_trajectories(X)]

    def predict_windows(self, X) -> list[np.ndarray]:
        check_is_fitted(self, "qmodel_")
        return [classify_states(self.qmodel_, make_states(t.cells, self.window_), t.od)
                for t in check_cell_trajectories(X)]

    def transform(self, X) -> list[np.ndarray]:
        """Projected embeddings of every window state, one array per trajectory."""
        check_is_fitted(self, "encoder_")
        out = []
        for t in check_cell_trajectories(X):
            states = make_states(t.cells, self.window_)
            out.append(self.encoder_.embed_windows(states, [t.od] * len(states))[1])
        return out

    def score(self, X, y) -> float:
        """Pooled point-level F1."""
        trajs = check_cell_trajectories(X)
        truth = check_point_labels(y, trajs)
        pred = self.predict(trajs)
        return prf1(np.concatenate(pred), np.concatenate(truth))[2]
