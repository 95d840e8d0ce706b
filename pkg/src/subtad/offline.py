"""Offline pseudo-labelling: density clustering of window embeddings and the small-cluster rule."""
from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Hashable, Sequence

import numpy as np
from sklearn.cluster import DBSCAN

from .encoder import WindowEncoder
from .online import make_states
from .spatial import CellTrajectory

PSEUDO_VERSION = 1
NOISE = -1


@dataclass
class ClusterAssignment:
    """Cluster id per window (``-1`` for density noise) with window multiplicities.

    ``cluster_sizes`` counts window instances, so the sizes of real clusters
    plus one singleton per noise instance add up to ``total``.
    """

    od: Hashable
    labels: np.ndarray
    weights: np.ndarray
    cluster_sizes: dict[int, int]
    k: int

    @property
    def total(self) -> int:
        return int(self.weights.sum())


def _assignment(od, labels: np.ndarray, weights: np.ndarray) -> ClusterAssignment:
    sizes: Counter[int] = Counter()
    for c, w in zip(labels.tolist(), weights.tolist()):
        sizes[int(c)] += int(w)
    k = len([c for c in sizes if c != NOISE])
    return ClusterAssignment(od, labels, weights, dict(sizes), k)


def _normalise(x: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(x, axis=1, keepdims=True)
    return x / np.maximum(norm, 1e-12)


def cluster_embeddings(embeddings: np.ndarray, eps: float = 0.15, min_pts: int = 5,
                       weights: Sequence[int] | None = None, od: Hashable = None,
                       sample_cap: int | None = None,
                       rng: np.random.Generator | None = None) -> ClusterAssignment:
    """DBSCAN under cosine distance; ``weights`` are multiplicities of repeated windows.

    When there are more rows than ``sample_cap``, a uniform sample is clustered
    and every other row joins the cluster of its nearest core point if that
    point lies within ``eps``, otherwise it becomes noise.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim != 2 or len(x) == 0:
        raise ValueError("cluster_embeddings needs a non-empty 2-d array")
    if eps <= 0:
        raise ValueError("eps must be positive")
    if min_pts < 1:
        raise ValueError("min_pts must be at least 1")
    w = np.ones(len(x), dtype=np.int64) if weights is None else np.asarray(weights, dtype=np.int64)
    if len(w) != len(x) or (w < 1).any():
        raise ValueError("weights must be positive and aligned with the embeddings")
    x = _normalise(x)
    n = len(x)
    if sample_cap is None or sample_cap >= n:
        sample = np.arange(n)
    else:
        rng = rng or np.random.default_rng(0)
        sample = np.sort(rng.choice(n, size=sample_cap, replace=False))
    db = DBSCAN(eps=eps, min_samples=min_pts, metric="cosine", algorithm="brute")
    db.fit(x[sample], sample_weight=w[sample])
    labels = np.full(n, NOISE, dtype=np.int64)
    labels[sample] = db.labels_
    rest = np.setdiff1d(np.arange(n), sample)
    if len(rest) and len(db.core_sample_indices_):
        cores = sample[db.core_sample_indices_]
        dist = 1.0 - x[rest] @ x[cores].T
        nearest = dist.argmin(1)
        near_ok = dist[np.arange(len(rest)), nearest] <= eps
        labels[rest[near_ok]] = labels[cores[nearest[near_ok]]]
    return _assignment(od, labels, w)


def label_rule(cluster_size: int, total: int, k: int) -> int:
    """1 iff the cluster is smaller than ``total / k``; ``k = 0`` labels everything 1."""
    if k == 0:
        return 1
    return int(cluster_size * k < total)


def label_offline(assignment: ClusterAssignment, window_id: int) -> int:
    c = int(assignment.labels[window_id])
    size = 1 if c == NOISE else assignment.cluster_sizes[c]
    return label_rule(size, assignment.total, assignment.k)


def label_all(assignment: ClusterAssignment) -> np.ndarray:
    return np.array([label_offline(assignment, i) for i in range(len(assignment.labels))], dtype=np.int64)


@dataclass
class ODPseudoLabels:
    od: Hashable
    windows: list[tuple[int, ...]]
    assignment: ClusterAssignment
    labels: np.ndarray
    eps: float
    min_pts: int

    @property
    def P(self) -> int:
        return int(self.assignment.weights[self.labels == 0].sum())

    @property
    def N(self) -> int:
        """Anomalous instance count, floored at one so the significance ratio stays finite."""
        return max(1, int(self.assignment.weights[self.labels == 1].sum()))


class PseudoLabelSet(dict):
    """``od -> ODPseudoLabels`` with flat lookup helpers."""

    def lookup(self) -> dict[tuple[Hashable, tuple[int, ...]], int]:
        return {(od, w): int(l) for od, p in self.items() for w, l in zip(p.windows, p.labels)}

    def counts(self) -> dict[Hashable, tuple[int, int]]:
        return {od: (p.P, p.N) for od, p in self.items()}


def training_windows(trajs: Sequence[CellTrajectory], L: int) -> dict[Hashable, Counter]:
    """Every state of every trajectory (ragged ones included), counted per OD."""
    out: dict[Hashable, Counter] = {}
    for tr in trajs:
        if len(tr.cells) < 2:
            continue
        out.setdefault(tr.od, Counter()).update(make_states(tr.cells, L))
    return out


def pseudo_label_dataset(trajs: Sequence[CellTrajectory], model: WindowEncoder, eps: float = 0.15,
                         min_pts: int = 5, sample_cap: int | None = 2000, seed: int = 0) -> PseudoLabelSet:
    rng = np.random.default_rng(seed)
    result = PseudoLabelSet()
    for od, counter in sorted(training_windows(trajs, model.cfg.window).items(), key=lambda kv: str(kv[0])):
        windows = sorted(counter)
        weights = np.array([counter[w] for w in windows], dtype=np.int64)
        _, z = model.embed_windows(windows, [od] * len(windows))
        a = cluster_embeddings(z, eps, min_pts, weights, od, sample_cap, rng)
        result[od] = ODPseudoLabels(od, windows, a, label_all(a), eps, min_pts)
    return result


def _safe_name(od: Hashable) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]", "_", str(od))


def save_pseudo_labels(pl: PseudoLabelSet, directory: str | Path) -> list[Path]:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = []
    for od, p in pl.items():
        header = {"format": "pseudo-labels", "version": PSEUDO_VERSION, "od": od, "eps": p.eps,
                  "min_pts": p.min_pts, "k": p.assignment.k, "P": p.P, "N": p.N}
        lines = ["# " + json.dumps(header, sort_keys=True), "window_id\tcluster_id\tlabel\tweight\tcells"]
        for i, w in enumerate(p.windows):
            lines.append(f"{i}\t{p.assignment.labels[i]}\t{p.labels[i]}\t{p.assignment.weights[i]}\t"
                         + " ".join(map(str, w)))
        path = d / f"pseudo_{_safe_name(od)}.tsv"
        path.write_text("\n".join(lines) + "\n")
        paths.append(path)
    return paths


def load_pseudo_labels(directory: str | Path) -> PseudoLabelSet:
    out = PseudoLabelSet()
    files = sorted(Path(directory).glob("pseudo_*.tsv"))
    if not files:
        raise FileNotFoundError(f"no pseudo-label files in {directory}")
    for f in files:
        lines = f.read_text().splitlines()
        if not lines or not lines[0].startswith("# "):
            raise ValueError(f"{f} lacks a pseudo-label header")
        header = json.loads(lines[0][2:])
        if header.get("format") != "pseudo-labels" or header.get("version") != PSEUDO_VERSION:
            raise ValueError(f"{f} is not a version-{PSEUDO_VERSION} pseudo-label file")
        windows, clusters, labels, weights = [], [], [], []
        for line in lines[2:]:
            _, c, lab, wt, cells = line.split("\t")
            windows.append(tuple(int(x) for x in cells.split()))
            clusters.append(int(c))
            labels.append(int(lab))
            weights.append(int(wt))
        a = _assignment(header["od"], np.array(clusters, dtype=np.int64), np.array(weights, dtype=np.int64))
        out[header["od"]] = ODPseudoLabels(header["od"], windows, a, np.array(labels, dtype=np.int64),
                                           header["eps"], header["min_pts"])
    return out
