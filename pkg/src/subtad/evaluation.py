"""Window- and point-level scoring, δ_p tuning, and the window-size experiment."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Hashable, Mapping, Sequence

import numpy as np

from .itinerary import ItineraryStats
from .online import QModel, classify_states, label_points, make_states, vote_points
from .spatial import CellTrajectory
from .synth import KINDS, LabeledTrajectory, dedup_labeled


def prf1(predicted: Sequence[int], truth: Sequence[int]) -> tuple[float, float, float]:
    p = np.asarray(predicted, dtype=np.int64)
    t = np.asarray(truth, dtype=np.int64)
    if p.shape != t.shape:
        raise ValueError(f"prediction length {len(p)} differs from truth length {len(t)}")
    tp = int(((p == 1) & (t == 1)).sum())
    fp = int(((p == 1) & (t == 0)).sum())
    fn = int(((p == 0) & (t == 1)).sum())
    prec = tp / (tp + fp) if tp + fp else 0.0
    rec = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
    return prec, rec, f1


def window_truth(point_truth: Sequence[int], L: int) -> np.ndarray:
    """OR of the point labels inside each state produced by ``make_states``."""
    y = np.asarray(point_truth, dtype=np.int64)
    n = len(y)
    if n == 0:
        raise ValueError("empty label sequence")
    return np.array([int(y[max(0, t - L):min(t, n)].max()) for t in range(1, n + L)], dtype=np.int64)


@dataclass
class ScoredItem:
    item: LabeledTrajectory
    actions: np.ndarray
    votes: np.ndarray


def run_detector(qmodel: QModel, items: Sequence[LabeledTrajectory]) -> list[ScoredItem]:
    """Greedy window actions and point votes for every item; thresholds are applied later."""
    L = qmodel.window
    out = []
    for it in items:
        acts = classify_states(qmodel, make_states(it.traj.cells, L), it.traj.od)
        out.append(ScoredItem(it, acts, vote_points(acts, L, len(it.traj.cells))))
    return out


def point_predictions(scored: ScoredItem, delta_p: int, stats: ItineraryStats | None) -> np.ndarray:
    return label_points(scored.votes, delta_p, scored.item.traj.cells, stats)


def score_items(scored: Sequence[ScoredItem], stats: Mapping[Hashable, ItineraryStats], delta_p: int,
                L: int) -> dict[str, dict[str, tuple[float, float, float]]]:
    """Per kind, pooled over trajectories: ``{kind: {"window": prf, "point": prf}}``."""
    by_kind: dict[str, dict[str, list]] = {}
    for s in scored:
        d = by_kind.setdefault(s.item.kind, {"wp": [], "wt": [], "pp": [], "pt": []})
        d["wp"].append(s.actions)
        d["wt"].append(window_truth(s.item.point_labels, L))
        d["pp"].append(point_predictions(s, delta_p, stats.get(s.item.traj.od)))
        d["pt"].append(np.asarray(s.item.point_labels))
    return {k: {"window": prf1(np.concatenate(d["wp"]), np.concatenate(d["wt"])),
                "point": prf1(np.concatenate(d["pp"]), np.concatenate(d["pt"]))}
            for k, d in by_kind.items()}


def tune_delta_p(scored: Sequence[ScoredItem], stats: Mapping[Hashable, ItineraryStats], L: int) -> int:
    """δ_p in ``1..L`` with the best pooled point F1; ties go to the smaller threshold."""
    truth = np.concatenate([np.asarray(s.item.point_labels) for s in scored])
    best, best_f1 = math.ceil(L / 2), -1.0
    for dp in range(1, L + 1):
        pred = np.concatenate([point_predictions(s, dp, stats.get(s.item.traj.od)) for s in scored])
        f1 = prf1(pred, truth)[2]
        if f1 > best_f1:
            best, best_f1 = dp, f1
    return best


def write_score_table(scores: Mapping[str, Mapping[str, tuple[float, float, float]]], path: str | Path,
                      kinds: Sequence[str] = KINDS) -> None:
    """One row per level, a P/R/F1 column triple per anomaly kind."""
    kinds = [k for k in kinds if k in scores] + sorted(set(scores) - set(kinds))
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["level"] + [f"{k}_{m}" for k in kinds for m in ("P", "R", "F1")])
        for level in ("window", "point"):
            w.writerow([level] + [f"{v:.4f}" for k in kinds for v in scores[k][level]])


def read_score_table(path: str | Path) -> dict[str, dict[str, tuple[float, float, float]]]:
    with Path(path).open() as fh:
        rows = list(csv.reader(fh, delimiter="\t"))
    header, body = rows[0], rows[1:]
    kinds = [h[:-len("_P")] for h in header[1::3]]
    out: dict[str, dict[str, tuple[float, float, float]]] = {k: {} for k in kinds}
    for row in body:
        vals = [float(v) for v in row[1:]]
        for i, k in enumerate(kinds):
            out[k][row[0]] = tuple(vals[3 * i:3 * i + 3])
    return out


# ---- window-size experiment ----

def stitch_fixture(bases: Sequence[CellTrajectory], seg_len: int, n_segments: int,
                   rng: np.random.Generator, traj_id: str = "stitched") -> LabeledTrajectory:
    """Equal-length slices of same-OD trajectories, glued end to end; only the first is normal."""
    if n_segments < 2:
        raise ValueError("a stitched fixture needs at least two segments")
    pool = [b for b in bases if len(b.cells) >= seg_len]
    if not pool:
        raise ValueError(f"no base trajectory has {seg_len} cells")
    cells, labels = [], []
    for s in range(n_segments):
        b = pool[int(rng.integers(len(pool)))]
        off = int(rng.integers(0, len(b.cells) - seg_len + 1))
        cells.extend(b.cells[off:off + seg_len])
        labels.extend([0 if s == 0 else 1] * seg_len)
    cells, labels = dedup_labeled(cells, labels)
    return LabeledTrajectory(CellTrajectory(traj_id, pool[0].od, cells), labels, "stitched")


def stitched_set(bases: Mapping[Hashable, Sequence[CellTrajectory]], seg_len: int, n_per_od: int,
                 n_segments: int = 4, seed: int = 0) -> list[LabeledTrajectory]:
    out = []
    for oi, od in enumerate(sorted(bases, key=str)):
        rng = np.random.default_rng([seed, oi, seg_len])
        for i in range(n_per_od):
            out.append(stitch_fixture(bases[od], seg_len, n_segments, rng, f"{od}-stitch{seg_len}-{i}"))
    return out


def window_analysis(models: Mapping[int, QModel], bases: Mapping[Hashable, Sequence[CellTrajectory]],
                    stats_by_L: Mapping[int, Mapping[Hashable, ItineraryStats]],
                    seg_lengths: Mapping[int, Sequence[int]], n_per_od: int = 50, n_segments: int = 4,
                    seed: int = 0) -> list[dict]:
    """Point-level scores per (window size, segment length, δ_p mode).

    ``tuned`` picks the best δ_p for each fixture set, ``fixed`` uses ⌈L/2⌉.
    """
    rows = []
    for L, q in sorted(models.items()):
        stats = stats_by_L[L]
        for ell in seg_lengths[L]:
            scored = run_detector(q, stitched_set(bases, ell, n_per_od, n_segments, seed))
            truth = np.concatenate([np.asarray(s.item.point_labels) for s in scored])
            for mode in ("tuned", "fixed"):
                dp = tune_delta_p(scored, stats, L) if mode == "tuned" else math.ceil(L / 2)
                pred = np.concatenate([point_predictions(s, dp, stats.get(s.item.traj.od)) for s in scored])
                p, r, f = prf1(pred, truth)
                rows.append({"window": L, "seg_len": ell, "mode": mode, "delta_p": dp,
                             "precision": p, "recall": r, "f1": f})
    return rows


def write_rows(rows: Sequence[dict], path: str | Path) -> None:
    if not rows:
        raise ValueError("nothing to write")
    with Path(path).open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), delimiter="\t", lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.4f}" if isinstance(v, float) else v) for k, v in r.items()})
