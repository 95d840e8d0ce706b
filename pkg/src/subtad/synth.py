"""Synthetic anomalies with exact point labels, and the deterministic micro world."""
from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Hashable, Mapping, Sequence

import numpy as np

from .itinerary import ItineraryStats
from .spatial import CellIndexer, CellTrajectory, GeoPoint, HexGridIndexer, RawTrajectory

KINDS = ("head", "rear", "midway", "random", "route_switch")
TESTSET_VERSION = 1


class GenerationError(RuntimeError):
    """No valid anomalous segment was found within the retry budget."""


class InsufficientBaseDataError(ValueError):
    pass


@dataclass
class LabeledTrajectory:
    traj: CellTrajectory
    point_labels: list[int]
    kind: str = "none"

    def __post_init__(self):
        if len(self.point_labels) != len(self.traj.cells):
            raise ValueError("labels and cells differ in length")


def dedup_labeled(cells: Sequence[int], labels: Sequence[int]) -> tuple[list[int], list[int]]:
    """Collapse consecutive repeats; a merged run keeps the label of its first cell."""
    out_c, out_l = [], []
    for c, l in zip(cells, labels):
        if out_c and out_c[-1] == c:
            continue
        out_c.append(int(c))
        out_l.append(int(l))
    return out_c, out_l


def anomalous_walk(indexer: CellIndexer, s_pos: frozenset[int] | set[int], start: int, length: int,
                   step_hop: int, rng: np.random.Generator, target: int | None = None,
                   target_hop: int | None = None, bias: float = 1.0) -> list[int] | None:
    """Self-avoiding walk of ``length`` cells outside ``s_pos``.

    The first cell lies within ``step_hop`` of ``start`` (which is not part
    of the walk) and so does every later step. With a ``target`` the steps
    lean toward it and the walk only counts if its last cell ends within
    ``target_hop`` of the target. Returns ``None`` on a dead end.
    """
    walk: list[int] = []
    visited = {start} if target is None else {start, target}
    cur = start
    for step in range(length):
        cand = sorted(c for c in indexer.disk(cur, step_hop) if c not in s_pos and c not in visited)
        if not cand:
            return None
        if target is not None:
            remaining = length - step - 1
            d = np.array([indexer.distance(c, target) for c in cand], dtype=float)
            # keep the target reachable in the steps left
            ok = d <= remaining * step_hop + target_hop
            if not ok.any():
                return None
            p = np.where(ok, np.exp(-bias * d), 0.0)
            nxt = cand[int(rng.choice(len(cand), p=p / p.sum()))]
        else:
            nxt = cand[int(rng.integers(len(cand)))]
        walk.append(nxt)
        visited.add(nxt)
        cur = nxt
    if target is not None and indexer.distance(walk[-1], target) > target_hop:
        return None
    return walk


def gen_detour(traj: CellTrajectory, stats: ItineraryStats, where: str, k_hop: int,
               indexer: CellIndexer, rng: np.random.Generator, step_hop: int | None = None,
               max_retries: int = 100) -> LabeledTrajectory:
    n = len(traj.cells)
    if n < 4:
        raise ValueError("detours need at least four cells")
    if k_hop < 1:
        raise ValueError("k_hop must be at least 1")
    if where not in ("head", "rear", "midway"):
        raise ValueError(f"unknown detour position {where!r}")
    step_hop = step_hop or k_hop
    c = traj.cells
    for _ in range(max_retries):
        if where == "head":
            i = int(rng.integers(2, n))            # survivors c_i..c_n (1-indexed)
            seg = anomalous_walk(indexer, stats.s_pos, c[i - 1], i - 1, step_hop, rng)
            if seg is None:
                continue
            cells = seg[::-1] + c[i - 1:]
            labels = [1] * len(seg) + [0] * (n - i + 1)
        elif where == "rear":
            i = int(rng.integers(2, n))            # survivors c_1..c_i
            seg = anomalous_walk(indexer, stats.s_pos, c[i - 1], n - i, step_hop, rng)
            if seg is None:
                continue
            cells = c[:i] + seg
            labels = [0] * i + [1] * len(seg)
        else:
            i = int(rng.integers(2, n - 1))        # 1 < i < j < n, replace c_i..c_j
            j = int(rng.integers(i + 1, n))
            seg = anomalous_walk(indexer, stats.s_pos, c[i - 2], j - i + 1, step_hop, rng,
                                 target=c[j], target_hop=k_hop)
            if seg is None:
                continue
            cells = c[:i - 1] + seg + c[j:]
            labels = [0] * (i - 1) + [1] * len(seg) + [0] * (n - j)
        cells, labels = dedup_labeled(cells, labels)
        return LabeledTrajectory(CellTrajectory(f"{traj.traj_id}:{where}", traj.od, cells), labels, where)
    raise GenerationError(f"no {where} detour for {traj.traj_id!r} after {max_retries} attempts")


def gen_random_trajectory(stats: ItineraryStats, length: int, k_hop: int, indexer: CellIndexer,
                          rng: np.random.Generator, pool: Sequence[int] | None = None,
                          traj_id: str = "random", max_retries: int = 100) -> LabeledTrajectory:
    pool = indexer.universe() if pool is None else pool
    if pool is None:
        raise ValueError("random trajectories need an explicit cell pool for unbounded indexers")
    neg = sorted(set(pool) - stats.s_pos)
    if not neg:
        raise GenerationError("every candidate cell is frequent for this OD")
    if length < 1:
        raise ValueError("length must be positive")
    for _ in range(max_retries):
        start = neg[int(rng.integers(len(neg)))]
        rest = anomalous_walk(indexer, stats.s_pos, start, length - 1, k_hop, rng) if length > 1 else []
        if rest is None:
            continue
        cells = [start] + rest
        return LabeledTrajectory(CellTrajectory(traj_id, stats.od, cells), [1] * len(cells), "random")
    raise GenerationError(f"no random walk of length {length} after {max_retries} attempts")


def gen_route_switch(t1: CellTrajectory, t2: CellTrajectory, beta: float) -> LabeledTrajectory:
    if t1.od == t2.od:
        raise ValueError("route switching needs two different OD pairs")
    if not 0.0 < beta < 1.0:
        raise ValueError("beta must lie in (0, 1)")
    head = t1.cells[:math.floor(beta * len(t1.cells))]
    start = max(1, math.floor((1.0 - beta) * len(t2.cells)))   # inclusive, 1-indexed
    tail = t2.cells[start - 1:]
    if not head or not tail:
        raise ValueError("degenerate split: one part of the switch is empty")
    cells, labels = dedup_labeled(head + tail, [0] * len(head) + [1] * len(tail))
    return LabeledTrajectory(CellTrajectory(f"{t1.traj_id}+{t2.traj_id}", t1.od, cells), labels,
                             "route_switch")


@dataclass
class SynthConfig:
    n_per_od: int = 500
    k_hop: int = 3
    beta_low: float = 0.3
    beta_high: float = 0.7
    kinds: tuple[str, ...] = KINDS
    seed: int = 0
    max_retries: int = 100

    def __post_init__(self):
        self.kinds = tuple(self.kinds)
        unknown = set(self.kinds) - set(KINDS)
        if unknown:
            raise ValueError(f"unknown anomaly kinds {sorted(unknown)}")
        if not 0.0 < self.beta_low <= self.beta_high < 1.0:
            raise ValueError("beta range must lie inside (0, 1)")


def gen_testset(bases: Mapping[Hashable, Sequence[CellTrajectory]], stats: Mapping[Hashable, ItineraryStats],
                indexer: CellIndexer, cfg: SynthConfig | None = None,
                pool: Sequence[int] | None = None) -> list[LabeledTrajectory]:
    """``cfg.n_per_od`` trajectories per OD and kind, reproducible from ``cfg.seed``."""
    cfg = cfg or SynthConfig()
    ods = sorted(bases, key=str)
    out: list[LabeledTrajectory] = []
    for oi, od in enumerate(ods):
        usable = [t for t in bases[od] if len(t.cells) >= 4]
        if not usable:
            raise InsufficientBaseDataError(f"OD {od!r} has no base trajectory with four or more cells")
        others = [t for o in ods if o != od for t in bases[o] if len(t.cells) >= 2]
        for ki, kind in enumerate(cfg.kinds):
            if kind == "route_switch" and not others:
                raise InsufficientBaseDataError("route switching needs a second OD pair")
            rng = np.random.default_rng([cfg.seed, oi, ki])
            made, attempts = 0, 0
            while made < cfg.n_per_od:
                attempts += 1
                if attempts > 20 * cfg.n_per_od + 100:
                    raise InsufficientBaseDataError(f"could only generate {made} {kind} trajectories for {od!r}")
                base = usable[int(rng.integers(len(usable)))]
                try:
                    if kind in ("head", "rear", "midway"):
                        lt = gen_detour(base, stats[od], kind, cfg.k_hop, indexer, rng,
                                        max_retries=cfg.max_retries)
                    elif kind == "random":
                        lt = gen_random_trajectory(stats[od], len(base.cells), cfg.k_hop, indexer, rng, pool,
                                                   max_retries=cfg.max_retries)
                    else:
                        other = others[int(rng.integers(len(others)))]
                        lt = gen_route_switch(base, other, float(rng.uniform(cfg.beta_low, cfg.beta_high)))
                except (GenerationError, ValueError):
                    continue
                lt.traj.traj_id = f"{od}-{kind}-{made}"
                out.append(lt)
                made += 1
    return out


def write_testset(items: Sequence[LabeledTrajectory], path: str | Path, cfg: SynthConfig | None = None) -> None:
    path = Path(path)
    with path.open("w") as fh:
        for it in items:
            fh.write(json.dumps({"traj_id": it.traj.traj_id, "route_id": it.traj.od, "kind": it.kind,
                                 "cells": it.traj.cells, "labels": it.point_labels}) + "\n")
    if cfg is not None:
        manifest = {"format": "synthetic-testset", "version": TESTSET_VERSION, "seed": cfg.seed,
                    "config": asdict(cfg), "count": len(items)}
        path.with_suffix(".manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))


def read_testset(path: str | Path) -> list[LabeledTrajectory]:
    out = []
    with Path(path).open() as fh:
        for ln in fh:
            if ln.strip():
                r = json.loads(ln)
                out.append(LabeledTrajectory(CellTrajectory(r["traj_id"], r["route_id"], list(r["cells"])),
                                             list(r["labels"]), r["kind"]))
    return out


# ---- micro world ----

@dataclass
class MicroWorldConfig:
    width: int = 20
    height: int = 20
    cell_size: float = 0.001
    origin: tuple[float, float] = (-8.65, 41.10)
    n_train: int = 200
    n_val: int = 40
    n_test_base: int = 60
    noise_rate: float = 0.05
    noise_kinds: tuple[str, ...] = ("head", "rear", "midway")   # "spike" is also accepted
    spike_gap: int = 4
    trim: int = 2
    wiggle: int = 2
    seed: int = 0


@dataclass
class MicroWorld:
    config: MicroWorldConfig
    indexer: HexGridIndexer
    routes: dict[str, list[int]]
    train: list[LabeledTrajectory]
    val: list[CellTrajectory]
    test_bases: dict[str, list[CellTrajectory]] = field(default_factory=dict)


def _shortest_path(indexer: HexGridIndexer, a: int, b: int, rng: np.random.Generator,
                   blocked: set[int]) -> list[int] | None:
    prev = {a: None}
    queue = deque([a])
    while queue:
        c = queue.popleft()
        if c == b:
            break
        nbrs = indexer.neighbors(c)
        for i in rng.permutation(len(nbrs)):
            n = nbrs[i]
            if n not in prev and (n not in blocked or n == b):
                prev[n] = c
                queue.append(n)
    if b not in prev:
        return None
    path = [b]
    while prev[path[-1]] is not None:
        path.append(prev[path[-1]])
    return path[::-1]


def _route(indexer: HexGridIndexer, waypoints: Sequence[tuple[int, int]], rng) -> list[int]:
    cells = [indexer.cell_at(q, r) for q, r in waypoints]
    route = [cells[0]]
    for b in cells[1:]:
        seg = _shortest_path(indexer, route[-1], b, rng, set(route))
        if seg is None:
            raise GenerationError("route waypoints cannot be joined without revisits")
        route.extend(seg[1:])
    return route


def micro_routes(cfg: MicroWorldConfig, rng: np.random.Generator) -> dict[str, list[int]]:
    """Four crossing routes: two along rows and two along columns of the axial grid."""
    idx = HexGridIndexer(cfg.width, cfg.height, cfg.cell_size, cfg.origin)
    W, H = cfg.width, cfg.height

    def jitter(v, hi):
        return int(np.clip(v + rng.integers(-cfg.wiggle, cfg.wiggle + 1), 0, hi - 1))

    rows = (H // 4, 3 * H // 4)
    cols = (W // 4, 3 * W // 4)
    routes = {}
    for i, r in enumerate(rows):
        pts = [(0, r)] + [(q, jitter(r, H)) for q in (W // 4, W // 2, 3 * W // 4)] + [(W - 1, r)]
        routes[f"R{i}"] = _route(idx, pts, rng)
    for i, q in enumerate(cols):
        pts = [(q, 0)] + [(jitter(q, W), r) for r in (H // 4, H // 2, 3 * H // 4)] + [(q, H - 1)]
        routes[f"R{i + 2}"] = _route(idx, pts, rng)
    return routes


def _trimmed(route: Sequence[int], trim: int, rng) -> list[int]:
    a = int(rng.integers(0, trim + 1))
    b = int(rng.integers(0, trim + 1))
    return list(route[a:len(route) - b])


def gen_spike(traj: CellTrajectory, route: Sequence[int], gap: int,
              rng: np.random.Generator) -> LabeledTrajectory:
    """One interior fix jumps to a route cell at least `gap` positions from both of its neighbours.

    Every cell stays on the route, so only the ordering gives the fix away.
    """
    pos = {c: i for i, c in enumerate(route)}
    cells = list(traj.cells)
    for _ in range(100):
        i = int(rng.integers(1, len(cells) - 1))
        lo, hi = sorted((pos[cells[i - 1]], pos[cells[i + 1]]))
        far = [c for c in route if pos[c] <= lo - gap or pos[c] >= hi + gap]
        if far:
            cells[i] = far[int(rng.integers(len(far)))]
            labels = [0] * len(cells)
            labels[i] = 1
            return LabeledTrajectory(CellTrajectory(traj.traj_id, traj.od, cells), labels, "spike")
    raise GenerationError("trajectory too short for a spike")


def build_micro_world(cfg: MicroWorldConfig | None = None) -> MicroWorld:
    cfg = cfg or MicroWorldConfig()
    rng = np.random.default_rng(cfg.seed)
    indexer = HexGridIndexer(cfg.width, cfg.height, cfg.cell_size, cfg.origin)
    routes = micro_routes(cfg, rng)
    train, val, test_bases = [], [], {}
    for od, route in routes.items():
        on_route = ItineraryStats(od, {}, frozenset(route), 0.0, 0)
        n_noisy = int(round(cfg.noise_rate * cfg.n_train))
        noisy = set(rng.choice(cfg.n_train, size=n_noisy, replace=False).tolist())
        for i in range(cfg.n_train):
            tr = CellTrajectory(f"{od}-train-{i}", od, _trimmed(route, cfg.trim, rng))
            if i in noisy:
                kind = cfg.noise_kinds[int(rng.integers(len(cfg.noise_kinds)))]
                if kind == "spike":
                    lt = gen_spike(tr, route, cfg.spike_gap, rng)
                else:
                    lt = gen_detour(tr, on_route, kind, 1, indexer, rng)
                    lt.traj.traj_id = tr.traj_id
                train.append(lt)
            else:
                train.append(LabeledTrajectory(tr, [0] * len(tr.cells)))
        val.extend(CellTrajectory(f"{od}-val-{i}", od, _trimmed(route, cfg.trim, rng)) for i in range(cfg.n_val))
        test_bases[od] = [CellTrajectory(f"{od}-base-{i}", od, _trimmed(route, cfg.trim, rng))
                          for i in range(cfg.n_test_base)]
    return MicroWorld(cfg, indexer, routes, train, val, test_bases)


def to_gps(traj: CellTrajectory, indexer: CellIndexer, rng: np.random.Generator,
           points_per_cell: tuple[int, int] = (1, 3), jitter: float = 0.3, t0: int = 1_600_000_000,
           size: float | None = None) -> RawTrajectory:
    """GPS fixes scattered around cell centres, well inside each hexagon."""
    size = size if size is not None else getattr(indexer, "size", 0.0)
    pts, t = [], t0
    for c in traj.cells:
        cx, cy = indexer.center(c)
        for _ in range(int(rng.integers(points_per_cell[0], points_per_cell[1] + 1))):
            ang = rng.uniform(0, 2 * math.pi)
            rad = rng.uniform(0, jitter) * size
            pts.append(GeoPoint(cx + rad * math.cos(ang), cy + rad * math.sin(ang), t))
            t += int(rng.integers(5, 30))
    return RawTrajectory(traj.traj_id, traj.od, pts)
