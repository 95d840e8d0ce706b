"""Positive views and synthetic negatives of trajectory windows.

Every function takes an explicit ``numpy.random.Generator``; no global state.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .itinerary import ItineraryStats
from .spatial import CellIndexer

Window = tuple[int, ...]

NEGATIVE_KINDS = (
    "random_replace", "head_rear_replace", "neg_combination", "shuffle",
    "repeat", "slice_permute", "pos_combination",
)


@dataclass
class AugmentationParams:
    L: int = 5
    rho1: int | None = None
    rho2: int | None = None
    rho3: int | None = None
    k_replace: int = 1
    negative_weights: Sequence[float] | None = None

    def __post_init__(self):
        half = max(1, self.L // 2)
        self.rho1 = half if self.rho1 is None else self.rho1
        self.rho2 = half if self.rho2 is None else self.rho2
        self.rho3 = half if self.rho3 is None else self.rho3
        for name in ("rho1", "rho2", "rho3"):
            v = getattr(self, name)
            if not 1 <= v <= self.L:
                raise ValueError(f"{name}={v} outside [1, {self.L}]")
        if self.k_replace < 1:
            raise ValueError("k_replace must be at least 1")
        if self.negative_weights is not None and len(self.negative_weights) != len(NEGATIVE_KINDS):
            raise ValueError(f"need {len(NEGATIVE_KINDS)} negative weights")


class NegativeContext:
    """Per-OD sampling support: frequent-set membership and a pool of infrequent cells."""

    def __init__(self, stats: ItineraryStats, indexer: CellIndexer, neg_pool: Sequence[int]):
        self.stats = stats
        self.indexer = indexer
        self.pos_pool = np.array(stats.sorted_pos(), dtype=np.int64)
        self.neg_pool = np.array(sorted(set(neg_pool) - stats.s_pos), dtype=np.int64)
        self._disk_cache: dict[tuple[int, int], np.ndarray] = {}

    def infrequent_disk(self, cell: int, k: int) -> np.ndarray:
        key = (cell, k)
        if key not in self._disk_cache:
            try:
                disk = self.indexer.disk(cell, k)
            except ValueError:
                disk = set()
            self._disk_cache[key] = np.array(sorted(disk - self.stats.s_pos), dtype=np.int64)
        return self._disk_cache[key]


# ---- positive views ----

def random_mask(w: Window, rho1: int, rng: np.random.Generator) -> Window:
    m = min(int(rng.integers(0, rho1 + 1)), len(w) - 1)
    if m <= 0:
        return tuple(w)
    drop = set(rng.choice(len(w), size=m, replace=False).tolist())
    return tuple(c for i, c in enumerate(w) if i not in drop)


def _kept_length(n: int, rho: int, rng: np.random.Generator) -> int:
    m = rng.uniform(0.0, rho)
    return min(n, max(1, math.ceil(m)))


def truncate_rear(w: Window, rho2: int, rng: np.random.Generator) -> Window:
    return tuple(w[:_kept_length(len(w), rho2, rng)])


def truncate_head(w: Window, rho3: int, rng: np.random.Generator) -> Window:
    return tuple(w[len(w) - _kept_length(len(w), rho3, rng):])


def sample_positive_view(w: Window, params: AugmentationParams, rng: np.random.Generator) -> Window:
    choice = int(rng.integers(3))
    if choice == 0:
        return random_mask(w, params.rho1, rng)
    if choice == 1:
        return truncate_rear(w, params.rho2, rng)
    return truncate_head(w, params.rho3, rng)


# ---- negatives ----

def neg_random_replace(w: Window, ctx: NegativeContext, k: int, mode: str,
                       rng: np.random.Generator) -> Window:
    """Replace ``m ~ U{1..L}`` cells by infrequent cells within ``k`` hops."""
    if mode not in ("interior", "head", "rear"):
        raise ValueError(f"unknown replacement mode {mode!r}")
    n = len(w)
    out = list(w)
    m = int(rng.integers(1, n + 1))
    if mode == "head":
        positions = list(range(m))
    elif mode == "rear":
        positions = list(range(n - m, n))
    else:
        positions = rng.choice(n, size=m, replace=False).tolist()
    replaced: set[int] = set()
    for p in positions:
        cand = ctx.infrequent_disk(w[p], k)
        failures = 0
        while len(cand) == 0 and mode == "interior" and failures < n:
            free = [i for i in range(n) if i not in replaced and i not in positions]
            if not free:
                break
            p = free[int(rng.integers(len(free)))]
            cand = ctx.infrequent_disk(w[p], k)
            failures += 1
        if len(cand) == 0:
            cand = ctx.neg_pool
        if len(cand) == 0:
            raise ValueError("no infrequent cell available for replacement")
        out[p] = int(cand[rng.integers(len(cand))])
        replaced.add(p)
    return tuple(out)


def neg_random_combination(ctx: NegativeContext, L: int, source: str,
                           rng: np.random.Generator) -> Window:
    pool = ctx.neg_pool if source == "neg" else ctx.pos_pool if source == "pos" else None
    if pool is None:
        raise ValueError(f"unknown combination source {source!r}")
    if len(pool) == 0:
        raise ValueError(f"the {source} cell set is empty")
    return tuple(int(c) for c in pool[rng.integers(len(pool), size=L)])


def neg_shuffle(w: Window, rng: np.random.Generator) -> Window:
    if len(set(w)) < 2:
        return tuple(w)
    while True:
        perm = rng.permutation(len(w))
        out = tuple(w[i] for i in perm)
        if out != tuple(w):
            return out


def neg_repeat(w: Window, rng: np.random.Generator, k_seg: int | None = None) -> Window:
    """Final ``k_seg`` cells, then walk backwards toward the front; length preserved."""
    n = len(w)
    if n < 2:
        return tuple(w)
    if k_seg is None:
        hi = max(2, n // 2)
        k_seg = int(rng.integers(2, hi + 1))
    k_seg = min(k_seg, n)
    head = list(w[n - k_seg:])
    back = list(reversed(w[:n - 1]))
    return tuple((head + back)[:n])


def neg_slice_permute(w: Window, rng: np.random.Generator, k: int | None = None) -> Window:
    n = len(w)
    if n < 2:
        return tuple(w)
    if k is None:
        k = int(rng.integers(1, n))
    return tuple(w[k:]) + tuple(w[:k])


def sample_negative(w: Window, ctx: NegativeContext, params: AugmentationParams,
                    rng: np.random.Generator) -> Window:
    weights = params.negative_weights
    if weights is None:
        kind = NEGATIVE_KINDS[int(rng.integers(len(NEGATIVE_KINDS)))]
    else:
        p = np.asarray(weights, dtype=float)
        kind = NEGATIVE_KINDS[int(rng.choice(len(NEGATIVE_KINDS), p=p / p.sum()))]
    L = len(w)
    if kind == "random_replace":
        return neg_random_replace(w, ctx, params.k_replace, "interior", rng)
    if kind == "head_rear_replace":
        mode = "head" if rng.integers(2) == 0 else "rear"
        return neg_random_replace(w, ctx, params.k_replace, mode, rng)
    if kind == "neg_combination":
        return neg_random_combination(ctx, L, "neg", rng)
    if kind == "pos_combination":
        return neg_random_combination(ctx, L, "pos", rng)
    if kind == "shuffle":
        return neg_shuffle(w, rng)
    if kind == "repeat":
        return neg_repeat(w, rng)
    return neg_slice_permute(w, rng)
