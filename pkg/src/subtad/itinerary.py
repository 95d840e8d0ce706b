"""Per-itinerary (OD pair) visit statistics and the weights derived from them."""
from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Hashable, Iterable, Sequence

from .graphs import HierarchicalGraph
from .spatial import CellTrajectory

STATS_VERSION = 1


@dataclass(frozen=True)
class ItineraryStats:
    """Frequently visited cells of one OD pair.

    The infrequent set is never materialised: a cell is infrequent iff it is
    not in ``s_pos``.
    """

    od: Hashable
    visit_freq: dict[int, float]
    s_pos: frozenset[int]
    delta_od: float
    n_trajectories: int
    P: int = 0
    N: int = 0
    resolution: int = 0
    _sorted_pos: tuple[int, ...] = field(default=(), repr=False, compare=False)

    def is_frequent(self, cell: int) -> bool:
        return cell in self.s_pos

    def sorted_pos(self) -> tuple[int, ...]:
        return self._sorted_pos or tuple(sorted(self.s_pos))

    def with_counts(self, P: int, N: int) -> "ItineraryStats":
        return replace(self, P=int(P), N=int(N))

    @property
    def theta(self) -> float:
        return self.P / self.N


def frequent_cells(trajs_od: Iterable[CellTrajectory], delta_od: float = 0.2,
                   resolution: int = 0) -> ItineraryStats:
    """Visit frequency with multiplicity: a cell seen twice in one trajectory counts twice."""
    trajs = list(trajs_od)
    if not trajs:
        raise ValueError("frequent_cells needs at least one trajectory")
    if not 0.0 < delta_od <= 1.0:
        raise ValueError("delta_od must lie in (0, 1]")
    ods = {t.od for t in trajs}
    if len(ods) != 1:
        raise ValueError(f"trajectories span several OD pairs: {sorted(map(str, ods))}")
    counts: Counter[int] = Counter()
    for t in trajs:
        counts.update(t.cells)
    n = len(trajs)
    freq = {c: k / n for c, k in counts.items()}
    s_pos = frozenset(c for c, f in freq.items() if f > delta_od)
    return ItineraryStats(ods.pop(), freq, s_pos, delta_od, n, resolution=resolution,
                          _sorted_pos=tuple(sorted(s_pos)))


def stats_by_od(trajs: Iterable[CellTrajectory], delta_od: float = 0.2,
                resolution: int = 0) -> dict[Hashable, ItineraryStats]:
    groups: dict[Hashable, list[CellTrajectory]] = {}
    for t in trajs:
        groups.setdefault(t.od, []).append(t)
    return {od: frequent_cells(g, delta_od, resolution) for od, g in sorted(groups.items(), key=lambda kv: str(kv[0]))}


def normality_score(window: Sequence[int], stats: ItineraryStats) -> float:
    if len(window) == 0:
        raise ValueError("normality score of an empty window")
    return sum(1 for c in window if c in stats.s_pos) / len(window)


def check_deltas(delta1: float, delta2: float) -> None:
    if not 0.0 <= delta2 < delta1 <= 1.0:
        raise ValueError(f"need 0 <= delta2 < delta1 <= 1, got delta1={delta1}, delta2={delta2}")


def pair_weight(s: float, delta1: float = 0.8, delta2: float = 0.5) -> int:
    check_deltas(delta1, delta2)
    if s >= delta1:
        return 1
    if s > delta2:
        return 0
    return -1


@dataclass(frozen=True)
class RouteSubgraph:
    vertices: tuple[int, ...]
    edges: frozenset[tuple[int, int]]


def route_subgraph(stats: ItineraryStats, g: HierarchicalGraph) -> RouteSubgraph:
    if stats.resolution != g.resolution:
        raise ValueError("stats and graph resolutions differ")
    pos = stats.s_pos
    edges = frozenset(e for e in g.edges if e[0] in pos and e[1] in pos)
    return RouteSubgraph(stats.sorted_pos(), edges)


def save_stats(stats: dict[Hashable, ItineraryStats], path: str | Path,
               delta1: float | None = None, delta2: float | None = None) -> None:
    records = []
    for od, s in stats.items():
        records.append({
            "od": od,
            "delta_od": s.delta_od,
            "resolution": s.resolution,
            "n_trajectories": s.n_trajectories,
            "visit_freq": [[c, f] for c, f in sorted(s.visit_freq.items())],
            "s_pos": sorted(s.s_pos),
            "P": s.P,
            "N": s.N,
        })
    doc = {"format": "itinerary-stats", "version": STATS_VERSION,
           "delta1": delta1, "delta2": delta2, "ods": records}
    Path(path).write_text(json.dumps(doc, indent=1))


def load_stats(path: str | Path) -> dict[Hashable, ItineraryStats]:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != "itinerary-stats" or doc.get("version") != STATS_VERSION:
        raise ValueError(f"{path} is not a version-{STATS_VERSION} stats file")
    out = {}
    for r in doc["ods"]:
        s_pos = frozenset(r["s_pos"])
        out[r["od"]] = ItineraryStats(
            r["od"], {int(c): f for c, f in r["visit_freq"]}, s_pos, r["delta_od"],
            r["n_trajectories"], r["P"], r["N"], r["resolution"], tuple(sorted(s_pos)))
    return out
