"""Hexagonal cell indexing and trajectory-to-cell matching.

Two indexers share one interface: :class:`HexGridIndexer`, a bounded
axial-coordinate hex grid with an enumerable cell universe, and
:class:`H3Indexer`, a thin adapter over the ``h3`` package for real data.
Cells are plain Python ``int`` identifiers; the resolution lives on the
indexer that produced them.
"""
from __future__ import annotations

import csv
import json
import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Hashable, Iterable, Iterator, Sequence


class InvalidCoordinateError(ValueError):
    pass


class ResolutionMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class GeoPoint:
    lon: float
    lat: float
    t: float = 0.0


@dataclass
class RawTrajectory:
    traj_id: str
    od: Hashable
    points: list[GeoPoint]


@dataclass
class CellTrajectory:
    traj_id: str
    od: Hashable
    cells: list[int] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.cells)


def check_coordinate(lon: float, lat: float) -> None:
    if not (math.isfinite(lon) and math.isfinite(lat)):
        raise InvalidCoordinateError(f"non-finite coordinate ({lon}, {lat})")
    if not -180.0 <= lon <= 180.0 or not -90.0 <= lat <= 90.0:
        raise InvalidCoordinateError(f"coordinate out of range ({lon}, {lat})")


class CellIndexer:
    """Interface shared by the hex indexers."""

    resolution: int

    def index(self, lon: float, lat: float) -> int:
        raise NotImplementedError

    def neighbors(self, cell: int) -> list[int]:
        """Cells exactly one hop away."""
        raise NotImplementedError

    def disk(self, cell: int, k: int) -> set[int]:
        raise NotImplementedError

    def distance(self, a: int, b: int) -> int:
        raise NotImplementedError

    def center(self, cell: int) -> tuple[float, float]:
        """(lon, lat) of the cell centroid."""
        raise NotImplementedError

    def boundary(self, cell: int) -> list[tuple[float, float]]:
        raise NotImplementedError

    def is_valid(self, cell: int) -> bool:
        raise NotImplementedError

    def universe(self) -> list[int] | None:
        """All cells, when the universe is finite; ``None`` otherwise."""
        return None

    def manifest(self) -> str:
        raise NotImplementedError


# pointy-top axial directions
_AXIAL_DIRECTIONS = ((1, 0), (1, -1), (0, -1), (-1, 0), (-1, 1), (0, 1))
_SQRT3 = math.sqrt(3.0)


class HexGridIndexer(CellIndexer):
    """Bounded pointy-top hex grid in axial coordinates.

    Cell ``(q, r)`` with ``0 <= q < width`` and ``0 <= r < height`` has id
    ``r * width + q``. Planar coordinates are read directly from lon/lat
    degrees offset by the origin, so the grid is only meaningful over a
    small synthetic extent.
    """

    scheme = "axial-rowmajor"
    version = 1

    def __init__(self, width: int = 20, height: int = 20, size: float = 0.001,
                 origin: tuple[float, float] = (0.0, 0.0), resolution: int = 0):
        if width < 1 or height < 1:
            raise ValueError("grid must have at least one cell")
        if size <= 0:
            raise ValueError("cell size must be positive")
        self.width = int(width)
        self.height = int(height)
        self.size = float(size)
        self.origin = (float(origin[0]), float(origin[1]))
        self.resolution = int(resolution)

    def axial(self, cell: int) -> tuple[int, int]:
        if not self.is_valid(cell):
            raise ValueError(f"cell {cell} outside the grid")
        r, q = divmod(int(cell), self.width)
        return q, r

    def cell_at(self, q: int, r: int) -> int | None:
        if 0 <= q < self.width and 0 <= r < self.height:
            return r * self.width + q
        return None

    def is_valid(self, cell: int) -> bool:
        return 0 <= int(cell) < self.width * self.height

    def index(self, lon: float, lat: float) -> int:
        check_coordinate(lon, lat)
        x = (lon - self.origin[0]) / self.size
        y = (lat - self.origin[1]) / self.size
        fq = _SQRT3 / 3.0 * x - y / 3.0
        fr = 2.0 / 3.0 * y
        q, r = _cube_round(fq, fr)
        cell = self.cell_at(q, r)
        if cell is None:
            raise InvalidCoordinateError(f"({lon}, {lat}) falls outside the grid")
        return cell

    def center(self, cell: int) -> tuple[float, float]:
        q, r = self.axial(cell)
        x = self.size * (_SQRT3 * q + _SQRT3 / 2.0 * r)
        y = self.size * 1.5 * r
        return self.origin[0] + x, self.origin[1] + y

    def boundary(self, cell: int) -> list[tuple[float, float]]:
        cx, cy = self.center(cell)
        pts = []
        for i in range(6):
            angle = math.radians(60 * i - 30)
            pts.append((cx + self.size * math.cos(angle), cy + self.size * math.sin(angle)))
        return pts

    def neighbors(self, cell: int) -> list[int]:
        q, r = self.axial(cell)
        out = []
        for dq, dr in _AXIAL_DIRECTIONS:
            n = self.cell_at(q + dq, r + dr)
            if n is not None:
                out.append(n)
        return out

    def disk(self, cell: int, k: int) -> set[int]:
        if k < 0:
            raise ValueError("k must be non-negative")
        q, r = self.axial(cell)
        out = set()
        for dq in range(-k, k + 1):
            for dr in range(max(-k, -dq - k), min(k, -dq + k) + 1):
                n = self.cell_at(q + dq, r + dr)
                if n is not None:
                    out.add(n)
        return out

    def distance(self, a: int, b: int) -> int:
        qa, ra = self.axial(a)
        qb, rb = self.axial(b)
        dq, dr = qa - qb, ra - rb
        return (abs(dq) + abs(dr) + abs(dq + dr)) // 2

    def universe(self) -> list[int]:
        return list(range(self.width * self.height))

    def manifest(self) -> str:
        lines = [
            f"hexgrid v{self.version}",
            f"resolution={self.resolution}",
            f"width={self.width}",
            f"height={self.height}",
            f"size={self.size!r}",
            f"origin_lon={self.origin[0]!r}",
            f"origin_lat={self.origin[1]!r}",
            f"scheme={self.scheme}",
        ]
        return "\n".join(lines) + "\n"


def _cube_round(fq: float, fr: float) -> tuple[int, int]:
    fs = -fq - fr
    q, r, s = round(fq), round(fr), round(fs)
    dq, dr, ds = abs(q - fq), abs(r - fr), abs(s - fs)
    if dq > dr and dq > ds:
        q = -r - s
    elif dr > ds:
        r = -q - s
    return int(q), int(r)


class H3Indexer(CellIndexer):
    """Adapter over the H3 hierarchical hexagonal system."""

    version = 1

    def __init__(self, resolution: int = 9):
        import h3

        if not 0 <= resolution <= 15:
            raise ValueError("H3 resolution must lie in [0, 15]")
        self._h3 = h3
        self.resolution = int(resolution)

    def _s(self, cell: int) -> str:
        return self._h3.int_to_str(int(cell))

    def index(self, lon: float, lat: float) -> int:
        check_coordinate(lon, lat)
        return self._h3.str_to_int(self._h3.latlng_to_cell(lat, lon, self.resolution))

    def is_valid(self, cell: int) -> bool:
        try:
            s = self._s(cell)
        except (ValueError, TypeError, OverflowError):
            return False
        return self._h3.is_valid_cell(s) and self._h3.get_resolution(s) == self.resolution

    def parent(self, cell: int, resolution: int) -> int:
        return self._h3.str_to_int(self._h3.cell_to_parent(self._s(cell), resolution))

    def neighbors(self, cell: int) -> list[int]:
        return sorted(self.disk(cell, 1) - {int(cell)})

    def disk(self, cell: int, k: int) -> set[int]:
        if k < 0:
            raise ValueError("k must be non-negative")
        return {self._h3.str_to_int(c) for c in self._h3.grid_disk(self._s(cell), k)}

    def distance(self, a: int, b: int) -> int:
        return int(self._h3.grid_distance(self._s(a), self._s(b)))

    def center(self, cell: int) -> tuple[float, float]:
        lat, lon = self._h3.cell_to_latlng(self._s(cell))
        return lon, lat

    def boundary(self, cell: int) -> list[tuple[float, float]]:
        return [(lon, lat) for lat, lon in self._h3.cell_to_boundary(self._s(cell))]

    def manifest(self) -> str:
        return f"h3 v{self.version}\nresolution={self.resolution}\n"


def indexer_from_manifest(text: str) -> CellIndexer:
    lines = [ln.strip() for ln in text.strip().splitlines() if ln.strip()]
    if not lines:
        raise ValueError("empty indexer manifest")
    kind, _, version = lines[0].partition(" ")
    fields = dict(ln.split("=", 1) for ln in lines[1:])
    if kind == "hexgrid":
        if version != "v1" or fields.get("scheme") != HexGridIndexer.scheme:
            raise ValueError(f"unsupported hexgrid manifest {lines[0]!r}")
        return HexGridIndexer(
            width=int(fields["width"]), height=int(fields["height"]),
            size=float(fields["size"]),
            origin=(float(fields["origin_lon"]), float(fields["origin_lat"])),
            resolution=int(fields["resolution"]),
        )
    if kind == "h3":
        return H3Indexer(int(fields["resolution"]))
    raise ValueError(f"unknown indexer kind {kind!r}")


def index_point(p: GeoPoint, indexer: CellIndexer) -> int:
    return indexer.index(p.lon, p.lat)


def dedup_cells(cells: Iterable[int]) -> list[int]:
    """Collapse runs of equal consecutive cells; revisits survive."""
    out: list[int] = []
    for c in cells:
        if not out or out[-1] != c:
            out.append(c)
    return out


def match_trajectory(traj: RawTrajectory, indexer: CellIndexer) -> CellTrajectory:
    if not traj.points:
        raise ValueError(f"trajectory {traj.traj_id!r} has no points")
    cells = dedup_cells(indexer.index(p.lon, p.lat) for p in traj.points)
    return CellTrajectory(traj.traj_id, traj.od, cells)


def k_hop_neighbors(cell: int, k: int, indexer: CellIndexer) -> set[int]:
    return indexer.disk(cell, k)


def hop_distance(a: int, b: int, indexer: CellIndexer) -> int:
    if not (indexer.is_valid(a) and indexer.is_valid(b)):
        raise ResolutionMismatchError(
            f"cells {a} and {b} are not both valid at resolution {indexer.resolution}")
    return indexer.distance(a, b)


def bfs_distances(start: int, indexer: CellIndexer, max_depth: int) -> dict[int, int]:
    """Breadth-first hop distances around ``start`` up to ``max_depth``."""
    dist = {start: 0}
    queue = deque([start])
    while queue:
        c = queue.popleft()
        if dist[c] == max_depth:
            continue
        for n in indexer.neighbors(c):
            if n not in dist:
                dist[n] = dist[c] + 1
                queue.append(n)
    return dist


# ---- ingestion ----

CSV_FIELDS = ("traj_id", "route_id", "lon", "lat", "timestamp")


def _group_points(rows: Iterable[dict]) -> list[RawTrajectory]:
    trajs: dict[str, RawTrajectory] = {}
    for row in rows:
        tid = str(row["traj_id"])
        p = GeoPoint(float(row["lon"]), float(row["lat"]), int(row["timestamp"]))
        if tid not in trajs:
            trajs[tid] = RawTrajectory(tid, str(row["route_id"]), [])
        tr = trajs[tid]
        if tr.points and p.t < tr.points[-1].t:
            raise ValueError(f"timestamps decrease within trajectory {tid!r}")
        tr.points.append(p)
    return list(trajs.values())


def read_trajectories(path: str | Path) -> list[RawTrajectory]:
    """Read ``traj_id,route_id,lon,lat,timestamp`` records from CSV or NDJSON.

    Input order is preserved within each trajectory; nothing is re-sorted.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        if path.suffix in (".ndjson", ".jsonl"):
            rows = (json.loads(ln) for ln in fh if ln.strip())
            return _group_points(rows)
        reader = csv.DictReader(fh)
        missing = set(CSV_FIELDS) - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"CSV is missing columns {sorted(missing)}")
        return _group_points(reader)


def write_trajectories_csv(trajs: Iterable[RawTrajectory], path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_FIELDS)
        for tr in trajs:
            for p in tr.points:
                w.writerow((tr.traj_id, tr.od, repr(p.lon), repr(p.lat), int(p.t)))


def write_cell_trajectories(trajs: Iterable[CellTrajectory], path: str | Path) -> None:
    with Path(path).open("w") as fh:
        for tr in trajs:
            fh.write(json.dumps({"traj_id": tr.traj_id, "route_id": tr.od, "cells": tr.cells}) + "\n")


def read_cell_trajectories(path: str | Path) -> list[CellTrajectory]:
    out = []
    with Path(path).open() as fh:
        for ln in fh:
            if ln.strip():
                rec = json.loads(ln)
                out.append(CellTrajectory(rec["traj_id"], rec["route_id"], [int(c) for c in rec["cells"]]))
    return out


def iter_windows(cells: Sequence[int], length: int) -> Iterator[tuple[int, ...]]:
    """Stride-1 windows of ``length``; a shorter trajectory yields itself once."""
    if len(cells) <= length:
        yield tuple(cells)
        return
    for i in range(len(cells) - length + 1):
        yield tuple(cells[i:i + length])
