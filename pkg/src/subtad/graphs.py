"""Road / context / mobility graphs over cells and base cell embeddings."""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from .spatial import CellIndexer, CellTrajectory, GeoPoint, ResolutionMismatchError

ROAD, CONTEXT, MOBILITY = 1, 2, 4
KIND_TAGS = {"road": ROAD, "context": CONTEXT, "mobility": MOBILITY}

MASK_ID, START_ID, UNKNOWN_ID = -1, -2, -3
SPECIAL_IDS = (MASK_ID, START_ID, UNKNOWN_ID)


@dataclass
class SourceGraph:
    """Directed graph keyed either by :class:`GeoPoint` or by cell id.

    ``resolution`` is ``None`` for geo-keyed graphs.
    """

    kind: str
    vertices: set = field(default_factory=set)
    edges: set = field(default_factory=set)
    resolution: int | None = None

    def __post_init__(self):
        if self.kind not in KIND_TAGS:
            raise ValueError(f"unknown graph kind {self.kind!r}")
        for u, v in self.edges:
            if u not in self.vertices or v not in self.vertices:
                raise ValueError(f"edge ({u}, {v}) references a missing vertex")


@dataclass
class HierarchicalGraph:
    vertices: set[int]
    edges: dict[tuple[int, int], int]
    resolution: int

    def out_neighbors(self) -> dict[int, list[int]]:
        adj: dict[int, list[int]] = {v: [] for v in self.vertices}
        for u, v in self.edges:
            adj[u].append(v)
        for v in adj:
            adj[v].sort()
        return adj

    def __eq__(self, other):
        if not isinstance(other, HierarchicalGraph):
            return NotImplemented
        return (self.vertices == other.vertices and self.edges == other.edges
                and self.resolution == other.resolution)


def symmetrize(edges: Iterable[tuple]) -> set[tuple]:
    out = set()
    for u, v in edges:
        out.add((u, v))
        out.add((v, u))
    return out


def map_graph(g: SourceGraph, indexer: CellIndexer) -> SourceGraph:
    """Map a geo-keyed graph onto cells, dropping edges inside one cell."""
    if g.resolution is not None:
        raise ValueError("graph is already cell-keyed")
    cell_of = {v: indexer.index(v.lon, v.lat) for v in g.vertices}
    edges = {(cell_of[u], cell_of[v]) for u, v in g.edges if cell_of[u] != cell_of[v]}
    return SourceGraph(g.kind, set(cell_of.values()), edges, indexer.resolution)


def build_mobility_graph(trajs: Iterable[CellTrajectory], resolution: int) -> SourceGraph:
    vertices: set[int] = set()
    edges: set[tuple[int, int]] = set()
    for tr in trajs:
        vertices.update(tr.cells)
        for a, b in zip(tr.cells, tr.cells[1:]):
            if a != b:
                edges.add((a, b))
    return SourceGraph("mobility", vertices, edges, resolution)


def merge_graphs(parts: Sequence[SourceGraph | HierarchicalGraph]) -> HierarchicalGraph:
    if not parts:
        raise ValueError("nothing to merge")
    resolutions = {p.resolution for p in parts}
    if len(resolutions) != 1 or None in resolutions:
        raise ResolutionMismatchError(f"parts span resolutions {resolutions}")
    vertices: set[int] = set()
    edges: dict[tuple[int, int], int] = {}
    for p in parts:
        vertices |= set(p.vertices)
        if isinstance(p, HierarchicalGraph):
            tagged = p.edges.items()
        else:
            tag = KIND_TAGS[p.kind]
            tagged = ((e, tag) for e in p.edges)
        for (u, v), tag in tagged:
            if u != v:
                edges[(u, v)] = edges.get((u, v), 0) | tag
    return HierarchicalGraph(vertices, edges, resolutions.pop())


def road_graph_from_grid(indexer: CellIndexer, cells: Iterable[int]) -> SourceGraph:
    """Geo-keyed road graph with one node at each cell centre, linked to adjacent cells."""
    cells = set(cells)
    node = {c: GeoPoint(*indexer.center(c)) for c in cells}
    edges = set()
    for c in cells:
        for n in indexer.neighbors(c):
            if n in cells:
                edges.add((node[c], node[n]))
    return SourceGraph("road", set(node.values()), symmetrize(edges))


def read_road_network(nodes_path: str | Path, edges_path: str | Path) -> SourceGraph:
    """Nodes CSV ``node_id,lon,lat`` plus edges CSV ``src,dst``; edges are symmetrized."""
    with Path(nodes_path).open(newline="") as fh:
        nodes = {row["node_id"]: GeoPoint(float(row["lon"]), float(row["lat"]))
                 for row in csv.DictReader(fh)}
    with Path(edges_path).open(newline="") as fh:
        edges = {(nodes[row["src"]], nodes[row["dst"]]) for row in csv.DictReader(fh)}
    return SourceGraph("road", set(nodes.values()), symmetrize(edges))


def read_context_graph(path: str | Path) -> SourceGraph:
    """Ordered stop lists, CSV ``route_id,seq,lon,lat``. Consecutive stops are linked."""
    routes: dict[str, list[tuple[int, GeoPoint]]] = {}
    with Path(path).open(newline="") as fh:
        for row in csv.DictReader(fh):
            routes.setdefault(row["route_id"], []).append(
                (int(row["seq"]), GeoPoint(float(row["lon"]), float(row["lat"]))))
    vertices, edges = set(), set()
    for stops in routes.values():
        stops.sort(key=lambda s: s[0])
        pts = [p for _, p in stops]
        vertices.update(pts)
        edges.update(zip(pts, pts[1:]))
    return SourceGraph("context", vertices, symmetrize(edges))


def write_graph(g: HierarchicalGraph, path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        fh.write(f"# hierarchical-graph v1 resolution={g.resolution}\n")
        w = csv.writer(fh)
        w.writerow(("src", "dst", "tags"))
        for (u, v), tag in sorted(g.edges.items()):
            w.writerow((u, v, tag))
        isolated = g.vertices - {u for e in g.edges for u in e}
        for v in sorted(isolated):
            w.writerow((v, "", 0))


def read_graph(path: str | Path) -> HierarchicalGraph:
    with Path(path).open(newline="") as fh:
        header = fh.readline()
        if not header.startswith("# hierarchical-graph v1"):
            raise ValueError(f"{path} is not a hierarchical graph file")
        resolution = int(header.rsplit("=", 1)[1])
        vertices, edges = set(), {}
        for row in csv.DictReader(fh):
            u = int(row["src"])
            vertices.add(u)
            if row["dst"]:
                v = int(row["dst"])
                vertices.add(v)
                edges[(u, v)] = int(row["tags"])
    return HierarchicalGraph(vertices, edges, resolution)


# ---- node2vec ----

@dataclass
class WalkParams:
    walks_per_node: int = 10
    walk_length: int = 40
    p: float = 1.0
    q: float = 1.0
    window: int = 5
    epochs: int = 5
    negatives: int = 5
    batch_size: int = 1024
    lr: float = 0.01
    seed: int = 0


def random_walks(g: HierarchicalGraph, params: WalkParams) -> list[list[int]]:
    """Second-order biased walks; each walk's stream is seeded by (seed, node, walk)."""
    order = sorted(g.vertices)
    pos = {v: i for i, v in enumerate(order)}
    adj = g.out_neighbors()
    undirected = {v: set(ns) for v, ns in adj.items()}
    for u, v in g.edges:
        undirected[v].add(u)
    walks = []
    for w_idx in range(params.walks_per_node):
        for v in order:
            rng = np.random.default_rng([params.seed, pos[v], w_idx])
            walks.append(_walk(v, adj, undirected, params, rng))
    return walks


def _walk(start, adj, undirected, params: WalkParams, rng) -> list[int]:
    walk = [start]
    while len(walk) < params.walk_length:
        cur = walk[-1]
        nbrs = adj[cur]
        if not nbrs:
            break
        if len(walk) == 1:
            walk.append(nbrs[rng.integers(len(nbrs))])
            continue
        prev = walk[-2]
        weights = np.array([
            1.0 / params.p if x == prev else (1.0 if x in undirected[prev] else 1.0 / params.q)
            for x in nbrs
        ])
        walk.append(nbrs[rng.choice(len(nbrs), p=weights / weights.sum())])
    return walk


@dataclass
class CellEmbeddingTable:
    dim: int
    resolution: int
    table: dict[int, np.ndarray]
    specials: dict[int, np.ndarray]

    def vector(self, cell: int) -> np.ndarray:
        if cell in self.table:
            return self.table[cell]
        return self.specials.get(cell, self.specials[UNKNOWN_ID])

    def cells(self) -> list[int]:
        return sorted(self.table)

    def matrix(self, cells: Sequence[int]) -> np.ndarray:
        return np.stack([self.vector(c) for c in cells]).astype(np.float32)


def train_cell_embeddings(g: HierarchicalGraph, dim: int = 64,
                          params: WalkParams | None = None) -> CellEmbeddingTable:
    """node2vec: biased walks followed by skip-gram with negative sampling."""
    params = params or WalkParams()
    if not g.vertices:
        raise ValueError("cannot embed an empty graph")
    if dim < 2:
        raise ValueError("embedding dimension must be at least 2")
    order = sorted(g.vertices)
    pos = {v: i for i, v in enumerate(order)}
    walks = [[pos[c] for c in w] for w in random_walks(g, params)]

    centers, contexts = [], []
    for w in walks:
        for i, c in enumerate(w):
            lo, hi = max(0, i - params.window), min(len(w), i + params.window + 1)
            for j in range(lo, hi):
                if j != i:
                    centers.append(c)
                    contexts.append(w[j])
    n = len(order)
    gen = torch.Generator().manual_seed(params.seed)
    emb_in = torch.empty(n, dim).uniform_(-0.5 / dim, 0.5 / dim, generator=gen)
    emb_out = torch.zeros(n, dim)

    if centers:
        counts = np.bincount(np.array([c for w in walks for c in w]), minlength=n).astype(np.float64)
        noise = torch.tensor(counts ** 0.75 / (counts ** 0.75).sum())
        emb_in.requires_grad_(True)
        emb_out.requires_grad_(True)
        opt = torch.optim.Adam([emb_in, emb_out], lr=params.lr)
        c_all = torch.tensor(centers)
        x_all = torch.tensor(contexts)
        for _ in range(params.epochs):
            perm = torch.randperm(len(c_all), generator=gen)
            for start in range(0, len(perm), params.batch_size):
                idx = perm[start:start + params.batch_size]
                c, x = c_all[idx], x_all[idx]
                neg = torch.multinomial(noise, len(idx) * params.negatives, True, generator=gen)
                neg = neg.view(len(idx), params.negatives)
                vc = emb_in[c]
                pos_score = (vc * emb_out[x]).sum(-1)
                neg_score = torch.einsum("bd,bkd->bk", vc, emb_out[neg])
                loss = -(torch.nn.functional.logsigmoid(pos_score).mean()
                         + torch.nn.functional.logsigmoid(-neg_score).sum(-1).mean())
                opt.zero_grad()
                loss.backward()
                opt.step()
    vectors = emb_in.detach().numpy().astype(np.float32)
    spec_rng = np.random.default_rng([params.seed, n, 1])
    specials = {sid: spec_rng.uniform(-0.5 / dim, 0.5 / dim, dim).astype(np.float32)
                for sid in SPECIAL_IDS}
    return CellEmbeddingTable(dim, g.resolution, {c: vectors[pos[c]] for c in order}, specials)


def random_embedding_table(cells: Iterable[int], dim: int, resolution: int,
                           seed: int = 0) -> CellEmbeddingTable:
    rng = np.random.default_rng(seed)
    cells = sorted(set(cells))
    mat = rng.normal(0.0, 1.0 / np.sqrt(dim), (len(cells) + len(SPECIAL_IDS), dim)).astype(np.float32)
    table = {c: mat[i] for i, c in enumerate(cells)}
    specials = {sid: mat[len(cells) + i] for i, sid in enumerate(SPECIAL_IDS)}
    return CellEmbeddingTable(dim, resolution, table, specials)


_EMB_MAGIC = b"CEMB"
_EMB_VERSION = 1


def save_embeddings(t: CellEmbeddingTable, path: str | Path) -> None:
    rows = [(c, t.table[c]) for c in t.cells()] + [(s, t.specials[s]) for s in SPECIAL_IDS]
    with Path(path).open("wb") as fh:
        fh.write(_EMB_MAGIC)
        fh.write(struct.pack("<IIQi", _EMB_VERSION, t.dim, len(rows), t.resolution))
        for cid, vec in rows:
            fh.write(struct.pack("<q", cid))
            fh.write(np.asarray(vec, dtype="<f4").tobytes())


def load_embeddings(path: str | Path) -> CellEmbeddingTable:
    data = Path(path).read_bytes()
    if data[:4] != _EMB_MAGIC:
        raise ValueError(f"{path} is not an embedding table")
    version, dim, count, resolution = struct.unpack_from("<IIQi", data, 4)
    if version != _EMB_VERSION:
        raise ValueError(f"unsupported embedding table version {version}")
    offset = 4 + struct.calcsize("<IIQi")
    row = 8 + 4 * dim
    table, specials = {}, {}
    for i in range(count):
        base = offset + i * row
        (cid,) = struct.unpack_from("<q", data, base)
        vec = np.frombuffer(data, dtype="<f4", count=dim, offset=base + 8).copy()
        (specials if cid in SPECIAL_IDS else table)[cid] = vec
    return CellEmbeddingTable(dim, resolution, table, specials)
