"""Small fixtures shared by the model tests."""
import numpy as np

from subtad.encoder import EncoderConfig, Vocabulary, WindowEncoder
from subtad.graphs import random_embedding_table
from subtad.itinerary import RouteSubgraph

CELLS = list(range(100, 124))
# criterion number -> (passed, one-line detail), filled by the acceptance tests
ACCEPTANCE: dict[int, tuple[bool, str]] = {}

ROUTES = {"A": [100, 101, 102, 103, 104, 105, 106, 107], "B": [104, 112, 113, 114, 115, 116, 117, 118]}


def chain_edges(cells):
    return frozenset([(a, b) for a, b in zip(cells, cells[1:])] + [(b, a) for a, b in zip(cells, cells[1:])])


def tiny_encoder(window=4, seed=0, dtype=None, **overrides):
    cfg = EncoderConfig(d_c=8, d=16, d_z=8, gat_dim=8, gat_heads=2, attn_dim=4, window=window, **overrides)
    base = random_embedding_table(CELLS, 8, 0, seed=seed)
    subgraphs = {od: RouteSubgraph(tuple(sorted(r)), chain_edges(r)) for od, r in ROUTES.items()}
    model = WindowEncoder(cfg, Vocabulary(CELLS), sorted(ROUTES), subgraphs, base, seed=seed)
    if dtype is not None:
        model = model.to(dtype)
    return model


def rand_windows(rng, n, L, cells=CELLS):
    return [tuple(int(c) for c in rng.choice(cells, int(rng.integers(1, L + 1)))) for _ in range(n)]


def unit(rng, *shape):
    x = rng.normal(size=shape)
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def record(n: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[n] = (bool(ok), detail)
    print(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
