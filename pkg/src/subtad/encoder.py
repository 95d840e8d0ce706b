"""Window encoder: route-wise graph attention, fusion, recurrent encoding, pooling.

Windows enter as padded vocabulary-index tensors. Index 0 is padding; the
next three indices are the ``<mask>``, ``<start>`` and ``<unk>`` tokens.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Hashable, Mapping, Sequence

import numpy as np
import torch
from torch import nn
from torch.nn.utils.rnn import pack_padded_sequence, pad_packed_sequence

from .graphs import MASK_ID, CellEmbeddingTable
from .itinerary import RouteSubgraph

PAD, MASK, START, UNK = 0, 1, 2, 3
N_SPECIAL = 4
CHECKPOINT_FORMAT = "subtad-encoder"
CHECKPOINT_VERSION = 1


class Vocabulary:
    def __init__(self, cells: Sequence[int]):
        self.cells = sorted(set(int(c) for c in cells if c >= 0))
        self.index = {c: i + N_SPECIAL for i, c in enumerate(self.cells)}
        self.index[MASK_ID] = MASK

    def __len__(self) -> int:
        return len(self.cells) + N_SPECIAL

    def encode(self, window: Sequence[int]) -> list[int]:
        return [self.index.get(c, UNK) for c in window]

    def batch(self, windows: Sequence[Sequence[int]], max_len: int | None = None):
        """Padded index tensor and lengths for a list of cell windows."""
        lengths = [len(w) for w in windows]
        if min(lengths, default=1) < 1:
            raise ValueError("empty window")
        T = max_len or max(lengths)
        out = np.zeros((len(windows), T), dtype=np.int64)
        for i, w in enumerate(windows):
            out[i, :len(w)] = self.encode(w)
        return torch.from_numpy(out), torch.tensor(lengths)


@dataclass
class EncoderConfig:
    d_c: int = 64
    d: int = 128
    d_z: int = 64
    gat_dim: int = 32
    gat_heads: int = 4
    gat_layers: int = 1
    attn_dim: int = 32
    fuse_layers: int = 2
    window: int = 5
    route_gat: bool = True
    base_embedding: str = "graph"  # "graph" (frozen node2vec) or "random" (learned)
    leaky_slope: float = 0.2

    def __post_init__(self):
        if self.gat_dim % self.gat_heads:
            raise ValueError("gat_dim must be divisible by gat_heads")
        if self.base_embedding not in ("graph", "random"):
            raise ValueError(f"unknown base_embedding {self.base_embedding!r}")


def mlp(d_in: int, d_out: int, layers: int = 2, hidden: int | None = None) -> nn.Sequential:
    hidden = hidden or d_out
    mods: list[nn.Module] = []
    d = d_in
    for _ in range(layers - 1):
        mods += [nn.Linear(d, hidden), nn.ReLU()]
        d = hidden
    mods.append(nn.Linear(d, d_out))
    # zero biases keep the spread of low-variance inputs from being swamped
    for m in mods:
        if isinstance(m, nn.Linear):
            nn.init.zeros_(m.bias)
    return nn.Sequential(*mods)


def neighbor_mask(n: int, vertices: Sequence[int], edges) -> torch.Tensor:
    """Dense undirected neighbourhood mask; isolated vertices attend to themselves."""
    pos = {v: i for i, v in enumerate(vertices)}
    mask = torch.zeros(n, n, dtype=torch.bool)
    for u, v in edges:
        if u in pos and v in pos and u != v:
            mask[pos[u], pos[v]] = True
            mask[pos[v], pos[u]] = True
    lonely = ~mask.any(1)
    idx = torch.nonzero(lonely).flatten()
    mask[idx, idx] = True
    return mask


class GATLayer(nn.Module):
    """Multi-head attention layer scoring ``a^T LeakyReLU(W1 [h_j || h_k])``."""

    def __init__(self, d_in: int, d_out: int, heads: int, attn_dim: int, slope: float = 0.2):
        super().__init__()
        self.heads = heads
        self.slope = slope
        self.W1 = nn.Parameter(torch.empty(heads, attn_dim, 2 * d_in))
        self.a = nn.Parameter(torch.empty(heads, attn_dim))
        self.W2 = nn.Parameter(torch.empty(heads, d_out // heads, d_in))
        nn.init.xavier_uniform_(self.a)
        for hd in range(heads):
            nn.init.xavier_uniform_(self.W1.data[hd])
            nn.init.xavier_uniform_(self.W2.data[hd])

    def attention(self, h: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        d_in = h.shape[1]
        left = torch.einsum("hak,nk->hna", self.W1[:, :, :d_in], h)
        right = torch.einsum("hak,nk->hna", self.W1[:, :, d_in:], h)
        pre = nn.functional.leaky_relu(left[:, :, None, :] + right[:, None, :, :], self.slope)
        e = torch.einsum("hjka,ha->hjk", pre, self.a)
        e = e.masked_fill(~mask, float("-inf"))
        return torch.softmax(e, dim=-1)

    def forward(self, h: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        alpha = self.attention(h, mask)
        values = torch.einsum("hok,nk->hno", self.W2, h)
        out = nn.functional.elu(torch.einsum("hjk,hko->hjo", alpha, values))
        return out.permute(1, 0, 2).reshape(h.shape[0], -1)


class RouteGAT(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        dims = [cfg.d_c] + [cfg.gat_dim] * cfg.gat_layers
        self.layers = nn.ModuleList(
            GATLayer(a, b, cfg.gat_heads, cfg.attn_dim, cfg.leaky_slope) for a, b in zip(dims, dims[1:]))

    def forward(self, h: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        for layer in self.layers:
            h = layer(h, mask)
        return h


class WindowEncoder(nn.Module):
    """Encoder f, projection head g and reconstruction decoder over one vocabulary."""

    def __init__(self, cfg: EncoderConfig, vocab: Vocabulary, ods: Sequence[Hashable],
                 subgraphs: Mapping[Hashable, RouteSubgraph], base: CellEmbeddingTable | None = None,
                 seed: int = 0):
        super().__init__()
        torch.manual_seed(seed)
        self.cfg = cfg
        self.vocab = vocab
        self.ods = list(ods)
        self.od_index = {od: i for i, od in enumerate(self.ods)}
        self.subgraphs = {od: subgraphs[od] for od in self.ods}
        V = len(vocab)

        if base is not None and base.dim != cfg.d_c:
            raise ValueError(f"embedding table has dim {base.dim}, encoder expects {cfg.d_c}")
        if cfg.base_embedding == "graph":
            if base is None:
                raise ValueError("graph base embeddings need an embedding table")
            mat = torch.zeros(V, cfg.d_c)
            mat[N_SPECIAL:] = torch.from_numpy(base.matrix(vocab.cells))
            self.register_buffer("base_cells", mat)
        else:
            self.base_cells = nn.Parameter(torch.randn(V, cfg.d_c) / math.sqrt(cfg.d_c))
        self.specials = nn.Parameter(torch.randn(3, cfg.d_c) / math.sqrt(cfg.d_c))  # mask, start, unk

        fuse_in = cfg.d_c
        if cfg.route_gat:
            self.gat = RouteGAT(cfg)
            self.gat_default = nn.Parameter(torch.randn(cfg.gat_dim) / math.sqrt(cfg.gat_dim))
            fuse_in += cfg.gat_dim
        self.fuse = mlp(fuse_in, cfg.d, cfg.fuse_layers)
        self.od_embed = nn.Embedding(len(self.ods), cfg.d)
        self.init_mlp = mlp(cfg.d, cfg.d, 2)
        self.rnn = nn.GRU(cfg.d, cfg.d, batch_first=True)
        self.W_q = nn.Linear(cfg.d, cfg.d, bias=False)
        self.W_k = nn.Linear(cfg.d, cfg.d, bias=False)
        self.pool_mlp = mlp(cfg.d, cfg.d, 2)
        self.proj = mlp(cfg.d, cfg.d_z, 2)
        self.dec_embed = nn.Embedding(V, cfg.d)
        self.dec_rnn = nn.GRU(cfg.d, cfg.d, batch_first=True)
        self.dec_out = nn.Linear(cfg.d, V)

        self._build_route_index()
        self._cache: torch.Tensor | None = None

    # ---- per-OD cell representations ----

    def _build_route_index(self):
        V = len(self.vocab)
        slot = torch.full((len(self.ods), V), -1, dtype=torch.long)
        self._route_idx, self._route_masks = [], []
        offset = 0
        for i, od in enumerate(self.ods):
            sg = self.subgraphs[od]
            verts = [v for v in sg.vertices if v in self.vocab.index]
            idx = torch.tensor([self.vocab.index[v] for v in verts], dtype=torch.long)
            self._route_idx.append(idx)
            self._route_masks.append(neighbor_mask(len(verts), verts, sg.edges))
            slot[i, idx] = torch.arange(offset, offset + len(verts))
            offset += len(verts)
        self.register_buffer("_slot", slot, persistent=False)
        self._n_route_rows = offset

    def base_matrix(self) -> torch.Tensor:
        base = self.base_cells
        return torch.cat([base[:1], self.specials, base[N_SPECIAL:]], 0)

    def route_attention(self, od: Hashable) -> list[torch.Tensor]:
        """Per-layer attention matrices (heads x n x n) of one OD subgraph."""
        i = self.od_index[od]
        h = self.base_matrix()[self._route_idx[i]]
        out = []
        for layer in self.gat.layers:
            out.append(layer.attention(h, self._route_masks[i]))
            h = layer(h, self._route_masks[i])
        return out

    def gat_outputs(self, od: Hashable) -> torch.Tensor:
        i = self.od_index[od]
        base = self.base_matrix()
        return self.gat(base[self._route_idx[i]], self._route_masks[i])

    def fused_rows(self) -> torch.Tensor:
        """Rows 0..V-1: OD-independent fusion; rows V+: per-OD frequent cells."""
        if self._cache is not None:
            return self._cache
        base = self.base_matrix()
        if not self.cfg.route_gat:
            return self.fuse(base)
        V = base.shape[0]
        shared = self.fuse(torch.cat([self.gat_default.expand(V, -1), base], 1))
        parts = [shared]
        for i in range(len(self.ods)):
            idx = self._route_idx[i]
            if len(idx):
                g = self.gat(base[idx], self._route_masks[i])
                parts.append(self.fuse(torch.cat([g, base[idx]], 1)))
        return torch.cat(parts, 0)

    def cache_tables(self, enabled: bool = True):
        """Freeze per-OD tables for read-only inference."""
        self._cache = None
        if enabled:
            with torch.no_grad():
                self._cache = self.fused_rows()

    def cell_inputs(self, tokens: torch.Tensor, od_idx: torch.Tensor, rows: torch.Tensor | None = None):
        rows = self.fused_rows() if rows is None else rows
        if not self.cfg.route_gat:
            return rows[tokens]
        slot = self._slot[od_idx[:, None], tokens]
        index = torch.where(slot >= 0, len(self.vocab) + slot, tokens)
        return rows[index]

    # ---- encoder f and head g ----

    def encode(self, tokens: torch.Tensor, lengths: torch.Tensor, od_idx: torch.Tensor,
               rows: torch.Tensor | None = None, return_weights: bool = False):
        if (lengths < 1).any():
            raise ValueError("empty window")
        x = self.cell_inputs(tokens, od_idx, rows)
        r = self.od_embed(od_idx)
        h0 = torch.tanh(self.init_mlp(r)).unsqueeze(0)
        packed = pack_padded_sequence(x, lengths.cpu(), batch_first=True, enforce_sorted=False)
        out, _ = self.rnn(packed, h0)
        H, _ = pad_packed_sequence(out, batch_first=True, total_length=tokens.shape[1])
        q = self.W_q(r)
        scores = torch.einsum("btd,bd->bt", self.W_k(H), q) / math.sqrt(self.cfg.d)
        valid = torch.arange(tokens.shape[1])[None, :] < lengths[:, None]
        weights = torch.softmax(scores.masked_fill(~valid, float("-inf")), dim=1)
        h = self.pool_mlp(torch.einsum("bt,btd->bd", weights, H))
        return (h, weights) if return_weights else h

    def project(self, h: torch.Tensor) -> torch.Tensor:
        return self.proj(h)

    def od_indices(self, ods: Sequence[Hashable]) -> torch.Tensor:
        try:
            return torch.tensor([self.od_index[o] for o in ods], dtype=torch.long)
        except KeyError as exc:
            raise KeyError(f"OD pair {exc.args[0]!r} unknown to this encoder") from None

    def embed_windows(self, windows: Sequence[Sequence[int]], ods: Sequence[Hashable],
                      batch_size: int = 1024) -> tuple[np.ndarray, np.ndarray]:
        """(h, z) arrays for raw cell windows, without gradients."""
        hs, zs = [], []
        was_training = self.training
        self.eval()
        with torch.no_grad():
            rows = self.fused_rows()
            for s in range(0, len(windows), batch_size):
                tok, lens = self.vocab.batch(windows[s:s + batch_size])
                h = self.encode(tok, lens, self.od_indices(ods[s:s + batch_size]), rows)
                hs.append(h.numpy())
                zs.append(self.project(h).numpy())
        self.train(was_training)
        if not hs:
            return np.zeros((0, self.cfg.d)), np.zeros((0, self.cfg.d_z))
        return np.concatenate(hs), np.concatenate(zs)

    # ---- decoder ----

    def decode_logits(self, h: torch.Tensor, targets: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
        """Teacher-forced logits; step i sees ``<start>, c_1 .. c_{i-1}``."""
        B, T = targets.shape
        inputs = torch.cat([torch.full((B, 1), START, dtype=torch.long), targets[:, :-1]], 1)
        x = self.dec_embed(inputs)
        packed = pack_padded_sequence(x, lengths.cpu(), batch_first=True, enforce_sorted=False)
        out, _ = self.dec_rnn(packed, torch.tanh(h).unsqueeze(0))
        out, _ = pad_packed_sequence(out, batch_first=True, total_length=T)
        return self.dec_out(out)

    def decode_reconstruct(self, h: torch.Tensor, targets: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
        return torch.softmax(self.decode_logits(h, targets, lengths), dim=-1)


def fuse_cell(model: WindowEncoder, h_gat: torch.Tensor, c_base: torch.Tensor) -> torch.Tensor:
    return model.fuse(torch.cat([h_gat, c_base], -1))


def encoder_state(model: WindowEncoder) -> dict:
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": asdict(model.cfg),
        "vocab": model.vocab.cells,
        "ods": model.ods,
        "subgraphs": {str(od): [list(sg.vertices), sorted(sg.edges)] for od, sg in model.subgraphs.items()},
        "params": {k: v.detach().clone() for k, v in model.state_dict().items()},
    }


def encoder_from_state(state: dict, base: CellEmbeddingTable | None = None,
                       stats: Mapping | None = None) -> WindowEncoder:
    if state.get("format") != CHECKPOINT_FORMAT or state.get("version") != CHECKPOINT_VERSION:
        raise ValueError("not a compatible encoder checkpoint")
    cfg = EncoderConfig(**state["config"])
    if base is not None and base.dim != cfg.d_c:
        raise ValueError(f"embedding table dim {base.dim} does not match checkpoint d_c {cfg.d_c}")
    ods = state["ods"]
    subgraphs = {od: RouteSubgraph(tuple(v), frozenset(tuple(e) for e in edges))
                 for od, (v, edges) in ((od, state["subgraphs"][str(od)]) for od in ods)}
    if stats is not None:
        for od in ods:
            if od not in stats:
                raise ValueError(f"stats file lacks OD {od!r} present in checkpoint")
            if set(stats[od].s_pos) != set(subgraphs[od].vertices):
                raise ValueError(f"frequent cells of OD {od!r} differ from the checkpoint")
    if cfg.base_embedding == "graph" and base is None:
        # the buffer is restored from params below
        from .graphs import random_embedding_table
        base = random_embedding_table(state["vocab"], cfg.d_c, 0)
    model = WindowEncoder(cfg, Vocabulary(state["vocab"]), ods, subgraphs, base)
    model.load_state_dict(state["params"])
    return model


def save_encoder(model: WindowEncoder, path: str | Path) -> None:
    torch.save(encoder_state(model), path)


def load_encoder(path: str | Path, base: CellEmbeddingTable | None = None,
                 stats: Mapping | None = None) -> WindowEncoder:
    return encoder_from_state(torch.load(path, weights_only=False), base, stats)
