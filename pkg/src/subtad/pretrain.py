"""Contrastive + reconstruction pre-training of the window encoder."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Hashable, Mapping, Sequence

import numpy as np
import torch

from .augment import AugmentationParams, NegativeContext, sample_negative, sample_positive_view
from .encoder import WindowEncoder
from .graphs import MASK_ID
from .itinerary import ItineraryStats, check_deltas, normality_score, pair_weight
from .spatial import CellTrajectory, iter_windows

log = logging.getLogger(__name__)


class InsufficientDataError(ValueError):
    pass


@dataclass
class PretrainConfig:
    tau: float = 0.1
    lam: float = 2.0
    margin: float = 0.5
    alpha_rec: float = 1.0
    alpha_stsc: float = 1.0
    alpha_miic: float = 1.0
    batch_size: int = 64
    negatives: int = 8
    rho4: float = 0.5
    delta1: float = 0.8
    delta2: float = 0.5
    epochs: int = 50
    steps_per_epoch: int | None = None
    lr: float = 1e-3
    seed: int = 0
    k_replace: int = 1
    rho: Sequence[int] | None = None  # (rho1, rho2, rho3); defaults to floor(L/2)
    negative_weights: Sequence[float] | None = None

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("temperature must be positive")
        if self.lam < 1:
            raise ValueError("lambda must be at least 1")
        if not 0 <= self.margin <= 2:
            raise ValueError("margin must lie in [0, 2]")
        if not 0 < self.rho4 < 1:
            raise ValueError("rho4 must lie in (0, 1)")
        if min(self.alpha_rec, self.alpha_stsc, self.alpha_miic) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.negatives < 1:
            raise ValueError("need at least one negative per anchor")
        check_deltas(self.delta1, self.delta2)


# ---- losses ----

def cosine_matrix(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    a = torch.nn.functional.normalize(a, dim=-1)
    b = torch.nn.functional.normalize(b, dim=-1)
    return a @ b.T


def nt_xent(z_i: torch.Tensor, z_j: torch.Tensor, tau: float) -> torch.Tensor:
    """Mean NT-Xent over all 2M ordered positive pairs; row k's positive is k +/- M."""
    M = z_i.shape[0]
    z = torch.cat([z_i, z_j], 0)
    logits = cosine_matrix(z, z) / tau
    logits = logits.masked_fill(torch.eye(2 * M, dtype=torch.bool), float("-inf"))
    target = torch.cat([torch.arange(M, 2 * M), torch.arange(M)])
    return torch.nn.functional.cross_entropy(logits, target)


def miic_terms(z: torch.Tensor, z_pos: torch.Tensor, z_neg: torch.Tensor, w: torch.Tensor,
               lam: float, margin: float) -> torch.Tensor:
    """Per-anchor masked intra-itinerary loss; ``z_neg`` is (B, K, d)."""
    zn = torch.nn.functional.normalize(z, dim=-1)
    sim_pos = (zn * torch.nn.functional.normalize(z_pos, dim=-1)).sum(-1)
    sim_neg = torch.einsum("bd,bkd->bk", zn, torch.nn.functional.normalize(z_neg, dim=-1))
    x_pos = lam * w * sim_pos
    x_neg = lam * (sim_neg + margin)
    # -log(e^x+ / (e^x+ + mean_k e^x-)), computed in log space
    log_mean_neg = torch.logsumexp(x_neg, dim=1) - math.log(x_neg.shape[1])
    return torch.logaddexp(x_pos, log_mean_neg) - x_pos


def per_od_mean(values: torch.Tensor, od_idx: torch.Tensor) -> torch.Tensor:
    """Average within each OD first, then across the ODs present."""
    ods = torch.unique(od_idx)
    return torch.stack([values[od_idx == o].mean() for o in ods]).mean()


def miic_loss(z, z_pos, z_neg, w, od_idx, lam: float, margin: float) -> torch.Tensor:
    return per_od_mean(miic_terms(z, z_pos, z_neg, w, lam, margin), od_idx)


def rec_loss(logits: torch.Tensor, targets: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
    """Token cross-entropy averaged per window, then over the batch."""
    logp = torch.log_softmax(logits, dim=-1)
    tok = logp.gather(-1, targets.unsqueeze(-1)).squeeze(-1)
    valid = torch.arange(targets.shape[1])[None, :] < lengths[:, None]
    per_window = -(tok * valid).sum(1) / lengths.to(tok.dtype)
    return per_window.mean()


# ---- masking for reconstruction ----

def mask_window(w: Sequence[int], rho4: float, rng: np.random.Generator) -> tuple[int, ...]:
    n = len(w)
    k = int(round(rng.uniform(0.0, rho4) * n))
    if k == 0:
        return tuple(w)
    pattern = int(rng.integers(3))
    if pattern == 0:
        idx = rng.choice(n, size=k, replace=False)
    elif pattern == 1:
        s = int(rng.integers(0, n - k + 1))
        idx = np.arange(s, s + k)
    else:
        block = (k + 1) // 2
        s = int(rng.integers(0, n - block + 1))
        rest = [i for i in range(n) if not s <= i < s + block]
        extra = rng.choice(rest, size=min(k - block, len(rest)), replace=False) if k > block else []
        idx = np.concatenate([np.arange(s, s + block), np.asarray(extra, dtype=int)])
    out = list(w)
    for i in idx:
        out[int(i)] = MASK_ID
    return tuple(out)


# ---- data ----

@dataclass
class WindowPool:
    """Training windows grouped by OD with their normality scores."""

    windows: dict[Hashable, list[tuple[int, ...]]] = field(default_factory=dict)
    phi: dict[Hashable, np.ndarray] = field(default_factory=dict)

    @classmethod
    def build(cls, trajs: Sequence[CellTrajectory], stats: Mapping[Hashable, ItineraryStats],
              L: int) -> "WindowPool":
        pool = cls()
        for t in trajs:
            if len(t.cells) < 2:
                continue
            pool.windows.setdefault(t.od, []).extend(iter_windows(t.cells, L))
        for od, ws in pool.windows.items():
            pool.phi[od] = np.array([normality_score(w, stats[od]) for w in ws])
        return pool

    def flat(self) -> list[tuple[Hashable, int]]:
        return [(od, i) for od in self.windows for i in range(len(self.windows[od]))]

    def __len__(self) -> int:
        return sum(len(v) for v in self.windows.values())


class BatchBuilder:
    """Draws one pre-training batch of cell windows; all randomness flows from ``rng``."""

    def __init__(self, pool: WindowPool, contexts: Mapping[Hashable, NegativeContext],
                 cfg: PretrainConfig, aug: AugmentationParams):
        self.pool = pool
        self.contexts = contexts
        self.cfg = cfg
        self.aug = aug
        self.index = pool.flat()

    def sample(self, rng: np.random.Generator) -> dict:
        cfg = self.cfg
        picks = rng.integers(len(self.index), size=cfg.batch_size)
        anchors, ods, pos, neg, w = [], [], [], [], []
        for p in picks:
            od, i = self.index[int(p)]
            ws = self.pool.windows[od]
            anchors.append(ws[i])
            ods.append(od)
            j = i
            if len(ws) > 1:
                j = int(rng.integers(len(ws) - 1))
                j += j >= i
            pos.append(ws[j])
            w.append(pair_weight(min(self.pool.phi[od][i], self.pool.phi[od][j]), cfg.delta1, cfg.delta2))
            neg.extend(sample_negative(ws[i], self.contexts[od], self.aug, rng) for _ in range(cfg.negatives))
        views = [sample_positive_view(a, self.aug, rng) for a in anchors] + \
                [sample_positive_view(a, self.aug, rng) for a in anchors]
        masked = [mask_window(a, cfg.rho4, rng) for a in anchors]
        return {"anchors": anchors, "ods": ods, "pos": pos, "neg": neg, "w": w,
                "views": views, "masked": masked}


def batch_losses(model: WindowEncoder, batch: dict, cfg: PretrainConfig,
                 dtype: torch.dtype = torch.float32) -> dict[str, torch.Tensor]:
    """The three pre-training losses for a drawn batch, via one encoder pass."""
    M, K = len(batch["anchors"]), cfg.negatives
    ods = batch["ods"]
    groups = [
        ("views", batch["views"], ods + ods),
        ("anchors", batch["anchors"], ods),
        ("pos", batch["pos"], ods),
        ("neg", batch["neg"], [o for o in ods for _ in range(K)]),
        ("masked", batch["masked"], ods),
    ]
    windows = [w for _, ws, _ in groups for w in ws]
    all_ods = [o for _, _, os_ in groups for o in os_]
    tokens, lengths = model.vocab.batch(windows)
    od_idx = model.od_indices(all_ods)
    h = model.encode(tokens, lengths, od_idx)
    offsets, start = {}, 0
    for name, ws, _ in groups:
        offsets[name] = slice(start, start + len(ws))
        start += len(ws)
    z = model.project(h)
    zero = torch.zeros((), dtype=dtype)
    out = {"stsc": zero, "miic": zero, "rec": zero}
    anchor_od = od_idx[offsets["anchors"]]
    if cfg.alpha_stsc > 0:
        zv = z[offsets["views"]]
        out["stsc"] = nt_xent(zv[:M], zv[M:], cfg.tau)
    if cfg.alpha_miic > 0:
        w = torch.tensor(batch["w"], dtype=z.dtype)
        z_neg = z[offsets["neg"]].view(M, K, -1)
        out["miic"] = miic_loss(z[offsets["anchors"]], z[offsets["pos"]], z_neg, w, anchor_od,
                                cfg.lam, cfg.margin)
    if cfg.alpha_rec > 0:
        targets, t_len = model.vocab.batch(batch["anchors"], max_len=tokens.shape[1])
        logits = model.decode_logits(h[offsets["masked"]], targets, t_len)
        out["rec"] = rec_loss(logits, targets, t_len)
    out["total"] = cfg.alpha_rec * out["rec"] + cfg.alpha_stsc * out["stsc"] + cfg.alpha_miic * out["miic"]
    return out


def pretrain(model: WindowEncoder, trajs: Sequence[CellTrajectory],
             stats: Mapping[Hashable, ItineraryStats], contexts: Mapping[Hashable, NegativeContext],
             cfg: PretrainConfig, log_path: str | Path | None = None) -> list[dict]:
    """Optimise the joint objective in place; returns the per-epoch training log."""
    L = model.cfg.window
    pool = WindowPool.build(trajs, stats, L)
    if not pool.windows or max(len(v) for v in pool.windows.values()) < 2 * cfg.batch_size:
        raise InsufficientDataError(f"no OD pair has {2 * cfg.batch_size} training windows")
    rho = cfg.rho or (None, None, None)
    aug = AugmentationParams(L=L, rho1=rho[0], rho2=rho[1], rho3=rho[2], k_replace=cfg.k_replace,
                             negative_weights=cfg.negative_weights)
    builder = BatchBuilder(pool, contexts, cfg, aug)
    rng = np.random.default_rng(cfg.seed)
    torch.manual_seed(cfg.seed)
    steps = cfg.steps_per_epoch or math.ceil(len(pool) / cfg.batch_size)
    opt = torch.optim.Adam([p for p in model.parameters() if p.requires_grad], lr=cfg.lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(1, cfg.epochs * steps))
    model.cache_tables(False)
    model.train()
    history = []
    fh = Path(log_path).open("w") if log_path else None
    t0 = time.perf_counter()
    try:
        for epoch in range(cfg.epochs):
            sums = {"rec": 0.0, "stsc": 0.0, "miic": 0.0, "total": 0.0}
            for _ in range(steps):
                losses = batch_losses(model, builder.sample(rng), cfg)
                opt.zero_grad()
                losses["total"].backward()
                opt.step()
                sched.step()
                for k in sums:
                    sums[k] += float(losses[k].detach())
            rec = {"epoch": epoch, **{k: v / steps for k, v in sums.items()},
                   "wall_clock": round(time.perf_counter() - t0, 3)}
            history.append(rec)
            log.info("pretrain epoch %d total %.4f", epoch, rec["total"])
            if fh:
                fh.write(json.dumps(rec) + "\n")
    finally:
        if fh:
            fh.close()
    model.eval()
    return history
