"""Online detection: padded window states, biased-reward DQN, point-level voting."""
from __future__ import annotations

import copy
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Hashable, Iterable, Mapping, Sequence

import numpy as np
import torch
from torch import nn

from .encoder import WindowEncoder, encoder_from_state, encoder_state, mlp
from .itinerary import ItineraryStats
from .spatial import CellIndexer, CellTrajectory, GeoPoint

log = logging.getLogger(__name__)

QMODEL_FORMAT = "subtad-qmodel"
QMODEL_VERSION = 1


class MissingPseudoLabelError(KeyError):
    pass


class OrderingError(ValueError):
    pass


def make_states(cells: Sequence[int], L: int) -> list[tuple[int, ...]]:
    """All ``|T| + L - 1`` states; state ``t`` spans ``T[max(1, t-L+1) .. min(t, |T|)]``.

    Every point lies in exactly ``L`` states, also when ``|T| < L`` (the
    whole trajectory is then repeated in the middle).
    """
    n = len(cells)
    if n < 1:
        raise ValueError("cannot build states for an empty trajectory")
    if L < 1:
        raise ValueError("window length must be at least 1")
    return [tuple(cells[max(0, t - L):min(t, n)]) for t in range(1, n + L)]


@dataclass(frozen=True)
class RewardParams:
    P: int
    N: int

    def __post_init__(self):
        if self.P <= 0 or self.N <= 0:
            raise ValueError("P and N must be positive")

    @property
    def theta(self) -> float:
        return self.P / self.N


def reward(action: int, pseudo_label: int, params: RewardParams, basic: bool = False) -> float:
    if basic:
        return 1.0 if action == pseudo_label else -1.0
    P, N, theta = params.P, params.N, params.theta
    if pseudo_label == 0:
        r = (P + N) / P
        return r if action == 0 else -r
    r = (P + N) / N + theta
    return r if action == 1 else -r


def reward_table(params: RewardParams, basic: bool = False) -> np.ndarray:
    """2x2 table indexed ``[action, pseudo_label]``."""
    return np.array([[reward(a, f, params, basic) for f in (0, 1)] for a in (0, 1)])


class QModel(nn.Module):
    def __init__(self, encoder: WindowEncoder):
        super().__init__()
        self.encoder = encoder
        self.q_head = mlp(encoder.cfg.d, 2, 2, hidden=encoder.cfg.d)

    @property
    def window(self) -> int:
        return self.encoder.cfg.window

    def forward(self, tokens, lengths, od_idx, rows=None) -> torch.Tensor:
        return self.q_head(self.encoder.encode(tokens, lengths, od_idx, rows))

    def q_values(self, windows: Sequence[Sequence[int]], od: Hashable) -> np.ndarray:
        with torch.no_grad():
            tok, lens = self.encoder.vocab.batch(windows)
            od_idx = self.encoder.od_indices([od] * len(windows))
            return self(tok, lens, od_idx).numpy()


def greedy(q: np.ndarray) -> np.ndarray:
    """Argmax over the two actions, ties going to the anomalous action."""
    q = np.asarray(q)
    return (q[..., 1] >= q[..., 0]).astype(np.int64)


def classify_window(qmodel: QModel, state: Sequence[int], od: Hashable) -> int:
    return int(greedy(qmodel.q_values([state], od))[0])


def classify_states(qmodel: QModel, states: Sequence[Sequence[int]], od: Hashable) -> np.ndarray:
    return greedy(qmodel.q_values(states, od))


def vote_points(actions: Sequence[int], L: int, n_points: int | None = None) -> np.ndarray:
    a = np.asarray(actions, dtype=np.int64)
    if n_points is not None and len(a) != n_points + L - 1:
        raise ValueError(f"expected {n_points + L - 1} actions, got {len(a)}")
    if len(a) < L:
        raise ValueError("fewer actions than the window length")
    return np.convolve(a, np.ones(L, dtype=np.int64), mode="valid")


def label_points(votes: Sequence[int], delta_p: int, cells: Sequence[int] | None = None,
                 stats: ItineraryStats | None = None) -> np.ndarray:
    labels = (np.asarray(votes) >= delta_p).astype(np.int64)
    if cells is not None and stats is not None and len(cells):
        if cells[0] not in stats.s_pos:
            labels[0] = 1
        if cells[-1] not in stats.s_pos:
            labels[-1] = 1
    return labels


@dataclass
class DetectionResult:
    traj_id: str
    actions: np.ndarray
    votes: np.ndarray
    point_labels: np.ndarray


def detect_trajectory(qmodel: QModel, traj: CellTrajectory, stats: ItineraryStats,
                      delta_p: int | None = None) -> DetectionResult:
    L = qmodel.window
    delta_p = delta_p or math.ceil(L / 2)
    actions = classify_states(qmodel, make_states(traj.cells, L), traj.od)
    votes = vote_points(actions, L, len(traj.cells))
    return DetectionResult(traj.traj_id, actions, votes, label_points(votes, delta_p, traj.cells, stats))


# ---- streaming ----

class StreamDetector:
    """Incremental state machine for one vehicle on a known OD pair.

    ``push`` consumes one deduplicated cell and returns the points whose
    ``L``-th containing window has just been classified; ``close`` emits the
    shrinking suffix states and finalises the rest.
    """

    def __init__(self, qmodel: QModel, stats: ItineraryStats, od: Hashable, delta_p: int | None = None,
                 traj_id: str = ""):
        self.qmodel = qmodel
        self.stats = stats
        self.od = od
        self.L = qmodel.window
        self.delta_p = delta_p or math.ceil(self.L / 2)
        self.traj_id = traj_id
        self.cells: list[int] = []
        self.actions: list[int] = []
        self.finalized = 0
        self.closed = False

    def _emit(self, state) -> None:
        self.actions.append(classify_window(self.qmodel, state, self.od))

    def _finalize(self, j: int) -> dict:
        L = self.L
        votes = int(sum(self.actions[j:j + L]))
        label = int(votes >= self.delta_p)
        n = len(self.cells)
        if (j == 0 or (self.closed and j == n - 1)) and self.cells[j] not in self.stats.s_pos:
            label = 1
        self.finalized += 1
        return {"traj_id": self.traj_id, "point_index": j, "cell": self.cells[j],
                "votes": votes, "label": label, "finalized_at": len(self.actions)}

    def push(self, cell: int) -> list[dict]:
        if self.closed:
            raise RuntimeError("stream already closed")
        self.cells.append(int(cell))
        t = len(self.cells)
        self._emit(tuple(self.cells[max(0, t - self.L):t]))
        out = []
        # point j (0-based) is complete once state j + L has been emitted
        while self.finalized + self.L <= len(self.actions) and self.finalized < t - 1:
            out.append(self._finalize(self.finalized))
        return out

    def close(self) -> list[dict]:
        if self.closed:
            return []
        self.closed = True
        n = len(self.cells)
        if n == 0:
            return []
        out = []
        for t in range(n + 1, n + self.L):
            self._emit(tuple(self.cells[max(0, t - self.L):n]))
            while self.finalized + self.L <= len(self.actions):
                out.append(self._finalize(self.finalized))
        while self.finalized < n:
            out.append(self._finalize(self.finalized))
        return out


class PointStream:
    """Raw-point front end: indexes points, drops consecutive repeats, checks ordering."""

    def __init__(self, detector: StreamDetector, indexer: CellIndexer):
        self.detector = detector
        self.indexer = indexer
        self.last_t: float | None = None

    def push(self, p: GeoPoint) -> list[dict]:
        if self.last_t is not None and p.t < self.last_t:
            raise OrderingError(f"timestamp {p.t} precedes {self.last_t}")
        self.last_t = p.t
        cell = self.indexer.index(p.lon, p.lat)
        if self.detector.cells and self.detector.cells[-1] == cell:
            return []
        return self.detector.push(cell)

    def close(self) -> list[dict]:
        return self.detector.close()


# ---- DQN training ----

@dataclass
class DQNConfig:
    gamma: float = 0.9
    buffer_size: int = 50_000
    batch_size: int = 128
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_fraction: float = 0.3
    target_sync: int = 500
    steps: int = 50_000
    train_every: int = 4
    learn_start: int = 1000
    lr: float = 5e-4
    reward: str = "biased"
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must lie in (0, 1]")
        if self.reward not in ("biased", "basic"):
            raise ValueError(f"unknown reward scheme {self.reward!r}")


@dataclass
class StateTable:
    """All padded states of the training set, with next-state links and pseudo-labels."""

    tokens: torch.Tensor
    lengths: torch.Tensor
    od_idx: torch.Tensor
    labels: np.ndarray
    episodes: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def build(cls, encoder: WindowEncoder, trajs: Sequence[CellTrajectory],
              pseudo: Mapping[tuple[Hashable, tuple[int, ...]], int]) -> "StateTable":
        L = encoder.cfg.window
        windows, ods, labels, episodes = [], [], [], []
        for tr in trajs:
            if len(tr.cells) < 2:
                continue
            states = make_states(tr.cells, L)
            ids = np.arange(len(windows), len(windows) + len(states))
            for s in states:
                key = (tr.od, s)
                if key not in pseudo:
                    raise MissingPseudoLabelError(f"no pseudo-label for a state of {tr.traj_id!r}")
                labels.append(pseudo[key])
            windows.extend(states)
            ods.extend([tr.od] * len(states))
            episodes.append(ids)
        tok, lens = encoder.vocab.batch(windows, max_len=L)
        return cls(tok, lens, encoder.od_indices(ods), np.array(labels, dtype=np.int64), episodes)


class ReplayBuffer:
    def __init__(self, capacity: int):
        self.capacity = capacity
        self.s = np.zeros(capacity, dtype=np.int64)
        self.a = np.zeros(capacity, dtype=np.int64)
        self.r = np.zeros(capacity, dtype=np.float64)
        self.s2 = np.zeros(capacity, dtype=np.int64)
        self.done = np.zeros(capacity, dtype=bool)
        self.size = 0
        self.pos = 0

    def add(self, s, a, r, s2, done):
        i = self.pos
        self.s[i], self.a[i], self.r[i], self.s2[i], self.done[i] = s, a, r, s2, done
        self.pos = (self.pos + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, n: int, rng: np.random.Generator):
        idx = rng.integers(self.size, size=n)
        return self.s[idx], self.a[idx], self.r[idx], self.s2[idx], self.done[idx]


def td_targets(rewards: torch.Tensor, next_q: torch.Tensor, done: torch.Tensor, gamma: float) -> torch.Tensor:
    """``r + gamma * max_a' Q(s', a')``, without bootstrap on terminal transitions."""
    return rewards + gamma * (~done).to(rewards.dtype) * next_q.max(1).values


def dqn_loss(q_taken: torch.Tensor, targets: torch.Tensor, od_idx: torch.Tensor) -> torch.Tensor:
    sq = (targets - q_taken) ** 2
    ods = torch.unique(od_idx)
    return torch.stack([sq[od_idx == o].mean() for o in ods]).mean()


def reward_params_from_counts(counts: Mapping[Hashable, tuple[int, int]]) -> dict[Hashable, RewardParams]:
    return {od: RewardParams(max(1, P), max(1, N)) for od, (P, N) in counts.items()}


def train_dqn(encoder: WindowEncoder, trajs: Sequence[CellTrajectory],
              pseudo: Mapping[tuple[Hashable, tuple[int, ...]], int],
              counts: Mapping[Hashable, tuple[int, int]], cfg: DQNConfig,
              log_path: str | Path | None = None) -> tuple[QModel, list[dict]]:
    """Fine-tune a copy of ``encoder`` with a Q head on pseudo-labelled state chains."""
    rng = np.random.default_rng(cfg.seed)
    torch.manual_seed(cfg.seed)
    enc = copy.deepcopy(encoder)
    enc.cache_tables(False)
    qnet = QModel(enc)
    target = copy.deepcopy(qnet)
    table = StateTable.build(enc, trajs, pseudo)
    if not table.episodes:
        raise ValueError("no training trajectories with at least two cells")
    params = reward_params_from_counts(counts)
    od_rewards = np.stack([reward_table(params[od], cfg.reward == "basic") for od in enc.ods])
    opt = torch.optim.Adam(qnet.parameters(), lr=cfg.lr)
    buf = ReplayBuffer(cfg.buffer_size)
    eps_steps = max(1, int(cfg.eps_fraction * cfg.steps))
    updates, env_steps, history = 0, 0, []
    fh = Path(log_path).open("w") if log_path else None
    t0 = time.perf_counter()
    running = []
    try:
        while updates < cfg.steps:
            ep = table.episodes[int(rng.integers(len(table.episodes)))]
            eps = cfg.eps_start + (cfg.eps_end - cfg.eps_start) * min(1.0, updates / eps_steps)
            with torch.no_grad():
                q = qnet(table.tokens[ep], table.lengths[ep], table.od_idx[ep]).numpy()
            explore = rng.random(len(ep)) < eps
            actions = np.where(explore, rng.integers(2, size=len(ep)), greedy(q))
            for i, s in enumerate(ep):
                od_i = int(table.od_idx[s])
                r = od_rewards[od_i, actions[i], table.labels[s]]
                last = i == len(ep) - 1
                buf.add(s, actions[i], r, s if last else ep[i + 1], last)
                env_steps += 1
                if buf.size < min(cfg.learn_start, cfg.buffer_size) or env_steps % cfg.train_every:
                    continue
                s_b, a_b, r_b, s2_b, d_b = buf.sample(cfg.batch_size, rng)
                s_t, s2_t = torch.from_numpy(s_b), torch.from_numpy(s2_b)
                with torch.no_grad():
                    next_q = target(table.tokens[s2_t], table.lengths[s2_t], table.od_idx[s2_t])
                    y = td_targets(torch.from_numpy(r_b).float(), next_q, torch.from_numpy(d_b), cfg.gamma)
                q_all = qnet(table.tokens[s_t], table.lengths[s_t], table.od_idx[s_t])
                q_taken = q_all.gather(1, torch.from_numpy(a_b)[:, None]).squeeze(1)
                loss = dqn_loss(q_taken, y, table.od_idx[s_t])
                opt.zero_grad()
                loss.backward()
                opt.step()
                updates += 1
                running.append(loss.item())
                if updates % cfg.target_sync == 0:
                    target.load_state_dict(qnet.state_dict())
                if updates % 250 == 0 or updates == cfg.steps:
                    rec = {"update": updates, "loss": float(np.mean(running)), "epsilon": eps,
                           "wall_clock": round(time.perf_counter() - t0, 3)}
                    running = []
                    history.append(rec)
                    log.info("dqn update %d loss %.4f", updates, rec["loss"])
                    if fh:
                        fh.write(json.dumps(rec) + "\n")
                if updates >= cfg.steps:
                    break
    finally:
        if fh:
            fh.close()
    qnet.eval()
    return qnet, history


def qmodel_state(q: QModel) -> dict:
    return {"format": QMODEL_FORMAT, "version": QMODEL_VERSION, "encoder": encoder_state(q.encoder),
            "q_head": {k: v.detach().clone() for k, v in q.q_head.state_dict().items()}}


def save_qmodel(q: QModel, path: str | Path) -> None:
    torch.save(qmodel_state(q), path)


def load_qmodel(path: str | Path, base=None, stats=None) -> QModel:
    state = torch.load(path, weights_only=False)
    if state.get("format") != QMODEL_FORMAT or state.get("version") != QMODEL_VERSION:
        raise ValueError(f"{path} is not a compatible Q-model checkpoint")
    q = QModel(encoder_from_state(state["encoder"], base, stats))
    q.q_head.load_state_dict(state["q_head"])
    q.eval()
    return q


def agreement(qmodel: QModel, table_trajs: Iterable[CellTrajectory],
              pseudo: Mapping[tuple[Hashable, tuple[int, ...]], int]) -> float:
    """Fraction of training states where the greedy action equals the pseudo-label."""
    hit = tot = 0
    for tr in table_trajs:
        if len(tr.cells) < 2:
            continue
        states = make_states(tr.cells, qmodel.window)
        acts = classify_states(qmodel, states, tr.od)
        labs = np.array([pseudo[(tr.od, s)] for s in states])
        hit += int((acts == labs).sum())
        tot += len(states)
    return hit / max(tot, 1)
