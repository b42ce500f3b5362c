"""Q-learning agent for the window-search environment.

A small MLP maps ``descriptor ++ action memory`` to one Q-value per action.
Training follows the plain replay recipe: epsilon-greedy episodes push
transitions into a FIFO ring buffer, and after every action a uniformly
drawn minibatch takes one step on the squared TD error. Targets come from
the live network (no frozen copy).
"""
from __future__ import annotations

import csv
import dataclasses
from typing import Iterable, Sequence

import numpy as np

from . import env as mdp
from .geometry import ActionKind, MOVE_ACTIONS, N_ACTIONS, Window
from .nn import CheckpointError, load_checkpoint, make_optimizer, save_checkpoint
from .nn import functional as F
from .nn.layers import Dense, collect_parameters


@dataclasses.dataclass(frozen=True)
class DqnConfig:
    gamma: float = 0.9
    batch_size: int = 32
    epochs: int = 25
    replay_capacity: int = 50_000
    hidden: tuple[int, ...] = (128, 128)
    optimizer: str = "adam"
    lr: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.gamma < 1:
            raise ValueError("gamma must lie in (0, 1)")
        if self.batch_size < 1 or self.replay_capacity < self.batch_size:
            raise ValueError("need 1 <= batch_size <= replay_capacity")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")


def epsilon(epoch: int, start: float = 1.0, floor: float = 0.1, decrement: float = 0.1) -> float:
    """Exploration rate for a 0-based epoch index."""
    if epoch < 0:
        raise ValueError("epoch index must be non-negative")
    # round away float noise so that epsilon(3) is exactly 0.7
    return max(round(start - decrement * epoch, 12), floor)


class QNetwork:
    """Rectified MLP with a linear head of ``N_ACTIONS`` outputs."""

    def __init__(self, n_in: int, hidden: Sequence[int] = (128, 128), seed: int = 0, zero_head: bool = False):
        rng = np.random.default_rng(seed)
        widths = [n_in, *hidden]
        self.n_in = n_in
        self.hidden = tuple(hidden)
        self.layers = [Dense(a, b, rng) for a, b in zip(widths[:-1], widths[1:])]
        self.layers.append(Dense(widths[-1], N_ACTIONS, rng, zero=zero_head))
        self._relu = []

    def parameters(self):
        return collect_parameters((f"fc{i}", layer) for i, layer in enumerate(self.layers))

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.value.copy() for k, p in self.parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        if set(state) != set(params):
            raise CheckpointError(f"parameter names differ: {sorted(set(state) ^ set(params))}")
        for k, p in params.items():
            if state[k].shape != p.value.shape:
                raise CheckpointError(f"{k}: shape {state[k].shape} != {p.value.shape}")
            p.value[...] = state[k]

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float32)
        if x.shape[-1] != self.n_in:
            raise ValueError(f"input width {x.shape[-1]} != network width {self.n_in}")
        squeeze = x.ndim == 1
        h = x[None] if squeeze else x
        self._relu = []
        for layer in self.layers[:-1]:
            h, mask = F.relu_forward(layer.forward(h))
            self._relu.append(mask)
        q = self.layers[-1].forward(h)
        return q[0] if squeeze else q

    def backward(self, dq: np.ndarray) -> None:
        g = self.layers[-1].backward(dq)
        for layer, mask in zip(reversed(self.layers[:-1]), reversed(self._relu)):
            g = layer.backward(F.relu_backward(g, mask))


def q_forward(net: QNetwork, state_vec: np.ndarray) -> np.ndarray:
    return net.forward(state_vec)


def select_action(qvals: np.ndarray, eps: float, rng: np.random.Generator) -> ActionKind:
    """Epsilon-greedy; ties go to the lowest index."""
    if not 0.0 <= eps <= 1.0:
        raise ValueError(f"epsilon must lie in [0, 1], got {eps}")
    if eps > 0 and rng.random() < eps:
        return ActionKind(int(rng.integers(N_ACTIONS)))
    return ActionKind(int(np.argmax(qvals)))


def td_target(reward, next_q, terminal, gamma: float):
    """``r`` at terminal transitions, ``r + gamma * max Q(s')`` otherwise."""
    next_q = np.asarray(next_q)
    boot = next_q.max(axis=-1)
    return np.where(terminal, reward, reward + gamma * boot)


class ReplayMemory:
    """Fixed-capacity FIFO ring buffer with uniform sampling (with replacement)."""

    def __init__(self, capacity: int, state_len: int, seed: int = 0):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.states = np.zeros((capacity, state_len), dtype=np.float32)
        self.next_states = np.zeros((capacity, state_len), dtype=np.float32)
        self.actions = np.zeros(capacity, dtype=np.int64)
        self.rewards = np.zeros(capacity, dtype=np.float32)
        self.terminal = np.zeros(capacity, dtype=bool)
        self.pushed = 0  # total pushes so far; the write slot is pushed % capacity
        self.rng = np.random.default_rng(seed)

    def __len__(self) -> int:
        return min(self.pushed, self.capacity)

    def push(self, state, action, reward, next_state, terminal) -> None:
        i = self.pushed % self.capacity
        self.states[i] = state
        self.actions[i] = int(action)
        self.rewards[i] = reward
        self.next_states[i] = next_state
        self.terminal[i] = terminal
        self.pushed += 1

    def order(self) -> np.ndarray:
        """Slot indices from oldest to newest."""
        n = len(self)
        start = self.pushed - n
        return (np.arange(start, self.pushed)) % self.capacity

    def sample_indices(self, batch_size: int) -> np.ndarray:
        if len(self) == 0:
            raise ValueError("cannot sample from an empty replay memory")
        return self.rng.integers(len(self), size=batch_size)

    def sample(self, batch_size: int):
        idx = self.sample_indices(batch_size)
        return self.states[idx], self.actions[idx], self.rewards[idx], self.next_states[idx], self.terminal[idx]


def train_step(net: QNetwork, batch, optimizer, gamma: float) -> float:
    """One step on ``0.5 * mean (target - Q(s, a))^2`` with targets held fixed."""
    states, actions, rewards, next_states, terminal = batch
    n = len(actions)
    if n == 0:
        raise ValueError("empty batch")
    target = td_target(rewards, net.forward(next_states), terminal, gamma).astype(np.float32)
    q = net.forward(states)
    err = q[np.arange(n), actions] - target
    loss = 0.5 * float(np.mean(err.astype(np.float64) ** 2))
    dq = np.zeros_like(q)
    dq[np.arange(n), actions] = err / n
    optimizer.zero_grad()
    net.backward(dq)
    optimizer.step()
    return loss


@dataclasses.dataclass
class EpisodeRecord:
    window: Window
    iou: float
    recall: float
    steps: int
    actions: list[int]
    total_reward: float


def run_episode(net, image, mask, env_cfg: mdp.EnvConfig, eps: float = 0.0, rng=None, memory=None, learn=None) -> EpisodeRecord:
    """Roll out one episode; ``learn()`` is called after every transition."""
    rng = rng if rng is not None else np.random.default_rng(0)
    state = mdp.reset(image, mask, env_cfg)
    actions, total = [], 0.0
    out = None
    while not state.done:
        vec = state.vector()
        a = select_action(net.forward(vec), eps, rng)
        out = mdp.step(state, a, image, mask, env_cfg)
        actions.append(int(a))
        total += out.reward
        if memory is not None:
            memory.push(vec, a, out.reward, out.next_state.vector(), out.done)
        if learn is not None:
            learn()
        state = out.next_state
    return EpisodeRecord(state.window, out.iou, out.recall, state.step_index, actions, total)


def train_localizer(images: Sequence[np.ndarray], masks: Sequence[np.ndarray], env_cfg: mdp.EnvConfig, cfg: DqnConfig):
    """Train one agent on (slice, mask) pairs. Returns ``(net, log_rows)``."""
    if len(images) == 0:
        raise ValueError("training set is empty")
    if len(images) != len(masks):
        raise ValueError("images and masks differ in count")
    for m in masks:
        if not np.any(m):
            raise ValueError("training masks must be nonempty")
    rng = np.random.default_rng(cfg.seed)
    net = QNetwork(env_cfg.state_len, cfg.hidden, seed=cfg.seed)
    opt = make_optimizer(cfg.optimizer, list(net.parameters().values()), cfg.lr)
    memory = ReplayMemory(cfg.replay_capacity, env_cfg.state_len, seed=cfg.seed + 1)

    def learn():
        if len(memory) >= cfg.batch_size:
            train_step(net, memory.sample(cfg.batch_size), opt, cfg.gamma)

    rows = []
    for epoch in range(cfg.epochs):
        eps = epsilon(epoch)
        recs = []
        for i in rng.permutation(len(images)):
            recs.append(run_episode(net, images[i], masks[i], env_cfg, eps, rng, memory, learn))
        rows.append(
            {
                "epoch": epoch,
                "epsilon": eps,
                "mean_reward": float(np.mean([r.total_reward for r in recs])),
                "mean_iou": float(np.mean([r.iou for r in recs])),
                "mean_recall": float(np.mean([r.recall for r in recs])),
                "trigger_rate": float(np.mean([r.actions[-1] == ActionKind.TRIGGER for r in recs])),
            }
        )
    return net, rows


def summarize(values: Iterable[float]) -> dict[str, float]:
    v = np.asarray(list(values), dtype=np.float64)
    if v.size == 0:
        raise ValueError("nothing to summarize")
    return {"mean": float(v.mean()), "std": float(v.std()), "min": float(v.min()), "max": float(v.max())}


def evaluate_localizer(net, images, masks, env_cfg: mdp.EnvConfig):
    """Greedy rollouts. Returns ``(records, recall summary)``."""
    recs = [run_episode(net, im, m, env_cfg, eps=0.0) for im, m in zip(images, masks)]
    return recs, summarize(r.recall for r in recs)


class RandomPolicy:
    """Stand-in network whose Q-values are ignored; pair it with eps=1."""

    def forward(self, x):
        return np.zeros(N_ACTIONS, dtype=np.float32)


def evaluate_random(images, masks, env_cfg: mdp.EnvConfig, seed: int = 0):
    """Uniform-random policy on the same slices, as a baseline."""
    rng = np.random.default_rng(seed)
    pol = RandomPolicy()
    recs = [run_episode(pol, im, m, env_cfg, eps=1.0, rng=rng) for im, m in zip(images, masks)]
    return recs, summarize(r.recall for r in recs)


def action_frequencies(records: Sequence[EpisodeRecord]) -> np.ndarray:
    """Per-episode counts of each of the 9 moving actions, shape (episodes, 9)."""
    out = np.zeros((len(records), len(MOVE_ACTIONS)), dtype=np.float64)
    for i, r in enumerate(records):
        for a in r.actions:
            if a != ActionKind.TRIGGER:
                out[i, a] += 1
    return out


def action_correlation(freqs: np.ndarray) -> np.ndarray:
    """Pearson matrix between action columns; NaN where a column is constant."""
    freqs = np.asarray(freqs, dtype=np.float64)
    if freqs.ndim != 2 or freqs.shape[0] < 2:
        raise ValueError("need a (episodes >= 2, actions) frequency table")
    centered = freqs - freqs.mean(axis=0)
    norm = np.sqrt((centered**2).sum(axis=0))
    defined = norm > 0
    safe = np.where(defined, norm, 1.0)
    corr = (centered.T @ centered) / np.outer(safe, safe)
    corr = np.clip(corr, -1.0, 1.0)
    corr[~defined, :] = np.nan
    corr[:, ~defined] = np.nan
    idx = np.flatnonzero(defined)
    corr[idx, idx] = 1.0
    return corr


def config_meta(env_cfg: mdp.EnvConfig, cfg: DqnConfig) -> dict[str, str]:
    meta = {f"env.{f.name}": str(getattr(env_cfg, f.name)) for f in dataclasses.fields(env_cfg)}
    meta.update({f"dqn.{f.name}": str(getattr(cfg, f.name)) for f in dataclasses.fields(cfg)})
    return meta


def save_agent(path, net: QNetwork, env_cfg: mdp.EnvConfig, cfg: DqnConfig, view_axis: str, meta=None) -> str:
    header = {"kind": "localizer", "view_axis": str(view_axis), "n_in": str(net.n_in), **config_meta(env_cfg, cfg)}
    header.update(meta or {})
    return save_checkpoint(path, net.state_dict(), header)


def load_agent(path) -> tuple[QNetwork, mdp.EnvConfig, dict[str, str]]:
    params, meta = load_checkpoint(path)
    if meta.get("kind") != "localizer":
        raise CheckpointError(f"{path} is not a localizer checkpoint (kind={meta.get('kind')!r})")
    hidden = tuple(int(v) for v in meta["dqn.hidden"].strip("()").split(",") if v.strip())
    net = QNetwork(int(meta["n_in"]), hidden)
    net.load_state_dict(params)
    env_cfg = mdp.EnvConfig(
        max_steps=int(meta["env.max_steps"]),
        tau_iou=float(meta["env.tau_iou"]),
        tau_recall=float(meta["env.tau_recall"]),
        sigma=float(meta["env.sigma"]),
        descriptor_side=int(meta["env.descriptor_side"]),
        min_side=int(meta["env.min_side"]),
    )
    return net, env_cfg, meta


LOG_FIELDS = ("epoch", "epsilon", "mean_reward", "mean_iou", "mean_recall", "trigger_rate")


def write_log(path, rows, fields=LOG_FIELDS) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=list(fields), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(float(r[k])) if isinstance(r[k], float) else r[k]) for k in fields})
