"""Window-search Markov decision process over a single 2D slice.

The environment is functional: ``reset`` and ``step`` return new immutable
states, so one episode never leaks into another and rollouts over different
slices can run side by side.
"""
from __future__ import annotations

import dataclasses
from typing import NamedTuple

import numpy as np

from .geometry import ActionKind, N_ACTIONS, Window, apply_action, check_window, full_window, modified_iou, recall
from .synthdata import resize_bilinear

HISTORY_LEN = 10


class EpisodeFinished(RuntimeError):
    """Raised when stepping a state whose episode already ended."""


@dataclasses.dataclass(frozen=True)
class EnvConfig:
    max_steps: int = 10
    tau_iou: float = 0.2
    tau_recall: float = 0.9
    sigma: float = 3.0
    descriptor_side: int = 24
    history_len: int = HISTORY_LEN
    min_side: int = 8

    def __post_init__(self):
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        if not (0 < self.tau_iou < 1 and 0 < self.tau_recall < 1):
            raise ValueError("tau_iou and tau_recall must lie in (0, 1)")
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        if self.history_len != HISTORY_LEN:
            raise ValueError(f"history_len is fixed at {HISTORY_LEN}")
        if self.descriptor_side < 1:
            raise ValueError("descriptor_side must be positive")

    @property
    def descriptor_len(self) -> int:
        return self.descriptor_side**2 + 4

    @property
    def state_len(self) -> int:
        return self.descriptor_len + self.history_len * N_ACTIONS


@dataclasses.dataclass(frozen=True)
class EnvState:
    window: Window
    descriptor: np.ndarray
    history: np.ndarray
    step_index: int
    done: bool = False

    def vector(self) -> np.ndarray:
        """Network input: descriptor followed by the action memory."""
        return np.concatenate([self.descriptor, self.history])


class StepOutcome(NamedTuple):
    next_state: EnvState
    reward: float
    done: bool
    iou: float
    recall: float


def compute_descriptor(image: np.ndarray, window: Window, cfg: EnvConfig) -> np.ndarray:
    """Resized window crop scaled to [0, 1], then normalised window coordinates."""
    image = np.asarray(image)
    H, W = image.shape
    check_window(window, W, H)
    side = cfg.descriptor_side
    patch = resize_bilinear(Window(*window).crop(image).astype(np.float64), side, side) / 255.0
    x0, y0, w, h = window
    coords = np.array([x0 / W, y0 / H, w / W, h / H])
    return np.concatenate([patch.ravel(), coords]).astype(np.float32)


def _check_pair(image: np.ndarray, mask: np.ndarray | None) -> None:
    if np.ndim(image) != 2:
        raise ValueError(f"slice must be 2D, got shape {np.shape(image)}")
    if mask is not None and np.shape(mask) != np.shape(image):
        raise ValueError(f"slice {np.shape(image)} and mask {np.shape(mask)} differ in shape")


def reset(image: np.ndarray, mask: np.ndarray | None, cfg: EnvConfig) -> EnvState:
    """Start an episode on the whole slice. ``mask`` may be None at inference."""
    _check_pair(image, mask)
    H, W = np.shape(image)
    win = full_window(W, H)
    history = np.zeros(cfg.history_len * N_ACTIONS, dtype=np.float32)
    return EnvState(win, compute_descriptor(image, win, cfg), history, 0)


def push_history(history: np.ndarray, action: int) -> np.ndarray:
    out = np.empty_like(history)
    out[N_ACTIONS:] = history[:-N_ACTIONS]
    out[:N_ACTIONS] = 0
    out[int(action)] = 1
    return out


def trigger_reward(win: Window, mask: np.ndarray, cfg: EnvConfig) -> float:
    ok = recall(win, mask) > cfg.tau_recall and modified_iou(win, mask) > cfg.tau_iou
    return cfg.sigma if ok else -cfg.sigma


def step(state: EnvState, action: ActionKind | int, image: np.ndarray, mask: np.ndarray | None, cfg: EnvConfig) -> StepOutcome:
    """Advance one action. Rewards need ``mask``; without it they are reported as 0."""
    if state.done:
        raise EpisodeFinished("episode already finished")
    _check_pair(image, mask)
    action = ActionKind(action)
    H, W = np.shape(image)
    index = state.step_index + 1
    if action == ActionKind.TRIGGER:
        win = state.window
        done = True
        reward = trigger_reward(win, mask, cfg) if mask is not None else 0.0
    else:
        win = apply_action(state.window, action, W, H, cfg.min_side)
        done = index >= cfg.max_steps
        reward = 0.0
        if mask is not None:
            delta = modified_iou(win, mask) - modified_iou(state.window, mask)
            reward = 1.0 if delta > 0 else -1.0
            if done:
                reward += trigger_reward(win, mask, cfg)
    history = push_history(state.history, action)
    descriptor = state.descriptor if win == state.window else compute_descriptor(image, win, cfg)
    nxt = EnvState(win, descriptor, history, index, done)
    if mask is None or not mask.any():
        return StepOutcome(nxt, reward, done, float("nan"), float("nan"))
    return StepOutcome(nxt, reward, done, modified_iou(win, mask), recall(win, mask))
