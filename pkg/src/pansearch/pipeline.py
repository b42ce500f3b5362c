"""Three-view localize, crop, segment and fuse.

Each view slices the volume, asks its agent for a window per slice, segments
a 1.5x enlarged crop around that window, pastes the binary result back and
re-piles the slices. The three view volumes are fused by majority vote.
"""
from __future__ import annotations

import dataclasses
import math
from concurrent.futures import ProcessPoolExecutor
from typing import Callable, Sequence

import numpy as np

from . import dqn
from . import env as mdp
from .deform_unet import SegModel, predict
from .geometry import Window, dilate_box, full_window, mask_bbox, modified_iou, recall
from .synthdata import ViewAxis, clip_rescale, repile_view, resize_bilinear, resize_nearest, slice_view

CROP_FACTOR = 1.5
VIEWS = (ViewAxis.SAGITTAL, ViewAxis.CORONAL, ViewAxis.AXIAL)


class ViewMismatchError(ValueError):
    """A checkpoint was trained for a different view than requested."""


@dataclasses.dataclass
class Agent:
    """A localization network bound to its environment settings and view."""

    net: dqn.QNetwork
    env_cfg: mdp.EnvConfig
    view: ViewAxis
    loc_side: int = 64


def _resize_window(win: Window, sx: float, sy: float, W: int, H: int) -> Window:
    """Scale a window by (sx, sy), rounding outward, then clamp."""
    x0, y0, w, h = win
    nx0, ny0 = math.floor(x0 * sx), math.floor(y0 * sy)
    nx1, ny1 = math.ceil((x0 + w) * sx), math.ceil((y0 + h) * sy)
    nx0, ny0 = max(nx0, 0), max(ny0, 0)
    nx1, ny1 = min(max(nx1, nx0 + 1), W), min(max(ny1, ny0 + 1), H)
    return Window(nx0, ny0, nx1 - nx0, ny1 - ny0)


def greedy_window(net, image: np.ndarray, env_cfg: mdp.EnvConfig) -> tuple[Window, list[int]]:
    state = mdp.reset(image, None, env_cfg)
    actions = []
    while not state.done:
        a = dqn.select_action(net.forward(state.vector()), 0.0, None)
        state = mdp.step(state, a, image, None, env_cfg).next_state
        actions.append(int(a))
    return state.window, actions


def localize_slice(image: np.ndarray, agent: Agent) -> Window:
    """Greedy rollout on the slice resized to ``loc_side``, mapped back to slice pixels."""
    H, W = image.shape
    side = agent.loc_side
    if (H, W) == (side, side):
        return greedy_window(agent.net, image, agent.env_cfg)[0]
    small = np.floor(resize_bilinear(image.astype(np.float64), side, side) + 0.5).astype(np.uint8)
    win = greedy_window(agent.net, small, agent.env_cfg)[0]
    return _resize_window(win, W / side, H / side, W, H)


def crop_window(image: np.ndarray, window: Window, factor: float = CROP_FACTOR) -> Window:
    H, W = image.shape
    return dilate_box(window, factor, W, H)


def crop_and_resize(image: np.ndarray, crop: Window, side: int) -> np.ndarray:
    patch = Window(*crop).crop(image).astype(np.float64)
    return np.floor(resize_bilinear(patch, side, side) + 0.5).astype(np.uint8)


def paste_decision(prob: np.ndarray, crop: Window, shape: tuple[int, int]) -> np.ndarray:
    """Threshold ``prob > 0.5`` and paste the map, resized to the crop, into a zero canvas."""
    out = np.zeros(shape, dtype=np.uint8)
    x0, y0, w, h = crop
    out[y0 : y0 + h, x0 : x0 + w] = resize_nearest((prob > 0.5).astype(np.uint8), w, h)
    return out


def segment_slice(image: np.ndarray, window: Window, model: SegModel, factor: float = CROP_FACTOR) -> np.ndarray:
    crop = crop_window(image, window, factor)
    prob = predict(model, crop_and_resize(image, crop, model.cfg.input_side))
    return paste_decision(prob, crop, image.shape)


@dataclasses.dataclass
class ViewPrediction:
    axis: ViewAxis
    mask: np.ndarray
    windows: list[Window]


def segment_view(
    volume_u8: np.ndarray,
    axis: ViewAxis | str,
    agent: Agent | None,
    model: SegModel,
    factor: float = CROP_FACTOR,
) -> ViewPrediction:
    """Per-slice localize + segment along ``axis``; ``agent=None`` segments whole slices."""
    axis = ViewAxis(axis)
    if agent is not None and agent.view != axis:
        raise ViewMismatchError(f"agent trained for {agent.view.value}, asked for {axis.value}")
    slices = slice_view(volume_u8, axis)
    windows, crops = [], []
    for img in slices:
        H, W = img.shape
        win = localize_slice(img, agent) if agent is not None else full_window(W, H)
        crop = crop_window(img, win, factor) if agent is not None else win
        windows.append(win)
        crops.append(crop)
    side = model.cfg.input_side
    batch = np.stack([crop_and_resize(img, c, side) for img, c in zip(slices, crops)])
    probs = predict(model, batch)
    out = np.stack([paste_decision(p, c, img.shape) for p, c, img in zip(probs, crops, slices)])
    return ViewPrediction(axis, repile_view(out, axis), windows)


def majority_vote(ys: np.ndarray, yc: np.ndarray, ya: np.ndarray) -> np.ndarray:
    """Per-voxel ``floor(1/2 + (ys + yc + ya) / 3)`` on binary volumes."""
    ys, yc, ya = (np.asarray(v) for v in (ys, yc, ya))
    if not ys.shape == yc.shape == ya.shape:
        raise ValueError(f"view volumes differ in shape: {ys.shape}, {yc.shape}, {ya.shape}")
    total = ys.astype(np.int64) + yc + ya
    # floor(1/2 + t/3) == floor((3 + 2t) / 6) in integers
    return ((3 + 2 * total) // 6).astype(np.uint8)


def dsc_volume(pred: np.ndarray, gt: np.ndarray) -> tuple[float, bool]:
    """Set Dice of two binary volumes and a flag that is True when both are empty (DSC 1.0)."""
    pred, gt = np.asarray(pred) > 0, np.asarray(gt) > 0
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    denom = int(pred.sum()) + int(gt.sum())
    if denom == 0:
        return 1.0, True
    return 2.0 * int(np.logical_and(pred, gt).sum()) / denom, False


def window_stats(windows: Sequence[Window], label: np.ndarray, axis: ViewAxis) -> tuple[float, float]:
    """Mean recall and modified IoU over the slices of ``axis`` that contain foreground."""
    recs, ious = [], []
    for win, m in zip(windows, slice_view(label, axis)):
        if m.any():
            recs.append(recall(win, m))
            ious.append(modified_iou(win, m))
    if not recs:
        return float("nan"), float("nan")
    return float(np.mean(recs)), float(np.mean(ious))


def segment_volume(volume_hu, agents: dict | None, models: dict) -> tuple[np.ndarray, dict[ViewAxis, ViewPrediction]]:
    vol8 = clip_rescale(volume_hu)
    views = {}
    for axis in VIEWS:
        views[axis] = segment_view(vol8, axis, agents[axis] if agents else None, models[axis])
    fused = majority_vote(views[ViewAxis.SAGITTAL].mask, views[ViewAxis.CORONAL].mask, views[ViewAxis.AXIAL].mask)
    return fused, views


def _evaluate_one(args):
    vid, volume, label, agents, models = args
    fused, views = segment_volume(volume, agents, models)
    dsc, empty = dsc_volume(fused, label)
    row = {"volume_id": vid, "dsc": dsc, "both_empty": int(empty)}
    for axis in VIEWS:
        rec, iou = window_stats(views[axis].windows, label, axis) if agents else (1.0, float("nan"))
        row[f"{axis.value}_recall"] = rec
        row[f"{axis.value}_iou"] = iou
        row[f"{axis.value}_dsc"] = dsc_volume(views[axis].mask, label)[0]
    return row


def evaluate_dataset(ids, volumes, labels, agents: dict | None, models: dict, jobs: int = 1, progress: Callable | None = None):
    """DSC of the fused prediction per volume. Returns ``(rows, summary)``."""
    if len(volumes) == 0:
        raise ValueError("need at least one volume")
    tasks = [(i, v, l, agents, models) for i, v, l in zip(ids, volumes, labels)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_evaluate_one, tasks))
    else:
        rows = []
        for t in tasks:
            rows.append(_evaluate_one(t))
            if progress:
                progress(rows[-1])
    return rows, dqn.summarize(r["dsc"] for r in rows)


def training_crops(
    volumes_u8: Sequence[np.ndarray],
    labels: Sequence[np.ndarray],
    axis: ViewAxis | str,
    agent: Agent | None,
    side: int,
    negative_fraction: float = 0.25,
    seed: int = 0,
    factor: float = CROP_FACTOR,
) -> tuple[np.ndarray, np.ndarray]:
    """Segmenter training pairs for one view.

    With an agent: for foreground slices, the crop around the agent's window
    and the crop around the true bounding box; for a random
    ``negative_fraction`` of empty slices, the crop around the agent's window.
    Without an agent every slice is used whole.
    """
    axis = ViewAxis(axis)
    rng = np.random.default_rng(seed)
    xs, ys = [], []
    for vol, lab in zip(volumes_u8, labels):
        for img, m in zip(slice_view(vol, axis), slice_view(lab, axis)):
            H, W = img.shape
            has_fg = bool(m.any())
            if agent is None:
                if has_fg or rng.random() < negative_fraction:
                    crops = [full_window(W, H)]
                else:
                    continue
            elif has_fg:
                crops = [crop_window(img, localize_slice(img, agent), factor), crop_window(img, mask_bbox(m), factor)]
            elif rng.random() < negative_fraction:
                crops = [crop_window(img, localize_slice(img, agent), factor)]
            else:
                continue
            for c in crops:
                xs.append(crop_and_resize(img, c, side))
                ys.append(resize_nearest(Window(*c).crop(m), side, side))
    return np.stack(xs), np.stack(ys).astype(np.uint8)
