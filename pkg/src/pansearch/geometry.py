"""Integer window arithmetic for the localization agent.

Windows are ``(x0, y0, w, h)`` in pixel units with ``x`` along columns and
``y`` along rows, so a window selects ``mask[y0:y0 + h, x0:x0 + w]``.

Rounding rule used everywhere: origins are floored, sizes are rounded
half-up.
"""
from __future__ import annotations

import enum
from typing import NamedTuple

import numpy as np

DEFAULT_MIN_SIDE = 8


class GeometryError(ValueError):
    """Invalid window, action or degenerate mask."""


class Window(NamedTuple):
    x0: int
    y0: int
    w: int
    h: int

    @property
    def area(self) -> int:
        return self.w * self.h

    def inside(self, image_w: int, image_h: int) -> bool:
        return (
            self.w >= 1
            and self.h >= 1
            and self.x0 >= 0
            and self.y0 >= 0
            and self.x0 + self.w <= image_w
            and self.y0 + self.h <= image_h
        )

    def crop(self, image: np.ndarray) -> np.ndarray:
        return image[self.y0 : self.y0 + self.h, self.x0 : self.x0 + self.w]


class ActionKind(enum.IntEnum):
    ZOOM_CENTER = 0
    ZOOM_TOP_LEFT = 1
    ZOOM_TOP_RIGHT = 2
    ZOOM_BOTTOM_LEFT = 3
    ZOOM_BOTTOM_RIGHT = 4
    SHIFT_UP = 5
    SHIFT_DOWN = 6
    SHIFT_LEFT = 7
    SHIFT_RIGHT = 8
    TRIGGER = 9

    @property
    def is_zoom(self) -> bool:
        return self <= ActionKind.ZOOM_BOTTOM_RIGHT

    @property
    def is_shift(self) -> bool:
        return ActionKind.SHIFT_UP <= self <= ActionKind.SHIFT_RIGHT


N_ACTIONS = len(ActionKind)
MOVE_ACTIONS = tuple(a for a in ActionKind if a != ActionKind.TRIGGER)


def _round_half_up(num: int, den: int) -> int:
    # floor(num / den + 1/2) for non-negative integers
    return (2 * num + den) // (2 * den)


def _clamp(win_x0: int, win_y0: int, w: int, h: int, image_w: int, image_h: int) -> Window:
    w = min(w, image_w)
    h = min(h, image_h)
    x0 = min(max(win_x0, 0), image_w - w)
    y0 = min(max(win_y0, 0), image_h - h)
    return Window(int(x0), int(y0), int(w), int(h))


def full_window(image_w: int, image_h: int) -> Window:
    return Window(0, 0, image_w, image_h)


def check_window(win: Window, image_w: int, image_h: int) -> None:
    if not Window(*win).inside(image_w, image_h):
        raise GeometryError(f"window {tuple(win)} is not inside a {image_w}x{image_h} image")


def apply_action(
    win: Window,
    action: ActionKind | int,
    image_w: int,
    image_h: int,
    min_side: int = DEFAULT_MIN_SIDE,
) -> Window:
    """Return the window reached by taking a moving action.

    Zooms shrink both sides to 3/4 (never below ``min_side`` and never
    growing), anchored at the named corner or at the center. Shifts move by
    a quarter of the current side. The result is clamped into the image.
    """
    win = Window(*win)
    action = ActionKind(action)
    check_window(win, image_w, image_h)
    if action == ActionKind.TRIGGER:
        raise GeometryError("TRIGGER has no geometric effect")

    x0, y0, w, h = win
    if action.is_zoom:
        nw = min(w, max(_round_half_up(3 * w, 4), min_side))
        nh = min(h, max(_round_half_up(3 * h, 4), min_side))
        if action == ActionKind.ZOOM_CENTER:
            nx, ny = (2 * x0 + w - nw) // 2, (2 * y0 + h - nh) // 2
        elif action == ActionKind.ZOOM_TOP_LEFT:
            nx, ny = x0, y0
        elif action == ActionKind.ZOOM_TOP_RIGHT:
            nx, ny = x0 + w - nw, y0
        elif action == ActionKind.ZOOM_BOTTOM_LEFT:
            nx, ny = x0, y0 + h - nh
        else:
            nx, ny = x0 + w - nw, y0 + h - nh
        return _clamp(nx, ny, nw, nh, image_w, image_h)

    dx, dy = _round_half_up(w, 4), _round_half_up(h, 4)
    step = {
        ActionKind.SHIFT_UP: (0, -dy),
        ActionKind.SHIFT_DOWN: (0, dy),
        ActionKind.SHIFT_LEFT: (-dx, 0),
        ActionKind.SHIFT_RIGHT: (dx, 0),
    }[action]
    return _clamp(x0 + step[0], y0 + step[1], w, h, image_w, image_h)


def _intersection(win: Window, mask: np.ndarray) -> int:
    mask = np.asarray(mask)
    check_window(win, mask.shape[1], mask.shape[0])
    return int(np.count_nonzero(Window(*win).crop(mask)))


def modified_iou(win: Window, mask: np.ndarray) -> float:
    """IoU between the solid window rectangle and the foreground pixels."""
    inter = _intersection(win, mask)
    union = Window(*win).area + int(np.count_nonzero(mask)) - inter
    if union == 0:
        return 0.0
    return inter / union


def recall(win: Window, mask: np.ndarray) -> float:
    """Fraction of foreground pixels that fall inside the window."""
    total = int(np.count_nonzero(mask))
    if total == 0:
        raise GeometryError("recall is undefined for an empty mask")
    return _intersection(win, mask) / total


def dilate_box(win: Window, factor: float, image_w: int, image_h: int) -> Window:
    """Scale a window about its center, then clamp it into the image."""
    if factor < 1:
        raise GeometryError(f"dilation factor must be >= 1, got {factor}")
    x0, y0, w, h = Window(*win)
    nw = int(np.floor(w * factor + 0.5))
    nh = int(np.floor(h * factor + 0.5))
    nx = int(np.floor((2 * x0 + w - nw) / 2))
    ny = int(np.floor((2 * y0 + h - nh) / 2))
    return _clamp(nx, ny, nw, nh, image_w, image_h)


def mask_bbox(mask: np.ndarray) -> Window:
    """Tightest window containing every foreground pixel."""
    ys, xs = np.nonzero(np.asarray(mask))
    if ys.size == 0:
        raise GeometryError("bounding box of an empty mask is undefined")
    x0, y0 = int(xs.min()), int(ys.min())
    return Window(x0, y0, int(xs.max()) - x0 + 1, int(ys.max()) - y0 + 1)
