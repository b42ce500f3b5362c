import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pansearch.geometry import (
    ActionKind,
    GeometryError,
    MOVE_ACTIONS,
    N_ACTIONS,
    Window,
    apply_action,
    dilate_box,
    mask_bbox,
    modified_iou,
    recall,
)


def test_action_encoding():
    assert N_ACTIONS == 10
    assert [int(a) for a in ActionKind] == list(range(10))
    assert ActionKind.TRIGGER not in MOVE_ACTIONS
    assert len(MOVE_ACTIONS) == 9


@pytest.mark.parametrize(
    "win, action, size, expected",
    [
        ((0, 0, 224, 224), ActionKind.ZOOM_TOP_LEFT, 224, (0, 0, 168, 168)),
        ((0, 0, 100, 100), ActionKind.SHIFT_RIGHT, 224, (25, 0, 100, 100)),
        ((110, 0, 100, 100), ActionKind.SHIFT_RIGHT, 224, (124, 0, 100, 100)),
    ],
)
def test_apply_action_examples(win, action, size, expected):
    assert apply_action(win, action, size, size) == expected


def _zoom_center_oracle(x0, w):
    # new side by round-half-up, center kept, origin floored
    nw = int(np.floor(3 * w / 4 + 0.5))
    return int(np.floor(x0 + (w - nw) / 2)), nw


def test_zoom_center_matches_arithmetic():
    x, nw = _zoom_center_oracle(100, 100)
    assert (x, nw) == (112, 75)
    assert apply_action((100, 100, 100, 100), ActionKind.ZOOM_CENTER, 300, 300) == (x, x, nw, nw)


def test_corner_zooms_keep_their_corner():
    win = Window(10, 20, 40, 32)
    br = apply_action(win, ActionKind.ZOOM_BOTTOM_RIGHT, 64, 64)
    assert (br.x0 + br.w, br.y0 + br.h) == (50, 52)
    tr = apply_action(win, ActionKind.ZOOM_TOP_RIGHT, 64, 64)
    assert (tr.x0 + tr.w, tr.y0) == (50, 20)
    bl = apply_action(win, ActionKind.ZOOM_BOTTOM_LEFT, 64, 64)
    assert (bl.x0, bl.y0 + bl.h) == (10, 52)


def test_zoom_respects_minimum_side():
    assert apply_action((0, 0, 9, 9), ActionKind.ZOOM_TOP_LEFT, 64, 64) == (0, 0, 8, 8)
    assert apply_action((0, 0, 8, 8), ActionKind.ZOOM_CENTER, 64, 64) == (0, 0, 8, 8)
    # already below the minimum: zooms never grow a window
    assert apply_action((0, 0, 5, 5), ActionKind.ZOOM_CENTER, 64, 64) == (0, 0, 5, 5)


def test_window_overhanging_the_border_is_rejected_not_clamped():
    with pytest.raises(GeometryError):
        apply_action((150, 0, 100, 100), ActionKind.SHIFT_RIGHT, 224, 224)


def test_apply_action_errors():
    with pytest.raises(GeometryError):
        apply_action((0, 0, 10, 10), ActionKind.TRIGGER, 64, 64)
    with pytest.raises(GeometryError):
        apply_action((60, 0, 10, 10), ActionKind.SHIFT_UP, 64, 64)
    with pytest.raises(GeometryError):
        apply_action((0, 0, 0, 10), ActionKind.SHIFT_UP, 64, 64)


@st.composite
def windows(draw):
    W = draw(st.integers(8, 200))
    H = draw(st.integers(8, 200))
    w = draw(st.integers(1, W))
    h = draw(st.integers(1, H))
    x0 = draw(st.integers(0, W - w))
    y0 = draw(st.integers(0, H - h))
    return Window(x0, y0, w, h), W, H


@given(windows(), st.sampled_from(MOVE_ACTIONS))
@settings(max_examples=300, deadline=None)
def test_action_results_stay_inside(args, action):
    win, W, H = args
    out = apply_action(win, action, W, H)
    assert out.inside(W, H)
    assert out == apply_action(win, action, W, H)
    if action.is_zoom:
        assert out.w <= win.w and out.h <= win.h
    else:
        assert (out.w, out.h) == (win.w, win.h)


def test_iou_and_recall_examples():
    m = np.zeros((224, 224), dtype=np.uint8)
    m[50:60, 70:80] = 1
    assert modified_iou((0, 0, 224, 224), m) == 100 / 50176
    assert modified_iou((70, 50, 10, 10), m) == 1.0
    assert modified_iou((0, 0, 20, 20), m) == 0.0
    assert recall((0, 0, 224, 224), m) == 1.0
    assert recall((70, 50, 5, 10), m) == 0.5
    assert recall((0, 0, 20, 20), m) == 0.0


def test_recall_of_empty_mask_raises():
    with pytest.raises(GeometryError):
        recall((0, 0, 4, 4), np.zeros((8, 8)))


def test_iou_empty_mask_is_zero_when_union_empty():
    # a window always covers at least one pixel, so the union is only empty by construction
    assert modified_iou((0, 0, 2, 2), np.zeros((8, 8))) == 0.0


@given(windows(), st.data())
@settings(max_examples=200, deadline=None)
def test_iou_bounded_by_recall_and_translation_invariant(args, data):
    win, W, H = args
    rng = np.random.default_rng(data.draw(st.integers(0, 2**32 - 1)))
    mask = (rng.random((H, W)) < 0.05).astype(np.uint8)
    mask[rng.integers(H), rng.integers(W)] = 1
    iou, rec = modified_iou(win, mask), recall(win, mask)
    assert 0.0 <= iou <= rec <= 1.0
    # translate both into a bigger canvas
    dx, dy = data.draw(st.integers(0, 20)), data.draw(st.integers(0, 20))
    big = np.zeros((H + dy, W + dx), dtype=np.uint8)
    big[dy:, dx:] = mask
    moved = Window(win.x0 + dx, win.y0 + dy, win.w, win.h)
    assert modified_iou(moved, big) == iou
    assert recall(moved, big) == rec


@pytest.mark.parametrize(
    "win, factor, size, expected",
    [
        ((50, 50, 100, 100), 1.5, 300, (25, 25, 150, 150)),
        ((10, 10, 20, 20), 1.0, 64, (10, 10, 20, 20)),
    ],
)
def test_dilate_box_examples(win, factor, size, expected):
    assert dilate_box(win, factor, size, size) == expected


def test_dilate_box_clamps():
    # scale to 150 about center 50 -> origin -25, then clamp size to 120 and origin to 0
    nw = int(np.floor(100 * 1.5 + 0.5))
    assert nw == 150
    assert dilate_box((0, 0, 100, 100), 1.5, 120, 120) == (0, 0, 120, 120)
    with pytest.raises(GeometryError):
        dilate_box((0, 0, 10, 10), 0.5, 64, 64)


@given(windows(), st.floats(1.0, 3.0))
@settings(max_examples=200, deadline=None)
def test_dilate_box_contains_original(args, factor):
    win, W, H = args
    out = dilate_box(win, factor, W, H)
    assert out.inside(W, H)
    assert out.w >= win.w and out.h >= win.h


def test_mask_bbox():
    m = np.zeros((30, 30), dtype=np.uint8)
    m[7, 5] = 1
    assert mask_bbox(m) == (5, 7, 1, 1)
    m[:] = 0
    m[3, 2] = m[20, 10] = 1
    assert mask_bbox(m) == (2, 3, 9, 18)
    assert mask_bbox(np.ones((12, 17))) == (0, 0, 17, 12)
    with pytest.raises(GeometryError):
        mask_bbox(np.zeros((4, 4)))
