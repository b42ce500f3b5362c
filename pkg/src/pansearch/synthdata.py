"""Synthetic CT-like phantoms, view slicing, intensity windowing and resizing.

Volumes are numpy arrays indexed ``[z, y, x]`` (depth, height, width), so
the raw buffer is x-fastest. Intensities are int16 Hounsfield-like values;
labels are uint8 in {0, 1}.
"""
from __future__ import annotations

import dataclasses
import enum
import struct
from pathlib import Path

import numpy as np

HU_MIN, HU_MAX = -1024, 3071
WINDOW_LO, WINDOW_HI = -100, 240

BACKGROUND_HU = -20
TARGET_HU_RANGE = (95.0, 125.0)
DISTRACTOR_HU_RANGE = (35.0, 110.0)

# prior location of the target centre, as fractions of (W, H, D)
TARGET_PRIOR_CENTER = (0.58, 0.42, 0.5)
TARGET_PRIOR_JITTER = 0.10


class PhantomError(ValueError):
    """Phantom configuration cannot be realised."""


class ViewAxis(str, enum.Enum):
    SAGITTAL = "sagittal"
    CORONAL = "coronal"
    AXIAL = "axial"


@dataclasses.dataclass(frozen=True)
class PhantomConfig:
    dims: tuple[int, int, int] = (64, 64, 64)  # (W, H, D)
    target_fraction_range: tuple[float, float] = (0.001, 0.008)
    distractor_count: int = 4
    noise_std: float = 12.0
    seed: int = 0

    def validate(self) -> None:
        lo, hi = self.target_fraction_range
        if not 0 < lo <= hi < 0.05:
            raise PhantomError(f"target_fraction_range must satisfy 0 < min <= max < 0.05, got {(lo, hi)}")
        if min(self.dims) < 32:
            raise PhantomError(f"every dimension must be >= 32, got {self.dims}")
        if self.distractor_count < 0 or self.noise_std < 0:
            raise PhantomError("distractor_count and noise_std must be non-negative")
        w, h, _ = self.dims
        if hi * w * h < 1 or np.floor(hi * w * h) < np.ceil(lo * w * h):
            raise PhantomError(
                f"no integer slice area fits fractions {(lo, hi)} on a {w}x{h} axial slice"
            )


def _rotation(rng: np.random.Generator) -> np.ndarray:
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    a, b, c, d = q
    return np.array(
        [
            [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
            [2 * (b * c + a * d), a * a - b * b + c * c - d * d, 2 * (c * d - a * b)],
            [2 * (b * d - a * c), 2 * (c * d + a * b), a * a - b * b - c * c + d * d],
        ]
    )


def _grid(dims: tuple[int, int, int]) -> np.ndarray:
    w, h, d = dims
    z, y, x = np.meshgrid(np.arange(d), np.arange(h), np.arange(w), indexing="ij")
    return np.stack([x, y, z], axis=-1).astype(np.float64)


def _bent_ellipsoid(points: np.ndarray, center, rot, half_len, r_head, r_tail, bend, flat, scale):
    """Boolean occupancy of a tapered, bent ellipsoid (head thicker than tail)."""
    local = (points - center) @ rot  # columns of rot are the local axes
    u, v, t = local[..., 0] / scale, local[..., 1] / scale, local[..., 2] / scale
    frac = np.clip((u + half_len) / (2 * half_len), 0.0, 1.0)
    radius = r_head + (r_tail - r_head) * frac
    v = v - bend * (u / half_len) ** 2 * half_len
    along = (u / half_len) ** 2
    across = (v / radius) ** 2 + (t / (radius * flat)) ** 2
    return (along <= 1.0) & (across <= 1.0 - 0.3 * along)


def _ellipsoid(points: np.ndarray, center, rot, radii) -> np.ndarray:
    local = (points - center) @ rot
    return np.sum((local / np.asarray(radii)) ** 2, axis=-1) <= 1.0


def _fit_target(points, dims, rng, lo, hi):
    w, h, d = dims
    area = w * h
    center = np.array(TARGET_PRIOR_CENTER) * np.array(dims, dtype=float)
    center += rng.uniform(-TARGET_PRIOR_JITTER, TARGET_PRIOR_JITTER, 3) * np.array(dims)
    rot = _rotation(rng)
    base = min(dims) / 64.0
    shape = dict(
        half_len=rng.uniform(8.0, 12.0) * base,
        r_head=rng.uniform(2.6, 3.4) * base,
        r_tail=rng.uniform(1.4, 2.0) * base,
        bend=rng.uniform(-0.35, 0.35),
        flat=rng.uniform(0.7, 1.0),
    )
    scale = 1.0
    for _ in range(60):
        occ = _bent_ellipsoid(points, center, rot, scale=scale, **shape)
        per_slice = occ.sum(axis=(1, 2))
        if per_slice.max() <= hi * area:
            break
        scale *= 0.95
    else:
        raise PhantomError("could not shrink the target below the maximum slice fraction")
    # drop axial slices whose cross-section is below the minimum fraction
    too_small = per_slice < lo * area
    occ[too_small] = False
    if not occ.any():
        raise PhantomError(f"target vanishes at fraction range {(lo, hi)} and dims {dims}")
    return occ


def generate_phantom(cfg: PhantomConfig) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(volume int16, label uint8)`` arrays of shape ``(D, H, W)``.

    The output is a pure function of ``cfg``.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    dims = tuple(int(v) for v in cfg.dims)
    w, h, d = dims
    lo, hi = cfg.target_fraction_range
    points = _grid(dims)

    target = None
    for _ in range(20):
        try:
            target = _fit_target(points, dims, rng, lo, hi)
            break
        except PhantomError:
            continue
    if target is None:
        raise PhantomError(f"target fraction range {(lo, hi)} is unachievable at dims {dims}")

    vol = np.full((d, h, w), float(BACKGROUND_HU))
    # keep distractors clear of the target so the label stays exact
    zz, yy, xx = np.nonzero(target)
    tmin = np.array([xx.min(), yy.min(), zz.min()]) - 2
    tmax = np.array([xx.max(), yy.max(), zz.max()]) + 2
    placed = 0
    attempts = 0
    while placed < cfg.distractor_count and attempts < 200:
        attempts += 1
        radii = rng.uniform(2.5, 9.0, 3) * (min(dims) / 64.0)
        center = rng.uniform(0.15, 0.85, 3) * np.array(dims)
        blob = _ellipsoid(points, center, _rotation(rng), radii)
        bz, by, bx = np.nonzero(blob)
        if bz.size == 0:
            continue
        bmin = np.array([bx.min(), by.min(), bz.min()])
        bmax = np.array([bx.max(), by.max(), bz.max()])
        if np.all(bmax >= tmin) and np.all(bmin <= tmax):
            continue
        vol[blob] = rng.uniform(*DISTRACTOR_HU_RANGE)
        placed += 1

    target_hu = rng.uniform(*TARGET_HU_RANGE)
    # faint texture inside the target
    vol[target] = target_hu + rng.normal(0.0, 4.0, size=int(target.sum()))
    if cfg.noise_std > 0:
        vol += rng.normal(0.0, cfg.noise_std, size=vol.shape)
    vol = np.clip(np.floor(vol + 0.5), HU_MIN, HU_MAX).astype(np.int16)
    return vol, target.astype(np.uint8)


def foreground_fractions(label: np.ndarray, axis: ViewAxis | str = ViewAxis.AXIAL) -> np.ndarray:
    """Per-slice foreground fraction along a view axis."""
    slices = slice_view(label, axis)
    return slices.reshape(len(slices), -1).mean(axis=1)


def clip_rescale(img: np.ndarray) -> np.ndarray:
    """Window intensities to [-100, 240] and map linearly onto uint8 [0, 255]."""
    v = np.clip(np.asarray(img, dtype=np.float64), WINDOW_LO, WINDOW_HI)
    v = (v - WINDOW_LO) * (255.0 / (WINDOW_HI - WINDOW_LO))
    return np.floor(v + 0.5).astype(np.uint8)


_AXIS_DIM = {ViewAxis.AXIAL: 0, ViewAxis.CORONAL: 1, ViewAxis.SAGITTAL: 2}


def slice_view(vol: np.ndarray, axis: ViewAxis | str) -> np.ndarray:
    """Stack of 2D slices along ``axis`` in ascending index order.

    Axial slices are ``(H, W)`` images, coronal ``(D, W)``, sagittal ``(D, H)``.
    """
    return np.ascontiguousarray(np.moveaxis(vol, _AXIS_DIM[ViewAxis(axis)], 0))


def repile_view(slices: np.ndarray, axis: ViewAxis | str) -> np.ndarray:
    """Inverse of :func:`slice_view`."""
    return np.ascontiguousarray(np.moveaxis(np.asarray(slices), 0, _AXIS_DIM[ViewAxis(axis)]))


def _sample_positions(n_in: int, n_out: int) -> np.ndarray:
    if n_out == 1:
        return np.array([(n_in - 1) / 2.0])
    return np.arange(n_out) * ((n_in - 1) / (n_out - 1))


def resize_bilinear(img: np.ndarray, out_w: int, out_h: int) -> np.ndarray:
    """Corner-aligned bilinear resize of a 2D grid to ``(out_h, out_w)``."""
    if out_w < 1 or out_h < 1:
        raise ValueError(f"output size must be positive, got {out_w}x{out_h}")
    img = np.asarray(img)
    in_h, in_w = img.shape
    dtype = img.dtype if np.issubdtype(img.dtype, np.floating) else np.float64
    src = img.astype(dtype, copy=False)
    if (in_h, in_w) == (out_h, out_w):
        return src.copy()

    def axis_weights(n_in, n_out):
        pos = _sample_positions(n_in, n_out)
        i0 = np.clip(np.floor(pos).astype(int), 0, n_in - 1)
        i1 = np.minimum(i0 + 1, n_in - 1)
        return i0, i1, (pos - i0).astype(dtype)

    y0, y1, fy = axis_weights(in_h, out_h)
    x0, x1, fx = axis_weights(in_w, out_w)
    rows = src[y0] * (1 - fy)[:, None] + src[y1] * fy[:, None]
    return rows[:, x0] * (1 - fx)[None, :] + rows[:, x1] * fx[None, :]


def resize_nearest(img: np.ndarray, out_w: int, out_h: int) -> np.ndarray:
    """Nearest-neighbour resize, used for binary maps."""
    img = np.asarray(img)
    in_h, in_w = img.shape
    ys = np.minimum(((np.arange(out_h) + 0.5) * in_h / out_h).astype(int), in_h - 1)
    xs = np.minimum(((np.arange(out_w) + 0.5) * in_w / out_w).astype(int), in_w - 1)
    return img[ys[:, None], xs[None, :]]


# -- volume files ---------------------------------------------------------

VOLUME_MAGIC = b"PSV1"
_HEADER = struct.Struct("<4sB3I")
_DTYPES = {1: np.dtype("<i2"), 2: np.dtype("u1")}
MAX_VOXELS = 1 << 31


class VolumeFormatError(ValueError):
    """Bad magic, unknown dtype code or impossible dimensions."""


class VolumeLengthError(VolumeFormatError):
    """Payload length disagrees with the header dimensions."""


def write_volume(path: str | Path, data: np.ndarray) -> None:
    data = np.asarray(data)
    if data.ndim != 3:
        raise VolumeFormatError(f"expected a 3D array, got shape {data.shape}")
    if data.dtype == np.int16:
        code = 1
    elif data.dtype == np.uint8:
        code = 2
    else:
        raise VolumeFormatError(f"unsupported dtype {data.dtype}; use int16 or uint8")
    d, h, w = data.shape
    payload = np.ascontiguousarray(data, dtype=_DTYPES[code]).tobytes()
    Path(path).write_bytes(_HEADER.pack(VOLUME_MAGIC, code, w, h, d) + payload)


def read_volume(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise VolumeLengthError(f"{path}: file shorter than the {_HEADER.size}-byte header")
    magic, code, w, h, d = _HEADER.unpack_from(raw)
    if magic != VOLUME_MAGIC:
        raise VolumeFormatError(f"{path}: bad magic {magic!r}")
    if code not in _DTYPES:
        raise VolumeFormatError(f"{path}: unknown dtype code {code}")
    n = w * h * d
    if n == 0 or n > MAX_VOXELS:
        raise VolumeFormatError(f"{path}: dimensions {(w, h, d)} out of range")
    dtype = _DTYPES[code]
    expected = n * dtype.itemsize
    payload = raw[_HEADER.size :]
    if len(payload) != expected:
        raise VolumeLengthError(f"{path}: payload has {len(payload)} bytes, header implies {expected}")
    arr = np.frombuffer(payload, dtype=dtype).reshape(d, h, w)
    return arr.astype(np.int16 if code == 1 else np.uint8)
