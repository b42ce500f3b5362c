"""Forward/backward kernels on plain numpy arrays.

Every ``*_forward`` returns ``(out, cache)`` and the matching ``*_backward``
takes ``(dout, cache)``. Kernels keep the dtype of their inputs, so float64
arrays give a gradient-checkable path and float32 arrays the training path.

Layouts: images are ``(N, C, H, W)``; conv weights ``(F, C, k, k)``;
transposed-conv weights ``(C, F, 2, 2)``; dense weights ``(out, in)``;
deformable offsets ``(N, 2*k*k, H, W)`` with channel ``2n`` holding the x
(column) shift and ``2n + 1`` the y (row) shift of kernel tap ``n``.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import sparse


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


def _check_conv(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> int:
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"expected 4D input and weight, got {x.shape} and {weight.shape}")
    f, c, kh, kw = weight.shape
    if kh != kw or kh % 2 == 0:
        raise ShapeError(f"kernel must be square with odd side, got {kh}x{kw}")
    if x.shape[1] != c:
        raise ShapeError(f"input has {x.shape[1]} channels, weight expects {c}")
    if bias.shape != (f,):
        raise ShapeError(f"bias shape {bias.shape} does not match {f} filters")
    return kh


def im2col(x: np.ndarray, k: int) -> np.ndarray:
    """Zero-padded 'same' patches as ``(N, H*W, k*k*C)`` (tap-major, channel-minor)."""
    n, c, h, w = x.shape
    p = (k - 1) // 2
    xp = np.pad(x.transpose(0, 2, 3, 1), ((0, 0), (p, p), (p, p), (0, 0)))
    win = sliding_window_view(xp, (k, k), axis=(1, 2))  # N, H, W, C, k, k
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(n, h * w, k * k * c)


def col2im(cols: np.ndarray, shape: tuple[int, ...], k: int) -> np.ndarray:
    n, c, h, w = shape
    p = (k - 1) // 2
    cols = cols.reshape(n, h, w, k, k, c)
    dxp = np.zeros((n, h + 2 * p, w + 2 * p, c), dtype=cols.dtype)
    for ky in range(k):
        for kx in range(k):
            dxp[:, ky : ky + h, kx : kx + w] += cols[:, :, :, ky, kx]
    return dxp[:, p : p + h, p : p + w].transpose(0, 3, 1, 2)


def _weight_matrix(weight: np.ndarray) -> np.ndarray:
    f = weight.shape[0]
    return weight.transpose(0, 2, 3, 1).reshape(f, -1)  # F, k*k*C


def _apply_cols(weight: np.ndarray, bias: np.ndarray, cols: np.ndarray, h: int, w: int) -> np.ndarray:
    out = np.matmul(cols, _weight_matrix(weight).T)  # N, HW, F
    out += bias
    return out.reshape(cols.shape[0], h, w, -1).transpose(0, 3, 1, 2)


def _cols_backward(dout, weight, cols):
    n, f, h, w = dout.shape
    d2 = dout.transpose(0, 2, 3, 1).reshape(n * h * w, f)
    wm = _weight_matrix(weight)
    dwm = cols.reshape(n * h * w, -1).T @ d2  # k*k*C, F
    k, c = weight.shape[2], weight.shape[1]
    dweight = dwm.T.reshape(f, k, k, c).transpose(0, 3, 1, 2)
    dbias = d2.sum(axis=0)
    dcols = d2 @ wm  # N*HW, k*k*C
    return dcols, dweight, dbias


# -- standard convolution -------------------------------------------------


def conv2d_forward(x, weight, bias):
    """Stride-1 'same' convolution, ``Y(p0) = sum_n w(pn) X(p0 + pn) + b``."""
    k = _check_conv(x, weight, bias)
    cols = im2col(x, k)
    out = _apply_cols(weight, bias, cols, x.shape[2], x.shape[3])
    return out, (x.shape, weight, cols)


def conv2d_backward(dout, cache):
    """Returns ``(dx, dweight, dbias)``."""
    shape, weight, cols = cache
    if dout.shape != (shape[0], weight.shape[0], shape[2], shape[3]):
        raise ShapeError(f"upstream gradient shape {dout.shape} does not match the forward output")
    dcols, dweight, dbias = _cols_backward(dout, weight, cols)
    return col2im(dcols, shape, weight.shape[2]), dweight, dbias


# -- bilinear sampling ----------------------------------------------------


def bilinear_sample(img: np.ndarray, x, y):
    """Zero-padded bilinear interpolation of a 2D map at ``(x, y)``.

    Returns ``(value, dvalue_dx, dvalue_dy, taps)`` where ``taps`` lists the
    four ``(row, col, weight)`` neighbours the sample scatters onto. Neighbours
    outside the map read as zero, so a sample at or beyond one pixel outside
    the border is exactly zero with zero partials. Partials are taken on the
    cell selected by ``floor``, i.e. right-sided at integer coordinates.
    """
    img = np.asarray(img)
    h, w = img.shape
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    fx, fy = x - x0, y - y0

    def at(r, c):
        ok = (r >= 0) & (r < h) & (c >= 0) & (c < w)
        return np.where(ok, img[np.clip(r, 0, h - 1), np.clip(c, 0, w - 1)], 0.0)

    v00, v01 = at(y0, x0), at(y0, x0 + 1)
    v10, v11 = at(y0 + 1, x0), at(y0 + 1, x0 + 1)
    value = (1 - fy) * ((1 - fx) * v00 + fx * v01) + fy * ((1 - fx) * v10 + fx * v11)
    ddx = (1 - fy) * (v01 - v00) + fy * (v11 - v10)
    ddy = (1 - fx) * (v10 - v00) + fx * (v11 - v01)
    taps = [
        (y0, x0, (1 - fy) * (1 - fx)),
        (y0, x0 + 1, (1 - fy) * fx),
        (y0 + 1, x0, fy * (1 - fx)),
        (y0 + 1, x0 + 1, fy * fx),
    ]
    return value, ddx, ddy, taps


# -- deformable convolution -----------------------------------------------


def _sample_geometry(offsets: np.ndarray, k: int, h_in: int, w_in: int, dtype):
    """Integer cells and fractional parts of every (image, output pixel, tap) sample.

    Rows are ordered ``(n, y, x, tap)``; each row has four neighbour columns
    indexing input pixels ``(n, y, x)``, with out-of-range neighbours masked.
    """
    n, _, h, w = offsets.shape
    kk = k * k
    p = (k - 1) // 2
    taps = np.arange(kk)
    ky, kx = taps // k - p, taps % k - p
    off = offsets.reshape(n, kk, 2, h, w).transpose(0, 3, 4, 1, 2)  # N, H, W, K, 2
    py = np.arange(h)[None, :, None, None] + ky[None, None, None, :] + off[..., 1]
    px = np.arange(w)[None, None, :, None] + kx[None, None, None, :] + off[..., 0]
    y0 = np.floor(py)
    x0 = np.floor(px)
    fy = (py - y0).astype(dtype).ravel()
    fx = (px - x0).astype(dtype).ravel()
    y0 = y0.astype(np.int64).ravel()
    x0 = x0.astype(np.int64).ravel()
    img = np.repeat(np.arange(n), h * w * kk) * (h_in * w_in)
    cols, oks = [], []
    for dy, dx in ((0, 0), (0, 1), (1, 0), (1, 1)):
        r, q = y0 + dy, x0 + dx
        ok = (r >= 0) & (r < h_in) & (q >= 0) & (q < w_in)
        cols.append(np.where(ok, img + r * w_in + q, 0))
        oks.append(ok)
    rows = n * h * w * kk
    indices = np.stack(cols, axis=1).ravel().astype(np.int32)
    mask = np.stack(oks, axis=1).astype(dtype)
    return fx, fy, indices, mask, (rows, n * h_in * w_in)


def _sparse_rows(geom, *weights):
    """CSR operator with the four per-row neighbour ``weights`` of ``geom``."""
    _, _, indices, mask, shape = geom
    data = (np.stack(weights, axis=1) * mask).ravel()
    indptr = np.arange(0, 4 * shape[0] + 1, 4, dtype=np.int32)
    return sparse.csr_matrix((data, indices, indptr), shape=shape)


def _interp_operator(geom):
    fx, fy = geom[0], geom[1]
    gx, gy = 1 - fx, 1 - fy
    return _sparse_rows(geom, gy * gx, gy * fx, fy * gx, fy * fx)


def _derivative_operators(geom):
    """Derivatives of the bilinear weights with respect to the sample x and y."""
    fx, fy = geom[0], geom[1]
    gx, gy = 1 - fx, 1 - fy
    return _sparse_rows(geom, -gy, gy, -fy, fy), _sparse_rows(geom, -gx, -fx, gx, fx)


def deform_conv2d_forward(x, weight, bias, offsets):
    """Deformable 'same' convolution, ``Y(p0) = sum_n w(pn) X(p0 + pn + dpn) + b``.

    Offsets are shared across input channels; fractional sample points are
    read with zero-padded bilinear interpolation.
    """
    k = _check_conv(x, weight, bias)
    n, c, h, w = x.shape
    kk = k * k
    if offsets.shape != (n, 2 * kk, h, w):
        raise ShapeError(f"offsets must have shape {(n, 2 * kk, h, w)}, got {offsets.shape}")
    geom = _sample_geometry(offsets, k, h, w, x.dtype)
    interp = _interp_operator(geom)
    xf = np.ascontiguousarray(x.transpose(0, 2, 3, 1)).reshape(n * h * w, c)
    cols = np.asarray(interp @ xf).reshape(n, h * w, kk * c)
    out = _apply_cols(weight, bias, cols, h, w)
    return out, (x.shape, weight, cols, xf, interp, geom)


def deform_sample_cells(cache) -> bytes:
    """Identifies the bilinear cell of every sample in a deformable forward.

    The output is smooth in the offsets as long as this value is unchanged.
    """
    _, _, indices, mask, _ = cache[5]
    return indices.tobytes() + np.ascontiguousarray(mask != 0).tobytes()


def deform_conv2d_backward(dout, cache):
    """Returns ``(dx, dweight, dbias, doffsets)``."""
    shape, weight, cols, xf, interp, geom = cache
    n, c, h, w = shape
    kk = weight.shape[2] * weight.shape[3]
    if dout.shape != (n, weight.shape[0], h, w):
        raise ShapeError(f"upstream gradient shape {dout.shape} does not match the forward output")
    dcols, dweight, dbias = _cols_backward(dout, weight, cols)
    dcols = dcols.reshape(n * h * w * kk, c)
    dx = np.asarray(interp.T @ dcols).reshape(n, h, w, c).transpose(0, 3, 1, 2)
    d_dx, d_dy = _derivative_operators(geom)
    doff = np.empty((n, h, w, kk, 2), dtype=dcols.dtype)
    doff[..., 0] = np.einsum("ij,ij->i", dcols, d_dx @ xf).reshape(n, h, w, kk)
    doff[..., 1] = np.einsum("ij,ij->i", dcols, d_dy @ xf).reshape(n, h, w, kk)
    return dx, dweight, dbias, doff.transpose(0, 3, 4, 1, 2).reshape(n, 2 * kk, h, w)


# -- pooling / upsampling -------------------------------------------------


def maxpool2x2_forward(x):
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"2x2 pooling needs even spatial dims, got {h}x{w}")
    blocks = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    arg = blocks.argmax(axis=-1)  # first maximum in row-major order wins
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
    return out, (x.shape, arg)


def maxpool2x2_backward(dout, cache):
    shape, arg = cache
    n, c, h, w = shape
    if dout.shape != arg.shape:
        raise ShapeError(f"upstream gradient shape {dout.shape} does not match {arg.shape}")
    blocks = np.zeros(arg.shape + (4,), dtype=dout.dtype)
    np.put_along_axis(blocks, arg[..., None], dout[..., None], axis=-1)
    return blocks.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(shape)


def transposed_conv2d_forward(x, weight, bias):
    """Stride-2, 2x2-kernel transposed convolution; doubles H and W."""
    n, c, h, w = x.shape
    if weight.ndim != 4 or weight.shape[0] != c or weight.shape[2:] != (2, 2):
        raise ShapeError(f"weight must be ({c}, F, 2, 2), got {weight.shape}")
    f = weight.shape[1]
    if bias.shape != (f,):
        raise ShapeError(f"bias shape {bias.shape} does not match {f} filters")
    # (N, H*W, C) @ (C, F*4)
    xm = x.reshape(n, c, h * w).transpose(0, 2, 1)
    y = np.matmul(xm, weight.reshape(c, f * 4))  # N, HW, F*4
    y = y.reshape(n, h, w, f, 2, 2).transpose(0, 3, 1, 4, 2, 5).reshape(n, f, 2 * h, 2 * w)
    y += bias[None, :, None, None]
    return y, (x, weight)


def transposed_conv2d_backward(dout, cache):
    x, weight = cache
    n, c, h, w = x.shape
    f = weight.shape[1]
    if dout.shape != (n, f, 2 * h, 2 * w):
        raise ShapeError(f"upstream gradient shape {dout.shape} does not match the forward output")
    d = dout.reshape(n, f, h, 2, w, 2).transpose(0, 2, 4, 1, 3, 5).reshape(n, h * w, f * 4)
    xm = x.reshape(n, c, h * w)
    dweight = np.matmul(xm, d).sum(axis=0).reshape(weight.shape)
    dx = np.matmul(d, weight.reshape(c, f * 4).T).transpose(0, 2, 1).reshape(x.shape)
    dbias = dout.sum(axis=(0, 2, 3))
    return dx, dweight, dbias


# -- pointwise / dense ----------------------------------------------------


def relu_forward(x):
    return np.maximum(x, 0), x > 0


def relu_backward(dout, cache):
    return dout * cache


def sigmoid_forward(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out, out


def sigmoid_backward(dout, cache):
    return dout * cache * (1 - cache)


def dense_forward(x, weight, bias):
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"dense input {x.shape} incompatible with weight {weight.shape}")
    if bias.shape != (weight.shape[0],):
        raise ShapeError(f"bias shape {bias.shape} does not match {weight.shape[0]} outputs")
    return x @ weight.T + bias, (x, weight)


def dense_backward(dout, cache):
    x, weight = cache
    return dout @ weight, dout.T @ x, dout.sum(axis=0)


# -- losses ---------------------------------------------------------------


def dice_loss(pred: np.ndarray, target: np.ndarray, smooth: float = 1.0):
    """Soft Dice loss ``-(2 sum(p t) + s) / (sum p + sum t + s)`` and its gradient."""
    pred = np.asarray(pred)
    if pred.shape != np.shape(target):
        raise ShapeError(f"pred {pred.shape} and target {np.shape(target)} differ")
    t = np.asarray(target, dtype=pred.dtype)
    acc = np.result_type(pred.dtype, np.float64)  # float64, or wider for extended precision
    inter = np.sum(pred * t, dtype=acc)
    denom = np.sum(pred, dtype=acc) + np.sum(t, dtype=acc) + smooth
    num = 2.0 * inter + smooth
    loss = -num / denom
    grad = (-(2.0 * t * denom - num) / denom**2).astype(pred.dtype, copy=False)
    return loss, grad
