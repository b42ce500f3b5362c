"""
Deformable convolution
======================

A deformable convolution displaces each kernel tap by a learned (dx, dy) and
reads the input by bilinear interpolation. With zero offsets it must agree
with plain convolution to the last bit, and with an integer offset it is a
shifted plain convolution. Its gradients, including those of the offsets,
are checked against central differences.
"""
import numpy as np

from pansearch.nn import functional as F
from pansearch.nn.gradcheck import grad_check

rng = np.random.default_rng(0)
x = rng.normal(size=(1, 2, 8, 8))
w, b = rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)

plain, _ = F.conv2d_forward(x, w, b)
zero, _ = F.deform_conv2d_forward(x, w, b, np.zeros((1, 18, 8, 8)))
print("zero offsets identical to conv2d:", np.array_equal(plain, zero))

# every tap moved one pixel right reads x[..., y, x + 1]
off = np.zeros((1, 18, 8, 8))
off[:, 0::2] = 1.0
moved, _ = F.deform_conv2d_forward(x, w, b, off)
shifted = np.zeros_like(x)
shifted[..., :-1] = x[..., 1:]
ref, _ = F.conv2d_forward(shifted, w, b)
print("dx=+1 equals conv of the shifted input (interior):", np.allclose(moved[..., 1:-1, 1:-2], ref[..., 1:-1, 1:-2]))

# gradient check with fractional offsets
off = rng.normal(scale=0.7, size=(1, 18, 8, 8))
R = rng.normal(size=(1, 3, 8, 8))
out, cache = F.deform_conv2d_forward(x, w, b, off)
dx, dw, db, doff = F.deform_conv2d_backward(R, cache)
state = {}


def loss():
    out, cache = F.deform_conv2d_forward(x, w, b, off)
    state["cells"] = F.deform_sample_cells(cache)
    return float((out * R).sum())


# the output is affine inside a bilinear cell, so a wide step is exact there;
# perturbations that cross a cell boundary are skipped
err = grad_check(loss, [x, w, b, off], [dx, dw, db, doff], 0.05, region=lambda: state["cells"])
print(f"worst relative gradient error: {err:.2e}")
