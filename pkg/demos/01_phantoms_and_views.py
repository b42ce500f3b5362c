"""
Phantoms and the three views
============================

A phantom is a 64^3 CT-like volume with one small bent target, a few bright
distractor blobs and Gaussian noise. Every axial slice that touches the
target holds between 0.1% and 0.8% foreground, so the target is tiny.
"""
import numpy as np

from pansearch.synthdata import PhantomConfig, clip_rescale, foreground_fractions, generate_phantom, slice_view

vol, lab = generate_phantom(PhantomConfig(seed=0))
print("volume", vol.shape, vol.dtype, "HU range", vol.min(), vol.max())
print("target voxels", int(lab.sum()))

# Windowing to [-100, 240] HU and rescaling to 8 bits, as the segmenter sees it
v8 = clip_rescale(vol)

# Each view slices along a different axis. The target only shows up in a
# minority of slices, and only those are used to train the localizer.
for axis in ("axial", "coronal", "sagittal"):
    fr = foreground_fractions(lab, axis)
    hit = fr > 0
    print(f"{axis:9s} {len(fr)} slices of {slice_view(v8, axis).shape[1:]}, "
          f"{hit.sum()} contain target, fraction {fr[hit].min():.4f}..{fr[hit].max():.4f}")

# A crude text rendering of the axial slice with the most target pixels
k = int(np.argmax(foreground_fractions(lab)))
img, m = slice_view(v8, "axial")[k], slice_view(lab, "axial")[k]
for y in range(0, 64, 4):
    print("".join("#" if m[y:y + 4, x:x + 4].any() else " .:-=+*%@"[min(img[y, x] // 29, 8)] for x in range(0, 64, 2)))
