"""Two-stage slice segmentation: a Q-learning window agent followed by a
deformable U-Net, fused across three views by majority voting."""

__version__ = "0.1.0"
