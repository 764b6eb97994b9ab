"""Self-supervised stereo depth estimation with OT-based epipolar attention."""

__version__ = "0.1.0"
