"""Infrared/visible image stitching with graph reasoning, on a small numpy autodiff core."""

__version__ = "0.1.0"
