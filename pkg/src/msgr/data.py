"""View pairs and 8-bit grayscale image IO."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .tensor import Tensor


@dataclass
class ViewPair:
    """Co-registered infrared and visible images of one viewpoint, each (1, H, W)."""

    ir: Tensor
    vis: Tensor

    @classmethod
    def from_arrays(cls, ir: np.ndarray, vis: np.ndarray, dtype=np.float64) -> "ViewPair":
        return cls(Tensor(np.asarray(ir, dtype=dtype)[None]), Tensor(np.asarray(vis, dtype=dtype)[None]))

    @property
    def extent(self) -> tuple[int, int]:
        """(width, height)."""
        return self.ir.shape[2], self.ir.shape[1]


def load_gray(path) -> np.ndarray:
    """Read an image as float64 luminance in [0, 1]."""
    with Image.open(path) as im:
        if im.mode not in ("L", "I;16", "I", "F"):
            im = im.convert("L")
        arr = np.asarray(im, dtype=np.float64)
    if arr.max(initial=0) > 255:
        return arr / 65535.0
    return arr / 255.0


def to_uint8(arr: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(arr, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def save_gray(path, arr: np.ndarray) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(np.squeeze(arr)), mode="L").save(path)
