"""Modality-specific feature pyramids and the frozen perceptual extractor."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import Conv2d, Module
from .tensor import ShapeError, Tensor


@dataclass
class FeaturePyramid:
    """Four levels, ``levels[0]`` = f1 (coarsest) ... ``levels[3]`` = f4 (input resolution).

    Each level is ``concat(ir_features, vis_features)`` along channels.
    """

    levels: list[Tensor]
    view: str = "ref"

    def level(self, i: int) -> Tensor:
        """1-based access matching the f1..f4 naming."""
        return self.levels[i - 1]


class Branch(Module):
    """One modality: four stages of (3x3 conv, ReLU) x 2, average-pooled between stages."""

    def __init__(self, channels, rng, dtype=np.float64):
        self.stages = []
        c_in = 1
        for c in channels:
            self.stages.append([Conv2d(c_in, c, 3, rng, dtype=dtype), Conv2d(c, c, 3, rng, dtype=dtype)])
            c_in = c

    def forward(self, x: Tensor) -> list[Tensor]:
        feats = []
        for i, (a, b) in enumerate(self.stages):
            if i:
                x = T.avg_pool(x, 2)
            x = T.relu(b(T.relu(a(x))))
            feats.append(x)
        return feats[::-1]


class Encoder(Module):
    def __init__(self, channels=(16, 32, 64, 128), rng=None, dtype=np.float64):
        rng = np.random.default_rng(0) if rng is None else rng
        self.channels = tuple(channels)
        self.ir = Branch(channels, rng, dtype)
        self.vis = Branch(channels, rng, dtype)

    def level_channels(self) -> list[int]:
        """Concatenated channel count of f1..f4."""
        return [2 * c for c in self.channels[::-1]]

    def forward(self, ir: Tensor, vis: Tensor, view: str = "ref") -> FeaturePyramid:
        return encode_pyramid(ir, vis, self, view)


def encode_pyramid(ir: Tensor, vis: Tensor, enc: Encoder, view: str = "ref") -> FeaturePyramid:
    if ir.shape != vis.shape:
        raise ShapeError(f"IR {ir.shape} and VIS {vis.shape} extents differ")
    if ir.ndim != 3 or ir.shape[0] != 1:
        raise ShapeError(f"expected single-channel (1,H,W) images, got {ir.shape}")
    depth = len(enc.channels)
    step = 2 ** (depth - 1)
    if ir.shape[1] % step or ir.shape[2] % step:
        raise ShapeError(f"image extent {ir.shape[1:]} is not divisible by {step}; pad it first")
    fi = enc.ir(ir)
    fv = enc.vis(vis)
    return FeaturePyramid([T.concat([a, b], axis=0) for a, b in zip(fi, fv)], view)


class PerceptualExtractor:
    """Frozen random-weight stack: conv3x3 -> ReLU -> conv3x3 -> ReLU -> conv3x3.

    Weights are He-normal from ``seed`` and never receive gradients.
    """

    def __init__(self, seed: int = 1234, widths=(8, 16, 16), dtype=np.float64):
        self.seed = seed
        rng = np.random.default_rng(seed)
        self.weights = []
        c_in = 1
        for c in widths:
            w = rng.standard_normal((c, c_in, 3, 3)) * np.sqrt(2.0 / (c_in * 9))
            self.weights.append(Tensor(w.astype(dtype)))
            c_in = c

    def astype(self, dtype) -> "PerceptualExtractor":
        self.weights = [Tensor(w.data.astype(dtype)) for w in self.weights]
        return self

    def __call__(self, x: Tensor) -> Tensor:
        return perceptual_features(x, self)


def perceptual_features(x: Tensor, V: PerceptualExtractor) -> Tensor:
    for i, w in enumerate(V.weights):
        x = T.conv2d(x, w, None, padding=1)
        if i < len(V.weights) - 1:
            x = T.relu(x)
    return x
