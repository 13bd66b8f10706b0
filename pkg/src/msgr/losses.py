"""Training objectives: alignment, seam L1, masked SSIM and perceptual consistency.

All masked norms are mean-reduced over the mask so the default weights do not
depend on resolution.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import ViewPair
from .encoder import PerceptualExtractor, perceptual_features
from .geometry import Homography, reference_canvas, warp_tensor
from .tensor import Tensor

SSIM_WIN = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


class NonFiniteLossError(FloatingPointError):
    def __init__(self, part: str):
        super().__init__(f"loss term {part!r} is not finite")
        self.part = part


@dataclass
class LossWeights:
    l1: float = 1.0
    l2: float = 1.5
    l3: float = 10.0
    l4: float = 15.0
    l5: float = 1e-3
    l6: float = 1e-3

    def __post_init__(self):
        for k, v in vars(self).items():
            if v < 0:
                raise ValueError(f"loss weight {k} must be nonnegative, got {v}")


@dataclass
class WarpedViews:
    """The four input images brought onto the output canvas."""

    ir_ref: Tensor
    ir_tar: Tensor
    vis_ref: Tensor
    vis_tar: Tensor


def _zero(dtype=np.float64) -> Tensor:
    return Tensor(np.zeros((), dtype=dtype))


def masked_l1(a: Tensor, b: Tensor, mask) -> Tensor:
    """``mean over mask of |a*m - b*m|``; zero for an empty mask."""
    m = np.asarray(mask, dtype=a.dtype)
    n = float(m.sum())
    if n == 0:
        return _zero(a.dtype)
    return T.tsum(T.tabs(a * m - b * m)) * (1.0 / n)


def loss_alignment(ref: ViewPair, tar: ViewPair, h) -> tuple[Tensor, bool]:
    """Mean absolute difference of reference and warped target on their common region.

    ``h`` maps target to reference (a :class:`Homography` or a differentiable
    3x3 Tensor). Returns ``(loss, empty_region)``.
    """
    if isinstance(h, Homography):
        h = Tensor(h.m.astype(ref.vis.dtype))
    canvas = reference_canvas(*ref.extent)
    wv, valid = warp_tensor(tar.vis, h, canvas)
    wi, _ = warp_tensor(tar.ir, h, canvas)
    mask = valid.data
    if not mask.any():
        return _zero(ref.vis.dtype), True
    return masked_l1(ref.vis, wv, mask) + masked_l1(ref.ir, wi, mask), False


def loss_seam(x_out: Tensor, views: WarpedViews, s1, s2, w: LossWeights | None = None) -> Tensor:
    w = w or LossWeights()
    return (w.l1 * masked_l1(x_out, views.ir_ref, s1)
            + w.l2 * masked_l1(x_out, views.ir_tar, s2)
            + w.l2 * masked_l1(x_out, views.vis_ref, s1)
            + w.l2 * masked_l1(x_out, views.vis_tar, s2))


def gaussian_window(size: int = SSIM_WIN, sigma: float = SSIM_SIGMA) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(ax ** 2) / (2 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def ssim_windows(mask, size: int = SSIM_WIN) -> np.ndarray:
    """Top-left anchored windows lying fully inside ``mask`` (valid-correlation grid)."""
    m = np.asarray(mask, dtype=bool)
    if m.shape[0] < size or m.shape[1] < size:
        return np.zeros((max(m.shape[0] - size + 1, 0), max(m.shape[1] - size + 1, 0)), dtype=bool)
    win = np.lib.stride_tricks.sliding_window_view(m, (size, size))
    return win.all(axis=(2, 3))


def ssim(x: Tensor, y: Tensor, mask=None) -> Tensor:
    """Mean SSIM over 11x11 Gaussian windows fully inside ``mask``; images (1,H,W) in [0,1]."""
    if x.shape != y.shape:
        raise T.ShapeError(f"ssim inputs differ: {x.shape} vs {y.shape}")
    if mask is None:
        mask = np.ones(x.shape[1:], dtype=bool)
    ok = ssim_windows(mask)
    n = int(ok.sum())
    if n == 0:
        raise ValueError("mask holds no complete SSIM window")
    g = Tensor(gaussian_window()[None, None].astype(x.dtype))
    mx, my = T.conv2d(x, g), T.conv2d(y, g)
    exx, eyy, exy = T.conv2d(x * x, g), T.conv2d(y * y, g), T.conv2d(x * y, g)
    mxy = mx * my
    mxx, myy = mx * mx, my * my
    num = (2.0 * mxy + SSIM_C1) * (2.0 * (exy - mxy) + SSIM_C2)
    den = (mxx + myy + SSIM_C1) * ((exx - mxx) + (eyy - myy) + SSIM_C2)
    smap = num / den
    return T.tsum(smap * ok[None].astype(x.dtype)) * (1.0 / n)


def loss_ssim(x_out: Tensor, views: WarpedViews, c1, c2, w: LossWeights | None = None) -> Tensor:
    w = w or LossWeights()
    m1 = np.asarray(c1, dtype=x_out.dtype)
    m2 = np.asarray(c2, dtype=x_out.dtype)
    o1, o2 = x_out * m1, x_out * m2

    def term(out, ref, m, mask):
        return 1.0 - ssim(out, ref * m, mask)

    total = _zero(x_out.dtype)
    if w.l3:
        total = total + w.l3 * (term(o1, views.ir_ref, m1, c1) + term(o2, views.ir_tar, m2, c2))
    if w.l4:
        total = total + w.l4 * (term(o1, views.vis_ref, m1, c1) + term(o2, views.vis_tar, m2, c2))
    return total


def loss_perceptual(x_out: Tensor, views: WarpedViews, c1, c2, V: PerceptualExtractor,
                    w: LossWeights | None = None) -> Tensor:
    """Mean squared distance between extractor features of the masked images."""
    w = w or LossWeights()
    if not (w.l5 or w.l6):
        return _zero(x_out.dtype)
    m1 = np.asarray(c1, dtype=x_out.dtype)
    m2 = np.asarray(c2, dtype=x_out.dtype)
    f1 = perceptual_features(x_out * m1, V)
    f2 = perceptual_features(x_out * m2, V)

    def dist(fa, img, m):
        return T.mean(T.square(fa - perceptual_features(img * m, V)))

    total = _zero(x_out.dtype)
    if w.l5:
        total = total + w.l5 * (dist(f1, views.ir_ref, m1) + dist(f2, views.ir_tar, m2))
    if w.l6:
        total = total + w.l6 * (dist(f1, views.vis_ref, m1) + dist(f2, views.vis_tar, m2))
    return total


def loss_total(parts: dict) -> Tensor:
    """Sum of the named parts; a non-finite part raises with its name."""
    total = None
    for name, part in parts.items():
        value = float(np.asarray(part.data if isinstance(part, Tensor) else part).reshape(-1)[0])
        if not math.isfinite(value):
            raise NonFiniteLossError(name)
        total = part if total is None else total + part
    return total if total is not None else _zero()
