"""Full stitching network and its forward passes."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .align import GraphAligner, Trace, to_homography
from .config import ModelConfig
from .data import ViewPair
from .encoder import Encoder, FeaturePyramid, PerceptualExtractor
from .geometry import (Canvas, DegenerateHomographyError, Homography, MaskSet, SingularHomographyError,
                       build_masks, canvas_for, default_band, place, warp_image, warp_tensor)
from .losses import WarpedViews
from .nn import Module
from .recon import Reconstructor, place_features
from .tensor import Tensor


class StitchNet(Module):
    def __init__(self, cfg: ModelConfig | None = None, dtype=np.float32):
        cfg = cfg or ModelConfig()
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(cfg.seed)
        self.encoder = Encoder(cfg.channels, rng, dtype)
        lc = self.encoder.level_channels()
        self.aligner = GraphAligner(lc, cfg.align_config(), rng, dtype)
        self.recon = Reconstructor(lc[-1], rng, cfg.reduction, cfg.depth, cfg.decoder_hidden or None, dtype)
        self.perceptual = PerceptualExtractor(cfg.perceptual_seed, dtype=dtype)

    def groups(self) -> dict[str, list[str]]:
        """Parameter names of the alignment half (encoder + aligner) and the reconstruction half."""
        names = [n for n, _ in self.named_parameters()]
        return {
            "align": [n for n in names if n.startswith(("encoder.", "aligner."))],
            "recon": [n for n in names if n.startswith("recon.")],
        }

    def encode(self, view: ViewPair, tag: str) -> FeaturePyramid:
        return self.encoder(view.ir, view.vis, tag)

    def align(self, ref: ViewPair, tar: ViewPair, trace: Trace | None = None):
        """Returns ``(offsets, h, pyr_ref, pyr_tar)``; ``h`` maps target to reference."""
        pr = self.encode(ref, "ref")
        pt = self.encode(tar, "tar")
        w, h = ref.extent
        offsets, hm = self.aligner(pr, pt, w, h, trace)
        return offsets, hm, pr, pt


@dataclass
class Composite:
    """Everything the reconstruction stage sees for one pair on one canvas."""

    canvas: Canvas
    x_out: Tensor
    views: WarpedViews
    masks: MaskSet


def warp_views(ref: ViewPair, tar: ViewPair, h, canvas: Canvas) -> tuple[WarpedViews, np.ndarray, np.ndarray]:
    ir_r, vr = place(ref.ir, canvas)
    vis_r, _ = place(ref.vis, canvas)
    if isinstance(h, Homography):
        ir_t, vt = warp_image(tar.ir, h, canvas)
        vis_t, _ = warp_image(tar.vis, h, canvas)
    else:
        ir_t, vt = warp_tensor(tar.ir, h, canvas)
        vis_t, _ = warp_tensor(tar.vis, h, canvas)
    return WarpedViews(ir_r, ir_t, vis_r, vis_t), vr.data[0] > 0, vt.data[0] > 0


def compose(model: StitchNet, pr: FeaturePyramid, pt: FeaturePyramid, ref: ViewPair, tar: ViewPair,
            h, canvas: Canvas | None = None, band: int = 0) -> Composite:
    """Warp features and images onto ``canvas`` and reconstruct the panorama there."""
    if canvas is None:
        H = h if isinstance(h, Homography) else Homography(h.data.astype(np.float64))
        canvas = canvas_for(H, ref.extent, tar.extent)
    feats, _, _ = place_features(pr.level(4), pt.level(4), h, canvas)
    x_out = model.recon.reconstruct(feats)
    views, c1, c2 = warp_views(ref, tar, h, canvas)
    masks = build_masks(c1, c2, band or default_band(ref.extent[0]))
    return Composite(canvas, x_out, views, masks)


def checked_homography(offsets: Tensor, h: Tensor) -> Homography:
    """Regressed matrix as a :class:`Homography`; raises if it cannot define a canvas."""
    H = to_homography(offsets, h)
    if not np.all(np.isfinite(H.m)):
        raise DegenerateHomographyError("regressed homography is not finite")
    return H


def safe_canvas(H: Homography, ref: ViewPair, tar: ViewPair) -> Canvas:
    try:
        return canvas_for(H, ref.extent, tar.extent)
    except SingularHomographyError as e:
        raise DegenerateHomographyError(str(e)) from e


def panorama(model: StitchNet, ref: ViewPair, tar: ViewPair, canvas: Canvas | None = None):
    """Inference: returns ``(image (H, W) in [0, 1], Homography, canvas, fell_back)``.

    A regressed matrix that cannot define a canvas is replaced by the identity.
    ``canvas`` fixes the output frame (used to compare with a ground-truth panorama).
    """
    with T.no_grad():
        pr, pt = model.encode(ref, "ref"), model.encode(tar, "tar")
        fell_back = False
        try:
            offsets, h = model.aligner(pr, pt, *ref.extent)
            H = checked_homography(offsets, h)
            c = canvas or safe_canvas(H, ref, tar)
        except DegenerateHomographyError:
            fell_back = True
            H = Homography.identity()
            c = canvas or canvas_for(H, ref.extent, tar.extent)
        comp = compose(model, pr, pt, ref, tar, H, c)
        union = comp.masks.c1 | comp.masks.c2
        img = comp.x_out.data[0].astype(np.float64) * union
    return img, H, c, fell_back
