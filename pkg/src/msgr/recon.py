"""Panorama reconstruction: spatial and channel graph reasoning, L1-norm fusion, decoding."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .geometry import Canvas, Homography, place, warp_image, warp_tensor
from .nn import Conv1d, Conv2d, Module
from .tensor import ShapeError, Tensor

FUSE_EPS = 1e-8


class SGR(Module):
    def __init__(self, c: int, rng, reduction: int = 2, dtype=np.float64):
        cr = max(1, c // reduction)
        self.q = Conv2d(c, cr, 1, rng, dtype=dtype)
        # a per-channel key offset cancels in the softmax over pixels, so no bias
        self.k = Conv2d(c, cr, 1, rng, bias=False, dtype=dtype)
        self.v = Conv2d(c, cr, 1, rng, dtype=dtype)
        # residual branch starts closed: the block is the identity at init
        self.out = Conv2d(cr, c, 1, rng, zero=True, dtype=dtype)

    def forward(self, f: Tensor) -> Tensor:
        return sgr_forward(f, self)


def _sgr_factors(f: Tensor, blk: SGR):
    _, H, W = f.shape
    if H * W == 0:
        raise ShapeError("SGR needs a non-empty feature map")
    P = H * W
    q = blk.q(f).reshape((-1, P))
    k = blk.k(f).reshape((-1, P))
    v = blk.v(f).reshape((-1, P))
    # queries normalised over channels per pixel, keys over pixels per channel
    return T.softmax(q, axis=0), T.softmax(k, axis=1), v


def sgr_forward(f: Tensor, blk: SGR) -> Tensor:
    """``f + out(V A^T)`` with the pixel affinity ``A = softmax(Q)^T softmax(K)``.

    The product is evaluated as ``(V softmax(K)^T) softmax(Q)``, which never
    forms the (HW x HW) matrix.
    """
    _, H, W = f.shape
    pq, pk, v = _sgr_factors(f, blk)
    ctx = T.matmul(v, T.transpose(pk))  # c' x c'
    agg = T.matmul(ctx, pq)  # c' x HW
    return f + blk.out(agg.reshape((-1, H, W)))


def sgr_affinity(f: Tensor, blk: SGR) -> np.ndarray:
    """The implied (HW x HW) affinity; each row sums to one. For inspection only."""
    with T.no_grad():
        pq, pk, _ = _sgr_factors(f, blk)
    return pq.data.T @ pk.data


class DCM(Module):
    """Plain and dilated two-conv paths; input plus the four path outputs fused by 1x1 conv."""

    def __init__(self, c: int, rng, dtype=np.float64):
        self.a1 = Conv2d(c, c, 3, rng, dtype=dtype)
        self.a2 = Conv2d(c, c, 3, rng, dtype=dtype)
        self.b1 = Conv2d(c, c, 3, rng, dilation=2, dtype=dtype)
        self.b2 = Conv2d(c, c, 3, rng, dilation=2, dtype=dtype)
        self.fuse = Conv2d(5 * c, c, 1, rng, dtype=dtype)

    def forward(self, f: Tensor) -> Tensor:
        return dcm_forward(f, self)


def dcm_forward(f: Tensor, blk: DCM) -> Tensor:
    a1 = T.relu(blk.a1(f))
    a2 = T.relu(blk.a2(a1))
    b1 = T.relu(blk.b1(f))
    b2 = T.relu(blk.b2(b1))
    return blk.fuse(T.concat([f, a1, a2, b1, b2], axis=0))


class CGR(Module):
    def __init__(self, c: int, rng, dtype=np.float64):
        cr = max(1, c // 2)
        self.a = Conv2d(c, cr, 1, rng, dtype=dtype)
        self.b = Conv2d(c, cr, 1, rng, dtype=dtype)
        self.rel = Conv1d(cr, cr, 3, rng, dtype=dtype)
        self.hidden = Conv1d(cr, cr, 1, rng, dtype=dtype)
        self.val = Conv2d(c, cr, 1, rng, dtype=dtype)
        self.out = Conv2d(cr, c, 1, rng, zero=True, dtype=dtype)

    def forward(self, f: Tensor) -> Tensor:
        return cgr_forward(f, self)


def channel_relation(f: Tensor, blk: CGR) -> Tensor:
    """Row-softmaxed (c' x c') channel relation matrix."""
    P = f.shape[1] * f.shape[2]
    fa = blk.a(f).reshape((-1, P))
    fb = blk.b(f).reshape((-1, P))
    return T.softmax(T.matmul(fa, T.transpose(fb)), axis=1)


def cgr_forward(f: Tensor, blk: CGR) -> Tensor:
    _, H, W = f.shape
    fc = channel_relation(f, blk)
    fc = fc + blk.rel(fc)
    vals = blk.val(f).reshape((-1, H * W))
    mixed = T.matmul(blk.hidden(fc), vals)
    return f + blk.out(mixed.reshape((-1, H, W)))


class SCGRPath(Module):
    """Three SGR -> DCM -> CGR triples applied in sequence."""

    def __init__(self, c: int, rng, reduction: int = 2, depth: int = 3, dtype=np.float64):
        self.blocks = [[SGR(c, rng, reduction, dtype), DCM(c, rng, dtype), CGR(c, rng, dtype)]
                       for _ in range(depth)]

    def forward(self, f: Tensor) -> Tensor:
        return scgr_path(f, self)


def scgr_path(f: Tensor, path: SCGRPath) -> Tensor:
    for sgr, dcm, cgr in path.blocks:
        f = cgr_forward(dcm_forward(sgr_forward(f, sgr), dcm), cgr)
    return f


def activity(f: Tensor) -> Tensor:
    """Channel L1 norm, 3x3 box-averaged (zero padded)."""
    a = T.tsum(T.tabs(f), axis=0, keepdims=True)
    box = Tensor(np.full((1, 1, 3, 3), 1.0 / 9.0, dtype=f.dtype))
    return T.conv2d(a, box, padding=1)


def fusion_weights(f_ir: Tensor, f_vis: Tensor, eps: float = FUSE_EPS) -> tuple[Tensor, Tensor]:
    """Per-pixel weights proportional to activity; they sum to exactly one."""
    a_ir, a_vis = activity(f_ir), activity(f_vis)
    den = a_ir + a_vis + eps
    return (a_ir + eps / 2) / den, (a_vis + eps / 2) / den


def l1_fuse(f_ir: Tensor, f_vis: Tensor, eps: float = FUSE_EPS) -> Tensor:
    if f_ir.shape != f_vis.shape:
        raise ShapeError(f"fusion inputs differ: {f_ir.shape} vs {f_vis.shape}")
    w_ir, w_vis = fusion_weights(f_ir, f_vis, eps)
    return w_ir * f_ir + w_vis * f_vis


class Decoder(Module):
    def __init__(self, c: int, rng, hidden: int | None = None, dtype=np.float64):
        h = hidden or c
        self.c1 = Conv2d(c, h, 3, rng, dtype=dtype)
        self.c2 = Conv2d(h, h, 3, rng, dtype=dtype)
        self.c3 = Conv2d(h, 1, 3, rng, dtype=dtype)

    def forward(self, f: Tensor) -> Tensor:
        return decode(f, self)


def decode(f: Tensor, dec: Decoder) -> Tensor:
    return T.sigmoid(dec.c3(T.relu(dec.c2(T.relu(dec.c1(f))))))


def place_features(f_ref: Tensor, f_tar: Tensor, h, canvas: Canvas):
    """Reference features placed by offset, target features warped by ``h``.

    Where both views are valid the two are averaged. Returns the combined map
    and the two validity masks (numpy, (H, W)).
    """
    pr, vr = place(f_ref, canvas)
    if isinstance(h, Homography):
        pt, vt = warp_image(f_tar, h, canvas)
    else:
        pt, vt = warp_tensor(f_tar, h, canvas)
    count = np.maximum(vr.data + vt.data, 1.0).astype(f_ref.dtype)
    return (pr + pt) / count, vr.data[0] > 0, vt.data[0] > 0


class Reconstructor(Module):
    """Dual SCGR paths over the IR and VIS halves of the level-4 features."""

    def __init__(self, c_level4: int, rng, reduction: int = 2, depth: int = 3,
                 decoder_hidden: int | None = None, dtype=np.float64):
        c = c_level4 // 2
        self.c = c
        self.ir_path = SCGRPath(c, rng, reduction, depth, dtype)
        self.vis_path = SCGRPath(c, rng, reduction, depth, dtype)
        self.decoder = Decoder(c, rng, decoder_hidden, dtype)

    def forward(self, f_ref: Tensor, f_tar: Tensor, h, canvas: Canvas) -> Tensor:
        feats, _, _ = place_features(f_ref, f_tar, h, canvas)
        return self.reconstruct(feats)

    def reconstruct(self, feats: Tensor) -> Tensor:
        c = self.c
        out_ir = scgr_path(feats[:c], self.ir_path)
        out_vis = scgr_path(feats[c:], self.vis_path)
        return decode(l1_fuse(out_ir, out_vis), self.decoder)
