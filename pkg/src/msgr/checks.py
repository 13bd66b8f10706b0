"""Finite-difference gradient suites over every learnable block, at toy shapes in float64."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .align import (AlignConfig, GraphAligner, NodeEmbedding, NodeSet, RegressionHead, embed_nodes,
                    pass_message, reason_level, regress_homography)
from .data import ViewPair
from .encoder import Encoder, FeaturePyramid, PerceptualExtractor
from .geometry import build_masks, canvas_for, corners, dlt_tensor, place, warp_tensor
from .gradcheck import grad_check_table
from .losses import WarpedViews, loss_alignment, loss_perceptual, loss_seam, loss_ssim
from .nn import Conv2d, Module, Parameter
from .recon import CGR, DCM, SGR, Decoder, Reconstructor, l1_fuse
from .tensor import Tensor

TOL = 1e-4
F64 = np.float64
ENTRIES = 12


def _param(rng, shape, scale=1.0) -> Parameter:
    return Parameter(rng.standard_normal(shape) * scale)


def _probe(rng, shape) -> np.ndarray:
    """Fixed random weights that turn a map into a scalar."""
    return rng.standard_normal(shape)


def _scalar(x: Tensor, w: np.ndarray) -> Tensor:
    return T.tsum(x * w)


def _rows(prefix: str, table: dict) -> dict:
    return {f"{prefix}/{k}": v for k, v in table.items()}


def _module_check(prefix, mod: Module, f, seed, extra=(), max_entries=ENTRIES) -> dict:
    _jitter(mod, np.random.default_rng([seed, 7]), 0.1)
    params = list(mod.named_parameters()) + list(extra)
    return _rows(prefix, grad_check_table(f, params, seed=seed, max_entries=max_entries))


def _jitter(mod: Module, rng, scale=0.3) -> None:
    """Replace zero initialisations by small random values.

    Zero biases put ReLU inputs exactly on the kink wherever a window sees
    only zeros, where central differences and backprop legitimately disagree.
    """
    for _, p in mod.named_parameters():
        if not np.any(p.data):
            p.data = rng.standard_normal(p.data.shape) * scale


# ---------------------------------------------------------------------------


def suite_tensor(seed: int = 0) -> dict:
    rng = np.random.default_rng(seed)
    out = {}
    x = _param(rng, (2, 6, 6))
    w = _param(rng, (3, 2, 3, 3))
    b = _param(rng, (3,))
    r = _probe(rng, (3, 6, 6))
    out.update(_rows("conv2d", grad_check_table(lambda: _scalar(T.conv2d(x, w, b, padding=1), r),
                                                {"x": x, "w": w, "b": b}, seed=seed)))
    rd = _probe(rng, (3, 4, 4))
    out.update(_rows("conv2d_dilated", grad_check_table(
        lambda: _scalar(T.conv2d(x, w, b, dilation=2, padding=1), rd), {"x": x, "w": w}, seed=seed)))
    s = _param(rng, (2, 7))
    k1 = _param(rng, (3, 2, 3))
    r1 = _probe(rng, (3, 7))
    out.update(_rows("conv1d", grad_check_table(lambda: _scalar(T.conv1d(s, k1, None, padding=1), r1),
                                                {"x": s, "w": k1}, seed=seed)))
    a = _param(rng, (3, 4))
    m = _param(rng, (4, 5))
    rm = _probe(rng, (3, 5))
    out.update(_rows("matmul", grad_check_table(lambda: _scalar(T.matmul(a, m), rm), {"a": a, "b": m}, seed=seed)))
    out.update(_rows("softmax", grad_check_table(lambda: _scalar(T.softmax(m, axis=1), _probe(np.random.default_rng(1), (4, 5))),
                                                 {"x": m}, seed=seed)))
    q = Parameter(np.eye(3) + 0.2 * rng.standard_normal((3, 3)))
    rq = _probe(rng, (3, 3))
    out.update(_rows("inv", grad_check_table(lambda: _scalar(T.inv(q), rq), {"x": q}, seed=seed)))
    rs = _probe(rng, (2, 6, 6))
    out.update(_rows("sigmoid_exp_log", grad_check_table(
        lambda: _scalar(T.sigmoid(x) + T.exp(x * 0.1) + T.log(T.square(x) + 1.0), rs), {"x": x}, seed=seed)))
    for mode, size in (("avg-pool", 3), ("adaptive-avg-pool", (4, 4)), ("bilinear-upsample", (9, 11)),
                       ("global-avg-pool", None)):
        y = T.resample(x, mode, size)
        ry = _probe(rng, y.shape)
        out.update(_rows(f"resample[{mode}]", grad_check_table(
            lambda mode=mode, size=size, ry=ry: _scalar(T.resample(x, mode, size), ry), {"x": x}, seed=seed)))
    # off-lattice sampling sites keep the bilinear weights away from their kinks
    coords = Parameter(np.stack(np.meshgrid(np.linspace(0.3, 4.6, 5), np.linspace(0.2, 4.7, 4)))[::1]
                       + 0.05 * rng.standard_normal((2, 4, 5)))
    rg = _probe(rng, (2, 4, 5))
    out.update(_rows("grid_sample", grad_check_table(
        lambda: _scalar(T.grid_sample(x, coords)[0], rg), {"x": x, "coords": coords}, seed=seed)))
    src = corners(8, 8)
    dst = Parameter(src + rng.uniform(-1.5, 1.5, size=(4, 2)))
    rh = _probe(rng, (3, 3))
    out.update(_rows("dlt", grad_check_table(lambda: _scalar(dlt_tensor(src, dst), rh), {"dst": dst}, seed=seed)))
    return out


def suite_encoder(seed: int = 0) -> dict:
    rng = np.random.default_rng(seed)
    enc = Encoder((2, 2, 3, 3), rng, F64)
    # small extent: fewer ReLU units means fewer kinks near the evaluation point
    ir, vis = _param(rng, (1, 8, 8)), _param(rng, (1, 8, 8))
    ir.data = np.abs(ir.data)
    vis.data = np.abs(vis.data)
    probes = [_probe(rng, (2 * c, 8 // 2 ** i, 8 // 2 ** i)) for i, c in enumerate(enc.channels)][::-1]

    def f():
        pyr = enc(ir, vis)
        return T.concat([_scalar(lv, p).reshape(1) for lv, p in zip(pyr.levels, probes)], 0).sum()

    return _module_check("encoder", enc, f, seed, [("input.ir", ir), ("input.vis", vis)])


def suite_align(seed: int = 0) -> dict:
    rng = np.random.default_rng(seed)
    out = {}
    c, d, N = 3, 4, 3
    f = _param(rng, (c, 6, 6))
    emb = NodeEmbedding(c, d, N, rng, F64)
    probes = [_probe(rng, (d, 6, 6)) for _ in range(N)]
    out.update(_module_check("embed_nodes", emb, lambda: sum(
        (_scalar(n, p) for n, p in zip(embed_nodes(f, emb), probes)), Tensor(0.0)), seed, [("input", f)]))

    nk, nl = _param(rng, (d, 5, 5)), _param(rng, (d, 5, 5))
    conv = Conv2d(d, d, 3, rng, dtype=F64)
    pr = [_probe(rng, (d, 5, 5)) for _ in range(4)]
    out.update(_module_check("pass_message", conv, lambda: sum(
        (_scalar(o, p) for o, p in zip(pass_message(nk, nl, conv), pr)), Tensor(0.0)),
        seed, [("nk", nk), ("nl", nl)]))

    convs = [Conv2d(d, d, 3, rng, dtype=F64) for _ in range(4)]
    holder = Module()
    holder.convs = convs
    ref = [_param(rng, (d, 4, 4), 0.5) for _ in range(N)]
    tar = [_param(rng, (d, 4, 4), 0.5) for _ in range(N)]
    pp = [_probe(rng, (d, 4, 4)) for _ in range(2 * N)]

    def f_reason():
        r, t = reason_level(NodeSet(ref, "ref", 1), NodeSet(tar, "tar", 1), convs)
        return sum((_scalar(n, p) for n, p in zip(r.nodes + t.nodes, pp)), Tensor(0.0))

    out.update(_module_check("reason_level", holder, f_reason, seed,
                             [("ref0", ref[0]), ("tar0", tar[0])]))

    head = RegressionHead(2, d, 6, rng, F64)
    _jitter(head, rng, 0.05)
    guid = [_param(rng, (d, 4, 4)) for _ in range(2)]
    rh = _probe(rng, (3, 3))

    def f_head():
        off, h = regress_homography(guid, head, 16, 16, 1.0)
        return _scalar(h, rh) + T.tsum(T.square(off))

    out.update(_module_check("regress_head", head, f_head, seed, [("guidance0", guid[0])]))

    cfg = AlignConfig(N=2, T=2, d=3, hidden=6)
    al = GraphAligner([4, 4], cfg, rng, F64)
    _jitter(al, rng, 0.05)
    # a few pixels of corner motion: near the identity, border pixels sit on the
    # validity edge and tiny perturbations toggle them in and out of the mask
    al.head.fc2.b.data = rng.uniform(-2.0, 2.0, size=8)
    pyr_r = FeaturePyramid([_param(rng, (4, 4, 4)), _param(rng, (4, 8, 8))])
    pyr_t = FeaturePyramid([_param(rng, (4, 4, 4)), _param(rng, (4, 8, 8))], "tar")
    size = 12
    ref_v = ViewPair.from_arrays(rng.uniform(size=(size, size)), rng.uniform(size=(size, size)))
    tar_v = ViewPair.from_arrays(rng.uniform(size=(size, size)), rng.uniform(size=(size, size)))

    def f_full():
        _, h = al(pyr_r, pyr_t, size, size)
        return loss_alignment(ref_v, tar_v, h)[0]

    out.update(_module_check("aligner+loss_alignment", al, f_full, seed, [("f1.ref", pyr_r.levels[0])]))

    # whole path at 32x32, N=2, T=2, d=4: encode, embed, reason, regress, alignment loss
    enc = Encoder((2, 2, 2, 2), rng, F64)
    al2 = GraphAligner(enc.level_channels(), AlignConfig(N=2, T=2, d=4, hidden=8), rng, F64)
    holder = Module()
    holder.encoder, holder.aligner = enc, al2
    _jitter(holder, np.random.default_rng([seed, 7]), 0.1)
    al2.head.fc2.b.data = rng.uniform(-2.0, 2.0, size=8)
    ref32 = ViewPair.from_arrays(rng.uniform(size=(32, 32)), rng.uniform(size=(32, 32)))
    tar32 = ViewPair.from_arrays(rng.uniform(size=(32, 32)), rng.uniform(size=(32, 32)))

    def f_path():
        _, h = al2(enc(ref32.ir, ref32.vis), enc(tar32.ir, tar32.vis, "tar"), 32, 32)
        return loss_alignment(ref32, tar32, h)[0]

    out.update(_module_check("align_path", holder, f_path, seed, max_entries=3))
    return out


def suite_recon(seed: int = 0) -> dict:
    rng = np.random.default_rng(seed)
    out = {}
    c = 4
    # moderate feature scale keeps the channel softmax away from saturation,
    # where true gradients drop below finite-difference resolution
    f = _param(rng, (c, 5, 5), 0.3)
    probe = _probe(rng, (c, 5, 5))
    for name, blk in (("SGR", SGR(c, rng, dtype=F64)), ("DCM", DCM(c, rng, dtype=F64)),
                      ("CGR", CGR(c, rng, dtype=F64))):
        out.update(_module_check(name, blk, lambda blk=blk: _scalar(blk(f), probe), seed, [("input", f)]))
    dec = Decoder(c, rng, 3, F64)
    pd = _probe(rng, (1, 5, 5))
    out.update(_module_check("decoder", dec, lambda: _scalar(dec(f), pd), seed, [("input", f)]))
    g = _param(rng, (c, 5, 5))
    out.update(_rows("l1_fuse", grad_check_table(lambda: _scalar(l1_fuse(f, g), probe),
                                                 {"f_ir": f, "f_vis": g}, seed=seed)))
    rec = Reconstructor(2 * c, rng, depth=1, decoder_hidden=3, dtype=F64)
    feats = _param(rng, (2 * c, 6, 6), 0.1)
    pr = _probe(rng, (1, 6, 6))
    out.update(_module_check("reconstructor", rec, lambda: _scalar(rec.reconstruct(feats), pr), seed,
                             max_entries=4))
    return out


def _loss_case(rng, size=16):
    """Small canvas with two offset views, their warped copies and masks."""
    from .geometry import Homography

    H = Homography.translation(3.0, 2.0)
    canvas = canvas_for(H, (size, size), (size, size))
    imgs = [Tensor(rng.uniform(0.1, 0.9, size=(1, size, size))) for _ in range(4)]
    ir_r, v1 = place(imgs[0], canvas)
    vis_r, _ = place(imgs[2], canvas)
    h = Tensor(H.m)
    ir_t, v2 = warp_tensor(imgs[1], h, canvas)
    vis_t, _ = warp_tensor(imgs[3], h, canvas)
    masks = build_masks(v1.data[0] > 0, v2.data[0] > 0, 2)
    return WarpedViews(ir_r, ir_t, vis_r, vis_t), masks, canvas


def suite_losses(seed: int = 0) -> dict:
    rng = np.random.default_rng(seed)
    out = {}
    views, masks, canvas = _loss_case(rng)
    # above every view value: no seam pixel has terms of opposite sign cancelling to an exact zero
    xs = Parameter(rng.uniform(0.92, 0.98, size=(1,) + canvas.shape))
    out.update(_rows("loss_seam", grad_check_table(
        lambda: loss_seam(xs, views, masks.s1, masks.s2), {"x_out": xs}, seed=seed)))
    x = Parameter(rng.uniform(0.1, 0.9, size=(1,) + canvas.shape))
    # pixels reached only by window corners carry gradients near 1e-7 while the
    # loss is O(10); a wider step lifts them above float64 cancellation noise
    out.update(_rows("loss_ssim", grad_check_table(
        lambda: loss_ssim(x, views, masks.c1, masks.c2), {"x_out": x}, eps=1e-3, seed=seed)))
    V = PerceptualExtractor(widths=(3, 4, 4), dtype=F64)
    out.update(_rows("loss_perceptual", grad_check_table(
        lambda: loss_perceptual(x, views, masks.c1, masks.c2, V), {"x_out": x}, seed=seed, max_entries=60)))

    size = 12
    ref = ViewPair.from_arrays(rng.uniform(size=(size, size)), rng.uniform(size=(size, size)))
    tar = ViewPair.from_arrays(rng.uniform(size=(size, size)), rng.uniform(size=(size, size)))
    src = corners(size, size)
    dst = Parameter(src + rng.uniform(-1.7, 1.7, size=(4, 2)))
    ref.vis.requires_grad = tar.vis.requires_grad = True
    out.update(_rows("loss_alignment", grad_check_table(
        lambda: loss_alignment(ref, tar, dlt_tensor(src, dst))[0],
        {"corners": dst, "ref.vis": ref.vis, "tar.vis": tar.vis}, seed=seed)))
    return out


SUITES = {
    "tensor": suite_tensor,
    "encoder": suite_encoder,
    "align": suite_align,
    "recon": suite_recon,
    "losses": suite_losses,
}


def run_suite(name: str, seed: int = 0) -> dict:
    if name not in SUITES:
        raise KeyError(name)
    return SUITES[name](seed)


def format_table(rows: dict, tol: float = TOL) -> str:
    width = max((len(k) for k in rows), default=10)
    lines = [f"{'block/parameter':<{width}}  max_rel_error  status"]
    for k, v in rows.items():
        lines.append(f"{k:<{width}}  {v:13.3e}  {'ok' if v < tol else 'FAIL'}")
    return "\n".join(lines)
