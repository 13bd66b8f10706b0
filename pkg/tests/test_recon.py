import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracles
from msgr.geometry import Canvas, Homography
from msgr.recon import (CGR, DCM, SGR, Decoder, Reconstructor, SCGRPath, cgr_forward, channel_relation,
                        dcm_forward, decode, fusion_weights, l1_fuse, place_features, scgr_path, sgr_affinity,
                        sgr_forward)
from msgr.tensor import ShapeError, Tensor


def feat(rng, shape=(4, 3, 3), scale=1.0):
    return Tensor(rng.standard_normal(shape) * scale)


def randomise_biases(mod, rng):
    """Also fills the zero-initialised residual outputs so oracles see a live branch."""
    for name, p in mod.named_parameters():
        if name.endswith(".b") or name == "b" or not p.data.any():
            p.data = rng.standard_normal(p.shape) * 0.3


def zero_params(mod):
    for p in mod.parameters():
        p.data = np.zeros_like(p.data)


# ---------------------------------------------------------------------------
# SGR


def test_sgr_zero_input(rng):
    assert np.all(sgr_forward(Tensor(np.zeros((4, 3, 3))), SGR(4, rng)).data == 0)


def test_sgr_singleton_spatial(rng):
    blk = SGR(4, rng)
    randomise_biases(blk, rng)
    f = feat(rng, (4, 1, 1))
    np.testing.assert_array_equal(sgr_affinity(f, blk), [[1.0]])
    v = blk.v.w.data[:, :, 0, 0] @ f.data[:, 0, 0] + blk.v.b.data
    expect = f.data[:, 0, 0] + blk.out.w.data[:, :, 0, 0] @ v + blk.out.b.data
    np.testing.assert_allclose(sgr_forward(f, blk).data[:, 0, 0], expect, atol=1e-12)


def test_sgr_matches_dense_form(rng):
    blk = SGR(2, rng, reduction=1)
    randomise_biases(blk, rng)
    f = feat(rng, (2, 3, 3))
    out, A = oracles.sgr(f.data, blk)
    np.testing.assert_allclose(sgr_forward(f, blk).data, out, atol=1e-10, rtol=0)
    np.testing.assert_allclose(sgr_affinity(f, blk), A, atol=1e-12)


def test_sgr_rows_sum_to_one(rng):
    blk = SGR(6, rng)
    A = sgr_affinity(feat(rng, (6, 4, 5)), blk)
    np.testing.assert_allclose(A.sum(axis=1), 1.0, atol=1e-10)


def test_sgr_empty_map(rng):
    with pytest.raises(ShapeError):
        sgr_forward(Tensor(np.zeros((4, 0, 3))), SGR(4, rng))


# ---------------------------------------------------------------------------
# DCM


def test_dcm_zero_input(rng):
    assert np.all(dcm_forward(Tensor(np.zeros((3, 5, 5))), DCM(3, rng)).data == 0)


def test_dcm_constant_interior(rng):
    c = 2
    blk = DCM(c, rng)
    for conv in (blk.a1, blk.a2, blk.b1, blk.b2):
        conv.w.data = np.full(conv.w.shape, 1.0 / (9 * c))
    blk.fuse.w.data = np.full(blk.fuse.w.shape, 1.0 / (5 * c))
    out = dcm_forward(Tensor(np.full((c, 13, 13), 0.4)), blk).data
    np.testing.assert_allclose(out[:, 4:-4, 4:-4], 0.4, atol=1e-14)


def test_dcm_matches_composition(rng):
    blk = DCM(3, rng)
    randomise_biases(blk, rng)
    f = feat(rng, (3, 6, 6))
    np.testing.assert_allclose(dcm_forward(f, blk).data, oracles.dcm(f.data, blk), atol=1e-12, rtol=0)


# ---------------------------------------------------------------------------
# CGR


def test_cgr_single_reduced_channel(rng):
    blk = CGR(2, rng)
    rel = channel_relation(feat(rng, (2, 3, 3)), blk)
    np.testing.assert_array_equal(rel.data, [[1.0]])


def test_cgr_zero_input(rng):
    assert np.all(cgr_forward(Tensor(np.zeros((4, 3, 3))), CGR(4, rng)).data == 0)


def test_cgr_matches_dense_form(rng):
    blk = CGR(3, rng)
    randomise_biases(blk, rng)
    f = feat(rng, (3, 2, 2))
    out, rel = oracles.cgr(f.data, blk)
    np.testing.assert_allclose(cgr_forward(f, blk).data, out, atol=1e-10, rtol=0)
    np.testing.assert_allclose(channel_relation(f, blk).data, rel, atol=1e-12)


def test_cgr_rows_sum_to_one(rng):
    blk = CGR(8, rng)
    rel = channel_relation(feat(rng, (8, 4, 4), 0.3), blk)
    np.testing.assert_allclose(rel.data.sum(axis=1), 1.0, atol=1e-10)


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 6), st.integers(1, 6), st.integers(1, 6), st.integers(0, 2 ** 31 - 1))
def test_blocks_preserve_shape(c, h, w, seed):
    r = np.random.default_rng(seed)
    f = Tensor(r.standard_normal((c, h, w)))
    for blk, fn in ((SGR(c, r), sgr_forward), (DCM(c, r), dcm_forward), (CGR(c, r), cgr_forward)):
        assert fn(f, blk).shape == f.shape


# ---------------------------------------------------------------------------
# SCGR path


def test_path_structure(rng):
    path = SCGRPath(4, rng)
    assert len(path.blocks) == 3
    assert all(isinstance(a, SGR) and isinstance(b, DCM) and isinstance(c, CGR) for a, b, c in path.blocks)


def test_path_zero_input(rng):
    assert np.all(scgr_path(Tensor(np.zeros((4, 4, 4))), SCGRPath(4, rng)).data == 0)


def test_path_residual_branches_zero(rng):
    """SGR and CGR are pure residuals; DCM's fuse keeps the input slot as identity."""
    c = 3
    path = SCGRPath(c, rng)
    zero_params(path)
    for _, dcm, _ in path.blocks:
        dcm.fuse.w.data[:, :c, 0, 0] = np.eye(c)
    f = feat(rng, (c, 4, 4))
    np.testing.assert_array_equal(scgr_path(f, path).data, f.data)


def test_path_matches_composition(rng):
    path = SCGRPath(2, rng)
    f = feat(rng, (2, 3, 3), 0.5)
    x = f.data
    for sgr, dcm, cgr in path.blocks:
        x = oracles.sgr(x, sgr)[0]
        x = oracles.dcm(x, dcm)
        x = oracles.cgr(x, cgr)[0]
    np.testing.assert_allclose(scgr_path(f, path).data, x, atol=1e-10)


# ---------------------------------------------------------------------------
# fusion


def test_fuse_equal_inputs(rng):
    f = feat(rng)
    np.testing.assert_allclose(l1_fuse(f, f).data, f.data, atol=1e-15)


def test_fuse_one_sided(rng):
    f = feat(rng, (3, 5, 5))
    out = l1_fuse(f, Tensor(np.zeros((3, 5, 5))))
    np.testing.assert_allclose(out.data, f.data, atol=1e-6)


def test_fuse_matches_formula(rng):
    a, b = feat(rng, (3, 4, 5)), feat(rng, (3, 4, 5))
    np.testing.assert_allclose(l1_fuse(a, b).data, oracles.l1_fuse(a.data, b.data), atol=1e-12, rtol=0)


def test_fuse_shape_mismatch(rng):
    with pytest.raises(ShapeError):
        l1_fuse(feat(rng), feat(rng, (4, 2, 2)))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.booleans())
def test_fuse_is_convex(seed, sparse):
    r = np.random.default_rng(seed)
    a = r.random((3, 4, 4))
    b = r.random((3, 4, 4))
    if sparse:
        a[:, :2] = 0.0
    w_ir, w_vis = fusion_weights(Tensor(a), Tensor(b))
    np.testing.assert_allclose(w_ir.data + w_vis.data, 1.0, atol=1e-15)
    assert np.all(w_ir.data >= 0) and np.all(w_vis.data >= 0)
    out = l1_fuse(Tensor(a), Tensor(b)).data
    assert np.all(out >= np.minimum(a, b) - 1e-15) and np.all(out <= np.maximum(a, b) + 1e-15)


# ---------------------------------------------------------------------------
# decoder and reconstructor


def test_decoder_zero_and_range(rng):
    dec = Decoder(4, rng)
    out = decode(Tensor(np.zeros((4, 5, 6))), dec)
    assert out.shape == (1, 5, 6)
    assert np.all(out.data == 0.5)
    big = decode(feat(rng, (4, 5, 6), 50.0), dec).data
    assert np.all((big > 0) & (big < 1))


def test_place_features_averages_overlap(rng):
    fr = Tensor(np.ones((2, 4, 4)))
    ft = Tensor(np.full((2, 4, 4), 3.0))
    out, vr, vt = place_features(fr, ft, Homography.translation(2, 0), Canvas(6, 4))
    assert np.all(out.data[:, :, :2] == 1)
    assert np.all(out.data[:, :, 2:4] == 2)
    assert np.all(out.data[:, :, 4:] == 3)
    assert vr.sum() == 16 and vt.sum() == 16


def test_reconstructor_output(rng):
    rec = Reconstructor(4, rng, depth=1)
    f = feat(rng, (4, 6, 6), 0.3)
    out = rec(f, f, Homography.identity(), Canvas(6, 6))
    assert out.shape == (1, 6, 6)
    assert np.all((out.data > 0) & (out.data < 1))
