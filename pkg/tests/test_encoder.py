import numpy as np
import pytest

from msgr import tensor as T
from msgr.encoder import Encoder, PerceptualExtractor, encode_pyramid, perceptual_features
from msgr.gradcheck import grad_check
from msgr.nn import Parameter
from msgr.tensor import ShapeError, Tensor, backward


def img(rng, n=16):
    return Tensor(rng.random((1, n, n)))


def test_shapes_for_full_channels(rng):
    enc = Encoder((16, 32, 64, 128), rng)
    pyr = encode_pyramid(img(rng, 64), img(rng, 64), enc)
    assert [lv.shape for lv in pyr.levels] == [(256, 8, 8), (128, 16, 16), (64, 32, 32), (32, 64, 64)]
    assert enc.level_channels() == [256, 128, 64, 32]
    assert pyr.level(4) is pyr.levels[3]


@pytest.mark.parametrize("n", [8, 24, 40])
def test_halving_law(rng, n):
    pyr = Encoder((2, 2, 2, 2), rng)(img(rng, n), img(rng, n), "tar")
    assert pyr.view == "tar"
    assert [lv.shape[1] for lv in pyr.levels] == [n // 8, n // 4, n // 2, n]


def test_zero_images_give_zero_pyramid(rng):
    z = Tensor(np.zeros((1, 16, 16)))
    pyr = Encoder((2, 3, 4, 5), rng)(z, z)
    assert all(np.all(lv.data == 0) for lv in pyr.levels)


def test_shared_weights_give_equal_halves(rng):
    enc = Encoder((2, 3, 4, 5), rng)
    for (_, a), (_, b) in zip(enc.ir.named_parameters(), enc.vis.named_parameters()):
        b.data = a.data.copy()
    x = img(rng)
    for lv in enc(x, x).levels:
        c = lv.shape[0] // 2
        np.testing.assert_array_equal(lv.data[:c], lv.data[c:])


def test_rejects_bad_inputs(rng):
    enc = Encoder((2, 2, 2, 2), rng)
    with pytest.raises(ShapeError):
        enc(img(rng, 12), img(rng, 12))
    with pytest.raises(ShapeError):
        enc(img(rng, 16), img(rng, 8))


def test_encoder_gradients(rng):
    enc = Encoder((2, 2, 2, 2), rng)
    for p in enc.parameters():
        if not p.data.any():
            p.data = rng.uniform(-0.1, 0.1, p.shape)
    x, y = img(rng, 8), img(rng, 8)
    probes = [rng.standard_normal(s) for s in [(4, 1, 1), (4, 2, 2), (4, 4, 4), (4, 8, 8)]]

    def f():
        pyr = enc(x, y)
        return sum((T.tsum(lv * Tensor(p)) for lv, p in zip(pyr.levels, probes)), Tensor(0.0))

    assert grad_check(f, list(enc.named_parameters()), max_entries=6) < 1e-4


def test_perceptual_is_deterministic_and_frozen(rng):
    V1, V2 = PerceptualExtractor(7), PerceptualExtractor(7)
    x = img(rng)
    np.testing.assert_array_equal(V1(x).data, V2(x).data)
    np.testing.assert_array_equal(perceptual_features(x, V1).data, V1(x).data)
    assert not any(isinstance(w, Parameter) or w.requires_grad for w in V1.weights)
    xg = Tensor(x.data, requires_grad=True)
    backward(T.tsum(V1(xg)))
    assert all(w.grad is None for w in V1.weights)
    assert np.abs(xg.grad).sum() > 0


def test_perceptual_locality(rng):
    V = PerceptualExtractor()
    x = rng.random((1, 20, 20))
    y = x.copy()
    y[0, 10, 10] += 0.5
    d = np.abs(V(Tensor(x)).data - V(Tensor(y)).data).sum(axis=0)
    assert d[10, 10] > 0
    # three 3x3 layers: receptive field radius 3
    far = np.ones_like(d, bool)
    far[7:14, 7:14] = False
    assert np.all(d[far] == 0)
