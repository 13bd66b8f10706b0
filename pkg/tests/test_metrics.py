import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from msgr.metrics import (MetricReport, average_gradient, compute_metrics, mse, spatial_frequency,
                          standard_deviation)
from msgr.synth import procedural_scene

# 8-bit levels on [0, 1], as images are stored
images = arrays(np.int64, st.tuples(st.integers(2, 9), st.integers(2, 9)), elements=st.integers(0, 255)).map(
    lambda a: a / 255.0)


def test_constant_image_is_zero():
    x = np.full((7, 5), 0.3)
    assert spatial_frequency(x) == 0.0
    assert standard_deviation(x) == 0.0
    assert average_gradient(x) == 0.0


def test_one_by_two_ramp():
    x = np.array([[0.0, 1.0]])
    assert spatial_frequency(x) == 1.0
    assert standard_deviation(x) == 0.5


def test_average_gradient_hand_case():
    x = np.array([[0.0, 1.0], [1.0, 1.0]])
    assert average_gradient(x) == 1.0


def test_mse_cases(rng):
    x = rng.random((6, 6))
    assert mse(x, x) == 0.0
    assert mse(x, x + 0.1) == pytest.approx(0.01, abs=1e-15)
    m = np.zeros((6, 6), bool)
    m[:2] = True
    y = x.copy()
    y[2:] += 1.0
    assert mse(y, x, m) == 0.0
    with pytest.raises(ValueError):
        mse(x, x[:3])


def test_compute_metrics_columns(rng):
    x = rng.random((8, 8))
    assert set(compute_metrics(x)) == {"SF", "SD", "AG"}
    row = compute_metrics(x[None], x)
    assert row["MSE"] == 0.0


@settings(max_examples=100, deadline=None)
@given(images, images)
def test_transpose_invariance_and_signs(x, g):
    for f in (spatial_frequency, standard_deviation, average_gradient):
        assert f(x) >= 0
    assert math.isclose(spatial_frequency(x), spatial_frequency(x.T), rel_tol=1e-12, abs_tol=1e-15)
    assert math.isclose(standard_deviation(x), standard_deviation(x.T), rel_tol=1e-12, abs_tol=1e-15)
    if g.shape == x.shape:
        assert math.isclose(mse(x, g), mse(x.T, g.T), rel_tol=1e-12, abs_tol=1e-15)
        assert (mse(x, g) == 0) == np.array_equal(x, g)


def test_average_gradient_transpose_on_symmetric_stencil(rng):
    # the forward-difference stencil is symmetric in (dx, dy), so AG is transpose invariant
    x = rng.random((9, 7))
    assert average_gradient(x) == pytest.approx(average_gradient(x.T), rel=1e-12)


def test_noise_increases_sf_and_ag():
    _, vis = procedural_scene(96, np.random.default_rng(0))
    sf0, ag0 = spatial_frequency(vis), average_gradient(vis)
    for seed in range(20):
        noisy = vis + np.random.default_rng(seed).normal(0, 0.05, vis.shape)
        assert spatial_frequency(noisy) > sf0
        assert average_gradient(noisy) > ag0


def test_report_round_trip(tmp_path, rng):
    rep = MetricReport(config={"stage": "eval", "size": 32})
    rep.add("a", compute_metrics(rng.random((5, 5)), rng.random((5, 5))))
    rep.add("b", compute_metrics(rng.random((5, 5)), rng.random((5, 5))))
    rep.save(tmp_path / "r.tsv")
    back = MetricReport.load(tmp_path / "r.tsv")
    assert back.count == 2 and back.columns() == ["SF", "SD", "AG", "MSE"]
    assert back.rows == rep.rows
    assert back.config == {"stage": "eval", "size": "32"}
    for k, v in rep.means().items():
        assert v == np.mean([r[k] for _, r in rep.rows])


def test_report_without_ground_truth(rng):
    rep = MetricReport()
    rep.add("a", compute_metrics(rng.random((5, 5))))
    assert "MSE" not in rep.columns()
    assert rep.to_tsv().splitlines()[0] == "id\tSF\tSD\tAG"
