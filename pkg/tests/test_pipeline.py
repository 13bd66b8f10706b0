import math

import numpy as np
import pytest

from msgr.checkpoint import CheckpointError, load_checkpoint, read_checkpoint, save_checkpoint
from msgr.cli import main
from msgr.config import STAGE_DEFAULTS, ModelConfig, TrainConfig, load_config, parse_config_text
from msgr.data import ViewPair, save_gray
from msgr.geometry import Homography, read_homography
from msgr.losses import LossWeights
from msgr.metrics import MetricReport
from msgr.model import StitchNet
from msgr.pipeline import (TrainingAborted, corner_error, evaluate, load_samples, sidecar_path, stitch, train,
                           train_model)

TINY = ModelConfig(channels=(2, 2, 2, 2), N=2, T=2, d=4, hidden=8)
TINY_TEXT = "preset = desk\nsize = 32\nrho = 4\nchannels = 2,2,2,2\nN = 2\nT = 2\nd = 4\nhidden = 8\n"


def tiny_cfg(stage="align", **kw):
    return TrainConfig(stage=stage, size=32, rho=4, model=TINY, **kw)


def snapshot(model, group=None):
    names = model.groups()[group] if group else None
    return {n: p.data.copy() for n, p in model.named_parameters() if names is None or n in names}


def same(a, b):
    return a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)


@pytest.fixture(scope="module")
def samples(small_set):
    return load_samples(small_set, np.float64)


# ---------------------------------------------------------------------------
# configuration


def test_stage_defaults():
    assert STAGE_DEFAULTS["align"] == (150, 1e-4, 0.96)
    r = TrainConfig(stage="recon")
    assert (r.epochs, r.learning_rate, r.decay_rate) == (10, 1e-4, 0.96)
    j = TrainConfig(stage="joint")
    assert (j.epochs, j.learning_rate) == (50, 5e-5)
    with pytest.raises(ValueError):
        TrainConfig(stage="warm-up")


def test_desk_preset_scales_epochs_only():
    d = TrainConfig.preset_config("desk", "align")
    assert (d.epochs, d.learning_rate, d.decay_rate) == (30, 1e-4, 0.96)
    assert (d.size, d.rho, d.model.N, d.model.T, d.model.channels) == (128, 16, 3, 2, (8, 16, 32, 64))
    assert TrainConfig.preset_config("desk", "recon").epochs == 2
    assert TrainConfig.preset_config("desk", "align", epochs=7, N=1).epochs == 7
    with pytest.raises(ValueError):
        TrainConfig.preset_config("huge")


def test_config_text_parsing(tmp_path):
    assert parse_config_text("# note\n a = 1 # trailing\n\nb=x y\n") == {"a": "1", "b": "x y"}
    with pytest.raises(ValueError):
        parse_config_text("just words")
    p = tmp_path / "c.cfg"
    p.write_text(TINY_TEXT + "stage = joint\nlambda3 = 2.5\nbatch_size = 2\n")
    cfg = load_config(p, stage="recon")
    assert cfg.stage == "recon" and cfg.batch_size == 2 and cfg.size == 32
    assert cfg.model.channels == (2, 2, 2, 2) and cfg.model.N == 2
    assert cfg.weights.l3 == 2.5 and cfg.weights.l4 == 15.0
    p.write_text("colour = blue\n")
    with pytest.raises(ValueError):
        load_config(p)


# ---------------------------------------------------------------------------
# checkpoints


def test_checkpoint_bitwise_round_trip(tmp_path):
    m = StitchNet(TINY)
    save_checkpoint(tmp_path / "a.ckpt", m, "align", {"note": 1})
    back, header = load_checkpoint(tmp_path / "a.ckpt")
    assert header["stage"] == "align" and header["config"]["note"] == 1
    assert back.cfg == m.cfg
    assert same(snapshot(back), snapshot(m))
    save_checkpoint(tmp_path / "b.ckpt", back, "align", {"note": 1})
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_checkpoint_rejects_garbage(tmp_path):
    (tmp_path / "x.ckpt").write_bytes(b"not a checkpoint\n")
    with pytest.raises(CheckpointError):
        read_checkpoint(tmp_path / "x.ckpt")
    save_checkpoint(tmp_path / "t.ckpt", StitchNet(TINY))
    raw = (tmp_path / "t.ckpt").read_bytes()
    (tmp_path / "t.ckpt").write_bytes(raw[:-16])
    with pytest.raises(CheckpointError):
        read_checkpoint(tmp_path / "t.ckpt")


# ---------------------------------------------------------------------------
# training


def test_corner_error_cases():
    H = Homography.translation(3, 4)
    assert corner_error(H, H, 32, 32) == 0.0
    assert corner_error(Homography.identity(), H, 32, 32) == pytest.approx(5.0, abs=1e-12)


def test_zero_epochs_keep_checkpoint(tmp_path, small_set):
    m = StitchNet(TINY)
    save_checkpoint(tmp_path / "in.ckpt", m)
    _, tlog = train(tiny_cfg(epochs=0), small_set, tmp_path / "in.ckpt", tmp_path / "out.ckpt")
    assert tlog.epochs == []
    a, b = read_checkpoint(tmp_path / "in.ckpt")[1], read_checkpoint(tmp_path / "out.ckpt")[1]
    assert same(a, b)


@pytest.mark.parametrize("stage", ["align", "recon"])
def test_zero_learning_rate_changes_nothing(samples, stage):
    m = StitchNet(TINY, dtype=np.float64)
    before = snapshot(m)
    tlog = train_model(m, samples, tiny_cfg(stage, epochs=2, learning_rate=0.0))
    assert len(tlog.epochs) == 2 and all(math.isfinite(x) for x in tlog.losses)
    assert same(snapshot(m), before)


def test_recon_stage_freezes_alignment(samples):
    m = StitchNet(TINY, dtype=np.float64)
    align0, recon0 = snapshot(m, "align"), snapshot(m, "recon")
    tlog = train_model(m, samples, tiny_cfg("recon", epochs=1, learning_rate=1e-3))
    assert set(tlog.epochs[0].parts) == {"seam", "ssim", "perceptual"}
    assert same(snapshot(m, "align"), align0)
    assert not same(snapshot(m, "recon"), recon0)


def test_align_stage_moves_only_alignment(samples):
    m = StitchNet(TINY, dtype=np.float64)
    align0, recon0 = snapshot(m, "align"), snapshot(m, "recon")
    tlog = train_model(m, samples, tiny_cfg("align", epochs=1, learning_rate=1e-3))
    assert set(tlog.epochs[0].parts) == {"align"}
    assert same(snapshot(m, "recon"), recon0)
    assert not same(snapshot(m, "align"), align0)


def test_training_is_deterministic(samples, tmp_path):
    logs, states = [], []
    for run in range(2):
        m = StitchNet(TINY, dtype=np.float64)
        tlog = train_model(m, samples, tiny_cfg("joint", epochs=2, learning_rate=1e-3, batch_size=4),
                           tmp_path / f"{run}.ckpt")
        logs.append([e.line() for e in tlog.epochs])
        states.append(snapshot(m))
    assert logs[0] == logs[1]
    assert same(*states)
    assert (tmp_path / "0.ckpt").read_bytes() == (tmp_path / "1.ckpt").read_bytes()


def test_learning_rate_decays_per_epoch(samples):
    tlog = train_model(StitchNet(TINY, dtype=np.float64), samples[:2], tiny_cfg(epochs=3, learning_rate=1e-3))
    assert [e.lr for e in tlog.epochs] == [1e-3, 1e-3 * 0.96, 1e-3 * 0.96 ** 2]


def test_non_finite_loss_aborts_and_keeps_checkpoint(samples, tmp_path):
    m = StitchNet(TINY, dtype=np.float64)
    before = snapshot(m)
    cfg = tiny_cfg("recon", epochs=2, learning_rate=1e-3)
    cfg.weights = LossWeights(l3=math.inf)
    with pytest.raises(TrainingAborted) as e:
        train_model(m, samples, cfg, tmp_path / "c.ckpt")
    assert e.value.epoch == 1
    kept = read_checkpoint(tmp_path / "c.ckpt")[1]
    assert all(np.array_equal(kept[k], before[k].astype(np.float32)) for k in before)


def test_recon_needs_align_checkpoint(small_set):
    with pytest.raises(ValueError):
        train(tiny_cfg("recon"), small_set)


# ---------------------------------------------------------------------------
# stitching and evaluation


def views(rng, n=32):
    return ViewPair.from_arrays(rng.random((n, n)), rng.random((n, n)))


def test_zero_head_stitches_at_identity(rng):
    m = StitchNet(TINY, dtype=np.float64)
    res = stitch(m, views(rng), views(rng))
    np.testing.assert_array_equal(res.H.m, np.eye(3))
    assert (res.canvas.width, res.canvas.height, res.canvas.offset) == (32, 32, (0, 0))
    assert res.image.shape == (32, 32) and not res.fell_back
    assert np.all((res.image >= 0) & (res.image <= 1))


@pytest.mark.parametrize("bias", [[31, 31, 0, 31, -31, 0, 31, -31],  # all corners meet
                                  [0, 0, 0, 0, -31, 0, 31, 0]])     # bottom corners swap
def test_degenerate_head_falls_back(rng, bias):
    m = StitchNet(TINY, dtype=np.float64)
    m.aligner.head.fc2.b.data = np.array(bias, float)
    res = stitch(m, views(rng), views(rng))
    assert res.fell_back
    np.testing.assert_array_equal(res.H.m, np.eye(3))


def test_eval_report(small_set, tmp_path):
    m = StitchNet(TINY)
    rep = evaluate(m, small_set, {"stage": "none"})
    assert rep.count == 6
    assert {"SF", "SD", "AG", "MSE", "corner_error", "fallback"} <= set(rep.columns())
    # zero head: the corner error is the mean ground-truth displacement
    samples = load_samples(small_set)
    expect = np.mean([corner_error(Homography.identity(), s.H_gt, 32, 32) for s in samples])
    assert rep.means()["corner_error"] == pytest.approx(expect, rel=1e-12)
    rep.save(tmp_path / "r.tsv")
    assert MetricReport.load(tmp_path / "r.tsv").rows == rep.rows


def test_eval_without_ground_truth(small_set, tmp_path):
    import shutil
    d = tmp_path / "nogt"
    shutil.copytree(small_set, d)
    for sub in d.iterdir():
        if sub.is_dir():
            (sub / "gt_pano.png").unlink()
            (sub / "H_gt.txt").unlink()
    rep = evaluate(StitchNet(TINY), d)
    assert rep.columns() == ["SF", "SD", "AG", "fallback"]


# ---------------------------------------------------------------------------
# command line


def test_cli_usage_errors(capsys):
    assert main([]) == 2
    assert main(["fly"]) == 2
    assert main(["gradcheck", "--module", "nope"]) == 2
    assert "unknown module" in capsys.readouterr().err
    assert main(["train", "--data", "x", "--stage", "recon", "--ckpt-out", "y"]) == 2


def test_cli_runtime_failure(tmp_path):
    assert main(["eval", "--data", str(tmp_path), "--ckpt", str(tmp_path / "none"), "--report", "r"]) == 1


def test_cli_gradcheck_losses(capsys):
    assert main(["gradcheck", "--module", "losses"]) == 0
    assert "loss_seam" in capsys.readouterr().out


def test_cli_end_to_end(tmp_path, capsys):
    run = lambda *a: main([str(x) for x in a])  # noqa: E731
    assert run("make-corpus", "--out", tmp_path / "src", "--count", 2, "--size", 48) == 0
    assert run("gen-syn", "--src", tmp_path / "src", "--out", tmp_path / "set", "--count", 3,
               "--size", 32, "--rho", 4, "--seed", 1) == 0
    cfg = tmp_path / "tiny.cfg"
    cfg.write_text(TINY_TEXT + "epochs = 1\nlearning_rate = 0.001\n")
    assert run("train", "--data", tmp_path / "set", "--stage", "align", "--config", cfg,
               "--ckpt-out", tmp_path / "a.ckpt") == 0
    assert run("train", "--data", tmp_path / "set", "--stage", "recon", "--config", cfg,
               "--ckpt-in", tmp_path / "a.ckpt", "--ckpt-out", tmp_path / "r.ckpt") == 0
    assert read_checkpoint(tmp_path / "r.ckpt")[0]["stage"] == "recon"
    assert run("eval", "--data", tmp_path / "set", "--ckpt", tmp_path / "r.ckpt",
               "--report", tmp_path / "rep.tsv") == 0
    assert MetricReport.load(tmp_path / "rep.tsv").count == 3
    s = tmp_path / "set" / "000000"
    out = tmp_path / "pano.png"
    assert run("stitch", "--ref-ir", s / "ref_ir.png", "--ref-vis", s / "ref_vis.png", "--tar-ir",
               s / "tar_ir.png", "--tar-vis", s / "tar_vis.png", "--ckpt", tmp_path / "r.ckpt", "--out", out) == 0
    assert out.is_file() and read_homography(sidecar_path(out)).m.shape == (3, 3)


def test_cli_stitch_fallback_status(tmp_path, rng):
    m = StitchNet(TINY)
    m.aligner.head.fc2.b.data = np.array([0, 0, 0, 0, -31, 0, 31, 0], np.float32)
    save_checkpoint(tmp_path / "bad.ckpt", m)
    paths = []
    for name in ("ri", "rv", "ti", "tv"):
        save_gray(tmp_path / f"{name}.png", rng.random((32, 32)))
        paths.append(tmp_path / f"{name}.png")
    args = ["stitch", "--ref-ir", paths[0], "--ref-vis", paths[1], "--tar-ir", paths[2], "--tar-vis", paths[3],
            "--ckpt", tmp_path / "bad.ckpt", "--out", tmp_path / "o.png"]
    assert main([str(a) for a in args]) == 3
    assert (tmp_path / "o.png").is_file()
    np.testing.assert_array_equal(read_homography(sidecar_path(tmp_path / "o.png")).m, np.eye(3))
