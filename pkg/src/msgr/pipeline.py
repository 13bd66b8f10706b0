"""Staged training, stitching inference and dataset evaluation."""

from __future__ import annotations

import contextlib
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .config import TrainConfig
from .data import ViewPair
from .geometry import (Canvas, DegenerateHomographyError, Homography, SingularHomographyError, corners,
                       place, warp_image)
from .losses import NonFiniteLossError, loss_alignment, loss_perceptual, loss_seam, loss_ssim, loss_total
from .metrics import MetricReport, compute_metrics
from .model import StitchNet, checked_homography, compose, panorama, safe_canvas
from .synth import StitchSample, load_sample, read_manifest
from .tensor import Tensor, backward

log = logging.getLogger(__name__)


class SkipStep(Exception):
    """The sample gave a degenerate homography or an empty overlap."""


class TrainingAborted(RuntimeError):
    def __init__(self, epoch: int, part: str):
        super().__init__(f"non-finite loss term {part!r} in epoch {epoch}; last good checkpoint kept")
        self.epoch = epoch
        self.part = part


# ---------------------------------------------------------------------------
# optimiser


class Adam:
    def __init__(self, params: list[tuple[str, Tensor]], beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.b1, self.b2, self.eps = beta1, beta2, eps
        self.m = {n: np.zeros_like(p.data) for n, p in params}
        self.v = {n: np.zeros_like(p.data) for n, p in params}
        self.t = 0

    def step(self, lr: dict[str, float]) -> None:
        """One update; ``lr`` maps parameter name to its learning rate (0 freezes it)."""
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for n, p in self.params:
            rate = lr.get(n, 0.0)
            if rate == 0.0 or p.grad is None:
                continue
            g = p.grad
            self.m[n] = self.b1 * self.m[n] + (1 - self.b1) * g
            self.v[n] = self.b2 * self.v[n] + (1 - self.b2) * g * g
            upd = rate * (self.m[n] / c1) / (np.sqrt(self.v[n] / c2) + self.eps)
            p.data = (p.data - upd).astype(p.data.dtype)


# ---------------------------------------------------------------------------
# per-sample objectives


def corner_error(H: Homography, H_gt: Homography, width: int, height: int) -> float:
    c = corners(width, height)
    return float(np.mean(np.linalg.norm(H.apply(c) - H_gt.apply(c), axis=1)))


def sample_loss(model: StitchNet, s: StitchSample, cfg: TrainConfig) -> tuple[Tensor, dict]:
    """Total loss and its named parts for one training sample of ``cfg.stage``."""
    frozen = cfg.stage == "recon"
    with T.no_grad() if frozen else contextlib.nullcontext():
        try:
            offsets, h, pr, pt = model.align(s.ref, s.tar)
            H = checked_homography(offsets, h)
        except (DegenerateHomographyError, SingularHomographyError) as e:
            raise SkipStep(str(e)) from e
    parts = {}
    if cfg.stage in ("align", "joint"):
        try:
            lh, empty = loss_alignment(s.ref, s.tar, h)
        except (DegenerateHomographyError, SingularHomographyError, np.linalg.LinAlgError) as e:
            raise SkipStep(str(e)) from e
        if empty:
            raise SkipStep("empty common region")
        parts["align"] = lh
    if cfg.stage in ("recon", "joint"):
        try:
            canvas = safe_canvas(H, s.ref, s.tar)
        except DegenerateHomographyError as e:
            raise SkipStep(str(e)) from e
        comp = compose(model, pr, pt, s.ref, s.tar, H if frozen else h, canvas, cfg.band)
        m = comp.masks
        if m.seam_empty:
            raise SkipStep("empty overlap")
        parts["seam"] = loss_seam(comp.x_out, comp.views, m.s1, m.s2, cfg.weights)
        parts["ssim"] = loss_ssim(comp.x_out, comp.views, m.c1, m.c2, cfg.weights)
        parts["perceptual"] = loss_perceptual(comp.x_out, comp.views, m.c1, m.c2, model.perceptual, cfg.weights)
    return loss_total(parts), {k: float(v.data) for k, v in parts.items()}


# ---------------------------------------------------------------------------
# training


@dataclass
class EpochLog:
    epoch: int
    lr: float
    loss: float
    parts: dict
    used: int
    skipped: int

    def line(self) -> str:
        extra = " ".join(f"{k}={v:.6g}" for k, v in self.parts.items())
        return (f"epoch {self.epoch} lr={self.lr:.6g} loss={self.loss:.6g} {extra} "
                f"used={self.used} skipped={self.skipped}")


@dataclass
class TrainLog:
    stage: str
    epochs: list[EpochLog] = field(default_factory=list)

    @property
    def losses(self) -> list[float]:
        return [e.loss for e in self.epochs]

    @property
    def skipped(self) -> int:
        return sum(e.skipped for e in self.epochs)


def stage_rates(model: StitchNet, stage: str, lr: float) -> dict[str, float]:
    """Per-parameter learning rates; frozen halves get exactly 0."""
    groups = model.groups()
    active = {"align": ("align",), "recon": ("recon",), "joint": ("align", "recon")}[stage]
    return {n: (lr if g in active else 0.0) for g, names in groups.items() for n in names}


def train_model(model: StitchNet, samples: list[StitchSample], cfg: TrainConfig, ckpt_out=None,
                on_epoch=None) -> TrainLog:
    """Mini-batch Adam over ``samples``; writes ``ckpt_out`` at the start and after every epoch."""
    params = list(model.named_parameters())
    opt = Adam(params)
    tlog = TrainLog(cfg.stage)
    extra = {"train": cfg.echo()}
    if ckpt_out is not None:
        save_checkpoint(ckpt_out, model, cfg.stage, extra)
    for epoch in range(1, cfg.epochs + 1):
        lr = cfg.learning_rate * cfg.decay_rate ** (epoch - 1)
        rates = stage_rates(model, cfg.stage, lr)
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(samples))
        total, sums, used, skipped = 0.0, {}, 0, 0
        for b in range(0, len(order), cfg.batch_size):
            model.zero_grad()
            n = 0
            for i in order[b:b + cfg.batch_size]:
                try:
                    loss, parts = sample_loss(model, samples[i], cfg)
                except SkipStep as e:
                    log.debug("skipping sample %s: %s", samples[i].meta.get("id", i), e)
                    skipped += 1
                    continue
                except NonFiniteLossError as e:
                    raise TrainingAborted(epoch, e.part) from e
                backward(loss)
                n += 1
                total += float(loss.data)
                for k, v in parts.items():
                    sums[k] = sums.get(k, 0.0) + v
            if n == 0:
                continue
            for _, p in params:
                if p.grad is not None:
                    p.grad *= 1.0 / n
                    if not np.all(np.isfinite(p.grad)):
                        raise TrainingAborted(epoch, "gradient")
            opt.step(rates)
            used += n
        mean = total / used if used else math.nan
        entry = EpochLog(epoch, lr, mean, {k: v / used for k, v in sums.items()}, used, skipped)
        tlog.epochs.append(entry)
        log.info(entry.line())
        if on_epoch is not None:
            on_epoch(entry)
        if ckpt_out is not None:
            save_checkpoint(ckpt_out, model, cfg.stage, extra)
    model.zero_grad()
    return tlog


def load_samples(data_dir, dtype=np.float32) -> list[StitchSample]:
    return [load_sample(data_dir, row, dtype) for row in read_manifest(data_dir)]


def train(cfg: TrainConfig, data_dir, ckpt_in=None, ckpt_out=None, on_epoch=None) -> tuple[StitchNet, TrainLog]:
    if cfg.stage in ("recon", "joint") and ckpt_in is None:
        raise ValueError(f"stage {cfg.stage!r} needs an align checkpoint (ckpt_in)")
    if ckpt_in is not None:
        model, _ = load_checkpoint(ckpt_in)
    else:
        model = StitchNet(cfg.model)
    samples = load_samples(data_dir, model.dtype)
    return model, train_model(model, samples, cfg, ckpt_out, on_epoch)


# ---------------------------------------------------------------------------
# inference and evaluation


@dataclass
class StitchResult:
    image: np.ndarray
    H: Homography
    canvas: Canvas
    fell_back: bool


def stitch(model: StitchNet, ref: ViewPair, tar: ViewPair) -> StitchResult:
    if ref.ir.shape != ref.vis.shape or tar.ir.shape != tar.vis.shape:
        raise T.ShapeError("IR and VIS extents differ within a view")
    img, H, canvas, fb = panorama(model, ref, tar)
    return StitchResult(img, H, canvas, fb)


def content_mask(H: Homography, canvas: Canvas, ref_extent, tar_extent) -> np.ndarray:
    with T.no_grad():
        c1 = place(Tensor(np.ones((1, ref_extent[1], ref_extent[0]))), canvas)[1].data[0] > 0
        c2 = warp_image(Tensor(np.ones((1, tar_extent[1], tar_extent[0]))), H, canvas)[1].data[0] > 0
    return c1 | c2


def evaluate_sample(model: StitchNet, s: StitchSample) -> dict:
    """Sharpness statistics of the panorama, plus MSE and corner error when ground truth exists.

    With a ground-truth panorama the output is rendered on the ground-truth
    canvas so the two can be compared pixel by pixel.
    """
    has_gt = s.gt_panorama is not None and s.H_gt is not None
    img, H, _, fb = panorama(model, s.ref, s.tar, canvas=s.canvas if has_gt else None)
    if has_gt:
        mask = content_mask(s.H_gt, s.canvas, s.ref.extent, s.tar.extent)
        row = compute_metrics(img, s.gt_panorama, mask)
    else:
        row = compute_metrics(img)
    if s.H_gt is not None:
        row["corner_error"] = corner_error(H, s.H_gt, *s.tar.extent)
    row["fallback"] = float(fb)
    return row


def evaluate(model: StitchNet, data_dir, config: dict | None = None) -> MetricReport:
    rep = MetricReport(config=dict(config or {}))
    for row in read_manifest(data_dir):
        s = load_sample(data_dir, row, model.dtype)
        rep.add(row["id"], evaluate_sample(model, s))
    return rep


def sidecar_path(out) -> Path:
    out = Path(out)
    return out.with_name(out.stem + "_H.txt")
