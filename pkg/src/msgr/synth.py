"""Corner-perturbation stitching samples with exact ground truth.

A reference patch is cut from a registered IR/VIS source; its four corners
are displaced at random and the displaced quadrilateral is resampled into a
square target patch. The homography between the two is known exactly, and
the source content over the union of both footprints is the ground-truth
panorama.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage, special

from . import tensor as T
from .data import ViewPair, load_gray, save_gray
from .geometry import (Canvas, DegenerateHomographyError, Homography, canvas_for, corners,
                       dlt_solve, place, read_homography, reference_canvas, warp_image,
                       write_homography)
from .tensor import Tensor

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"}
MANIFEST_FIELDS = ["id", "seed", "rho", "canvas_w", "canvas_h", "offset_x", "offset_y", "source", "pseudo_ir"]
OVERLAP_MSE_MAX = 5e-3
REPROJ_MAX = 1e-9


class CorpusError(ValueError):
    def __init__(self, msg: str, rejected: list[str] | None = None):
        self.rejected = rejected or []
        detail = "".join(f"\n  {r}" for r in self.rejected)
        super().__init__(msg + detail)


@dataclass
class Source:
    name: str
    ir: np.ndarray
    vis: np.ndarray
    pseudo_ir: bool = False


@dataclass
class StitchSample:
    ref: ViewPair
    tar: ViewPair
    H_gt: Homography
    gt_panorama: np.ndarray
    canvas: Canvas
    meta: dict = field(default_factory=dict)
    gt_panorama_ir: np.ndarray | None = None
    gt_mask: np.ndarray | None = None


def pseudo_ir(vis: np.ndarray) -> np.ndarray:
    """Stand-in thermal channel for single-modality sources."""
    return np.power(np.clip(1.0 - vis, 0.0, 1.0), 0.7)


# ---------------------------------------------------------------------------
# procedural registered sources (used when no real corpus is at hand)


def procedural_scene(size: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """A smooth registered (ir, vis) pair of shape (size, size).

    Shapes carry a reflectance (visible) and a temperature that is partly
    tied to it (infrared), plus modality-specific texture and hot spots.
    """
    yy, xx = np.mgrid[0:size, 0:size] / size
    gx, gy = rng.uniform(-0.3, 0.3, size=2)
    vis = 0.45 + gx * (xx - 0.5) + gy * (yy - 0.5)
    ir = 0.35 + 0.5 * gy * (yy - 0.5)
    for _ in range(rng.integers(10, 18)):
        cx, cy = rng.uniform(0, 1, size=2)
        rx, ry = rng.uniform(0.05, 0.22, size=2)
        if rng.random() < 0.5:
            d = ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2
        else:
            d = np.maximum(np.abs(xx - cx) / rx, np.abs(yy - cy) / ry) ** 2
        shape = special.expit((1.0 - d) * 8.0)
        refl = rng.uniform(0.05, 0.95)
        temp = 0.6 * refl + 0.4 * rng.uniform(0.0, 1.0)
        vis = vis * (1 - shape) + refl * shape
        ir = ir * (1 - shape) + temp * shape
    for _ in range(rng.integers(1, 4)):
        cx, cy = rng.uniform(0.1, 0.9, size=2)
        s = rng.uniform(0.03, 0.08)
        ir = ir + 0.35 * np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * s * s))
    texture = ndimage.gaussian_filter(rng.standard_normal((size, size)), size / 48.0)
    vis = vis + 0.6 * texture / (np.abs(texture).max() + 1e-12) * 0.12
    vis = ndimage.gaussian_filter(vis, 1.0)
    ir = ndimage.gaussian_filter(ir, 1.8)
    return np.clip(ir, 0.0, 1.0), np.clip(vis, 0.0, 1.0)


def make_corpus(out_dir, count: int, size: int, seed: int = 0) -> Path:
    """Write ``count`` procedural registered pairs as ``ir/NNNN.png`` and ``vis/NNNN.png``."""
    out = Path(out_dir)
    rng = np.random.default_rng(seed)
    for i in range(count):
        ir, vis = procedural_scene(size, rng)
        save_gray(out / "ir" / f"{i:04d}.png", ir)
        save_gray(out / "vis" / f"{i:04d}.png", vis)
    return out


# ---------------------------------------------------------------------------
# corpus discovery


def _images(d: Path) -> dict[str, Path]:
    return {p.stem: p for p in sorted(d.iterdir()) if p.suffix.lower() in IMAGE_SUFFIXES}


def load_corpus(corpus_dir, min_extent: int = 0) -> list[Source]:
    """Registered sources from ``ir/`` + ``vis/`` subfolders, ``*_ir``/``*_vis`` file
    pairs, or (falling back to pseudo-IR) lone images."""
    root = Path(corpus_dir)
    if not root.is_dir():
        raise CorpusError(f"corpus directory {root} does not exist")
    pairs: list[tuple[str, Path | None, Path]] = []
    rejected: list[str] = []
    if (root / "ir").is_dir() and (root / "vis").is_dir():
        ir_files, vis_files = _images(root / "ir"), _images(root / "vis")
        for stem, vp in vis_files.items():
            if stem in ir_files:
                pairs.append((stem, ir_files[stem], vp))
            else:
                rejected.append(f"{vp}: no matching infrared image")
        rejected += [f"{p}: no matching visible image" for s, p in ir_files.items() if s not in vis_files]
    else:
        files = _images(root)
        for stem, p in files.items():
            if stem.endswith("_ir"):
                if stem[:-3] + "_vis" not in files:
                    rejected.append(f"{p}: no matching visible image")
                continue
            if stem.endswith("_vis") and stem[:-4] + "_ir" in files:
                pairs.append((stem[:-4], files[stem[:-4] + "_ir"], p))
            else:
                pairs.append((stem, None, p))
    sources = []
    for name, ip, vp in pairs:
        try:
            vis = load_gray(vp)
            ir = pseudo_ir(vis) if ip is None else load_gray(ip)
        except OSError as exc:
            rejected.append(f"{vp}: unreadable ({exc})")
            continue
        if ir.shape != vis.shape:
            rejected.append(f"{vp}: infrared extent {ir.shape} differs from visible {vis.shape}")
        elif min(vis.shape) < min_extent:
            rejected.append(f"{vp}: extent {vis.shape} smaller than {min_extent}")
        else:
            sources.append(Source(str(vp.relative_to(root)), ir, vis, ip is None))
    if not sources:
        raise CorpusError(f"no usable registered images in {root}", rejected)
    return sources


# ---------------------------------------------------------------------------
# sample generation


def _convex(quad: np.ndarray) -> bool:
    e = np.roll(quad, -1, axis=0) - quad
    cross = e[:, 0] * np.roll(e, -1, axis=0)[:, 1] - e[:, 1] * np.roll(e, -1, axis=0)[:, 0]
    return bool(np.all(cross > 1e-6) or np.all(cross < -1e-6))


def _sample_at(img: np.ndarray, coords: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    with T.no_grad():
        out, valid = T.grid_sample(Tensor(img[None]), Tensor(coords))
    return out.data[0], valid.data[0] > 0


def overlap_mse(sample: StitchSample) -> float:
    """MSE between the reference and the target warped back by ``H_gt``, on their overlap."""
    w, h = sample.ref.extent
    canvas = reference_canvas(w, h)
    errs = []
    with T.no_grad():
        for ref, tar in ((sample.ref.vis, sample.tar.vis), (sample.ref.ir, sample.tar.ir)):
            warped, valid = warp_image(tar, sample.H_gt, canvas)
            m = valid.data[0] > 0
            if not m.any():
                return float("inf")
            errs.append(float(np.mean((warped.data[0][m] - ref.data[0][m]) ** 2)))
    return max(errs)


def corner_reprojection(sample: StitchSample) -> float:
    w, h = sample.tar.extent
    c = corners(w, h)
    target = c + sample.H_gt.offsets.reshape(4, 2)
    return float(np.abs(sample.H_gt.apply(c) - target).max())


def generate_pair(src_ir: np.ndarray, src_vis: np.ndarray, size: int = 224, rho: float = 32,
                  rng: np.random.Generator | None = None, shifts=None, max_retries: int = 50,
                  check: bool = True) -> StitchSample:
    """One stitching sample from a registered source pair.

    ``shifts`` (4x2) overrides the random corner displacements.
    """
    rng = np.random.default_rng() if rng is None else rng
    src_ir = np.asarray(src_ir, dtype=np.float64)
    src_vis = np.asarray(src_vis, dtype=np.float64)
    if src_ir.shape != src_vis.shape:
        raise ValueError(f"IR {src_ir.shape} and VIS {src_vis.shape} are not registered")
    margin = int(np.ceil(rho))
    Hs, Ws = src_vis.shape
    if Hs < size + 2 * margin or Ws < size + 2 * margin:
        raise ValueError(f"source {Ws}x{Hs} too small for size {size} with margin {margin}")

    x0 = int(rng.integers(margin, Ws - size - margin + 1))
    y0 = int(rng.integers(margin, Hs - size - margin + 1))
    rect = corners(size, size)
    for _ in range(max_retries):
        d = rng.uniform(-rho, rho, size=(4, 2)) if shifts is None else np.asarray(shifts, dtype=np.float64)
        quad = rect + d
        if not _convex(quad):
            if shifts is not None:
                raise DegenerateHomographyError("requested corner shifts give a degenerate quad")
            continue
        try:
            H = dlt_solve(rect, quad)
        except DegenerateHomographyError:
            if shifts is not None:
                raise
            continue
        sample = _build(src_ir, src_vis, size, x0, y0, H)
        sample.meta.update({"rho": rho, "crop": (x0, y0)})
        if not check or (corner_reprojection(sample) < REPROJ_MAX and overlap_mse(sample) < OVERLAP_MSE_MAX):
            return sample
        if shifts is not None:
            break
    raise DegenerateHomographyError(f"no valid corner perturbation after {max_retries} tries")


def _build(src_ir, src_vis, size, x0, y0, H: Homography) -> StitchSample:
    ref_ir = src_ir[y0:y0 + size, x0:x0 + size].copy()
    ref_vis = src_vis[y0:y0 + size, x0:x0 + size].copy()
    vv, uu = np.mgrid[0:size, 0:size].astype(np.float64)
    pts = H.apply(np.stack([uu.reshape(-1), vv.reshape(-1)], axis=1))
    coords = np.stack([pts[:, 0] + x0, pts[:, 1] + y0]).reshape(2, size, size)
    tar_ir, _ = _sample_at(src_ir, coords)
    tar_vis, _ = _sample_at(src_vis, coords)

    canvas = canvas_for(H, (size, size), (size, size))
    ox, oy = canvas.offset
    ys, xs = y0 - oy, x0 - ox
    with T.no_grad():
        c1 = place(Tensor(np.ones((1, size, size))), canvas)[1].data[0] > 0
        c2 = warp_image(Tensor(np.ones((1, size, size))), H, canvas)[1].data[0] > 0
    union = c1 | c2
    pano_vis = src_vis[ys:ys + canvas.height, xs:xs + canvas.width] * union
    pano_ir = src_ir[ys:ys + canvas.height, xs:xs + canvas.width] * union
    return StitchSample(
        ref=ViewPair.from_arrays(ref_ir, ref_vis),
        tar=ViewPair.from_arrays(tar_ir, tar_vis),
        H_gt=H, gt_panorama=pano_vis, canvas=canvas, meta={},
        gt_panorama_ir=pano_ir, gt_mask=union,
    )


def _sample_job(args):
    src, size, rho, seed, index = args
    rng = np.random.default_rng([seed, index])
    s = src[int(rng.integers(len(src)))]
    sample = generate_pair(s.ir, s.vis, size, rho, rng)
    sample.meta.update({"source": s.name, "pseudo_ir": s.pseudo_ir})
    return sample


def write_sample(out_dir, sample: StitchSample) -> None:
    d = Path(out_dir)
    d.mkdir(parents=True, exist_ok=True)
    save_gray(d / "ref_ir.png", sample.ref.ir.data)
    save_gray(d / "ref_vis.png", sample.ref.vis.data)
    save_gray(d / "tar_ir.png", sample.tar.ir.data)
    save_gray(d / "tar_vis.png", sample.tar.vis.data)
    save_gray(d / "gt_pano.png", sample.gt_panorama)
    write_homography(d / "H_gt.txt", sample.H_gt)


def generate_set(corpus_dir, out_dir, count: int, size: int = 224, rho: float = 32,
                 seed: int = 0, workers: int = 1) -> Path:
    """Generate ``count`` samples plus ``manifest.tsv``; deterministic in ``seed``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    if count > 0:
        sources = load_corpus(corpus_dir, min_extent=size + 2 * int(np.ceil(rho)))
        jobs = [(sources, size, rho, seed, i) for i in range(count)]
        if workers > 1:
            from concurrent.futures import ProcessPoolExecutor
            with ProcessPoolExecutor(workers) as pool:
                samples = pool.map(_sample_job, jobs, chunksize=8)
                rows = [_emit(out, i, seed, rho, s) for i, s in enumerate(samples)]
        else:
            rows = [_emit(out, i, seed, rho, _sample_job(j)) for i, j in enumerate(jobs)]
    buf = io.StringIO()
    writer = csv.writer(buf, delimiter="\t", lineterminator="\n")
    writer.writerow(MANIFEST_FIELDS)
    writer.writerows(rows)
    manifest = out / "manifest.tsv"
    manifest.write_text(buf.getvalue())
    return manifest


def _emit(out: Path, i: int, seed: int, rho: float, sample: StitchSample) -> list:
    sid = f"{i:06d}"
    write_sample(out / sid, sample)
    c = sample.canvas
    return [sid, seed, rho, c.width, c.height, c.offset[0], c.offset[1],
            sample.meta["source"], int(sample.meta["pseudo_ir"])]


# ---------------------------------------------------------------------------
# reading a generated set back


def read_manifest(data_dir) -> list[dict]:
    path = Path(data_dir) / "manifest.tsv"
    if not path.is_file():
        raise CorpusError(f"{path} not found")
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh, delimiter="\t"))
    missing = set(MANIFEST_FIELDS) - set(rows[0].keys() if rows else MANIFEST_FIELDS)
    if missing:
        raise CorpusError(f"{path}: missing columns {sorted(missing)}")
    return rows


def load_sample(data_dir, row: dict, dtype=np.float64) -> StitchSample:
    d = Path(data_dir) / row["id"]
    ref = ViewPair.from_arrays(load_gray(d / "ref_ir.png"), load_gray(d / "ref_vis.png"), dtype)
    tar = ViewPair.from_arrays(load_gray(d / "tar_ir.png"), load_gray(d / "tar_vis.png"), dtype)
    H = read_homography(d / "H_gt.txt") if (d / "H_gt.txt").is_file() else None
    gt = load_gray(d / "gt_pano.png") if (d / "gt_pano.png").is_file() else None
    canvas = Canvas(int(row["canvas_w"]), int(row["canvas_h"]),
                    (int(row["offset_x"]), int(row["offset_y"])))
    return StitchSample(ref, tar, H, gt, canvas, dict(row))


def load_dataset(data_dir, dtype=np.float64) -> list[StitchSample]:
    return [load_sample(data_dir, row, dtype) for row in read_manifest(data_dir)]
