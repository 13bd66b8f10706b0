"""Homography algebra, canvas placement and the masks used by the losses.

Pixel centres sit at integer coordinates; a point is ``(u, v)`` = (column,
row). A homography passed around the pipeline maps *target* image
coordinates into the *reference* image plane.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor


class DegenerateHomographyError(ValueError):
    """The point configuration does not determine a homography."""


class SingularHomographyError(ValueError):
    pass


@dataclass
class Homography:
    """3x3 projective map normalised so that ``m[2, 2] == 1``.

    ``offsets`` optionally records the 8 corner displacements
    (du, dv per corner, TL TR BR BL) the matrix was solved from.
    """

    m: np.ndarray
    offsets: np.ndarray | None = None

    def __post_init__(self):
        m = np.asarray(self.m, dtype=np.float64).reshape(3, 3)
        if abs(m[2, 2]) > 1e-300:
            m = m / m[2, 2]
        self.m = m
        if self.offsets is not None:
            self.offsets = np.asarray(self.offsets, dtype=np.float64).reshape(8)

    @classmethod
    def identity(cls) -> "Homography":
        return cls(np.eye(3))

    @classmethod
    def translation(cls, tx: float, ty: float) -> "Homography":
        return cls(np.array([[1.0, 0.0, tx], [0.0, 1.0, ty], [0.0, 0.0, 1.0]]))

    def det(self) -> float:
        return float(np.linalg.det(self.m))

    def apply(self, pts) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
        q = pts @ self.m[:, :2].T + self.m[:, 2]
        return q[:, :2] / q[:, 2:3]

    def inverse(self) -> "Homography":
        if abs(self.det()) < 1e-12:
            raise SingularHomographyError("homography is singular")
        return Homography(np.linalg.inv(self.m))

    def compose(self, other: "Homography") -> "Homography":
        """``self ∘ other``: apply ``other`` first."""
        return Homography(self.m @ other.m)


def corners(width: int, height: int) -> np.ndarray:
    """Pixel-centre corners TL, TR, BR, BL of a ``width x height`` image."""
    return np.array([[0.0, 0.0], [width - 1.0, 0.0], [width - 1.0, height - 1.0], [0.0, height - 1.0]])


# ---------------------------------------------------------------------------
# 4-point direct linear transform


def _normaliser(pts: np.ndarray) -> np.ndarray:
    c = pts.mean(axis=0)
    d = np.sqrt(((pts - c) ** 2).sum(axis=1)).mean()
    if d < 1e-300:
        raise DegenerateHomographyError("all points coincide")
    s = math.sqrt(2.0) / d
    return np.array([[s, 0.0, -s * c[0]], [0.0, s, -s * c[1]], [0.0, 0.0, 1.0]])


def _dlt_system(src: np.ndarray, dst: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    A = np.zeros((8, 8))
    b = np.zeros(8)
    for i, ((x, y), (xp, yp)) in enumerate(zip(src, dst)):
        A[2 * i] = [x, y, 1.0, 0.0, 0.0, 0.0, -x * xp, -y * xp]
        A[2 * i + 1] = [0.0, 0.0, 0.0, x, y, 1.0, -x * yp, -y * yp]
        b[2 * i], b[2 * i + 1] = xp, yp
    return A, b


def _solve_pivoted(A: np.ndarray, b: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    """Gaussian elimination with partial pivoting on row-scaled equations."""
    n = len(b)
    M = np.hstack([A, b[:, None]]).astype(np.float64)
    scale = np.abs(M[:, :n]).max(axis=1)
    if np.any(scale == 0):
        raise DegenerateHomographyError("empty equation row")
    M /= scale[:, None]
    for k in range(n):
        p = k + int(np.argmax(np.abs(M[k:, k])))
        if abs(M[p, k]) < tol:
            raise DegenerateHomographyError(f"pivot {abs(M[p, k]):.3g} below {tol:g} in column {k}")
        if p != k:
            M[[k, p]] = M[[p, k]]
        M[k + 1:] -= np.outer(M[k + 1:, k] / M[k, k], M[k])
    x = np.zeros(n)
    for k in range(n - 1, -1, -1):
        x[k] = (M[k, n] - M[k, k + 1:n] @ x[k + 1:]) / M[k, k]
    return x


def _check_generic(pts: np.ndarray, what: str) -> None:
    scale = max(np.ptp(pts[:, 0]), np.ptp(pts[:, 1]), 1e-300)
    for i, j, k in ((0, 1, 2), (0, 1, 3), (0, 2, 3), (1, 2, 3)):
        a, b, c = pts[i], pts[j], pts[k]
        area = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
        if abs(area) < 1e-9 * scale * scale:
            raise DegenerateHomographyError(f"{what} points {i},{j},{k} are collinear")


def dlt_solve(src, dst) -> Homography:
    """Homography taking each of 4 ``src`` points to its ``dst`` point."""
    src = np.asarray(src, dtype=np.float64).reshape(4, 2)
    dst = np.asarray(dst, dtype=np.float64).reshape(4, 2)
    _check_generic(src, "source")
    _check_generic(dst, "destination")
    Ts, Td = _normaliser(src), _normaliser(dst)
    ns = src @ Ts[:2, :2].T + Ts[:2, 2]
    nd = dst @ Td[:2, :2].T + Td[:2, 2]
    A, b = _dlt_system(ns, nd)
    h = _solve_pivoted(A, b)
    Hn = np.append(h, 1.0).reshape(3, 3)
    m = np.linalg.solve(Td, Hn @ Ts)
    return Homography(m, offsets=(dst - src).reshape(8))


def dlt_tensor(src: np.ndarray, dst: Tensor) -> Tensor:
    """Differentiable DLT: the 3x3 matrix as a function of the destination points.

    The backward pass uses the implicit-function rule on the unnormalised
    system ``A(dst) h = b(dst)``, where only the rows of a point depend on it.
    """
    src = np.asarray(src, dtype=np.float64).reshape(4, 2)
    H = dlt_solve(src, dst.data.astype(np.float64))
    m = H.m
    out = m.astype(dst.dtype)

    def bw(g):
        A, _ = _dlt_system(src, dst.data.astype(np.float64))
        lam = np.linalg.solve(A.T, g.astype(np.float64).reshape(-1)[:8])
        denom = src @ m[2, :2] + 1.0
        gd = np.stack([lam[0::2] * denom, lam[1::2] * denom], axis=1)
        return (gd.reshape(dst.shape).astype(dst.dtype),)

    return T.from_op(out, (dst,), bw)


def homography_from_offsets(offsets, width: int, height: int) -> Homography:
    """H mapping the target corners to themselves plus ``offsets`` (8 values)."""
    c = corners(width, height)
    return dlt_solve(c, c + np.asarray(offsets, dtype=np.float64).reshape(4, 2))


# ---------------------------------------------------------------------------
# canvas and warping


@dataclass(frozen=True)
class Canvas:
    """Integer output frame; canvas pixel ``p`` is reference point ``p - offset``."""

    width: int
    height: int
    offset: tuple[int, int] = (0, 0)

    @property
    def shape(self) -> tuple[int, int]:
        return self.height, self.width


def canvas_for(H: Homography, ref_extent: tuple[int, int], tar_extent: tuple[int, int]) -> Canvas:
    """Smallest integer frame holding the reference rectangle and the projected target.

    Extents are ``(width, height)``.
    """
    if abs(H.det()) < 1e-12:
        raise SingularHomographyError("homography is singular")
    tc = corners(*tar_extent)
    q = tc @ H.m[:, :2].T + H.m[:, 2]
    if np.any(q[:, 2] <= 1e-9):
        raise SingularHomographyError("a target corner projects behind the image plane")
    proj = q[:, :2] / q[:, 2:3]
    pts = np.vstack([corners(*ref_extent), proj])
    lo = np.floor(pts.min(axis=0) + 1e-9).astype(int)
    hi = np.ceil(pts.max(axis=0) - 1e-9).astype(int)
    return Canvas(int(hi[0] - lo[0] + 1), int(hi[1] - lo[1] + 1), (int(-lo[0]), int(-lo[1])))


def reference_canvas(width: int, height: int) -> Canvas:
    return Canvas(width, height, (0, 0))


def canvas_points(canvas: Canvas) -> np.ndarray:
    """Homogeneous reference-plane coordinates (3, H*W) of every canvas pixel."""
    vv, uu = np.mgrid[0:canvas.height, 0:canvas.width].astype(np.float64)
    ox, oy = canvas.offset
    return np.stack([uu.reshape(-1) - ox, vv.reshape(-1) - oy, np.ones(uu.size)])


def warp_coords(h_inv: Tensor, canvas: Canvas) -> Tensor:
    """Source coordinates (2, H, W) of each canvas pixel under ``h_inv``."""
    pts = Tensor(canvas_points(canvas).astype(h_inv.dtype))
    q = T.matmul(h_inv, pts)
    uv = q[0:2] / q[2:3]
    return uv.reshape((2, canvas.height, canvas.width))


def warp_tensor(x: Tensor, h: Tensor, canvas: Canvas) -> tuple[Tensor, Tensor]:
    """Backward-warp ``x`` through a differentiable 3x3 ``h`` (target -> reference)."""
    return T.grid_sample(x, warp_coords(T.inv(h), canvas))


def warp_image(x: Tensor, H: Homography, canvas: Canvas) -> tuple[Tensor, Tensor]:
    """Backward warp: canvas pixel ``p`` reads ``x`` at ``H^-1 (p - offset)``."""
    h_inv = Tensor(H.inverse().m.astype(x.dtype))
    return T.grid_sample(x, warp_coords(h_inv, canvas))


def place(x: Tensor, canvas: Canvas) -> tuple[Tensor, Tensor]:
    """Put a reference-frame map on the canvas (identity warp, exact)."""
    return warp_image(x, Homography.identity(), canvas)


# ---------------------------------------------------------------------------
# masks


@dataclass
class MaskSet:
    c1: np.ndarray
    c2: np.ndarray
    s1: np.ndarray
    s2: np.ndarray
    overlap: np.ndarray
    seam_empty: bool = False


def common_region(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ShapeError(f"mask shapes differ: {a.shape} vs {b.shape}")
    return np.logical_and(a, b)


def _touches(mask: np.ndarray) -> np.ndarray:
    """Pixels with a 4-neighbour inside ``mask``."""
    out = np.zeros_like(mask)
    out[1:] |= mask[:-1]
    out[:-1] |= mask[1:]
    out[:, 1:] |= mask[:, :-1]
    out[:, :-1] |= mask[:, 1:]
    return out


def dilate4(mask: np.ndarray, steps: int) -> np.ndarray:
    out = mask.copy()
    for _ in range(steps):
        out |= _touches(out)
    return out


def default_band(size: int) -> int:
    """Seam band width: 8 px at 224, proportional otherwise."""
    return max(1, int(round(8 * size / 224)))


def seam_masks(c1: np.ndarray, c2: np.ndarray, band: int) -> tuple[np.ndarray, np.ndarray, bool]:
    """Seam bands inside the overlap of two content masks.

    ``S1`` collects overlap pixels within city-block distance ``band - 1`` of
    the overlap's border with the reference-only region; ``S2`` the same for
    the target-only region. Returns ``(S1, S2, overlap_empty)``.
    """
    if band < 1:
        raise ValueError("band must be >= 1")
    c1 = np.asarray(c1, dtype=bool)
    c2 = np.asarray(c2, dtype=bool)
    overlap = common_region(c1, c2)
    if not overlap.any():
        warnings.warn("empty overlap: no seam", RuntimeWarning, stacklevel=2)
        empty = np.zeros_like(overlap)
        return empty, empty.copy(), True
    only1 = c1 & ~c2
    only2 = c2 & ~c1
    b1 = overlap & _touches(only1)
    b2 = overlap & _touches(only2)
    s1 = dilate4(b1, band - 1) & overlap & c1
    s2 = dilate4(b2, band - 1) & overlap & c2
    return s1, s2, False


def build_masks(c1: np.ndarray, c2: np.ndarray, band: int) -> MaskSet:
    c1 = np.asarray(c1, dtype=bool)
    c2 = np.asarray(c2, dtype=bool)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        s1, s2, empty = seam_masks(c1, c2, band)
    return MaskSet(c1, c2, s1, s2, c1 & c2, empty)


# ---------------------------------------------------------------------------
# sidecar file: 9 reals row-major, then optionally 8 offsets


def write_homography(path, H: Homography) -> None:
    lines = [" ".join(repr(float(v)) for v in H.m.reshape(-1))]
    if H.offsets is not None:
        lines.append(" ".join(repr(float(v)) for v in H.offsets))
    Path(path).write_text("\n".join(lines) + "\n")


def read_homography(path) -> Homography:
    lines = [ln for ln in Path(path).read_text().splitlines() if ln.strip()]
    m = np.array([float(v) for v in lines[0].split()])
    if m.size != 9:
        raise ValueError(f"{path}: expected 9 values on line 1, got {m.size}")
    offsets = None
    if len(lines) > 1:
        offsets = np.array([float(v) for v in lines[1].split()])
        if offsets.size != 8:
            raise ValueError(f"{path}: expected 8 offsets on line 2, got {offsets.size}")
    return Homography(m.reshape(3, 3), offsets)
