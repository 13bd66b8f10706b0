"""Alignment by gated message passing between node sets of two views.

Per pyramid level the schedule is fixed: two intra rounds (pairs inside one
view) followed by two inter rounds (pairs across views). Each finished level
is summarised by one guidance node per view, which gates the next level's
node initialisation, and all guidance nodes feed the homography regressor.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .geometry import Homography, corners, dlt_tensor
from .nn import Conv2d, Linear, Module
from .tensor import ShapeError, Tensor

GRIDS = (1, 2, 3, 4, 6)
SCHEDULE = ("intra", "intra", "inter", "inter")
HEAD_POOL = 4


@dataclass
class AlignConfig:
    N: int = 5
    T: int = 3
    d: int = 32
    offset_scale: float = 1.0
    hidden: int = 256

    def __post_init__(self):
        if not 1 <= self.N <= len(GRIDS):
            raise ValueError(f"N must be in 1..{len(GRIDS)}, got {self.N}")
        if not 1 <= self.T <= 3:
            raise ValueError(f"T must be in 1..3 (level 4 is kept for warping), got {self.T}")

    @property
    def schedule(self) -> tuple[str, ...]:
        return SCHEDULE


@dataclass
class NodeSet:
    nodes: list[Tensor]
    view: str
    level: int

    def __post_init__(self):
        shapes = {n.shape for n in self.nodes}
        if len(shapes) > 1:
            raise ShapeError(f"node maps must share one shape, got {shapes}")


@dataclass
class GuidanceNode:
    map: Tensor
    view: str
    level: int


@dataclass
class Trace:
    """Optional record of what the schedule did (for inspection and tests)."""

    gates: list[tuple[int, int, str, np.ndarray]] = field(default_factory=list)
    pair_updates: dict[tuple[int, int], int] = field(default_factory=dict)

    def record(self, level: int, rnd: int, kind: str, gate: np.ndarray) -> None:
        self.gates.append((level, rnd, kind, gate))

    def count(self, level: int, rnd: int) -> None:
        key = (level, rnd)
        self.pair_updates[key] = self.pair_updates.get(key, 0) + 1


# ---------------------------------------------------------------------------
# node embedding


class NodeEmbedding(Module):
    """N parallel pool -> 1x1 conv -> upsample branches for one pyramid level."""

    def __init__(self, c_in: int, d: int, N: int, rng, dtype=np.float64):
        self.grids = GRIDS[:N]
        self.convs = [Conv2d(c_in, d, 1, rng, dtype=dtype) for _ in range(N)]

    def forward(self, f: Tensor) -> list[Tensor]:
        return embed_nodes(f, self)


def embed_nodes(f: Tensor, emb: NodeEmbedding) -> list[Tensor]:
    _, H, W = f.shape
    if min(H, W) < max(emb.grids):
        raise ShapeError(f"level extent {H}x{W} is smaller than the {max(emb.grids)}x{max(emb.grids)} pooling grid")
    nodes = []
    for g, conv in zip(emb.grids, emb.convs):
        nodes.append(T.upsample_bilinear(conv(T.adaptive_avg_pool(f, g, g)), H, W))
    return nodes


# ---------------------------------------------------------------------------
# message passing


def pass_message(nk: Tensor, nl: Tensor, conv: Conv2d, trace: Trace | None = None,
                 tag: tuple = (0, 0, "")):
    """One bidirectional gated exchange.

    Returns ``(m_kl, m_lk, nk + m_lk, nl + m_kl)``. The same convolution
    gates both directions, so swapping the arguments swaps the outputs.
    """
    if nk.shape != nl.shape:
        raise ShapeError(f"node shapes differ: {nk.shape} vs {nl.shape}")
    gk = T.sigmoid(conv(nk - nl))
    gl = T.sigmoid(conv(nl - nk))
    if trace is not None:
        trace.record(tag[0], tag[1], tag[2], gk.data)
        trace.record(tag[0], tag[1], tag[2], gl.data)
    m_kl = nk * gk
    m_lk = nl * gl
    return m_kl, m_lk, nk + m_lk, nl + m_kl


def _intra(nodes: list[Tensor], conv, trace, tag) -> list[Tensor]:
    nodes = list(nodes)
    for k in range(len(nodes)):
        for l in range(k + 1, len(nodes)):
            _, _, nodes[k], nodes[l] = pass_message(nodes[k], nodes[l], conv, trace, tag)
            if trace is not None:
                trace.count(tag[0], tag[1])
    return nodes


def _inter(ref: list[Tensor], tar: list[Tensor], conv, trace, tag):
    ref, tar = list(ref), list(tar)
    for k in range(len(ref)):
        for l in range(len(tar)):
            _, _, ref[k], tar[l] = pass_message(ref[k], tar[l], conv, trace, tag)
            if trace is not None:
                trace.count(tag[0], tag[1])
    return ref, tar


def reason_level(ref: NodeSet, tar: NodeSet, convs, trace: Trace | None = None):
    """Run intra, intra, inter, inter with one convolution per round."""
    if len(ref.nodes) != len(tar.nodes):
        raise ShapeError(f"node counts differ: {len(ref.nodes)} vs {len(tar.nodes)}")
    r, t = ref.nodes, tar.nodes
    for rnd, (kind, conv) in enumerate(zip(SCHEDULE, convs), start=1):
        tag = (ref.level, rnd, kind)
        if trace is not None:
            trace.pair_updates.setdefault((ref.level, rnd), 0)
        if kind == "intra":
            r = _intra(r, conv, trace, tag)
            t = _intra(t, conv, trace, tag)
        else:
            r, t = _inter(r, t, conv, trace, tag)
    return NodeSet(r, ref.view, ref.level), NodeSet(t, tar.view, tar.level)


def aggregate_guidance(nodes: NodeSet, conv: Conv2d) -> GuidanceNode:
    return GuidanceNode(conv(T.concat(nodes.nodes, axis=0)), nodes.view, nodes.level)


def init_guided(n: Tensor, g_prev: GuidanceNode | Tensor) -> Tensor:
    """``sigmoid(GAP(g)) * n + n`` with the gate broadcast over space."""
    g = g_prev.map if isinstance(g_prev, GuidanceNode) else g_prev
    if g.shape[0] != n.shape[0]:
        raise ShapeError(f"guidance has {g.shape[0]} channels, node has {n.shape[0]}")
    gate = T.sigmoid(T.global_avg_pool(g))
    return gate * n + n


# ---------------------------------------------------------------------------
# homography regression


class RegressionHead(Module):
    def __init__(self, n_guidance: int, d: int, hidden: int, rng, dtype=np.float64):
        self.fc1 = Linear(n_guidance * d * HEAD_POOL * HEAD_POOL, hidden, rng, dtype=dtype)
        self.fc2 = Linear(hidden, 8, rng, zero=True, dtype=dtype)

    def forward(self, guidance: list[Tensor]) -> Tensor:
        feats = [T.adaptive_avg_pool(g, HEAD_POOL, HEAD_POOL).reshape(-1) for g in guidance]
        return self.fc2(T.relu(self.fc1(T.concat(feats, axis=0))))


def regress_homography(guidance: list, head: RegressionHead, width: int, height: int,
                       offset_scale: float = 1.0) -> tuple[Tensor, Tensor]:
    """Corner offsets (8,) and the differentiable 3x3 target->reference matrix."""
    maps = [g.map if isinstance(g, GuidanceNode) else g for g in guidance]
    expected = head.fc1.w.shape[1] // (maps[0].shape[0] * HEAD_POOL * HEAD_POOL) if maps else 0
    if len(maps) != expected:
        raise ValueError(f"head expects {expected} guidance nodes, got {len(maps)}")
    offsets = head(maps) * offset_scale
    c = corners(width, height)
    dst = Tensor(c.astype(offsets.dtype)) + offsets.reshape((4, 2))
    return offsets, dlt_tensor(c, dst)


class GraphAligner(Module):
    """Embedding, reasoning and regression parameters for levels 1..T."""

    def __init__(self, level_channels, cfg: AlignConfig, rng, dtype=np.float64):
        self.cfg = cfg
        self.embed = [NodeEmbedding(level_channels[i], cfg.d, cfg.N, rng, dtype) for i in range(cfg.T)]
        self.rounds = [[Conv2d(cfg.d, cfg.d, 3, rng, dtype=dtype) for _ in SCHEDULE] for _ in range(cfg.T)]
        self.guide_ref = [Conv2d(cfg.N * cfg.d, cfg.d, 1, rng, dtype=dtype) for _ in range(cfg.T)]
        self.guide_tar = [Conv2d(cfg.N * cfg.d, cfg.d, 1, rng, dtype=dtype) for _ in range(cfg.T)]
        self.head = RegressionHead(2 * cfg.T, cfg.d, cfg.hidden, rng, dtype)

    def guidance(self, pyr_ref, pyr_tar, trace: Trace | None = None) -> list[GuidanceNode]:
        out: list[GuidanceNode] = []
        g_ref = g_tar = None
        for i in range(self.cfg.T):
            level = i + 1
            nr = embed_nodes(pyr_ref.level(level), self.embed[i])
            nt = embed_nodes(pyr_tar.level(level), self.embed[i])
            if g_ref is not None:
                nr = [init_guided(n, g_ref) for n in nr]
                nt = [init_guided(n, g_tar) for n in nt]
            ref, tar = reason_level(NodeSet(nr, "ref", level), NodeSet(nt, "tar", level),
                                    self.rounds[i], trace)
            g_ref = aggregate_guidance(ref, self.guide_ref[i])
            g_tar = aggregate_guidance(tar, self.guide_tar[i])
            out += [g_ref, g_tar]
        return out

    def forward(self, pyr_ref, pyr_tar, width: int, height: int, trace: Trace | None = None):
        guide = self.guidance(pyr_ref, pyr_tar, trace)
        return regress_homography(guide, self.head, width, height, self.cfg.offset_scale)


def to_homography(offsets: Tensor, h: Tensor) -> Homography:
    return Homography(h.data.astype(np.float64), offsets.data.astype(np.float64))
