"""White-box attention traces: gaze aggregation, normalisation, Top-K targets,
focusing score and bilinear map alignment.

Attention inputs are numpy arrays shaped ``(L, H, S, S)`` for one sample or
``(L, B, H, S, S)`` for a batch (as returned by ``AttentionRecord.stack``).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

EPS_NORM = 1e-8


class DegenerateTraceError(ValueError):
    pass


@dataclass(frozen=True)
class BBox:
    """Half-open box ``[row0, row1) x [col0, col1)`` in patch-grid coordinates."""

    row0: int
    col0: int
    row1: int
    col1: int

    def validate(self, rows, cols):
        if not (0 <= self.row0 < self.row1 <= rows and 0 <= self.col0 < self.col1 <= cols):
            raise ValueError(f"{self} does not fit a {rows}x{cols} grid")
        return self

    def mask(self, rows, cols):
        self.validate(rows, cols)
        m = np.zeros((rows, cols), dtype=bool)
        m[self.row0:self.row1, self.col0:self.col1] = True
        return m

    @property
    def area(self):
        return (self.row1 - self.row0) * (self.col1 - self.col0)


@dataclass
class TraceRecord:
    gaze: np.ndarray
    a_traj: np.ndarray
    sparse_target: np.ndarray
    focus_score: float | None
    degenerate: bool = False


def aggregate_gaze(attn, text_positions, image_positions, layers=None):
    """Mean attention each image key receives from text queries over layers and heads.

    ``S_j = 1/(L*H*|T|) * sum_l sum_h sum_{i in T} A[l, h, i, j]``. ``layers``
    restricts the average to a subset (analysis only).
    """
    attn = np.asarray(attn)
    text = np.asarray(list(text_positions), dtype=int)
    image = np.asarray(list(image_positions), dtype=int)
    if text.size == 0:
        raise ValueError("aggregate_gaze needs at least one text position")
    if np.intersect1d(text, image).size:
        raise ValueError("text and image positions overlap")
    if layers is not None:
        attn = attn[list(layers)]
    if attn.ndim == 4:
        return attn[:, :, text][..., image].mean(axis=(0, 1, 2))
    if attn.ndim == 5:
        return attn[:, :, :, text][..., image].mean(axis=(0, 2, 3))
    raise ValueError(f"attention must be (L,H,S,S) or (L,B,H,S,S), got {attn.shape}")


def minmax_normalize(gaze, eps_norm=EPS_NORM):
    """(S - min S) / (max S - min S + eps) along the last axis."""
    s = np.asarray(gaze, dtype=np.float64)
    lo = s.min(axis=-1, keepdims=True)
    hi = s.max(axis=-1, keepdims=True)
    return (s - lo) / (hi - lo + eps_norm)


def topk_sparsify(a_traj, k, return_flag=False):
    """Keep the ``k`` largest entries (ties -> lower index), renormalise to sum 1.

    An all-zero map yields the uniform distribution over the first ``k``
    patches and sets the degenerate flag.
    """
    a = np.asarray(a_traj, dtype=np.float64)
    n = a.shape[-1]
    if not 1 <= k <= n:
        raise ValueError(f"k must lie in [1, {n}], got {k}")
    if a.ndim > 1:
        rows = [topk_sparsify(row, k, True) for row in a.reshape(-1, n)]
        out = np.stack([r[0] for r in rows]).reshape(a.shape)
        flags = np.array([r[1] for r in rows]).reshape(a.shape[:-1])
        return (out, flags) if return_flag else out
    order = np.argsort(-a, kind="stable")[:k]
    out = np.zeros(n)
    out[order] = a[order]
    total = out.sum()
    degenerate = not total > 0
    if degenerate:
        out = np.zeros(n)
        out[:k] = 1.0 / k
    else:
        out /= total
    return (out, degenerate) if return_flag else out


def focusing_score(grid_map, bbox):
    """Share of the map's total mass that lies inside ``bbox``."""
    m = np.asarray(grid_map, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError("focusing_score expects a 2-D grid map")
    total = m.sum()
    if not total > 0:
        raise DegenerateTraceError("attention map has zero total mass")
    return float(m[bbox.mask(*m.shape)].sum() / total)


def resize_map_bilinear(grid_map, target):
    """Corner-aligned bilinear resize of a 2-D map to ``target = (rows, cols)``."""
    m = np.asarray(grid_map, dtype=np.float64)
    r, c = m.shape
    tr, tc = target
    if min(r, c, tr, tc) < 1:
        raise ValueError("map and target extents must be positive")
    if (tr, tc) == (r, c):
        return m.copy()

    def coords(n_src, n_dst):
        if n_dst == 1:
            pos = np.array([(n_src - 1) / 2.0])
        else:
            pos = np.arange(n_dst) * ((n_src - 1) / (n_dst - 1))
        lo = np.clip(np.floor(pos).astype(int), 0, n_src - 1)
        hi = np.minimum(lo + 1, n_src - 1)
        return lo, hi, pos - lo

    r0, r1, wr = coords(r, tr)
    c0, c1, wc = coords(c, tc)
    top = m[r0][:, c0] * (1 - wc) + m[r0][:, c1] * wc
    bot = m[r1][:, c0] * (1 - wc) + m[r1][:, c1] * wc
    return top * (1 - wr)[:, None] + bot * wr[:, None]


def build_trace(gaze, grid, bbox, k, eps_norm=EPS_NORM, exempt=False):
    """TraceRecord from one gaze vector; ``exempt`` skips the focusing score."""
    a = minmax_normalize(gaze, eps_norm)
    sparse, degenerate = topk_sparsify(a, k, return_flag=True)
    focus = None
    if not exempt:
        try:
            focus = focusing_score(a.reshape(grid), bbox)
        except DegenerateTraceError:
            degenerate = True
    return TraceRecord(np.asarray(gaze, dtype=np.float64), a, sparse, focus, bool(degenerate))
