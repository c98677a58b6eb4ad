"""Edge-aware sparse-to-dense flow interpolation and flow utilities.

Flow fields are float arrays of shape (H, W, 2) holding (u, v) pixel
displacements.  Dense flow is obtained from matches by finding, for every
pixel, its k geodesically nearest matches on a cost map derived from an edge
map, then combining their displacements either by a kernel-weighted average
(``mode="nw"``) or a locally weighted affine fit (``mode="la"``).
"""

import heapq
import struct
from dataclasses import dataclass
from pathlib import Path

import numba
import numpy as np

from .errors import FormatError, InvalidInputError
from .imgproc import EdgeMap

__all__ = [
    "InterpParams",
    "as_flow",
    "edge_cost_map",
    "geodesic_knn",
    "interpolate",
    "smooth_flow",
    "flow_scale",
    "flow_to_rgb",
    "read_flo",
    "write_flo",
    "aee",
    "FLO_MAGIC",
]

FLO_MAGIC = 202021.25


def as_flow(f, name="flow"):
    f = np.asarray(f, dtype=np.float64)
    if f.ndim != 3 or f.shape[2] != 2:
        raise InvalidInputError(f"{name}: expected shape (H, W, 2), got {f.shape}")
    return f


def _strength(edges):
    return edges.strength if isinstance(edges, EdgeMap) else np.asarray(edges, dtype=np.float64)


def edge_cost_map(edges, alpha=100.0, eps=0.001):
    """Per-pixel traversal cost ``eps + alpha * edge``.

    Moving between 4-neighbors p and q costs the mean of their two costs.
    """
    if alpha < 0:
        raise InvalidInputError(f"alpha must be non-negative, got {alpha}")
    s = _strength(edges)
    return eps + alpha * s


@numba.njit(cache=True, inline="always")
def _settled(table, p, m, mask):
    slot = (m * 2654435761) & mask
    while True:
        v = table[p, slot]
        if v == 0:
            return False
        if v == m + 1:
            return True
        slot = (slot + 1) & mask


@numba.njit(cache=True, inline="always")
def _mark(table, p, m, mask):
    slot = (m * 2654435761) & mask
    while table[p, slot] != 0:
        slot = (slot + 1) & mask
    table[p, slot] = m + 1


@numba.njit(cache=True)
def _knn_dijkstra(cost, seeds, k):
    h, w = cost.shape
    n = h * w
    idx = np.full((n, k), -1, dtype=np.int64)
    dist = np.full((n, k), np.inf)
    cnt = np.zeros(n, dtype=np.int64)
    cap = 2
    while cap < 2 * k:
        cap *= 2
    mask = cap - 1
    # per-pixel open-addressing set of settled match labels (stored as label + 1)
    table = np.zeros((n, cap), dtype=np.int32)
    heap = [(0.0, np.int64(0), np.int64(0))]
    heap.pop()
    for m in range(seeds.shape[0]):
        heap.append((0.0, np.int64(m), np.int64(seeds[m])))
    heapq.heapify(heap)
    while len(heap) > 0:
        d, m, p = heapq.heappop(heap)
        c = cnt[p]
        if c >= k or _settled(table, p, m, mask):
            continue
        _mark(table, p, m, mask)
        idx[p, c] = m
        dist[p, c] = d
        cnt[p] = c + 1
        y = p // w
        x = p - y * w
        cp = cost[y, x]
        for t in range(4):
            if t == 0:
                if x + 1 >= w:
                    continue
                q = p + 1
            elif t == 1:
                if x == 0:
                    continue
                q = p - 1
            elif t == 2:
                if y + 1 >= h:
                    continue
                q = p + w
            else:
                if y == 0:
                    continue
                q = p - w
            if cnt[q] >= k or _settled(table, q, m, mask):
                continue
            qy = q // w
            nd = d + 0.5 * (cp + cost[qy, q - qy * w])
            if not np.isfinite(nd):
                continue
            heapq.heappush(heap, (nd, m, q))
    return idx, dist


def _seed_pixels(ms, shape):
    h, w = shape
    xs = np.clip(np.round(ms.src[:, 0]).astype(np.int64), 0, w - 1)
    ys = np.clip(np.round(ms.src[:, 1]).astype(np.int64), 0, h - 1)
    return ys * w + xs


def geodesic_knn(cost, ms, k):
    """The ``k`` geodesically nearest matches of every pixel.

    Exact multi-source Dijkstra over the 4-connected grid where each pixel
    keeps up to ``k`` distinct match labels; equal distances are broken by
    lower match index.  Returns ``(idx, dist)`` of shape (H, W, k), padded
    with -1 / inf where fewer than ``k`` matches are reachable.
    """
    cost = np.ascontiguousarray(cost, dtype=np.float64)
    if k < 1:
        raise InvalidInputError("k must be >= 1")
    if len(ms) == 0:
        raise InvalidInputError("geodesic_knn needs at least one match")
    if np.any(cost < 0) or np.any(np.isnan(cost)):
        raise InvalidInputError("costs must be non-negative")
    h, w = cost.shape
    idx, dist = _knn_dijkstra(cost, _seed_pixels(ms, (h, w)), int(k))
    return idx.reshape(h, w, k), dist.reshape(h, w, k)


@dataclass
class InterpParams:
    k: int = 100
    alpha: float = 100.0
    kernel_bandwidth: float = 70.0
    mode: str = "la"
    eps: float = 0.001
    cond_max: float = 1e8


def interpolate(ms, edges, params=None, **overrides):
    """Dense flow from matches, respecting edges.

    In both modes the nearest neighbor's displacement is used as a reference
    and only residuals are averaged or fitted, so a match set with a single
    common displacement reproduces it exactly.
    """
    p = params or InterpParams()
    if overrides:
        p = InterpParams(**{**p.__dict__, **overrides})
    if len(ms) == 0:
        raise InvalidInputError("interpolate needs at least one match")
    if p.mode not in ("nw", "la"):
        raise InvalidInputError(f"unknown interpolation mode {p.mode!r}")
    s = _strength(edges)
    cost = edge_cost_map(s, p.alpha, p.eps)
    k = min(p.k, len(ms))
    idx, dist = geodesic_knn(cost, ms, k)
    h, w = s.shape
    valid = idx >= 0
    safe = np.where(valid, idx, 0)
    disp = ms.displacement[safe]                       # (h, w, k, 2)
    with np.errstate(invalid="ignore"):
        wgt = np.where(valid, np.exp(-(dist - dist[:, :, :1]) / p.kernel_bandwidth), 0.0)
    ref = disp[:, :, 0, :]
    res = (disp - ref[:, :, None, :]) * valid[..., None]
    wsum = wgt.sum(axis=2)
    reach = wsum > 0
    wn = wgt / np.where(reach, wsum, 1.0)[..., None]
    nw = np.einsum("hwk,hwkc->hwc", wn, res)
    out = nw
    if p.mode == "la":
        yy, xx = np.mgrid[0:h, 0:w]
        src = ms.src[safe]
        phi = np.stack([src[..., 0] - xx[..., None], src[..., 1] - yy[..., None], np.ones_like(wgt)], axis=3)
        M = np.einsum("hwk,hwki,hwkj->hwij", wgt, phi, phi)
        rhs = np.einsum("hwk,hwki,hwkc->hwic", wgt, phi, res)
        sv = np.linalg.svd(M, compute_uv=False)
        with np.errstate(divide="ignore", invalid="ignore"):
            cond = sv[..., 0] / sv[..., -1]
        good = np.isfinite(cond) & (cond < p.cond_max) & reach
        if good.any():
            sol = np.linalg.solve(M[good], rhs[good])     # (n, 3, 2)
            out = nw.copy()
            out[good] = sol[:, 2, :]
    flow = np.where(reach[..., None], ref + out, 0.0)
    return flow


def smooth_flow(f, edges, n_iters=5, alpha=10.0, step=0.2):
    """Edge-stopped diffusion of a flow field.

    Each iteration moves every pixel toward its 4-neighbors by ``step`` times
    the weighted difference, with link weight ``exp(-alpha * mean edge)``.
    The update is symmetric, so the field mean is preserved and its variance
    never increases.
    """
    f = as_flow(f).copy()
    if n_iters <= 0:
        return f
    s = _strength(edges)
    if s.shape != f.shape[:2]:
        raise InvalidInputError("flow and edge map sizes differ")
    wx = np.exp(-alpha * 0.5 * (s[:, 1:] + s[:, :-1]))[..., None]
    wy = np.exp(-alpha * 0.5 * (s[1:, :] + s[:-1, :]))[..., None]
    for _ in range(n_iters):
        upd = np.zeros_like(f)
        dx = wx * (f[:, 1:] - f[:, :-1])
        dy = wy * (f[1:, :] - f[:-1, :])
        upd[:, :-1] += dx
        upd[:, 1:] -= dx
        upd[:-1, :] += dy
        upd[1:, :] -= dy
        f = f + step * upd
    return f


def flow_scale(f):
    """Default saturation scale: 99th-percentile magnitude, at least 1 px."""
    mag = np.hypot(f[..., 0], f[..., 1])
    return max(1.0, float(np.percentile(mag, 99))) if mag.size else 1.0


def _hsv_to_rgb(h, s, v):
    h6 = (h % 1.0) * 6.0
    i = np.floor(h6).astype(np.int64) % 6
    fr = h6 - np.floor(h6)
    p = v * (1 - s)
    q = v * (1 - s * fr)
    t = v * (1 - s * (1 - fr))
    r = np.choose(i, [v, q, p, p, t, v])
    g = np.choose(i, [t, v, v, q, p, p])
    b = np.choose(i, [p, p, t, v, v, q])
    return np.stack([r, g, b], axis=-1)


def flow_to_rgb(f, max_mag=None):
    """Color-code flow: orientation as hue, magnitude as saturation, value 1."""
    f = as_flow(f)
    if not np.all(np.isfinite(f)):
        raise InvalidInputError("flow contains non-finite values")
    if max_mag is None:
        max_mag = flow_scale(f)
    if max_mag <= 0:
        raise InvalidInputError("max_mag must be positive")
    u, v = f[..., 0], f[..., 1]
    hue = np.mod(np.degrees(np.arctan2(v, u)), 360.0) / 360.0
    sat = np.minimum(np.hypot(u, v) / max_mag, 1.0)
    rgb = _hsv_to_rgb(hue, sat, np.ones_like(sat))
    return np.clip(rgb, 0.0, 1.0)


def write_flo(f, path):
    """Write a Middlebury .flo file (float32 payload, little-endian)."""
    f = as_flow(f)
    h, w = f.shape[:2]
    with open(path, "wb") as fh:
        fh.write(struct.pack("<fii", FLO_MAGIC, w, h))
        fh.write(np.ascontiguousarray(f, dtype="<f4").tobytes())


def read_flo(path):
    data = Path(path).read_bytes()
    if len(data) < 12:
        raise FormatError(f"{path}: truncated header")
    magic, w, h = struct.unpack("<fii", data[:12])
    if magic != FLO_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if w < 0 or h < 0:
        raise FormatError(f"{path}: negative dimensions")
    need = 12 + 8 * w * h
    if len(data) != need:
        raise FormatError(f"{path}: expected {need} bytes, found {len(data)}")
    arr = np.frombuffer(data, dtype="<f4", offset=12).reshape(h, w, 2)
    return arr.astype(np.float64)


def aee(pred, gt, mask=None):
    """Average endpoint error over the pixels where ``mask`` is true."""
    pred = as_flow(pred, "pred")
    gt = as_flow(gt, "gt")
    if pred.shape != gt.shape:
        raise InvalidInputError(f"shape mismatch {pred.shape} vs {gt.shape}")
    err = np.hypot(pred[..., 0] - gt[..., 0], pred[..., 1] - gt[..., 1])
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        err = err[mask]
    if err.size == 0:
        raise InvalidInputError("no pixels to evaluate")
    return float(err.mean())
