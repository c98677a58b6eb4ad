"""Semi-dense frame-to-frame matches: ingestion, a block matcher, frame filtering.

The learning loop treats matches as a fixed external input.  They can be
read from text files (including raw DeepMatching output) or computed with
``block_match``, a coarse-to-fine normalized cross-correlation search with a
forward-backward consistency check.
"""

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import InvalidInputError, ParseError
from .imgproc import as_image

__all__ = [
    "MatchSet",
    "BlockMatchParams",
    "FilterParams",
    "FrameVerdict",
    "block_match",
    "read_matches",
    "write_matches",
    "filter_frame_pair",
]

_HEADER = "# edgeloop-matches"


@dataclass
class MatchSet:
    """Correspondences as an (n, 5) array of rows ``x1 y1 x2 y2 score``.

    ``source_dims`` and ``target_dims`` are ``(width, height)``.
    """

    data: np.ndarray
    source_dims: tuple
    target_dims: tuple

    def __post_init__(self):
        d = np.asarray(self.data, dtype=np.float64).reshape(-1, 5)
        self.data = d
        self.source_dims = (int(self.source_dims[0]), int(self.source_dims[1]))
        self.target_dims = (int(self.target_dims[0]), int(self.target_dims[1]))
        bad = _invalid_rows(d, self.source_dims, self.target_dims)
        if bad.size:
            raise InvalidInputError(f"match {int(bad[0])} is out of bounds or has a bad score")
        if len(d) and len(np.unique(d[:, :2], axis=0)) != len(d):
            raise InvalidInputError("duplicate source locations in match set")

    def __len__(self):
        return len(self.data)

    @property
    def src(self):
        return self.data[:, 0:2]

    @property
    def dst(self):
        return self.data[:, 2:4]

    @property
    def score(self):
        return self.data[:, 4]

    @property
    def displacement(self):
        return self.data[:, 2:4] - self.data[:, 0:2]

    def __eq__(self, other):
        if not isinstance(other, MatchSet):
            return NotImplemented
        return (self.source_dims == other.source_dims and self.target_dims == other.target_dims
                and self.data.shape == other.data.shape and bool(np.array_equal(self.data, other.data)))


def _invalid_rows(d, sdims, tdims):
    ok = np.all(np.isfinite(d), axis=1)
    ok &= (d[:, 0] >= 0) & (d[:, 0] < sdims[0]) & (d[:, 1] >= 0) & (d[:, 1] < sdims[1])
    ok &= (d[:, 2] >= 0) & (d[:, 2] < tdims[0]) & (d[:, 3] >= 0) & (d[:, 3] < tdims[1])
    ok &= d[:, 4] >= 0
    return np.flatnonzero(~ok)


# ---------------------------------------------------------------------------
# text format


def write_matches(ms, path):
    """Write one ``x1 y1 x2 y2 score`` line per match.

    A leading comment records the frame dimensions so that ``read_matches``
    can restore them; numbers are written with ``repr`` so reading back is exact.
    """
    sw, sh = ms.source_dims
    tw, th = ms.target_dims
    lines = [f"{_HEADER} source {sw} {sh} target {tw} {th}"]
    for row in ms.data.tolist():
        lines.append(" ".join(_fmt(v) for v in row))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _fmt(v):
    if float(v).is_integer() and abs(v) < 2**53:
        return str(int(v))
    return repr(float(v))


def read_matches(path, source_dims=None, target_dims=None):
    """Parse a match file.

    Dimensions come from the arguments, else from the header comment that
    ``write_matches`` emits.  Extra columns beyond the fifth (as in raw
    DeepMatching output) are ignored.
    """
    rows = []
    linenos = []
    hdr = None
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            s = line.strip()
            if not s:
                continue
            if s.startswith("#"):
                if s.startswith(_HEADER):
                    tok = s[len(_HEADER):].split()
                    try:
                        hdr = ((int(tok[1]), int(tok[2])), (int(tok[4]), int(tok[5])))
                    except (IndexError, ValueError):
                        raise ParseError("malformed dimension header", lineno) from None
                continue
            tok = s.split()
            if len(tok) < 5:
                raise ParseError(f"expected 5 columns, found {len(tok)}", lineno)
            try:
                vals = [float(t) for t in tok[:5]]
            except ValueError:
                raise ParseError(f"non-numeric field in {s!r}", lineno) from None
            rows.append(vals)
            linenos.append(lineno)
    if source_dims is None:
        if hdr is None:
            raise ParseError("no frame dimensions given and no dimension header in file")
        source_dims = hdr[0]
        if target_dims is None:
            target_dims = hdr[1]
    if target_dims is None:
        target_dims = source_dims
    data = np.array(rows, dtype=np.float64).reshape(-1, 5)
    bad = _invalid_rows(data, source_dims, target_dims)
    if bad.size:
        i = int(bad[0])
        r = data[i]
        if not np.all(np.isfinite(r)):
            why = "non-finite value"
        elif r[4] < 0:
            why = f"negative score {r[4]}"
        elif not (0 <= r[0] < source_dims[0] and 0 <= r[1] < source_dims[1]):
            why = f"source ({r[0]}, {r[1]}) outside {source_dims[0]}x{source_dims[1]}"
        else:
            which = "x2" if not 0 <= r[2] < target_dims[0] else "y2"
            why = f"{which} out of bounds: ({r[2]}, {r[3]}) outside {target_dims[0]}x{target_dims[1]}"
        raise ParseError(why, linenos[i])
    if len(data):
        _, first = np.unique(data[:, :2], axis=0, return_index=True)
        if len(first) != len(data):
            dup = sorted(set(range(len(data))) - set(first.tolist()))[0]
            raise ParseError("duplicate source location", linenos[dup])
    return MatchSet(data, source_dims, target_dims)


# ---------------------------------------------------------------------------
# block matcher


@dataclass
class BlockMatchParams:
    grid_step: int = 4
    patch_radius: int = 4
    search_radius: int = 32
    levels: int = 3
    min_texture: float = 1e-4
    fwd_bwd_tol: float = 2.0
    refine_radius: int = 2
    min_score: float = 0.7


def _pyramid(gray, levels):
    pyr = [gray]
    for _ in range(1, levels):
        g = pyr[-1]
        h, w = (g.shape[0] // 2) * 2, (g.shape[1] // 2) * 2
        if h < 2 or w < 2:
            break
        pyr.append(g[:h, :w].reshape(h // 2, 2, w // 2, 2).mean(axis=(1, 3)))
    return pyr


def _normalized(patches):
    p = patches.reshape(len(patches), -1)
    p = p - p.mean(axis=1, keepdims=True)
    n = np.sqrt(np.sum(p * p, axis=1, keepdims=True))
    return p / np.where(n > 0, n, np.inf)


def _search(src, dst, pts_src, guess, radius, r, strict):
    """Best NCC displacement for each source point within ``guess +- radius``.

    ``strict`` requires the whole target patch inside ``dst``; otherwise
    patches are taken from a replicate-padded copy.  In strict mode a best
    target on the border of the feasible region is rejected (score -inf),
    since the true optimum may lie just outside it.
    """
    h, w = dst.shape
    ps = np.pad(src, r, mode="edge")
    pd = np.pad(dst, r, mode="edge")
    vs = sliding_window_view(ps, (2 * r + 1, 2 * r + 1))
    vd = sliding_window_view(pd, (2 * r + 1, 2 * r + 1))
    a = _normalized(vs[pts_src[:, 1], pts_src[:, 0]])
    best = np.full(len(pts_src), -np.inf)
    best_d = guess.copy()
    lo, hi = (r, h - 1 - r) if strict else (0, h - 1)
    lox, hix = (r, w - 1 - r) if strict else (0, w - 1)
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            d = guess + np.array([dx, dy])
            tx = pts_src[:, 0] + d[:, 0]
            ty = pts_src[:, 1] + d[:, 1]
            ok = (tx >= lox) & (tx <= hix) & (ty >= lo) & (ty <= hi)
            if not ok.any():
                continue
            idx = np.flatnonzero(ok)
            b = _normalized(vd[ty[idx], tx[idx]])
            ncc = np.sum(a[idx] * b, axis=1)
            upd = ncc > best[idx]
            best[idx[upd]] = ncc[upd]
            best_d[idx[upd]] = d[idx[upd]]
    if strict:
        tx = pts_src[:, 0] + best_d[:, 0]
        ty = pts_src[:, 1] + best_d[:, 1]
        edge = (tx == lox) | (tx == hix) | (ty == lo) | (ty == hi)
        best[edge] = -np.inf
    return best_d, best


def _match_points(pyr_a, pyr_b, pts, p):
    """Coarse-to-fine integer displacement for each point of ``pts`` (x, y)."""
    top = len(pyr_a) - 1
    d = np.zeros((len(pts), 2), dtype=np.int64)
    score = np.full(len(pts), -np.inf)
    for lev in range(top, -1, -1):
        scale = 2 ** lev
        a, b = pyr_a[lev], pyr_b[lev]
        pl = np.clip(np.floor(pts / scale).astype(np.int64), 0, np.array(a.shape[::-1]) - 1)
        if lev == top:
            radius = int(math.ceil(p.search_radius / scale))
        else:
            radius = p.refine_radius
            d = d * 2
        d, score = _search(a, b, pl, d, radius, p.patch_radius, strict=(lev == 0))
    return d, score


def block_match(a, b, params=None):
    """Semi-dense integer matches from frame ``a`` to frame ``b``."""
    p = params or BlockMatchParams()
    a = as_image(a, "a")
    b = as_image(b, "b")
    if a.shape[:2] != b.shape[:2]:
        raise InvalidInputError(f"frame sizes differ: {a.shape[:2]} vs {b.shape[:2]}")
    ga = a.mean(axis=2)
    gb = b.mean(axis=2)
    h, w = ga.shape
    r = p.patch_radius
    off = p.grid_step // 2
    ys = np.arange(max(off, r), h - r, p.grid_step)
    xs = np.arange(max(off, r), w - r, p.grid_step)
    dims = (w, h)
    if len(ys) == 0 or len(xs) == 0:
        return MatchSet(np.zeros((0, 5)), dims, dims)
    gy, gx = np.meshgrid(ys, xs, indexing="ij")
    pts = np.stack([gx.ravel(), gy.ravel()], axis=1)
    win = sliding_window_view(ga, (2 * r + 1, 2 * r + 1))
    var = win[pts[:, 1] - r, pts[:, 0] - r].reshape(len(pts), -1).var(axis=1)
    pts = pts[var >= p.min_texture]
    if len(pts) == 0:
        return MatchSet(np.zeros((0, 5)), dims, dims)
    pyr_a = _pyramid(ga, p.levels)
    pyr_b = _pyramid(gb, p.levels)
    d, score = _match_points(pyr_a, pyr_b, pts, p)
    ok = np.isfinite(score) & (score >= p.min_score)
    pts, d, score = pts[ok], d[ok], score[ok]
    tgt = pts + d
    back, bscore = _match_points(pyr_b, pyr_a, tgt, p)
    ret = tgt + back
    ok = np.isfinite(bscore) & (np.hypot(*(ret - pts).T) <= p.fwd_bwd_tol)
    pts, tgt, score = pts[ok], tgt[ok], score[ok]
    data = np.column_stack([pts, tgt, np.clip(score, 0.0, None)]).astype(np.float64)
    return MatchSet(data, dims, dims)


# ---------------------------------------------------------------------------
# frame filtering


@dataclass
class FilterParams:
    min_count: int = 200
    slow_max_disp: float = 2.0
    large_mean_disp: float = 15.0
    trans_frac: float = 0.9
    trans_tol: float = 1.0


@dataclass(frozen=True)
class FrameVerdict:
    accept: bool
    reason: Optional[str] = None
    stats: dict = field(default_factory=dict, compare=False)

    def __bool__(self):
        return self.accept


def _best_translation_support(disp, tol):
    cands = np.unique(np.round(disp, 6), axis=0)
    best = 0
    chunk = max(1, 4_000_000 // max(1, len(disp)))
    for i in range(0, len(cands), chunk):
        c = cands[i:i + chunk]
        dist = np.hypot(disp[None, :, 0] - c[:, None, 0], disp[None, :, 1] - c[:, None, 1])
        best = max(best, int((dist <= tol).sum(axis=1).max()))
    return best


def filter_frame_pair(ms, params=None):
    """Decide whether a frame pair is worth using for motion estimation.

    Rejects, in this order: too few matches, very slow motion (max
    displacement below 2 px), very large motion (mean displacement above
    15 px), and motion explained by a single global translation.
    """
    p = params or FilterParams()
    n = len(ms)
    if n == 0 or n < p.min_count:
        return FrameVerdict(False, "insufficient", {"count": n})
    mag = np.hypot(*ms.displacement.T)
    stats = {"count": n, "max_disp": float(mag.max()), "mean_disp": float(mag.mean())}
    if stats["max_disp"] < p.slow_max_disp:
        return FrameVerdict(False, "slow", stats)
    if stats["mean_disp"] > p.large_mean_disp:
        return FrameVerdict(False, "large", stats)
    support = _best_translation_support(ms.displacement, p.trans_tol)
    stats["translation_support"] = support / n
    if support >= p.trans_frac * n:
        return FrameVerdict(False, "translational", stats)
    return FrameVerdict(True, None, stats)
