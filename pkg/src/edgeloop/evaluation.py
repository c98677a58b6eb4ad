"""Boundary benchmark: ODS, OIS, AP and precision at 20% recall.

Predictions are matched to ground-truth edge pixels one-to-one within a
distance tolerance.  With several annotations per image, a predicted pixel
is a true positive if it matches any annotation, and recall counts are
summed over annotations.
"""

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List

import numpy as np
from skimage.morphology import thin as _thin

from .bipartite import candidate_pairs, max_matching, pixel_coords
from .errors import InvalidInputError
from .imgproc import EdgeMap, nms

_trapezoid = getattr(np, "trapezoid", None) or np.trapz

__all__ = [
    "Correspondence",
    "PRPoint",
    "BenchmarkResult",
    "default_tolerance",
    "correspond",
    "pr_curve",
    "benchmark",
    "f_measure",
    "load_gt_dir",
]


@dataclass
class Correspondence:
    tp: int            # predicted pixels matched to some annotation
    fp: int
    fn: int            # unmatched annotation pixels, summed over annotations
    tp_gt: int         # matched annotation pixels, summed over annotations

    def __add__(self, other):
        return Correspondence(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tp_gt + other.tp_gt)


@dataclass
class PRPoint:
    threshold: float
    tp: int
    fp: int
    fn: int
    tp_gt: int

    @property
    def precision(self):
        return 1.0 if self.tp + self.fp == 0 else self.tp / (self.tp + self.fp)

    @property
    def recall(self):
        return 0.0 if self.tp_gt + self.fn == 0 else self.tp_gt / (self.tp_gt + self.fn)

    @property
    def f(self):
        return f_measure(self.precision, self.recall)


@dataclass
class BenchmarkResult:
    ods: float
    ois: float
    ap: float
    p20: float
    ods_threshold: float
    curve: List[PRPoint] = field(default_factory=list)
    image_thresholds: List[float] = field(default_factory=list)

    def to_json(self):
        d = {
            "ods": self.ods, "ois": self.ois, "ap": self.ap, "p20": self.p20,
            "ods_threshold": self.ods_threshold,
            "curve": [dict(asdict(p), precision=p.precision, recall=p.recall) for p in self.curve],
            "image_thresholds": list(self.image_thresholds),
        }
        return json.dumps(d, indent=2)


def f_measure(p, r):
    return 0.0 if p + r == 0 else 2.0 * p * r / (p + r)


def default_tolerance(shape, frac=0.0075):
    """BSDS convention: a fraction of the image diagonal, in pixels."""
    return frac * float(np.hypot(*shape[:2]))


def _binary(x):
    if isinstance(x, EdgeMap):
        x = x.strength
    return np.asarray(x) > 0


def _as_list(gt):
    if isinstance(gt, (list, tuple)):
        return [_binary(g) for g in gt]
    g = np.asarray(gt.strength if isinstance(gt, EdgeMap) else gt)
    if g.ndim == 3:
        return [g[k] > 0 for k in range(g.shape[0])]
    return [g > 0]


def correspond(pred, gt, tol=None):
    """Match predicted edge pixels to annotation pixels within ``tol`` px.

    ``gt`` is one binary map or a list (or stack) of annotations.
    """
    p = _binary(pred)
    gts = _as_list(gt)
    for g in gts:
        if g.shape != p.shape:
            raise InvalidInputError(f"shape mismatch: pred {p.shape}, gt {g.shape}")
    if tol is None:
        tol = default_tolerance(p.shape)
    pp = pixel_coords(p)
    hit = np.zeros(len(pp), dtype=bool)
    fn = tp_gt = 0
    for g in gts:
        gp = pixel_coords(g)
        i, j, _ = candidate_pairs(pp, gp, tol)
        m = max_matching(len(pp), len(gp), i, j)
        matched = m >= 0
        hit |= matched
        tp_gt += int(matched.sum())
        fn += len(gp) - int(matched.sum())
    tp = int(hit.sum())
    return Correspondence(tp, len(pp) - tp, fn, tp_gt)


def default_thresholds(n=99):
    return np.linspace(1.0 / (n + 1), 1.0 - 1.0 / (n + 1), n)


def _image_counts(pred, gt, thresholds, tol, thin, nms_radius=None):
    if nms_radius:
        pred = pred if isinstance(pred, EdgeMap) else EdgeMap(pred)
        if not pred.thinned:
            pred = nms(pred, nms_radius)
    s = pred.strength if isinstance(pred, EdgeMap) else np.asarray(pred, dtype=np.float64)
    out = np.zeros((len(thresholds), 4), dtype=np.int64)
    prev = None
    for t_i, t in enumerate(thresholds):
        b = s >= t
        if thin and b.any():
            b = _thin(b)
        if prev is not None and np.array_equal(b, prev[0]):
            out[t_i] = prev[1]
            continue
        c = correspond(b, gt, tol)
        out[t_i] = (c.tp, c.fp, c.fn, c.tp_gt)
        prev = (b, out[t_i].copy())
    return out


def _counts(preds, gts, thresholds, tol, thin, nms_radius=None):
    if len(preds) != len(gts) or len(preds) == 0:
        raise InvalidInputError("need equal, non-zero numbers of predictions and ground truths")
    return np.stack([
        _image_counts(p, g, thresholds, tol, thin, nms_radius) for p, g in zip(preds, gts)
    ])


def pr_curve(preds, gts, thresholds=None, tol=None, thin=True, nms_radius=1):
    """Corpus precision/recall at each threshold.

    Un-thinned predictions are first thinned with ``nms`` (skipped when
    ``nms_radius`` is falsy).  Each map is then binarized at
    ``strength >= threshold`` and, when ``thin`` is set, morphologically
    thinned before correspondence.
    """
    th = default_thresholds() if thresholds is None else np.asarray(thresholds, dtype=np.float64)
    c = _counts(preds, gts, th, tol, thin, nms_radius).sum(axis=0)
    return [PRPoint(float(t), *map(int, row)) for t, row in zip(th, c)]


def _prf(counts):
    tp, fp, fn, tp_gt = (counts[..., k].astype(np.float64) for k in range(4))
    p = np.where(tp + fp > 0, tp / np.maximum(tp + fp, 1), 1.0)
    r = np.where(tp_gt + fn > 0, tp_gt / np.maximum(tp_gt + fn, 1), 0.0)
    f = np.where(p + r > 0, 2 * p * r / np.maximum(p + r, 1e-300), 0.0)
    return p, r, f


def _ap(curve):
    pts = [(c.recall, c.precision) for c in curve if c.tp + c.fp > 0]
    if not pts:
        return 0.0
    pts.sort()
    r = np.array([q[0] for q in pts])
    p = np.array([q[1] for q in pts])
    env = np.maximum.accumulate(p[::-1])[::-1]
    r = np.concatenate([[0.0], r])
    env = np.concatenate([[env[0]], env])
    return float(_trapezoid(env, r))


def _p_at(curve, target=0.2):
    pts = sorted((c.recall, c.precision) for c in curve if c.tp + c.fp > 0)
    if not pts or pts[-1][0] < target:
        return 0.0
    if pts[0][0] >= target:
        return pts[0][1]
    for (r0, p0), (r1, p1) in zip(pts[:-1], pts[1:]):
        if r0 <= target <= r1:
            if r1 == r0:
                return max(p0, p1)
            return p0 + (p1 - p0) * (target - r0) / (r1 - r0)
    return 0.0


def benchmark(preds, gts, tol=None, thresholds=None, thin=True, nms_radius=1):
    """ODS, OIS, AP and P20 over a corpus of edge maps.

    OIS sums each image's counts at its own best-F threshold, as in the
    BSDS protocol.  AP integrates the precision envelope over recall with
    the trapezoid rule; P20 interpolates linearly between the two curve
    points that straddle 20% recall.
    """
    th = default_thresholds() if thresholds is None else np.asarray(thresholds, dtype=np.float64)
    counts = _counts(preds, gts, th, tol, thin, nms_radius)
    total = counts.sum(axis=0)
    _, _, f = _prf(total)
    best = int(np.argmax(f))
    curve = [PRPoint(float(t), *map(int, row)) for t, row in zip(th, total)]
    _, _, fi = _prf(counts)
    per_best = np.argmax(fi, axis=1)
    picked = counts[np.arange(len(counts)), per_best].sum(axis=0)
    _, _, f_ois = _prf(picked)
    return BenchmarkResult(
        ods=float(f[best]),
        ois=float(f_ois),
        ap=_ap(curve),
        p20=_p_at(curve, 0.2),
        ods_threshold=float(th[best]),
        curve=curve,
        image_thresholds=[float(th[b]) for b in per_best],
    )


def load_gt_dir(gt_root, name):
    """Annotations for image ``name``: every PNG in ``gt_root/name/``, sorted."""
    from .imageio import read_edge_png

    d = Path(gt_root) / name
    files = sorted(d.glob("*.png"))
    if not files:
        raise InvalidInputError(f"no annotations under {d}")
    return [read_edge_png(f).strength > 0 for f in files]
