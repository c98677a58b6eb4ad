"""Edge detectors: the gradient operator used at iteration 0 and the forest."""

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numba import njit
from skimage.transform import resize

from ..errors import InvalidInputError
from ..imgproc import EdgeMap, as_image, conv_tri, gradient_magnitude, rgb_to_luv
from . import features as F
from .forest import StructuredForest
from .samples import seg_to_edges


_CHUNK = 1024
# a perfectly agreeing one-pixel edge averages to 1 but peaks at 0.5 after the
# final [1 2 1]/4 smoothing; the gain restores it
_GAIN = 2.0


@dataclass
class DetectOptions:
    scales: Sequence[float] = (0.5, 1.0, 2.0)
    sharpen: int = 2
    stride: int = 2


class GradientDetector:
    """Max-over-channels gradient magnitude; the iteration-0 detector."""

    kind = "gradient"

    def __repr__(self):
        return "GradientDetector()"


@dataclass
class ForestDetector:
    forest: StructuredForest
    options: DetectOptions = field(default_factory=DetectOptions)
    kind = "forest"


def route(tree, planes, py, px):
    """Leaf index reached by every patch (py[i], px[i]) in one tree."""
    node = np.zeros(len(py), np.int64)
    active = np.flatnonzero(tree.left[node] >= 0)
    while len(active):
        n = node[active]
        v = F.lookup(planes, py[active], px[active], tree.feature[n])
        go_left = v < tree.threshold[n]
        node[active] = np.where(go_left, tree.left[n], tree.right[n])
        active = active[tree.left[node[active]] >= 0]
    return tree.leaf[node]


@njit(cache=True)
def _sharpen(segs, colors, n_iters):
    """Re-fit leaf segmentations to the local colors.

    ``segs``: (n, 16, 16) labels, ``colors``: (n, 16, 16, 3).  Each pass
    recomputes segment mean colors, then moves every pixel to whichever of
    its own or its 4-neighbors' segments has the closest mean.
    """
    n, L = segs.shape[0], segs.shape[1]
    out = segs.astype(np.int64)
    cur = np.empty((L, L), np.int64)
    means = np.zeros((256, 3))
    cnt = np.zeros(256)
    cand = np.empty(5, np.int64)
    for i in range(n):
        k = 0
        for y in range(L):
            for x in range(L):
                if out[i, y, x] > k:
                    k = out[i, y, x]
        if k == 0:
            continue
        for _ in range(n_iters):
            means[:k + 1] = 0.0
            cnt[:k + 1] = 0.0
            for y in range(L):
                for x in range(L):
                    s = out[i, y, x]
                    cnt[s] += 1.0
                    for c in range(3):
                        means[s, c] += colors[i, y, x, c]
            for s in range(k + 1):
                if cnt[s] > 0:
                    for c in range(3):
                        means[s, c] /= cnt[s]
            cur[:, :] = out[i]
            for y in range(L):
                for x in range(L):
                    cand[0] = cur[y, x]
                    cand[1] = cur[max(y - 1, 0), x]
                    cand[2] = cur[min(y + 1, L - 1), x]
                    cand[3] = cur[y, max(x - 1, 0)]
                    cand[4] = cur[y, min(x + 1, L - 1)]
                    best = cand[0]
                    bd = np.inf
                    for j in range(5):
                        d = 0.0
                        for c in range(3):
                            t = means[cand[j], c] - colors[i, y, x, c]
                            d += t * t
                        if d < bd:
                            bd = d
                            best = cand[j]
                    out[i, y, x] = best
    return out


def _detect_single(forest, img, sharpen, stride):
    h, w = img.shape[:2]
    padded = F.pad_image(img)
    planes = F.channel_planes(padded)
    step = max(1, stride // F.SHRINK)
    ps = F.PATCH // F.SHRINK
    ys = np.arange(0, planes.shape[0] - ps + 1, step)
    xs = np.arange(0, planes.shape[1] - ps + 1, step)
    gy, gx = np.meshgrid(ys, xs, indexing="ij")
    py, px = gy.ravel(), gx.ravel()
    ny, nx = len(ys), len(xs)
    off = (F.PATCH - F.LABEL) // 2
    acc = np.zeros(padded.shape[:2])
    cov = np.zeros(padded.shape[:2])
    colors = None
    if sharpen > 0:
        luv = conv_tri(rgb_to_luv(padded), 1)
        oy = (py * F.SHRINK + off)[:, None] + np.arange(F.LABEL)[None]
        ox = (px * F.SHRINK + off)[:, None] + np.arange(F.LABEL)[None]
        colors = luv[oy[:, :, None], ox[:, None, :]]                 # (n, 16, 16, 3)
    s = F.SHRINK * step
    for t, tree in enumerate(forest.trees):
        leaves = route(tree, planes, py, px)
        if sharpen > 0:
            E = np.empty((len(leaves), F.LABEL, F.LABEL))
            for c0 in range(0, len(leaves), _CHUNK):
                sl = slice(c0, c0 + _CHUNK)
                E[sl] = seg_to_edges(_sharpen(tree.segs[leaves[sl]], colors[sl], int(sharpen)))
        else:
            E = forest.leaf_edges(t)[leaves].astype(np.float64)
        E = E.reshape(ny, nx, F.LABEL, F.LABEL)
        for dy in range(F.LABEL):
            for dx in range(F.LABEL):
                acc[off + dy: off + dy + s * ny: s, off + dx: off + dx + s * nx: s] += E[:, :, dy, dx]
                if t == 0:
                    cov[off + dy: off + dy + s * ny: s, off + dx: off + dx + s * nx: s] += 1.0
    cov *= forest.n_trees
    out = _GAIN * acc / np.maximum(cov, 1.0)
    out = out[F.PAD:F.PAD + h, F.PAD:F.PAD + w]
    return np.minimum(conv_tri(out, 1), 1.0)


def detect(det, img, scales=None, sharpen=None, stride=None):
    """Edge map of ``img`` in [0, 1].

    For a forest, every ``stride``-th 32x32 patch at each scale is routed
    through every tree; the (optionally sharpened) 16x16 leaf edge patches
    are averaged by coverage, and scales are averaged after resampling.
    """
    img = as_image(img)
    if isinstance(det, GradientDetector):
        return gradient_magnitude(img)
    if isinstance(det, StructuredForest):
        det = ForestDetector(det)
    if not isinstance(det, ForestDetector):
        raise InvalidInputError(f"unknown detector {det!r}")
    opts = det.options
    scales = opts.scales if scales is None else scales
    sharpen = opts.sharpen if sharpen is None else sharpen
    stride = opts.stride if stride is None else stride
    if det.forest.recipe_version != F.RECIPE_VERSION:
        raise InvalidInputError(f"model uses feature recipe v{det.forest.recipe_version}, "
                                f"extractor is v{F.RECIPE_VERSION}")
    if stride % F.SHRINK:
        raise InvalidInputError(f"stride must be a multiple of {F.SHRINK}")
    if img.shape[2] == 1:
        img = np.repeat(img, 3, axis=2)
    h, w = img.shape[:2]
    if min(h, w) < F.PATCH:
        raise InvalidInputError(f"image {h}x{w} is smaller than the {F.PATCH}px patch")
    total = np.zeros((h, w))
    for sc in scales:
        if sc == 1:
            im = img
        else:
            size = (max(1, int(round(h * sc))), max(1, int(round(w * sc))))
            im = np.clip(resize(img, size, order=1, mode="edge", anti_aliasing=sc < 1), 0.0, 1.0)
        e = _detect_single(det.forest, im, sharpen, stride)
        if sc != 1:
            e = resize(e, (h, w), order=1, mode="edge", anti_aliasing=False)
        total += e
    return EdgeMap(np.clip(total / len(scales), 0.0, 1.0))
