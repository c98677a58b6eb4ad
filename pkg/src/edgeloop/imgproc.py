"""Pixel-level primitives shared by every stage of the learning loop.

Images are float arrays of shape (H, W, C) with C in {1, 3} and values in
[0, 1].  2-D arrays are accepted wherever an image is expected and are
treated as single-channel.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import ndimage

from .errors import InvalidInputError

__all__ = [
    "EdgeMap",
    "SuperpixelLabeling",
    "as_image",
    "to_gray",
    "conv_tri",
    "gradient_magnitude",
    "nms",
    "orientation_index",
    "slic",
    "superpixel_edges",
    "connected_components",
    "rgb_to_luv",
    "feature_channels",
    "raw_channels",
    "N_FEATURE_CHANNELS",
    "NMS_OFFSETS",
]

# (dy, dx) unit steps for the four quantized normal directions 0, 45, 90, 135 deg
NMS_OFFSETS = ((0, 1), (1, 1), (1, 0), (1, -1))

N_FEATURE_CHANNELS = 13


def as_image(img, name="image"):
    """Validate ``img`` and return it as a float64 (H, W, C) array."""
    arr = np.asarray(img)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3 or arr.shape[2] not in (1, 3):
        raise InvalidInputError(f"{name}: expected HxW or HxWxC with C in (1, 3), got shape {arr.shape}")
    if arr.shape[0] == 0 or arr.shape[1] == 0:
        raise InvalidInputError(f"{name}: empty image")
    arr = arr.astype(np.float64, copy=False)
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{name}: non-finite values")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise InvalidInputError(f"{name}: values outside [0, 1]")
    return arr


def to_gray(img):
    img = as_image(img)
    if img.shape[2] == 1:
        return img[:, :, 0]
    return img @ np.array([0.299, 0.587, 0.114])


@dataclass
class EdgeMap:
    """Per-pixel edge strengths in [0, 1].

    ``orientation`` holds the quantized normal direction index (0..3, see
    ``NMS_OFFSETS``) that was used to thin the map; it is set whenever
    ``thinned`` is true so that thinning can be re-applied consistently.
    """

    strength: np.ndarray
    thinned: bool = False
    orientation: Optional[np.ndarray] = None

    def __post_init__(self):
        s = np.asarray(self.strength, dtype=np.float64)
        if s.ndim != 2:
            raise InvalidInputError(f"edge map must be 2-D, got shape {s.shape}")
        if not np.all(np.isfinite(s)) or (s.size and (s.min() < 0.0 or s.max() > 1.0)):
            raise InvalidInputError("edge strengths must be finite and within [0, 1]")
        self.strength = s

    @property
    def height(self):
        return self.strength.shape[0]

    @property
    def width(self):
        return self.strength.shape[1]

    @property
    def shape(self):
        return self.strength.shape


@dataclass
class SuperpixelLabeling:
    labels: np.ndarray
    n_segments: int

    @property
    def height(self):
        return self.labels.shape[0]

    @property
    def width(self):
        return self.labels.shape[1]


def conv_tri(x, r):
    """Separable triangle filter of radius ``r`` with replicate borders.

    Operates over the first two axes; ``r <= 0`` returns a copy.
    """
    x = np.asarray(x, dtype=np.float64)
    r = int(round(r))
    if r <= 0:
        return x.copy()
    k = np.concatenate([np.arange(1, r + 2), np.arange(r, 0, -1)]).astype(np.float64)
    k /= k.sum()
    y = ndimage.convolve1d(x, k, axis=0, mode="nearest")
    return ndimage.convolve1d(y, k, axis=1, mode="nearest")


def _centered_gradients(plane):
    p = np.pad(plane, 1, mode="edge")
    gx = p[1:-1, 2:] - p[1:-1, :-2]
    gy = p[2:, 1:-1] - p[:-2, 1:-1]
    return gx, gy


def gradient_magnitude(img):
    """Max-over-channels centered-difference gradient magnitude, scaled to [0, 1].

    This is the iteration-0 edge detector.  An image with no gradient at all
    maps to an all-zero edge map.
    """
    img = as_image(img)
    mag = np.zeros(img.shape[:2])
    for c in range(img.shape[2]):
        gx, gy = _centered_gradients(img[:, :, c])
        np.maximum(mag, np.hypot(gx, gy), out=mag)
    peak = mag.max()
    if peak > 0:
        mag /= peak
    return EdgeMap(mag)


def orientation_index(strength, sigma=1.5):
    """Quantized edge-normal direction (0..3) from the local second-moment matrix."""
    gx, gy = _centered_gradients(np.asarray(strength, dtype=np.float64))
    jxx = ndimage.gaussian_filter(gx * gx, sigma, mode="nearest")
    jyy = ndimage.gaussian_filter(gy * gy, sigma, mode="nearest")
    jxy = ndimage.gaussian_filter(gx * gy, sigma, mode="nearest")
    theta = 0.5 * np.arctan2(2.0 * jxy, jxx - jyy)
    return (np.round(theta / (np.pi / 4)).astype(np.int64)) % 4


def nms(edges, radius=1):
    """Thin ``edges`` by suppressing non-maxima along the edge normal.

    A pixel survives unless some pixel within ``radius`` steps along its
    quantized normal (either side) is strictly greater.  Re-thinning an
    already thinned map reuses its stored orientation, which makes the
    operation idempotent.
    """
    if not isinstance(edges, EdgeMap):
        edges = EdgeMap(edges)
    radius = int(radius)
    if radius < 1:
        raise InvalidInputError("nms radius must be >= 1")
    s = edges.strength
    if edges.thinned and edges.orientation is not None:
        orient = edges.orientation
    else:
        orient = orientation_index(s)
    h, w = s.shape
    pad = np.pad(s, radius, mode="constant", constant_values=-np.inf)
    keep = np.ones(s.shape, dtype=bool)
    for d, (dy, dx) in enumerate(NMS_OFFSETS):
        sel = orient == d
        if not sel.any():
            continue
        for k in range(1, radius + 1):
            for sgn in (1, -1):
                oy, ox = radius + sgn * k * dy, radius + sgn * k * dx
                nb = pad[oy:oy + h, ox:ox + w]
                keep &= ~(sel & (nb > s))
    return EdgeMap(np.where(keep, s, 0.0), thinned=True, orientation=orient)


# ---------------------------------------------------------------------------
# superpixels


def _slic_features(img):
    if img.shape[2] == 3:
        from skimage.color import rgb2lab

        return rgb2lab(img)
    return img[:, :, :1] * 100.0


def slic(img, n_target=512, compactness=10.0, n_iters=10):
    """SLIC superpixels with a 4-connectivity post-pass.

    Centers start on a regular grid of roughly ``n_target`` cells; each
    iteration assigns pixels within a 2S window of a center using the
    combined color/position distance and recenters.  Fragments disconnected
    from the bulk of their segment are then absorbed into the largest
    adjacent segment and labels are renumbered to ``0..n-1``.
    """
    img = as_image(img)
    h, w = img.shape[:2]
    if n_target < 1 or n_iters < 1:
        raise InvalidInputError("slic needs n_target >= 1 and n_iters >= 1")
    if n_target > h * w:
        raise InvalidInputError(f"n_target={n_target} exceeds pixel count {h * w}")
    feat = _slic_features(img)
    step = np.sqrt(h * w / float(n_target))
    ny = max(1, min(h, int(round(h / step))))
    nx = max(1, min(w, int(round(w / step))))
    while ny * nx > n_target and (ny > 1 or nx > 1):
        if ny >= nx:
            ny -= 1
        else:
            nx -= 1
    cy, cx = np.meshgrid((np.arange(ny) + 0.5) * h / ny, (np.arange(nx) + 0.5) * w / nx, indexing="ij")
    cy, cx = cy.ravel(), cx.ravel()
    ccol = feat[np.clip(cy.astype(int), 0, h - 1), np.clip(cx.astype(int), 0, w - 1)]
    S = max(h / ny, w / nx)
    m2 = (compactness / S) ** 2
    yy, xx = np.mgrid[0:h, 0:w]
    labels = np.zeros((h, w), dtype=np.int64)
    for _ in range(n_iters):
        dist = np.full((h, w), np.inf)
        for k in range(len(cy)):
            y0, y1 = max(0, int(cy[k] - S)), min(h, int(np.ceil(cy[k] + S)) + 1)
            x0, x1 = max(0, int(cx[k] - S)), min(w, int(np.ceil(cx[k] + S)) + 1)
            dc = np.sum((feat[y0:y1, x0:x1] - ccol[k]) ** 2, axis=2)
            ds = (yy[y0:y1, x0:x1] - cy[k]) ** 2 + (xx[y0:y1, x0:x1] - cx[k]) ** 2
            d = dc + m2 * ds
            win = dist[y0:y1, x0:x1]
            better = d < win
            win[better] = d[better]
            labels[y0:y1, x0:x1][better] = k
        # pixels no window reached (only possible on degenerate grids)
        if np.isinf(dist).any():
            miss = np.isinf(dist)
            d2 = (yy[miss, None] - cy[None]) ** 2 + (xx[miss, None] - cx[None]) ** 2
            labels[miss] = np.argmin(d2, axis=1)
        counts = np.bincount(labels.ravel(), minlength=len(cy)).astype(np.float64)
        ok = counts > 0
        for arr, src in ((cy, yy), (cx, xx)):
            sums = np.bincount(labels.ravel(), weights=src.ravel().astype(np.float64), minlength=len(cy))
            arr[ok] = sums[ok] / counts[ok]
        for c in range(feat.shape[2]):
            sums = np.bincount(labels.ravel(), weights=feat[:, :, c].ravel(), minlength=len(cy))
            ccol[ok, c] = sums[ok] / counts[ok]
    labels = _enforce_connectivity(labels)
    return SuperpixelLabeling(labels, int(labels.max()) + 1)


def _enforce_connectivity(labels):
    from skimage.measure import label as cc_label

    comp = cc_label(labels + 1, connectivity=1, background=0) - 1
    n = comp.max() + 1
    sizes = np.bincount(comp.ravel(), minlength=n)
    owner = np.zeros(n, dtype=np.int64)
    owner[comp.ravel()] = labels.ravel()
    # the largest component of each label is its anchor
    best = {}
    for c in range(n):
        lab = owner[c]
        if lab not in best or sizes[c] > sizes[best[lab]]:
            best[lab] = c
    anchors = set(best.values())
    # component adjacency (4-neighborhood)
    pairs = set()
    for a, b in ((comp[:, :-1], comp[:, 1:]), (comp[:-1, :], comp[1:, :])):
        diff = a != b
        for u, v in zip(a[diff].tolist(), b[diff].tolist()):
            pairs.add((u, v))
            pairs.add((v, u))
    adj = [[] for _ in range(n)]
    for u, v in sorted(pairs):
        adj[u].append(v)
    parent = list(range(n))
    gsize = sizes.astype(np.int64).copy()

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    orphans = sorted((c for c in range(n) if c not in anchors), key=lambda c: (sizes[c], c))
    for c in orphans:
        rc = find(c)
        cands = {find(v) for v in adj[c]} - {rc}
        if not cands:
            continue
        tgt = max(sorted(cands), key=lambda r: gsize[r])
        parent[rc] = tgt
        gsize[tgt] += gsize[rc]
    roots = np.array([find(c) for c in range(n)])
    merged = roots[comp]
    _, out = np.unique(merged, return_inverse=True)
    return out.reshape(labels.shape).astype(np.int64)


def superpixel_edges(lab):
    """Binary edge map marking pixels with a differently labeled 4-neighbor."""
    labels = lab.labels if isinstance(lab, SuperpixelLabeling) else np.asarray(lab)
    e = np.zeros(labels.shape, dtype=bool)
    dx = labels[:, 1:] != labels[:, :-1]
    dy = labels[1:, :] != labels[:-1, :]
    e[:, 1:] |= dx
    e[:, :-1] |= dx
    e[1:, :] |= dy
    e[:-1, :] |= dy
    return EdgeMap(e.astype(np.float64))


def connected_components(patch):
    """Label the non-edge regions of a binary edge patch.

    Returns ``(labels, k)``: edge pixels get 0 and the 4-connected regions of
    non-edge pixels are numbered 1..k in raster order of first appearance.
    4-connectivity keeps a one-pixel diagonal edge line from leaking.
    """
    from skimage.measure import label as cc_label

    p = np.asarray(patch).astype(bool)
    labels = cc_label(~p, connectivity=1, background=0)
    return labels.astype(np.int32), int(labels.max())


# ---------------------------------------------------------------------------
# feature channels

_XYZ = np.array([
    [0.430574, 0.341550, 0.178325],
    [0.222015, 0.706655, 0.071330],
    [0.020183, 0.129553, 0.939180],
])
_UN, _VN = 0.197833, 0.468331


def rgb_to_luv(img):
    """Luminance plus two chroma channels, each rescaled to roughly [0, 1].

    RGB is mapped linearly to XYZ, then L = 116 y^(1/3) - 16 (linear below
    y = 0.008856), u = 13 L (u' - u'_n), v = 13 L (v' - v'_n).  The outputs
    are L / 270, (u + 88) / 270 and (v + 134) / 270.
    """
    img = as_image(img)
    if img.shape[2] != 3:
        raise InvalidInputError("rgb_to_luv needs a 3-channel image")
    xyz = img @ _XYZ.T
    x, y, z = xyz[..., 0], xyz[..., 1], xyz[..., 2]
    L = np.where(y > 0.008856, 116.0 * np.cbrt(y) - 16.0, 903.3 * y)
    denom = x + 15.0 * y + 3.0 * z + 1e-35
    u = 13.0 * L * (4.0 * x / denom - _UN)
    v = 13.0 * L * (9.0 * y / denom - _VN)
    return np.stack([L / 270.0, (u + 88.0) / 270.0, (v + 134.0) / 270.0], axis=2)


def _shrink(x, s):
    if s == 1:
        return x
    h, w = (x.shape[0] // s) * s, (x.shape[1] // s) * s
    x = x[:h, :w]
    return x.reshape(h // s, s, w // s, s, *x.shape[2:]).mean(axis=(1, 3))


def feature_channels(img, shrink=2, blur_radii=(0, 2), chn_smooth=1, norm_rad=4, norm_const=0.01):
    """13 low-level channels at 1/``shrink`` resolution, as an (h, w, 13) array.

    Channel order: 3 color (luminance/chroma), then for each blur radius the
    normalized gradient magnitude followed by 4 orientation channels (0, 45,
    90, 135 degrees, hard binned).  Every channel is finally smoothed with a
    triangle filter of radius ``chn_smooth`` (in shrunk pixels).
    """
    stack = raw_channels(img, shrink, blur_radii, norm_rad, norm_const)
    return conv_tri(stack, chn_smooth)


def raw_channels(img, shrink=2, blur_radii=(0, 2), norm_rad=4, norm_const=0.01):
    """``feature_channels`` without the final smoothing step."""
    img = as_image(img)
    if img.shape[2] != 3:
        raise InvalidInputError("feature_channels needs a 3-channel image")
    luv = rgb_to_luv(img)
    chans = [luv[:, :, c] for c in range(3)]
    for r in blur_radii:
        src = conv_tri(luv, r)
        mag = np.full(src.shape[:2], -1.0)
        gxs = np.zeros(src.shape[:2])
        gys = np.zeros(src.shape[:2])
        for c in range(3):
            gx, gy = _centered_gradients(src[:, :, c])
            gx, gy = gx / 2.0, gy / 2.0
            m = np.hypot(gx, gy)
            better = m > mag
            mag = np.where(better, m, mag)
            gxs = np.where(better, gx, gxs)
            gys = np.where(better, gy, gys)
        mag = mag / (conv_tri(mag, norm_rad) + norm_const)
        theta = np.mod(np.arctan2(gys, gxs), np.pi)
        obin = np.mod(np.floor(theta / (np.pi / 4) + 0.5).astype(np.int64), 4)
        chans.append(mag)
        for b in range(4):
            chans.append(np.where(obin == b, mag, 0.0))
    stack = np.stack(chans, axis=2)
    return _shrink(stack, shrink)
