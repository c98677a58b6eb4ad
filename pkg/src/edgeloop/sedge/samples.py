"""Training samples: patch features paired with 16x16 structured labels."""

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from ..errors import InvalidInputError
from ..imgproc import EdgeMap, as_image, connected_components
from . import features as F


@dataclass
class SampleSet:
    """``raw``: (n, N_RAW) float32 compact features; ``segs``: (n, 16, 16)
    uint8 segment labels; ``positive``: (n,) bool.  Negatives have a single
    segment."""

    raw: np.ndarray
    segs: np.ndarray
    positive: np.ndarray

    def __len__(self):
        return len(self.positive)

    @property
    def n_pos(self):
        return int(self.positive.sum())

    @property
    def n_neg(self):
        return int((~self.positive).sum())

    def subset(self, idx):
        return SampleSet(self.raw[idx], self.segs[idx], self.positive[idx])

    def features(self):
        return F.expand(self.raw)

    def balanced(self, rng=None):
        """Equal numbers of positives and negatives: a random subset of the larger class, order kept."""
        pos = np.flatnonzero(self.positive)
        neg = np.flatnonzero(~self.positive)
        n = min(len(pos), len(neg))
        rng = np.random.default_rng(rng)
        if len(pos) > n:
            pos = rng.choice(pos, n, replace=False)
        if len(neg) > n:
            neg = rng.choice(neg, n, replace=False)
        return self.subset(np.sort(np.concatenate([pos, neg])))

    @staticmethod
    def empty():
        return SampleSet(np.zeros((0, F.N_RAW), np.float32), np.zeros((0, F.LABEL, F.LABEL), np.uint8),
                         np.zeros(0, bool))

    @staticmethod
    def concat(sets):
        sets = [s for s in sets if len(s)]
        if not sets:
            return SampleSet.empty()
        return SampleSet(np.concatenate([s.raw for s in sets]), np.concatenate([s.segs for s in sets]),
                         np.concatenate([s.positive for s in sets]))


def edges_to_segmentation(edge_patch):
    """Segment labels (0-based) for a binary edge patch, plus the region count.

    Non-edge regions come from ``connected_components``; each edge pixel joins
    the nearest region.
    """
    lab, k = connected_components(edge_patch)
    if k == 0:
        return np.zeros(lab.shape, np.uint8), 1
    if (lab == 0).any():
        _, (iy, ix) = ndimage.distance_transform_edt(lab == 0, return_indices=True)
        lab = lab[iy, ix]
    return (lab - 1).astype(np.uint8), k


def seg_to_edges(seg):
    """One-sided boundary of a segmentation: pixel differs from right or lower neighbor."""
    seg = np.asarray(seg)
    e = np.zeros(seg.shape, dtype=bool)
    e[..., :, :-1] |= seg[..., :, 1:] != seg[..., :, :-1]
    e[..., :-1, :] |= seg[..., 1:, :] != seg[..., :-1, :]
    return e


def _even_centers(mask):
    ys, xs = np.nonzero(mask)
    c = np.unique(np.stack([ys - ys % 2, xs - xs % 2], axis=1), axis=0)
    return c


def extract_samples(img, supervision, n_pos=500, n_neg=500, pos_threshold=0.8, neg_threshold=0.1,
                    exclusion=None, exclusion_radius=8, rng=None, labels=None):
    """Harvest positive and negative patches from one image.

    Positives are centered near pixels where ``supervision >= pos_threshold``;
    their label is the binary edge map ``labels`` (by default the
    thresholded supervision) in the 16x16 window, and patches whose label
    has a single region are dropped.  Negatives are
    drawn uniformly from pixels outside ``exclusion`` (by default the
    supervision dilated by ``exclusion_radius`` and compared against
    ``neg_threshold``).  Centers lie on the even pixel grid that detection
    evaluates.
    """
    img = as_image(img)
    if img.shape[2] != 3:
        raise InvalidInputError("extract_samples needs a 3-channel image")
    sup = supervision.strength if isinstance(supervision, EdgeMap) else np.asarray(supervision, float)
    if sup.shape != img.shape[:2]:
        raise InvalidInputError("image and supervision sizes differ")
    rng = np.random.default_rng(rng)
    h, w = sup.shape
    pos_mask = sup >= pos_threshold
    if exclusion is None:
        fp = _disk(exclusion_radius)
        exclusion = ndimage.grey_dilation(sup, footprint=fp, mode="constant", cval=0.0) >= neg_threshold
    exclusion = np.asarray(exclusion, bool)

    lab_mask = pos_mask if labels is None else np.asarray(labels, bool)
    if lab_mask.shape != pos_mask.shape:
        raise InvalidInputError("label map and supervision sizes differ")
    padded_sup = np.pad(lab_mask, F.PAD, mode="constant")
    pos_c = _even_centers(pos_mask)
    if len(pos_c) > n_pos:
        pos_c = pos_c[np.sort(rng.choice(len(pos_c), n_pos, replace=False))]
    keep, segs = [], []
    half = F.LABEL // 2
    for y, x in pos_c:
        win = padded_sup[y + F.PAD - half:y + F.PAD + half, x + F.PAD - half:x + F.PAD + half]
        seg, k = edges_to_segmentation(win)
        if k < 2:
            continue
        keep.append((y, x))
        segs.append(seg)
    neg_mask = ~exclusion
    neg_mask[1::2, :] = False
    neg_mask[:, 1::2] = False
    ny, nx = np.nonzero(neg_mask)
    if len(ny) > n_neg:
        pick = np.sort(rng.choice(len(ny), n_neg, replace=False))
        ny, nx = ny[pick], nx[pick]
    centers = np.array(keep + list(zip(ny.tolist(), nx.tolist())), dtype=np.int64).reshape(-1, 2)
    if len(centers) == 0:
        return SampleSet.empty()
    planes = F.channel_planes(F.pad_image(img))
    raw = F.raw_at(planes, centers[:, 0] // F.SHRINK, centers[:, 1] // F.SHRINK)
    all_segs = np.zeros((len(centers), F.LABEL, F.LABEL), np.uint8)
    if segs:
        all_segs[:len(segs)] = np.stack(segs)
    positive = np.zeros(len(centers), bool)
    positive[:len(keep)] = True
    return SampleSet(raw.astype(np.float32), all_segs, positive)


def _disk(r):
    r = int(r)
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
    return (yy * yy + xx * xx) <= r * r
