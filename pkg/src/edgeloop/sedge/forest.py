"""Structured random forest training.

At every node the 16x16 segmentation labels of the samples are reduced to a
binary pseudo-label: 256 random pixel pairs give a same-segment indicator
vector per sample, and the sign of its projection onto the first principal
direction splits the samples in two.  The best of ``n_feature_probe`` random
features times 8 quantile thresholds, by Gini gain on those pseudo-labels, is
the split.  Leaves keep the medoid segmentation of the samples reaching them.
"""

from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import List

import numpy as np

from ..errors import InvalidInputError, TrainingError
from . import features as F
from .samples import SampleSet, seg_to_edges


@dataclass
class ForestParams:
    n_trees: int = 8
    max_depth: int = 64
    frac_per_tree: float = 0.25
    min_leaf: int = 8
    n_feature_probe: int = 1000
    n_thresholds: int = 8
    n_pairs: int = 256
    seed: int = 0


@dataclass
class Tree:
    """Flat arrays over nodes; ``left[i] == -1`` marks a leaf whose label is
    ``segs[leaf[i]]``."""

    feature: np.ndarray      # int32
    threshold: np.ndarray    # float32
    left: np.ndarray         # int32
    right: np.ndarray        # int32
    leaf: np.ndarray         # int32, -1 on internal nodes
    segs: np.ndarray         # (n_leaves, 16, 16) uint8

    @property
    def n_nodes(self):
        return len(self.feature)

    def depth(self):
        d = np.zeros(self.n_nodes, np.int64)
        for i in range(self.n_nodes):
            if self.left[i] >= 0:
                d[self.left[i]] = d[i] + 1
                d[self.right[i]] = d[i] + 1
        return int(d.max()) if self.n_nodes else 0


@dataclass
class StructuredForest:
    trees: List[Tree]
    params: ForestParams = field(default_factory=ForestParams)
    recipe_version: int = F.RECIPE_VERSION
    patch_size: int = F.PATCH
    label_size: int = F.LABEL

    def __post_init__(self):
        # leaf edge patches are derived once from the stored segmentations
        self._edges = [seg_to_edges(t.segs).astype(np.float32) for t in self.trees]

    @property
    def n_trees(self):
        return len(self.trees)

    def leaf_edges(self, t):
        return self._edges[t]


def _gini_gain(y, vals, thr):
    """Best (gain, feature column, threshold) over candidate thresholds ``thr`` (m, q)."""
    n = len(y)
    pos = y.sum()
    parent = 1.0 - (pos / n) ** 2 - (1 - pos / n) ** 2
    best = (-np.inf, -1, 0.0)
    yf = y.astype(np.float64)
    step = max(1, 2_000_000 // max(1, n * thr.shape[1]))
    for s in range(0, vals.shape[1], step):
        v = vals[:, s:s + step]
        t = thr[s:s + step]
        lt = v[:, :, None] < t[None]                       # (n, m, q)
        nl = lt.sum(axis=0).astype(np.float64)
        pl = np.einsum("n,nmq->mq", yf, lt)
        nr = n - nl
        pr = pos - pl
        with np.errstate(divide="ignore", invalid="ignore"):
            gl = 1.0 - (pl / nl) ** 2 - ((nl - pl) / nl) ** 2
            gr = 1.0 - (pr / nr) ** 2 - ((nr - pr) / nr) ** 2
            gain = parent - (nl * np.nan_to_num(gl) + nr * np.nan_to_num(gr)) / n
        gain[(nl == 0) | (nr == 0)] = -np.inf
        k = int(np.argmax(gain))
        mi, qi = np.unravel_index(k, gain.shape)
        if gain[mi, qi] > best[0]:
            best = (float(gain[mi, qi]), s + int(mi), float(t[mi, qi]))
    return best


def _pseudo_labels(segs, rng, n_pairs):
    flat = segs.reshape(len(segs), -1)
    i1 = rng.integers(0, flat.shape[1], n_pairs)
    i2 = rng.integers(0, flat.shape[1], n_pairs)
    z = (flat[:, i1] == flat[:, i2]).astype(np.float64)
    zc = z - z.mean(axis=0)
    if not np.any(zc):
        return None, z
    cap = 2048
    sub = zc if len(zc) <= cap else zc[rng.choice(len(zc), cap, replace=False)]
    proj = zc @ _leading_direction(sub)
    return proj > 0, z


def _leading_direction(x, n_iter=30):
    """First principal direction of the centered rows ``x`` (power iteration)."""
    v = np.abs(x).sum(axis=0) + 1e-3
    v /= np.linalg.norm(v)
    for _ in range(n_iter):
        w = x.T @ (x @ v)
        nw = np.linalg.norm(w)
        if nw == 0:
            break
        v = w / nw
    return v


def _medoid(z):
    d = np.sum((z - z.mean(axis=0)) ** 2, axis=1)
    return int(np.argmin(d))


def train_tree(samples, params, tree_index):
    """Train one tree on its own random subset of ``samples``."""
    rng = np.random.default_rng([params.seed, tree_index])
    pos = np.flatnonzero(samples.positive)
    neg = np.flatnonzero(~samples.positive)
    n_each = max(1, int(round(params.frac_per_tree * min(len(pos), len(neg)))))
    idx = np.concatenate([
        np.sort(rng.choice(pos, min(n_each, len(pos)), replace=False)),
        np.sort(rng.choice(neg, min(n_each, len(neg)), replace=False)),
    ])
    raw = samples.raw[idx]
    segs = samples.segs[idx]

    feature, threshold, left, right, leaf = [], [], [], [], []
    leaf_segs = []

    def new_node():
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        leaf.append(-1)
        return len(feature) - 1

    def make_leaf(node, members, z=None):
        if z is None:
            _, z = _pseudo_labels(segs[members], rng, params.n_pairs)
        leaf[node] = len(leaf_segs)
        leaf_segs.append(segs[members[_medoid(z)]])

    root = new_node()
    stack = [(root, np.arange(len(idx)), 0)]
    while stack:
        node, members, depth = stack.pop()
        n = len(members)
        if depth >= params.max_depth or n < 2 * params.min_leaf:
            make_leaf(node, members)
            continue
        y, z = _pseudo_labels(segs[members], rng, params.n_pairs)
        if y is None or y.all() or not y.any():
            make_leaf(node, members, z)
            continue
        m = min(params.n_feature_probe, F.N_FEATURES)
        feats = np.sort(rng.choice(F.N_FEATURES, m, replace=False))
        vals = F.feature_values(raw[members], feats)
        qs = (np.arange(params.n_thresholds) + 0.5) / params.n_thresholds
        qv = vals if n <= 1024 else vals[np.sort(rng.choice(n, 1024, replace=False))]
        thr = np.quantile(qv, qs, axis=0).T.astype(np.float32)
        gain, col, t = _gini_gain(y, vals, thr)
        if not np.isfinite(gain) or gain <= 0:
            make_leaf(node, members, z)
            continue
        go_left = vals[:, col] < np.float32(t)
        nl = int(go_left.sum())
        if nl < params.min_leaf or n - nl < params.min_leaf:
            make_leaf(node, members, z)
            continue
        feature[node] = int(feats[col])
        threshold[node] = t
        lc, rc = new_node(), new_node()
        left[node], right[node] = lc, rc
        # push right first so the left subtree is numbered depth-first
        stack.append((rc, members[~go_left], depth + 1))
        stack.append((lc, members[go_left], depth + 1))
    return Tree(
        feature=np.array(feature, np.int32),
        threshold=np.array(threshold, np.float32),
        left=np.array(left, np.int32),
        right=np.array(right, np.int32),
        leaf=np.array(leaf, np.int32),
        segs=np.stack(leaf_segs).astype(np.uint8),
    )


def _train_one(args):
    return train_tree(*args)


def train_forest(samples, params=None, jobs=1, **overrides):
    """Train a structured forest; the result depends only on samples and params."""
    p = params or ForestParams()
    if overrides:
        p = ForestParams(**{**asdict(p), **overrides})
    if p.n_trees < 1:
        raise InvalidInputError(f"n_trees must be >= 1, got {p.n_trees}")
    if p.max_depth < 1 or p.min_leaf < 1 or p.n_feature_probe < 1 or not 0 < p.frac_per_tree <= 1:
        raise InvalidInputError(f"invalid forest parameters: {p}")
    if not isinstance(samples, SampleSet):
        raise InvalidInputError("train_forest expects a SampleSet")
    if samples.n_pos == 0 or samples.n_neg == 0:
        raise TrainingError(f"need both classes, got {samples.n_pos} positives and {samples.n_neg} negatives")
    args = [(samples, p, t) for t in range(p.n_trees)]
    if jobs and jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            trees = list(ex.map(_train_one, args))
    else:
        trees = [_train_one(a) for a in args]
    return StructuredForest(trees, p)
