import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import ndimage

from edgeloop.errors import InvalidInputError, ModelFormatError, TrainingError
from edgeloop.imgproc import nms
from edgeloop.sedge import (
    GradientDetector,
    SampleSet,
    StructuredForest,
    detect,
    edges_to_segmentation,
    extract_samples,
    load_model,
    save_model,
    seg_to_edges,
    train_forest,
)
from edgeloop.sedge import features as F
from edgeloop.sedge import model as M


def step_image(angle, c0, c1, size=64, offset=0.0):
    """Two-tone image split by a line through the center at ``angle`` degrees."""
    yy, xx = np.mgrid[0:size, 0:size] - (size - 1) / 2
    t = np.radians(angle)
    side = (xx * np.cos(t) + yy * np.sin(t)) > offset
    img = np.where(side[..., None], np.asarray(c1, float), np.asarray(c0, float))
    return ndimage.gaussian_filter(img, (0.5, 0.5, 0)), side


def side_boundary(side):
    e = np.zeros(side.shape)
    e[:, :-1] = side[:, 1:] != side[:, :-1]
    e[:-1, :] = np.maximum(e[:-1, :], side[1:, :] != side[:-1, :])
    return e


@pytest.fixture(scope="module")
def step_samples():
    rng = np.random.default_rng(0)
    sets = []
    for i in range(16):
        c0, c1 = rng.uniform(0.1, 0.9, (2, 3))
        while np.abs(c0 - c1).max() < 0.3:
            c1 = rng.uniform(0.1, 0.9, 3)
        img, side = step_image(rng.uniform(0, 180), c0, c1, offset=rng.uniform(-8, 8))
        sets.append(extract_samples(img, side_boundary(side), n_pos=60, n_neg=60, rng=i))
    return SampleSet.concat(sets)


@pytest.fixture(scope="module")
def step_forest(step_samples):
    return train_forest(step_samples, n_trees=2, n_feature_probe=200, seed=1)


# ---------------------------------------------------------------- segmentation helpers


def test_segmentation_of_vertical_line():
    p = np.zeros((16, 16), bool)
    p[:, 7] = True
    seg, k = edges_to_segmentation(p)
    assert k == 2
    assert np.all(seg[:, :7] == seg[0, 0]) and np.all(seg[:, 8:] == seg[0, 15])
    assert seg[0, 0] != seg[0, 15]
    assert np.array_equal(seg_to_edges(seg)[:, 6:8].any(axis=1), np.ones(16, bool))


def test_segmentation_blank_patch():
    seg, k = edges_to_segmentation(np.zeros((16, 16), bool))
    assert k == 1 and not seg.any()


# ---------------------------------------------------------------- sampling


def _img(seed=0, size=48):
    return np.random.default_rng(seed).random((size, size, 3))


def test_zero_supervision_gives_only_negatives():
    s = extract_samples(_img(), np.zeros((48, 48)), n_pos=20, n_neg=30, rng=0)
    assert s.n_pos == 0 and s.n_neg == 30
    assert s.raw.shape == (30, F.N_RAW)


def test_vertical_line_labels():
    sup = np.zeros((48, 48))
    sup[:, 20] = 1.0
    s = extract_samples(_img(), sup, n_pos=100, n_neg=10, rng=0)
    assert s.n_pos > 0
    for seg in s.segs[s.positive]:
        e = seg_to_edges(seg)
        assert len(np.unique(seg)) == 2
        # a straight vertical cut: every row switches label at the same column
        cols = {tuple(np.flatnonzero(np.diff(row.astype(int)))) for row in seg}
        assert len(cols) == 1
        assert e.any()


def test_ambiguous_band_not_sampled():
    sup = np.zeros((64, 64))
    sup[:, 28:36] = 0.5
    s = extract_samples(_img(1, 64), sup, n_pos=100, n_neg=400, pos_threshold=0.8,
                        neg_threshold=0.1, exclusion_radius=0, rng=0)
    assert s.n_pos == 0
    # recover negative centers from the feature vector of a probe: compare raw
    # features against every candidate even center
    planes = F.channel_planes(F.pad_image(_img(1, 64)))
    ys, xs = np.mgrid[0:64:2, 0:64:2]
    cand = F.raw_at(planes, ys.ravel() // 2, xs.ravel() // 2).astype(np.float32)
    lut = {c.tobytes(): (y, x) for c, y, x in zip(cand, ys.ravel(), xs.ravel())}
    cols = np.array([lut[r.tobytes()][1] for r in s.raw])
    assert not np.any((cols >= 28) & (cols < 36))


@settings(max_examples=25)
@given(st.integers(0, 2**31))
def test_no_single_region_positive(seed):
    rng = np.random.default_rng(seed)
    sup = (rng.random((40, 40)) < 0.03).astype(float)
    sup[int(rng.integers(0, 40)), :] = rng.random(40)
    s = extract_samples(_img(seed % 7, 40), sup, n_pos=50, n_neg=5, rng=seed)
    for seg in s.segs[s.positive]:
        assert len(np.unique(seg)) >= 2


@given(st.integers(0, 60), st.integers(0, 60), st.integers(0, 2**31))
def test_balanced_sample_set(n_pos, n_neg, seed):
    rng = np.random.default_rng(seed)
    positive = rng.permutation(np.r_[np.ones(n_pos, bool), np.zeros(n_neg, bool)])
    s = SampleSet(rng.random((len(positive), F.N_RAW)).astype(np.float32),
                  np.zeros((len(positive), F.LABEL, F.LABEL), np.uint8), positive)
    b = s.balanced(seed)
    assert b.n_pos == b.n_neg == min(n_pos, n_neg)
    # rows are a subset of the original, in original order, and reproducible
    rows = [np.flatnonzero((s.raw == r).all(axis=1))[0] for r in b.raw]
    assert rows == sorted(rows)
    assert np.array_equal(s.balanced(seed).raw, b.raw)


def test_sampling_errors():
    with pytest.raises(InvalidInputError):
        extract_samples(_img(), np.zeros((40, 40)))
    with pytest.raises(InvalidInputError):
        extract_samples(_img(), np.zeros((48, 48)), labels=np.zeros((4, 4)))


# ---------------------------------------------------------------- training


def test_training_parameter_errors(step_samples):
    with pytest.raises(InvalidInputError):
        train_forest(step_samples, n_trees=0)
    only_neg = step_samples.subset(~step_samples.positive)
    with pytest.raises(TrainingError):
        train_forest(only_neg)


def test_depth_one_split_is_pure():
    # bright-left steps (positives, two-region labels) against flat patches
    sets = []
    for i, (c0, c1) in enumerate([(0.9, 0.1), (0.8, 0.2), (0.85, 0.15), (0.95, 0.3)]):
        img, side = step_image(0, [c0] * 3, [c1] * 3)
        sets.append(extract_samples(img, side_boundary(side), n_pos=30, n_neg=30, rng=i))
    s = SampleSet.concat(sets)
    f = train_forest(s, n_trees=3, max_depth=1, min_leaf=1, n_feature_probe=F.N_FEATURES,
                     frac_per_tree=1.0)
    feats = s.features()
    for t in f.trees:
        assert t.depth() == 1
        go_left = feats[:, t.feature[0]] < t.threshold[0]
        for side in (go_left, ~go_left):
            assert len(np.unique(s.positive[side])) == 1


def test_training_deterministic(step_samples):
    a = train_forest(step_samples, n_trees=2, n_feature_probe=100, seed=5)
    b = train_forest(step_samples, n_trees=2, n_feature_probe=100, seed=5)
    assert M.dumps(a) == M.dumps(b)
    c = train_forest(step_samples, n_trees=2, n_feature_probe=100, seed=6)
    assert M.dumps(a) != M.dumps(c)


def test_tree_structure_invariants(step_forest):
    for t in step_forest.trees:
        internal = t.left >= 0
        assert np.all(t.feature[internal] < F.N_FEATURES)
        assert np.all(t.leaf[~internal] >= 0) and np.all(t.leaf[~internal] < len(t.segs))
        assert t.depth() <= step_forest.params.max_depth


# ---------------------------------------------------------------- detection


def test_gradient_detector_constant_image():
    assert not detect(GradientDetector(), np.full((40, 40, 3), 0.3)).strength.any()


def test_forest_finds_held_out_step(step_forest):
    img, side = step_image(90 - 90, [0.2, 0.6, 0.3], [0.7, 0.2, 0.8], size=64)
    e = nms(detect(step_forest, img)).strength
    on = e >= 0.5 * e.max()
    truth = side_boundary(side) > 0
    dist = ndimage.distance_transform_edt(~truth)
    rows = [y for y in range(64) if on[y].any()]
    near = [y for y in range(64) if (on[y] & (dist[y] <= 1)).any()]
    assert len(near) >= 0.95 * 64
    assert len(rows) >= 0.95 * 64


def test_detect_deterministic_and_bounded(step_forest):
    img = _img(3, 40)
    a = detect(step_forest, img).strength
    b = detect(step_forest, img).strength
    assert np.array_equal(a, b)
    assert a.min() >= 0 and a.max() <= 1


@settings(max_examples=8)
@given(st.integers(0, 2**31), st.sampled_from([(1.0,), (0.5, 1.0, 2.0)]), st.integers(0, 2))
def test_detect_output_in_unit_range(step_forest, seed, scales, sharpen):
    rng = np.random.default_rng(seed)
    img = rng.random((int(rng.integers(32, 48)), int(rng.integers(32, 48)), 3))
    s = detect(step_forest, img, scales=scales, sharpen=sharpen).strength
    assert s.shape == img.shape[:2]
    assert s.min() >= 0 and s.max() <= 1


def test_duplicating_every_tree_leaves_output_unchanged(step_forest):
    twice = StructuredForest(step_forest.trees * 2, step_forest.params)
    img, _ = step_image(30, [0.1, 0.2, 0.3], [0.7, 0.8, 0.6], size=48)
    np.testing.assert_allclose(detect(twice, img).strength, detect(step_forest, img).strength,
                               rtol=0, atol=1e-12)


def test_detect_errors(step_forest):
    with pytest.raises(InvalidInputError):
        detect(step_forest, np.zeros((20, 40, 3)))
    with pytest.raises(InvalidInputError):
        detect(step_forest, np.zeros((40, 40, 3)), stride=3)
    with pytest.raises(InvalidInputError):
        detect("canny", np.zeros((40, 40, 3)))


# ---------------------------------------------------------------- container


def test_model_round_trip(tmp_path, step_forest):
    p = tmp_path / "m.sedg"
    save_model(step_forest, p)
    g = load_model(p)
    assert M.dumps(g) == p.read_bytes()
    img = _img(4, 40)
    assert np.array_equal(detect(g, img).strength, detect(step_forest, img).strength)
    assert p.read_bytes()[:4] == b"SEDG"


def test_model_truncated_and_corrupt(tmp_path, step_forest):
    blob = M.dumps(step_forest)
    for bad in (blob[:-9], blob[:10], blob + b"\0"):
        with pytest.raises(ModelFormatError):
            M.loads(bad)
    flipped = bytearray(blob)
    flipped[len(blob) // 2] ^= 0xFF
    with pytest.raises(ModelFormatError, match="checksum"):
        M.loads(bytes(flipped))
    with pytest.raises(ModelFormatError):
        M.loads(b"XXXX" + blob[4:])


def test_model_recipe_mismatch(step_forest):
    blob = M.dumps(step_forest)
    with pytest.raises(ModelFormatError, match="recipe"):
        M.loads(blob, expected_recipe=F.RECIPE_VERSION + 1)


@settings(max_examples=20)
@given(st.integers(0, 2**31))
def test_model_round_trip_random_payloads(seed):
    from edgeloop.sedge import ForestParams, Tree

    rng = np.random.default_rng(seed)
    trees = []
    for _ in range(int(rng.integers(1, 4))):
        n = int(rng.integers(1, 30))
        nl = int(rng.integers(1, 10))
        trees.append(Tree(
            feature=rng.integers(-1, F.N_FEATURES, n).astype(np.int32),
            threshold=rng.standard_normal(n).astype(np.float32),
            left=rng.integers(-1, n, n).astype(np.int32),
            right=rng.integers(-1, n, n).astype(np.int32),
            leaf=rng.integers(-1, nl, n).astype(np.int32),
            segs=rng.integers(0, 4, (nl, 16, 16)).astype(np.uint8),
        ))
    f = StructuredForest(trees, ForestParams(seed=int(seed)))
    blob = M.dumps(f)
    assert M.dumps(M.loads(blob)) == blob


# ---------------------------------------------------------------- learning signal


@pytest.mark.slow
def test_supervised_forest_beats_gradient():
    from edgeloop.evaluation import benchmark
    from edgeloop.imgproc import gradient_magnitude
    from edgeloop.synthetic import Scene, boundaries

    rng = np.random.default_rng(0)
    sets = []
    for i in range(60):
        img, lab = Scene(np.random.default_rng(rng.integers(2**63))).render(0)
        sets.append(extract_samples(img, boundaries(lab).astype(float), n_pos=120, n_neg=120, rng=i))
    f = train_forest(SampleSet.concat(sets), n_trees=4, n_feature_probe=500)
    val = [Scene(np.random.default_rng(1000 + v)).render(0) for v in range(12)]
    gts = [boundaries(lab) for _, lab in val]
    forest = benchmark([detect(f, im, scales=(1.0,)) for im, _ in val], gts).ods
    grad = benchmark([gradient_magnitude(im) for im, _ in val], gts).ods
    assert forest >= grad + 0.05
