import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import dijkstra

from edgeloop.errors import FormatError, InvalidInputError
from edgeloop.flow import (
    InterpParams,
    aee,
    edge_cost_map,
    flow_to_rgb,
    geodesic_knn,
    interpolate,
    read_flo,
    smooth_flow,
    write_flo,
)
from edgeloop.matching import MatchSet


def grid_graph(cost):
    """Sparse 4-connected graph with edge weight (c_p + c_q) / 2."""
    h, w = cost.shape
    idx = np.arange(h * w).reshape(h, w)
    a = np.concatenate([idx[:, :-1].ravel(), idx[:-1, :].ravel()])
    b = np.concatenate([idx[:, 1:].ravel(), idx[1:, :].ravel()])
    c = cost.ravel()
    wgt = 0.5 * (c[a] + c[b])
    ok = np.isfinite(wgt)
    g = coo_matrix((wgt[ok], (a[ok], b[ok])), shape=(h * w, h * w))
    return (g + g.T).tocsr()


def brute_knn(cost, seeds, k):
    """Single-source Dijkstra from every seed, then sort per pixel."""
    d = dijkstra(grid_graph(cost), directed=False, indices=seeds)   # (m, n)
    order = np.lexsort((np.arange(len(seeds))[:, None].repeat(d.shape[1], 1), d), axis=0)
    return order[:k].T, np.take_along_axis(d, order[:k], axis=0).T


def matches(src, disp, dims):
    src = np.asarray(src, float)
    data = np.column_stack([src, src + np.asarray(disp, float), np.ones(len(src))])
    return MatchSet(data, dims, (dims[0] + 100, dims[1] + 100))


def shifted_matches(src, disp, dims):
    # keep targets in bounds regardless of sign by enlarging the target frame
    src = np.asarray(src, float)
    data = np.column_stack([src, src + np.asarray(disp, float) + 50, np.ones(len(src))])
    ms = MatchSet(data, dims, (dims[0] + 200, dims[1] + 200))
    ms.data[:, 2:4] -= 50
    return ms


# ---------------------------------------------------------------- cost / geodesics


def test_cost_map_basics():
    e = np.zeros((4, 5))
    e[1, 2] = 0.5
    np.testing.assert_allclose(edge_cost_map(e, alpha=10, eps=0.1), 0.1 + 10 * e)
    np.testing.assert_allclose(edge_cost_map(np.random.rand(3, 3), alpha=0, eps=0.1), 0.1)
    with pytest.raises(InvalidInputError):
        edge_cost_map(e, alpha=-1)


def test_uniform_cost_is_scaled_manhattan():
    cost = edge_cost_map(np.zeros((6, 7)), 100, 0.001)
    ms = matches([[2, 3]], [[0, 0]], (7, 6))
    idx, dist = geodesic_knn(cost, ms, 1)
    yy, xx = np.mgrid[0:6, 0:7]
    assert np.all(idx[..., 0] == 0)
    np.testing.assert_allclose(dist[..., 0], 0.001 * (abs(xx - 2) + abs(yy - 3)))


def test_wall_forces_detour():
    # 7x7, wall in column 3 with a gap at the bottom row
    e = np.zeros((7, 7))
    e[:6, 3] = 1.0
    cost = edge_cost_map(e, alpha=1000.0, eps=1.0)
    ms = matches([[1, 0]], [[0, 0]], (7, 7))
    _, dist = geodesic_knn(cost, ms, 1)
    # to (5, 0): down 6 to row 6, right 4, up 6 = 16 unit steps
    assert dist[0, 5, 0] == pytest.approx(16.0)
    # straight through the wall would cost 4 steps plus 1000 per wall half-edge pair
    assert dist[0, 5, 0] < 4 + 1000


def test_infinite_wall_separates_sides():
    cost = np.ones((7, 7))
    cost[:, 3] = np.inf
    ms = matches([[1, 3], [5, 3]], [[0, 0], [0, 0]], (7, 7))
    idx, dist = geodesic_knn(cost, ms, 2)
    assert np.all(idx[:, :3, 0] == 0) and np.all(idx[:, 4:, 0] == 1)
    assert np.all(idx[:, :3, 1] == -1) and np.all(np.isinf(dist[:, :3, 1]))


def test_ties_break_to_lower_index():
    cost = np.ones((1, 5))
    ms = matches([[4, 0], [0, 0]], [[0, 0], [0, 0]], (5, 1))
    idx, dist = geodesic_knn(cost, ms, 2)
    assert idx[0, 2].tolist() == [0, 1]
    assert dist[0, 2].tolist() == [2.0, 2.0]


def test_geodesic_empty_rejected():
    with pytest.raises(InvalidInputError):
        geodesic_knn(np.ones((3, 3)), MatchSet(np.zeros((0, 5)), (3, 3), (3, 3)), 1)


def _random_instance(seed):
    rng = np.random.default_rng(seed)
    h, w = rng.integers(1, 17, 2)
    n = int(rng.integers(1, min(h * w, 12) + 1))
    flat = rng.choice(h * w, n, replace=False)
    src = np.column_stack([flat % w, flat // w])
    # small-integer costs make ties frequent; ties must resolve to lower index
    cost = rng.integers(1, 5, (h, w)).astype(float) + (rng.random() < 0.5) * rng.random((h, w))
    k = int(rng.integers(1, n + 1))
    return cost, matches(src, np.zeros_like(src), (w, h)), flat, k


@given(st.integers(0, 2**31))
def test_geodesic_knn_equals_brute_force(seed):
    cost, ms, flat, k = _random_instance(seed)
    idx, dist = geodesic_knn(cost, ms, k)
    bi, bd = brute_knn(cost, flat, k)
    h, w = cost.shape
    np.testing.assert_allclose(dist.reshape(h * w, k), bd, rtol=0, atol=1e-9)
    got = idx.reshape(h * w, k)
    np.testing.assert_array_equal(got, bi)


@given(st.integers(0, 2**31), st.floats(0, 50), st.floats(0, 50))
def test_geodesic_monotone_in_alpha(seed, a1, a2):
    lo, hi = sorted((a1, a2))
    rng = np.random.default_rng(seed)
    e = rng.random((8, 9))
    ms = matches([[1, 1], [7, 6], [4, 2]], np.zeros((3, 2)), (9, 8))
    _, dl = geodesic_knn(edge_cost_map(e, lo), ms, 3)
    _, dh = geodesic_knn(edge_cost_map(e, hi), ms, 3)
    # compare per (pixel, match) rather than per rank
    il, _ = geodesic_knn(edge_cost_map(e, lo), ms, 3)
    ih, _ = geodesic_knn(edge_cost_map(e, hi), ms, 3)
    for m in range(3):
        assert np.all(dl[il == m] <= dh[ih == m] + 1e-9)


@given(st.integers(0, 2**31))
def test_geodesic_triangle_inequality(seed):
    rng = np.random.default_rng(seed)
    cost = edge_cost_map(rng.random((7, 8)), 20)
    ms = matches([[0, 0], [7, 6], [3, 3]], np.zeros((3, 2)), (8, 7))
    idx, dist = geodesic_knn(cost, ms, 3)
    d = np.zeros((7, 8, 3))
    for m in range(3):
        d[..., m] = np.where(idx == m, dist, 0).sum(axis=2)
    step_x = 0.5 * (cost[:, 1:] + cost[:, :-1])
    step_y = 0.5 * (cost[1:, :] + cost[:-1, :])
    assert np.all(d[:, 1:] <= d[:, :-1] + step_x[..., None] + 1e-9)
    assert np.all(d[:, :-1] <= d[:, 1:] + step_x[..., None] + 1e-9)
    assert np.all(d[1:] <= d[:-1] + step_y[..., None] + 1e-9)
    assert np.all(d[:-1] <= d[1:] + step_y[..., None] + 1e-9)


# ---------------------------------------------------------------- interpolation


@pytest.mark.parametrize("mode", ["nw", "la"])
def test_single_match_constant(mode):
    ms = matches([[3, 4]], [[2, -1]], (8, 9))
    f = interpolate(ms, np.zeros((9, 8)), mode=mode)
    assert np.all(f == [2, -1])


def _affine_instance(seed, h=20, w=24, n=30):
    rng = np.random.default_rng(seed)
    A = rng.uniform(-0.2, 0.2, (2, 2))
    b = rng.uniform(-3, 3, 2)
    flat = rng.choice(h * w, n, replace=False)
    src = np.column_stack([flat % w, flat // w]).astype(float)
    disp = src @ A.T + b
    yy, xx = np.mgrid[0:h, 0:w]
    truth = np.stack([xx, yy], axis=-1) @ A.T + b
    return shifted_matches(src, disp, (w, h)), truth


def test_la_reconstructs_affine():
    ms, truth = _affine_instance(0)
    f = interpolate(ms, np.zeros(truth.shape[:2]), mode="la", k=len(ms))
    assert np.abs(f - truth).max() < 1e-6


def test_wall_step_discontinuity():
    e = np.zeros((7, 7))
    e[:, 3] = 1.0
    ms = shifted_matches([[1, 3], [5, 3]], [[5, 0], [-5, 0]], (7, 7))
    f = interpolate(ms, e, InterpParams(k=1, alpha=1e6, mode="nw"))
    assert np.all(f[:, :3] == [5, 0]) and np.all(f[:, 4:] == [-5, 0])


@given(st.integers(0, 2**31), st.floats(-9, 9), st.floats(-9, 9), st.sampled_from(["nw", "la"]))
def test_translation_exact(seed, dx, dy, mode):
    # dyadic displacements keep src + d - src exact in floating point
    dx, dy = round(dx * 64) / 64, round(dy * 64) / 64
    rng = np.random.default_rng(seed)
    flat = rng.choice(12 * 10, int(rng.integers(1, 20)), replace=False)
    src = np.column_stack([flat % 12, flat // 12])
    ms = shifted_matches(src, np.tile([dx, dy], (len(src), 1)), (12, 10))
    f = interpolate(ms, rng.random((10, 12)), mode=mode, k=int(rng.integers(1, 10)))
    assert np.all(ms.displacement == [dx, dy])
    assert np.all(f == [dx, dy])


@given(st.integers(0, 2**31))
def test_nw_inside_neighbor_hull(seed):
    rng = np.random.default_rng(seed)
    flat = rng.choice(10 * 11, 15, replace=False)
    src = np.column_stack([flat % 11, flat // 11])
    ms = shifted_matches(src, rng.uniform(-5, 5, (15, 2)), (11, 10))
    p = InterpParams(k=4, mode="nw")
    e = rng.random((10, 11))
    f = interpolate(ms, e, p)
    idx, _ = geodesic_knn(edge_cost_map(e, p.alpha, p.eps), ms, 4)
    nb = ms.displacement[idx]                         # (h, w, k, 2)
    assert np.all(f >= nb.min(axis=2) - 1e-9)
    assert np.all(f <= nb.max(axis=2) + 1e-9)


def test_interpolate_errors():
    empty = MatchSet(np.zeros((0, 5)), (4, 4), (4, 4))
    with pytest.raises(InvalidInputError):
        interpolate(empty, np.zeros((4, 4)))
    with pytest.raises(InvalidInputError):
        interpolate(matches([[0, 0]], [[0, 0]], (4, 4)), np.zeros((4, 4)), mode="tv")


# ---------------------------------------------------------------- smoothing


def test_smooth_identity_and_constant(rng):
    f = rng.random((6, 7, 2))
    assert np.array_equal(smooth_flow(f, np.zeros((6, 7)), n_iters=0), f)
    c = np.full((6, 7, 2), 1.5)
    np.testing.assert_allclose(smooth_flow(c, rng.random((6, 7)), n_iters=10), c)


def test_smooth_variance_decreases_monotonically():
    rng = np.random.default_rng(7)
    f = np.full((16, 16, 2), 2.0) + rng.standard_normal((16, 16, 2))
    z = np.zeros((16, 16))
    var = [f.var()]
    for _ in range(50):
        f = smooth_flow(f, z, n_iters=1)
        var.append(f.var())
    assert all(b < a for a, b in zip(var, var[1:]))


def test_smooth_respects_edges():
    f = np.zeros((8, 8, 2))
    f[:, 4:] = 5.0
    e = np.zeros((8, 8))
    e[:, 3:5] = 1.0
    out = smooth_flow(f, e, n_iters=20, alpha=50)
    assert np.abs(out - f).max() < 1e-6


# ---------------------------------------------------------------- colorization


def test_zero_flow_is_white():
    assert np.all(flow_to_rgb(np.zeros((3, 4, 2))) == 1.0)


def test_full_vector_hue_zero_is_red():
    f = np.zeros((1, 2, 2))
    f[0, 0] = (4.0, 0.0)
    rgb = flow_to_rgb(f, max_mag=4.0)
    np.testing.assert_allclose(rgb[0, 0], [1.0, 0.0, 0.0])


def test_flow_to_rgb_rejects_nan():
    with pytest.raises(InvalidInputError):
        flow_to_rgb(np.full((2, 2, 2), np.nan))


def _hsv(rgb):
    from skimage.color import rgb2hsv

    return rgb2hsv(rgb)


@given(arrays(np.float64, (5, 6, 2), elements=st.floats(-10, 10)), st.floats(0, 360))
def test_flow_hue_rotation_equivariance(f, theta):
    mag = np.hypot(f[..., 0], f[..., 1])
    keep = (mag > 0.5) & (mag < 9)                     # well-defined, unsaturated hue
    t = np.radians(theta)
    R = np.array([[np.cos(t), -np.sin(t)], [np.sin(t), np.cos(t)]])
    g = f @ R.T
    a = _hsv(flow_to_rgb(f, max_mag=10.0))
    b = _hsv(flow_to_rgb(g, max_mag=10.0))
    dh = (b[..., 0] - a[..., 0]) * 360 - theta
    dh = (dh + 180) % 360 - 180
    assert np.all(np.abs(dh[keep]) < 1e-6)
    np.testing.assert_allclose(a[..., 1], b[..., 1], atol=1e-9)


def test_default_scale_floor():
    f = np.zeros((2, 2, 2))
    f[0, 0] = (0.5, 0)
    # 99th percentile < 1 px, so the scale floors to 1 and saturation is 0.5
    hsv = _hsv(flow_to_rgb(f))
    assert hsv[0, 0, 1] == pytest.approx(0.5)


# ---------------------------------------------------------------- .flo


def test_flo_documented_bytes(tmp_path):
    p = tmp_path / "a.flo"
    write_flo(np.array([[[1.5, -2.0]]]), p)
    data = p.read_bytes()
    assert data.hex() == "50494548" "01000000" "01000000" "0000c03f" "000000c0"
    assert len(data) == 20


@given(st.integers(1, 6), st.integers(1, 6), st.data())
def test_flo_round_trip_bit_exact(tmp_path_factory, h, w, data):
    f = data.draw(arrays(np.float32, (h, w, 2), elements=st.floats(width=32, allow_nan=False,
                                                                   allow_infinity=False)))
    p = tmp_path_factory.mktemp("flo") / "f.flo"
    write_flo(f, p)
    g = read_flo(p)
    assert g.astype(np.float32).tobytes() == f.tobytes()
    write_flo(g, p)
    assert p.read_bytes()[12:] == f.astype("<f4").tobytes()


def test_flo_bad_magic_and_truncation(tmp_path):
    p = tmp_path / "bad.flo"
    p.write_bytes(struct.pack("<fii", 0.0, 1, 1) + b"\0" * 8)
    with pytest.raises(FormatError):
        read_flo(p)
    p.write_bytes(struct.pack("<fii", 202021.25, 2, 2) + b"\0" * 8)
    with pytest.raises(FormatError):
        read_flo(p)


# ---------------------------------------------------------------- aee


def test_aee_examples(rng):
    f = rng.random((3, 3, 2))
    assert aee(f, f) == 0
    assert aee(np.tile([3.0, 4.0], (2, 2, 1)), np.zeros((2, 2, 2))) == 5.0
    with pytest.raises(InvalidInputError):
        aee(f, f, mask=np.zeros((3, 3), bool))


@given(arrays(np.float64, (4, 4, 2), elements=st.floats(-50, 50)),
       arrays(np.float64, (4, 4, 2), elements=st.floats(-50, 50)),
       arrays(np.bool_, (4, 4)))
def test_aee_brute_force(a, b, m):
    vals = [np.sqrt((a[y, x, 0] - b[y, x, 0]) ** 2 + (a[y, x, 1] - b[y, x, 1]) ** 2)
            for y in range(4) for x in range(4) if m[y, x]]
    if not vals:
        return
    assert aee(a, b, m) == pytest.approx(sum(vals) / len(vals), rel=1e-12, abs=1e-12)
