import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from canonreg.errors import BadParameter, EmptyCloud
from canonreg.geom import (
    KnnIndex,
    PointCloud,
    RigidTransform,
    apply_transform,
    bounding_box,
    compose,
    invert,
    knn_query,
    random_transform,
    read_ply,
    read_transform,
    rot_z,
    voxel_downsample,
    write_ply,
    write_transform,
)

seeds = st.integers(0, 2**32 - 1)


def test_identity_transform_leaves_cloud():
    pts = np.random.default_rng(0).normal(size=(30, 3))
    out = apply_transform(RigidTransform.identity(), pts)
    np.testing.assert_array_equal(out.points, pts)


def test_rz90_rotates_x_to_y():
    t = RigidTransform(rot_z(np.pi / 2), np.zeros(3))
    np.testing.assert_allclose(apply_transform(t, [[1.0, 0, 0]]).points, [[0, 1, 0]], atol=1e-15)


def test_inverse_round_trip():
    rng = np.random.default_rng(1)
    t = random_transform(rng)
    pts = rng.normal(size=(50, 3))
    back = apply_transform(invert(t), apply_transform(t, pts))
    np.testing.assert_allclose(back.points, pts, atol=1e-12)


def test_invert_cases():
    ident = invert(RigidTransform.identity())
    np.testing.assert_array_equal(ident.rotation, np.eye(3))
    np.testing.assert_array_equal(ident.translation, np.zeros(3))
    p = np.array([0.3, -2.0, 5.0])
    np.testing.assert_array_equal(invert(RigidTransform(np.eye(3), p)).translation, -p)

    t = random_transform(np.random.default_rng(2))
    ti = invert(t)
    np.testing.assert_allclose(ti.rotation, t.rotation.T, atol=0)
    np.testing.assert_allclose(ti.translation, -t.rotation.T @ t.translation, atol=1e-15)
    c = compose(t, ti)
    np.testing.assert_allclose(c.rotation, np.eye(3), atol=1e-12)
    np.testing.assert_allclose(c.translation, np.zeros(3), atol=1e-12)


def test_compose_cases():
    c = compose(RigidTransform.identity(), RigidTransform.identity())
    np.testing.assert_allclose(c.as_matrix(), np.eye(4), atol=0)
    rz = RigidTransform(rot_z(np.pi / 2), np.zeros(3))
    np.testing.assert_allclose(compose(rz, rz).rotation, rot_z(np.pi), atol=1e-15)

    rng = np.random.default_rng(3)
    a, b = random_transform(rng), random_transform(rng)
    pts = rng.normal(size=(20, 3))
    np.testing.assert_allclose(
        apply_transform(compose(a, b), pts).points, apply_transform(a, apply_transform(b, pts)).points, atol=1e-12
    )


def test_invalid_rotation_rejected():
    with pytest.raises(BadParameter):
        RigidTransform(np.diag([1.0, 1.0, -1.0]), np.zeros(3))


def test_bounding_box_cases():
    cube = np.array([[i, j, k] for i in (0, 1) for j in (0, 1) for k in (0, 1)], dtype=float)
    box = bounding_box(cube)
    np.testing.assert_array_equal(box.min, [0, 0, 0])
    np.testing.assert_array_equal(box.max, [1, 1, 1])
    p = np.array([[0.5, -1.0, 2.0]])
    box = bounding_box(p)
    np.testing.assert_array_equal(box.min, p[0])
    np.testing.assert_array_equal(box.max, p[0])
    with pytest.raises(EmptyCloud):
        bounding_box(np.zeros((0, 3)))


def test_bounding_box_matches_linear_scan():
    pts = np.random.default_rng(4).uniform(-3, 3, (100, 3))
    lo, hi = [np.inf] * 3, [-np.inf] * 3
    for p in pts:
        for d in range(3):
            lo[d] = min(lo[d], p[d])
            hi[d] = max(hi[d], p[d])
    box = bounding_box(pts)
    np.testing.assert_array_equal(box.min, lo)
    np.testing.assert_array_equal(box.max, hi)


def test_voxel_downsample_cases():
    out = voxel_downsample([[0.01, 0.01, 0.01], [0.03, 0.05, 0.07]], 0.1)
    np.testing.assert_allclose(out.points, [[0.02, 0.03, 0.04]])
    distinct = np.array([[0.05, 0.05, 0.05], [1.05, 0.05, 0.05], [0.05, 2.05, 0.05]])
    out = voxel_downsample(distinct, 0.1)
    assert sorted(map(tuple, out.points)) == sorted(map(tuple, distinct))
    with pytest.raises(BadParameter):
        voxel_downsample(distinct, 0.0)
    with pytest.raises(BadParameter):
        voxel_downsample(distinct, -1)


def test_voxel_downsample_count_matches_hash_set():
    pts = np.random.default_rng(5).uniform(0, 1, (1000, 3))
    cells = {tuple(int(np.floor(c / 0.1)) for c in p) for p in pts}
    assert len(voxel_downsample(pts, 0.1)) == len(cells)


def test_voxel_boundary_goes_to_lower_cell():
    out = voxel_downsample([[0.0, 0.0, 0.0], [0.1, 0.0, 0.0]], 0.1)
    # 0.1 / 0.1 == 1.0 exactly: upper point starts a new cell
    assert len(out) == 2


@settings(max_examples=30, deadline=None)
@given(seeds)
def test_voxel_downsample_idempotent(seed):
    pts = np.random.default_rng(seed).uniform(-1, 1, (300, 3))
    once = voxel_downsample(pts, 0.2)
    twice = voxel_downsample(once, 0.2)
    np.testing.assert_array_equal(once.points, twice.points)


def test_knn_cases():
    pts = np.random.default_rng(6).normal(size=(20, 3))
    idx = KnnIndex(pts)
    res = knn_query(idx, pts[7], 1)
    assert res == [(7, 0.0)]
    assert len(knn_query(idx, np.zeros(3), 50)) == 20
    with pytest.raises(EmptyCloud):
        knn_query(KnnIndex(np.zeros((0, 3))), np.zeros(3), 1)
    with pytest.raises(BadParameter):
        knn_query(idx, np.zeros(3), 0)


def _brute_knn(pts, q, k):
    d = np.sqrt(((pts - q) ** 2).sum(axis=1))
    order = sorted(range(len(pts)), key=lambda i: (d[i], i))[:k]
    return order, d[order]


def test_knn_matches_exhaustive_sort():
    rng = np.random.default_rng(7)
    pts = rng.normal(size=(200, 3))
    idx = KnnIndex(pts)
    for q in rng.normal(size=(25, 3)):
        res = knn_query(idx, q, 5)
        order, dist = _brute_knn(pts, q, 5)
        assert [i for i, _ in res] == order
        np.testing.assert_allclose([d for _, d in res], dist, rtol=0, atol=1e-12)
        assert all(a[1] <= b[1] for a, b in zip(res, res[1:]))


@settings(max_examples=10, deadline=None)
@given(seeds, st.integers(1, 1000))
def test_knn_equals_brute_force_up_to_1000_points(seed, n):
    rng = np.random.default_rng(seed)
    pts = rng.uniform(-1, 1, (n, 3))
    q = rng.uniform(-1, 1, 3)
    k = int(rng.integers(1, 12))
    res = knn_query(KnnIndex(pts), q, k)
    order, _ = _brute_knn(pts, q, k)
    assert [i for i, _ in res] == order


@settings(max_examples=50, deadline=None)
@given(seeds)
def test_transform_preserves_distances(seed):
    rng = np.random.default_rng(seed)
    t = random_transform(rng, 10.0)
    a, b = rng.normal(size=(2, 40, 3))
    ta, tb = t.apply(a), t.apply(b)
    np.testing.assert_allclose(np.linalg.norm(ta - tb, axis=1), np.linalg.norm(a - b, axis=1), rtol=0, atol=1e-9)


@settings(max_examples=50, deadline=None)
@given(seeds)
def test_invert_involution(seed):
    t = random_transform(np.random.default_rng(seed), 5.0)
    tt = invert(invert(t))
    np.testing.assert_allclose(tt.rotation, t.rotation, atol=1e-12)
    np.testing.assert_allclose(tt.translation, t.translation, atol=1e-12)


def test_ply_round_trip(tmp_path):
    pts = np.random.default_rng(8).normal(size=(37, 3)) * 1e3
    write_ply(tmp_path / "a.ply", pts)
    back = read_ply(tmp_path / "a.ply")
    np.testing.assert_array_equal(back.points, pts)
    text = (tmp_path / "a.ply").read_text()
    assert "element vertex 37" in text and "property double x" in text


def test_empty_ply_round_trip(tmp_path):
    write_ply(tmp_path / "e.ply", np.zeros((0, 3)))
    assert len(read_ply(tmp_path / "e.ply")) == 0


def test_transform_json_round_trip(tmp_path):
    t = random_transform(np.random.default_rng(9))
    write_transform(tmp_path / "t.json", t)
    d = json.loads((tmp_path / "t.json").read_text())
    assert len(d["rotation"]) == 9 and len(d["translation"]) == 3
    np.testing.assert_array_equal(d["rotation"], t.rotation.reshape(-1))
    back = read_transform(tmp_path / "t.json")
    np.testing.assert_array_equal(back.as_matrix(), t.as_matrix())


def test_point_cloud_is_immutable():
    pc = PointCloud(np.zeros((3, 3)))
    with pytest.raises(ValueError):
        pc.points[0, 0] = 1.0
    with pytest.raises(BadParameter):
        PointCloud([[np.nan, 0, 0]])
