import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from viral.geometry import InvalidArgument, Pose, exp_so3
from viral.lidar import (
    FmmCoefficients,
    LidarConfig,
    LidarFactor,
    LocalMap,
    build_local_map,
    extract_fmm,
    fit_plane,
    lidar_residual,
    voxel_downsample,
)
from viral.solver import NAVSTATE, POSE

from helpers import numeric_jacobian, random_navstate, random_rotation, rel_err


def grid_on_plane(origin, u, v, n_u, n_v, step):
    a, b = np.meshgrid(np.arange(n_u) * step, np.arange(n_v) * step, indexing="ij")
    return np.asarray(origin) + a.reshape(-1, 1) * np.asarray(u) + b.reshape(-1, 1) * np.asarray(v)


def box_world():
    """Floor and two walls away from the origin, patches at least 1.5 m apart."""
    floor = grid_on_plane([-4, -4, -1.5], [1, 0, 0], [0, 1, 0], 36, 33, 0.2)
    wall = grid_on_plane([-4, 4, -1.5], [1, 0, 0], [0, 0, 1], 38, 21, 0.2)
    side = grid_on_plane([5, -4, -1.5], [0, 1, 0], [0, 0, 1], 33, 21, 0.2)
    return np.vstack([floor, wall, side])


def test_touching_patches_can_pass_the_unnormalized_gate():
    # the gate bounds |n*^T x + 1|, i.e. distance scaled by 1/d; a corner far from
    # the origin can yield a tilted fit that passes it
    floor = grid_on_plane([-4, -4, -1.5], [1, 0, 0], [0, 1, 0], 41, 41, 0.2)
    wall = grid_on_plane([-4, 4, -1.5], [1, 0, 0], [0, 0, 1], 41, 21, 0.2)
    m = build_local_map([(Pose.identity(), np.vstack([floor, wall]))], 0.4)
    corner = np.array([[0.0, 3.9, -1.4]])
    c = extract_fmm(corner, Pose.identity(), m, LidarConfig(max_neighbor_dist=1.0))
    assert len(c) == 1 and abs(c.distances(Pose.identity())[0]) > 1e-3


def test_fit_plane_z2():
    pts = np.array([[0, 0, 2], [1, 0, 2], [0, 1, 2], [1, 1, 2], [0.5, 0.3, 2.0]])
    n, ok, _ = fit_plane(pts)
    assert ok
    np.testing.assert_allclose(n, [0, 0, -0.5], atol=1e-12)


def test_fit_plane_through_origin_rejected():
    pts = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0], [0.5, 0.3, 0.0]])
    _, ok, _ = fit_plane(pts)
    assert not ok


def test_fit_plane_collinear_rejected():
    pts = np.array([[1, 1, 1], [2, 2, 2], [3, 3, 3], [4, 4, 4.0]]) + np.array([0, 0, 5.0])
    assert not fit_plane(pts)[1]


def test_fit_plane_noisy_normal(rng):
    R = random_rotation(rng).matrix()
    for _ in range(20):
        local = np.c_[rng.uniform(-1, 1, (20, 2)), np.full(20, 3.0)]
        local[:, 2] += rng.normal(size=20) * 1e-3
        pts = local @ R.T
        n, ok, _ = fit_plane(pts, gate=1.0)
        # SVD oracle on the centered covariance
        c = pts - pts.mean(0)
        oracle = np.linalg.svd(c)[2][-1]
        angle = np.degrees(np.arccos(min(1.0, abs(n @ oracle) / np.linalg.norm(n))))
        truth = np.degrees(np.arccos(min(1.0, abs(n @ R[:, 2]) / np.linalg.norm(n))))
        assert angle < 0.1 and truth < 0.1


def test_gate_uses_unnormalized_form():
    # plane z = 10 -> n* = (0,0,-0.1); a 0.5 m bump gives |n*^T x + 1| = 0.05 (< 0.1) though 0.5 m away
    pts = np.array([[0, 0, 10], [1, 0, 10], [0, 1, 10], [1, 1, 10], [0.5, 0.5, 10.5]])
    assert fit_plane(pts)[1]
    pts = np.array([[0, 0, 2], [1, 0, 2], [0, 1, 2], [1, 1, 2], [0.5, 0.5, 2.5]])
    assert not fit_plane(pts)[1]


def test_voxel_downsample_unique_cells(rng):
    pts = rng.uniform(-3, 3, (5000, 3))
    out = voxel_downsample(pts, 0.4)
    keys = np.floor(out / 0.4).astype(int)
    assert len({tuple(k) for k in keys}) == len(out)
    assert len({tuple(k) for k in np.floor(pts / 0.4).astype(int)}) == len(out)


def test_voxel_keeps_plane_points_exact():
    pts = grid_on_plane([0, 0, 1.3], [1, 0, 0], [0, 1, 0], 30, 30, 0.07)
    out = voxel_downsample(pts, 0.4)
    assert np.all(out[:, 2] == 1.3)


def test_knn_matches_brute_force(rng):
    pts = rng.uniform(-10, 10, (10000, 3))
    m = LocalMap(pts)
    q = rng.uniform(-10, 10, (50, 3))
    d, i = m.knn(q, 5)
    for k in range(50):
        bf = np.sort(np.linalg.norm(pts - q[k], axis=1))[:5]
        np.testing.assert_allclose(d[k], bf, atol=1e-12)


def test_build_local_map_single_identity():
    cloud = box_world()
    m = build_local_map([(Pose.identity(), cloud)], voxel=0.4)
    np.testing.assert_array_equal(m.points, voxel_downsample(cloud, 0.4))


def test_build_local_map_empty():
    with pytest.raises(InvalidArgument):
        build_local_map([], 0.4)


def test_two_views_of_wall_are_coplanar(rng):
    wall = grid_on_plane([-4, 4, -1.5], [1, 0, 0], [0, 0, 1], 41, 21, 0.2)
    kfs = []
    for _ in range(2):
        T = Pose(random_rotation(rng, 0.3), rng.normal(size=3))
        kfs.append((T, T.inverse().apply(wall)))
    m = build_local_map(kfs, 0.4)
    n, ok, _ = fit_plane(m.points, gate=1e-6)
    assert ok
    np.testing.assert_allclose(n / np.linalg.norm(n), [0, -1, 0], atol=1e-9)


def test_extract_at_true_pose_is_exact(rng):
    world = box_world()
    m = build_local_map([(Pose.identity(), world)], 0.4)
    T = Pose(exp_so3([0.05, -0.02, 0.7]), np.array([0.3, -0.2, 0.1]))
    sample = world[rng.choice(len(world), 300, replace=False)]
    c = extract_fmm(T.inverse().apply(sample), T, m)
    assert len(c) > 250
    assert np.abs(c.distances(T)).max() < 1e-9
    np.testing.assert_allclose(np.linalg.norm(c.normal, axis=1), 1.0)
    assert np.all((c.weight > 0) & (c.weight <= 1))


def test_extract_offset_along_normal(rng):
    floor = grid_on_plane([-4, -4, -1.5], [1, 0, 0], [0, 1, 0], 41, 41, 0.2)
    m = build_local_map([(Pose.identity(), floor)], 0.4)
    T = Pose.identity()
    body = floor[::7]
    shifted = Pose(T.rotation, np.array([0, 0, 0.1]))
    c = extract_fmm(body, shifted, m)
    np.testing.assert_allclose(np.abs(c.distances(shifted)), 0.1, atol=1e-9)


def test_extract_far_pose_empty():
    m = build_local_map([(Pose.identity(), box_world())], 0.4)
    c = extract_fmm(box_world()[:100], Pose(translation=np.array([100.0, 0, 0])), m)
    assert len(c) == 0


def test_residual_shift_along_normal(rng):
    c = FmmCoefficients(np.array([[1.0, 2.0, 3.0]]), np.array([[0, 0.6, 0.8]]), np.array([-1.0]), np.array([1.0]))
    R = random_rotation(rng).matrix()
    p = rng.normal(size=3)
    r0, _, _ = lidar_residual(R, p, c, jacobians=False)
    r1, _, _ = lidar_residual(R, p + 0.37 * c.normal[0], c, jacobians=False)
    assert r1[0] - r0[0] == pytest.approx(0.37, abs=1e-12)


def random_coeffs(rng, n=200):
    normal = rng.normal(size=(n, 3))
    normal /= np.linalg.norm(normal, axis=1, keepdims=True)
    return FmmCoefficients(rng.normal(size=(n, 3)) * 5, normal, rng.normal(size=n), rng.uniform(0.1, 1, n))


def test_factor_jacobians_navstate_and_pose(rng):
    c = random_coeffs(rng)
    for _ in range(200):
        x = random_navstate(rng)
        f = LidarFactor(c, 0.05, 15)
        _, Js = f.evaluate([x])
        num = numeric_jacobian(lambda v: f.evaluate(v, False)[0], [x], [NAVSTATE], 0)
        assert rel_err(Js[0], num) < 1e-5
    x = np.r_[random_rotation(rng).quat, rng.normal(size=3)]
    f = LidarFactor(c, 0.05, 6)
    _, Js = f.evaluate([x])
    assert rel_err(Js[0], numeric_jacobian(lambda v: f.evaluate(v, False)[0], [x], [POSE], 0)) < 1e-5


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_rigid_motion_invariance(seed):
    rng = np.random.default_rng(seed)
    c = random_coeffs(rng, 20)
    T = Pose(random_rotation(rng), rng.normal(size=3))
    G = Pose(random_rotation(rng), rng.normal(size=3) * 10)
    r0, _, _ = lidar_residual(T.R, T.t, c, jacobians=False)
    # move the plane: n' = R_G n, d' = d - n'^T t_G
    n2 = c.normal @ G.R.T
    c2 = FmmCoefficients(c.f, n2, c.d - n2 @ G.t, c.weight)
    T2 = G * T
    r1, _, _ = lidar_residual(T2.R, T2.t, c2, jacobians=False)
    np.testing.assert_allclose(r1, r0, atol=1e-10)
