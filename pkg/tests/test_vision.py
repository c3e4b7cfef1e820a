import numpy as np
import pytest

from viral.geometry import Pose, exp_so3
from viral.lidar import build_local_map
from viral.solver import NAVSTATE, Euclidean, Factor, Problem, _free_layout, arctan, linearize
from viral.vision import (
    BehindCamera,
    CameraModel,
    MmmConfig,
    VisualFactor,
    back_project,
    compensate_delay,
    depth_in_anchor,
    mmm_marginalize,
    mmm_marginalize_batch,
    observe,
    project,
    triangulate,
    visual_residual,
)

from helpers import numeric_jacobian, perturb_navstate, random_navstate, rel_err
from test_lidar import grid_on_plane

# forward-looking stereo pair: camera z along body x
R_BC = np.array([[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]])
CAMS = [CameraModel(400, 400, 376, 240, extrinsic=Pose.from_matrix(R_BC, [0.1, 0.1, 0.0])),
        CameraModel(400, 400, 376, 240, extrinsic=Pose.from_matrix(R_BC, [0.1, -0.1, 0.0]))]


def state(pose: Pose):
    return np.r_[pose.rotation.quat, pose.t, np.zeros(9)]


def obs_of(point, pose, cam):
    pc = (pose * cam.extrinsic).inverse().apply(point)
    return pc[:2] / pc[2], 1.0 / pc[2]


def test_project():
    np.testing.assert_array_equal(project([0, 0, 1]), [0, 0])
    np.testing.assert_array_equal(project([1, 2, 2]), [0.5, 1.0])
    with pytest.raises(BehindCamera):
        project([0, 0, -1])


def test_back_project_round_trip():
    p = np.array([0.3, -0.2, 4.0])
    np.testing.assert_allclose(back_project(project(p), 1 / 4.0), p)


def test_stereo_residual_zero_at_truth(rng):
    for _ in range(20):
        x = Pose(exp_so3(rng.normal(size=3) * 0.3), rng.normal(size=3))
        pt = x.apply(np.array([5.0, rng.uniform(-1, 1), rng.uniform(-1, 1)]))
        za, lam = obs_of(pt, x, CAMS[0])
        zb, _ = obs_of(pt, x, CAMS[1])
        r, _ = visual_residual(state(x), state(x), za, zb, lam, CAMS[0], CAMS[1], False)
        assert np.abs(r).max() < 1e-10


def test_depth_scan_monotone():
    x = Pose.identity()
    pt = np.array([5.0, 0.3, 0.2])
    za, lam = obs_of(pt, x, CAMS[0])
    zb, _ = obs_of(pt, x, CAMS[1])
    scales = np.linspace(0.8, 1.2, 41)
    mags = [np.linalg.norm(visual_residual(state(x), state(x), za, zb, lam * s, CAMS[0], CAMS[1], False)[0])
            for s in scales]
    k = int(np.argmin(mags))
    assert scales[k] == pytest.approx(1.0)
    assert all(b < a for a, b in zip(mags[:k], mags[1:k + 1]))
    assert all(b > a for a, b in zip(mags[k:], mags[k + 1:]))


def test_single_residual_jacobians(rng):
    for _ in range(200):
        xa = random_navstate(rng)
        xb = perturb_navstate(xa, rng, 0.1)
        pa = Pose.from_row(xa[:7])
        pt = pa.apply(np.array([rng.uniform(3, 8), rng.uniform(-1, 1), rng.uniform(-1, 1)]))
        za, lam = obs_of(pt, pa, CAMS[0])
        zb, _ = obs_of(pt, Pose.from_row(xb[:7]), CAMS[1])
        zb = zb + rng.normal(size=2) * 0.01
        lam *= rng.uniform(0.9, 1.1)
        _, (Ja, Jb, Jl) = visual_residual(xa, xb, za, zb, lam, CAMS[0], CAMS[1])
        fun = lambda v: visual_residual(v[0], v[1], za, zb, v[2][0], CAMS[0], CAMS[1], False)[0]
        vals = [xa, xb, np.array([lam])]
        mans = [NAVSTATE, NAVSTATE, Euclidean(1)]
        assert rel_err(Ja, numeric_jacobian(fun, vals, mans, 0)[:, :6]) < 1e-5
        assert rel_err(Jb, numeric_jacobian(fun, vals, mans, 1)[:, :6]) < 1e-5
        assert rel_err(Jl, numeric_jacobian(fun, vals, mans, 2)[:, 0]) < 1e-5


def _window_factor(rng, n_states=4, n_feat=30, fixed_every=3):
    xs = [random_navstate(rng) * 0 + np.r_[1.0, np.zeros(15)] for _ in range(n_states)]
    for k in range(n_states):
        xs[k] = perturb_navstate(xs[k], rng, 0.05)
        xs[k][4:7] += np.array([0.3 * k, 0, 0])
    a, b, ca, cb, za, zb, di, fd = [], [], [], [], [], [], [], []
    depths = []
    for i in range(n_feat):
        pt = np.array([rng.uniform(4, 8), rng.uniform(-1, 1), rng.uniform(-1, 1)])
        ai = int(rng.integers(n_states))
        pa = Pose.from_row(xs[ai][:7])
        z_a, lam = obs_of(pa.apply(pt), pa, CAMS[0])
        fixed = i % fixed_every == 0
        if not fixed:
            depths.append(lam * rng.uniform(0.9, 1.1))
        for bi in range(n_states):
            for cam in (0, 1):
                if bi == ai and cam == 0:
                    continue
                z_b, _ = obs_of(pa.apply(pt), Pose.from_row(xs[bi][:7]), CAMS[cam])
                a.append(ai)
                b.append(bi)
                ca.append(0)
                cb.append(cam)
                za.append(z_a)
                zb.append(z_b + rng.normal(size=2) * 1e-3)
                di.append(-1 if fixed else len(depths) - 1)
                fd.append(lam if fixed else 0.0)
    f = VisualFactor(n_states, a, b, ca, cb, za, zb, di, fd, CAMS, 1 / 400)
    return f, xs, np.array(depths)


def test_batched_factor_matches_single_and_jacobians(rng):
    f, xs, depths = _window_factor(rng)
    vals = xs + [depths]
    r, Js = f.evaluate(vals)
    # spot-check against the single-observation form
    for i in range(0, len(f), 17):
        lam = depths[f.depth_index[i]] if f.depth_index[i] >= 0 else f.fixed_depth[i]
        ri, _ = visual_residual(xs[f.a[i]], xs[f.b[i]], f.za[i], f.zb[i], lam, CAMS[f.cam_a[i]], CAMS[f.cam_b[i]], False)
        np.testing.assert_allclose(r[i], ri * 400, atol=1e-9)
    mans = [NAVSTATE] * len(xs) + [Euclidean(len(depths))]
    for k in range(len(vals)):
        num = numeric_jacobian(lambda v: f.evaluate(v, False)[0], vals, mans, k)
        assert rel_err(Js[k], num) < 1e-5


def test_fixed_depth_features_have_zero_depth_columns(rng):
    f, xs, depths = _window_factor(rng)
    _, Js = f.evaluate(xs + [depths])
    fixed = f.depth_index < 0
    assert fixed.any()
    assert np.all(Js[-1][fixed] == 0)


def test_triangulation_noise(rng):
    errs = []
    for _ in range(200):
        x = Pose.identity()
        pt = np.array([5.0, rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5)])
        za, lam = obs_of(pt, x, CAMS[0])
        zb, _ = obs_of(pt, x, CAMS[1])
        za = za + rng.normal(size=2) / 400
        zb = zb + rng.normal(size=2) / 400
        est = triangulate(CAMS[0].extrinsic, za, CAMS[1].extrinsic, zb)
        errs.append((est - lam) / lam)
    errs = np.array(errs)
    # unbiased to within 5%, scatter as predicted by first-order disparity noise sqrt(2)*sigma*Z/(f*B)
    assert abs(errs.mean()) < 0.05
    predicted = np.sqrt(2) * 1.0 * 5.0 / (400 * 0.2)
    assert 0.8 * predicted < errs.std() < 1.2 * predicted


def test_observe_frustum():
    pts = np.array([[5.0, 0, 0], [-5.0, 0, 0]])
    obs = observe(pts, np.array([7, 8]), Pose.identity(), CAMS)
    assert set(obs[:, 1].astype(int)) == {7}
    assert sorted(obs[:, 0].astype(int)) == [0, 1]


def test_compensate_delay():
    np.testing.assert_allclose(compensate_delay([0.2, 0.1], [0.1, 0.1], 0.1, 0.01), [0.19, 0.1])
    np.testing.assert_array_equal(compensate_delay([0.2, 0.1], None, 0.1, 0.01), [0.2, 0.1])


# MMM


def wall_map():
    wall = grid_on_plane([6, -4, -2], [0, 1, 0], [0, 0, 1], 41, 41, 0.2)
    return build_local_map([(Pose.identity(), wall)], 0.4)


def test_mmm_on_plane_recovers_point():
    m = wall_map()
    x = Pose.identity()
    pt = np.array([6.0, 0.23, -0.37])  # near a map node: 0.4 m voxels leave in-plane gaps up to 0.28 m
    za, lam = obs_of(pt, x, CAMS[0])
    fbar = mmm_marginalize(za, lam * 1.02, x, CAMS[0], m)
    assert fbar is not None
    np.testing.assert_allclose(fbar, pt, atol=1e-9)
    assert depth_in_anchor(fbar, x, CAMS[0]) == pytest.approx(lam, rel=1e-12)


def test_mmm_rejects_off_surface():
    m = wall_map()
    x = Pose.identity()
    pt = np.array([5.5, 0.33, -0.41])
    za, lam = obs_of(pt, x, CAMS[0])
    assert mmm_marginalize(za, lam, x, CAMS[0], m) is None


def test_mmm_rejects_far_intersection():
    # grazing ray: the lifted point hovers 0.2 m above a floor patch but the ray
    # meets the floor plane about 1 m further on
    patch = grid_on_plane([3.0, -0.4, -1.0], [1, 0, 0], [0, 1, 0], 6, 5, 0.2)
    m = build_local_map([(Pose.identity(), patch)], 0.0)
    x = Pose.identity()
    cam = CAMS[0]
    lifted = np.array([3.4, 0.0, -0.8])
    za, lam = obs_of(lifted, x, cam)
    assert mmm_marginalize(za, lam, x, cam, m) is None
    fbar = mmm_marginalize(za, lam, x, cam, m, MmmConfig(cluster_gate=5.0))
    assert fbar is not None and abs(fbar[2] + 1.0) < 1e-9
    assert np.max(np.linalg.norm(patch - fbar, axis=1)) > 1.0


def test_mmm_gate_monotone(rng):
    m = wall_map()
    x = Pose.identity()
    n = 200
    pts = np.c_[rng.uniform(5.0, 6.6, n), rng.uniform(-2, 2, n), rng.uniform(-1.5, 1.5, n)]
    za, lam = zip(*(obs_of(p, x, CAMS[0]) for p in pts))
    za = np.array(za)
    lam = np.array(lam) * rng.uniform(0.8, 1.2, n)
    args = (za, lam, np.repeat(x.R[None], n, 0), np.repeat(x.t[None], n, 0), [CAMS[0]] * n, m)
    base, _ = mmm_marginalize_batch(*args, MmmConfig())
    assert base.any()
    for cfg in (MmmConfig(nearest_gate=0.1), MmmConfig(cluster_gate=0.5), MmmConfig(plane_gate=0.01)):
        tighter, _ = mmm_marginalize_batch(*args, cfg)
        assert not np.any(tighter & ~base)


class _Generic(Factor):
    """Hides the compact path so the solver falls back to dense per-block Jacobians."""

    def __init__(self, f):
        self.f = f

    def evaluate(self, values, jacobians=True):
        return self.f.evaluate(values, jacobians)


def test_compact_accumulation_matches_generic(rng):
    f, xs, depths = _window_factor(rng)
    out = []
    for factor in (f, _Generic(f)):
        prob = Problem()
        blocks = [prob.add_block(x, NAVSTATE, constant=(i == 1)) for i, x in enumerate(xs)]
        blocks.append(prob.add_block(depths))
        prob.add_residual(factor, blocks, arctan(3.0))
        offsets, _, size = _free_layout(prob)
        out.append(linearize(prob.residuals, offsets, size))
    (c1, H1, g1), (c2, H2, g2) = out
    assert c1 == pytest.approx(c2, rel=1e-12)
    np.testing.assert_allclose(H1, H2, atol=1e-8 * np.abs(H2).max())
    np.testing.assert_allclose(g1, g2, atol=1e-8 * np.abs(g2).max())
