import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation as SciRot

from viral.geometry import InvalidArgument, Pose
from viral.solver import NAVSTATE, POSE, Euclidean
from viral.uwb import (
    DegenerateGeometry,
    MarginalizedUwbSample,
    UwbBaFactor,
    UwbExtrinsics,
    UwbFactor,
    UwbSample,
    ba_displacement,
    build_anchor_frame,
    interp_coeffs,
    uwb_displacement,
)

from helpers import numeric_jacobian, perturb_navstate, random_navstate, random_rotation, rel_err


def test_anchor_frame_true_layout():
    r = np.sqrt(81.25)
    net = build_anchor_frame(15.0, r, r, 1.0, -1)
    np.testing.assert_allclose(net.anchors[1], [15, 0, 1], atol=1e-12)
    np.testing.assert_allclose(net.anchors[2], [7.5, -5, 1], atol=1e-12)
    A = net.anchors
    d = [np.linalg.norm(A[0] - A[1]), np.linalg.norm(A[0] - A[2]), np.linalg.norm(A[1] - A[2])]
    np.testing.assert_allclose(d, [15, r, r], atol=1e-9)


def test_anchor_frame_equilateral():
    net = build_anchor_frame(1, 1, 1, 2.0, 1)
    np.testing.assert_allclose(net.anchors[2], [0.5, np.sqrt(3) / 2, 2.0], atol=1e-12)


def test_anchor_frame_collinear_boundary():
    net = build_anchor_frame(2, 1, 1)
    np.testing.assert_allclose(net.anchors[2], [1, 0, 1], atol=1e-12)


def test_anchor_frame_violation():
    with pytest.raises(DegenerateGeometry):
        build_anchor_frame(2, 0.5, 0.5)
    with pytest.raises(DegenerateGeometry):
        build_anchor_frame(0, 1, 1)


@settings(max_examples=100, deadline=None)
@given(st.floats(1, 30), st.floats(0.2, 0.8), st.floats(0.05, 0.95), st.sampled_from([1, -1]))
def test_anchor_frame_reproduces_distances(r01, frac, pos, sign):
    # third anchor somewhere off the baseline
    p2 = np.array([pos * r01, sign * frac * r01])
    r02 = np.linalg.norm(p2)
    r12 = np.linalg.norm(p2 - [r01, 0])
    A = build_anchor_frame(r01, r02, r12, 1.0, sign).anchors
    np.testing.assert_allclose(np.linalg.norm(A[0] - A[2]), r02, rtol=1e-9)
    np.testing.assert_allclose(np.linalg.norm(A[1] - A[2]), r12, rtol=1e-9)
    assert np.sign(A[2, 1]) == sign


def test_interp_coeffs_examples():
    assert interp_coeffs(0.1, 0.1) == (1.0, 0.0, 0.0)
    np.testing.assert_allclose(interp_coeffs(0.0, 0.1), (0.0, 0.05, 0.05))
    np.testing.assert_allclose(interp_coeffs(0.05, 0.1), (0.5, 0.0375, 0.0125), atol=1e-15)
    with pytest.raises(InvalidArgument):
        interp_coeffs(0.11, 0.1)
    with pytest.raises(InvalidArgument):
        interp_coeffs(-0.01, 0.1)
    with pytest.raises(InvalidArgument):
        interp_coeffs(0.0, 0.0)


def test_interp_s_monotone():
    s = [interp_coeffs(dt, 0.1)[0] for dt in np.linspace(0, 0.1, 50)]
    assert all(b > a for a, b in zip(s, s[1:]))


def sample(rng, t_prev=0.0, t_curr=0.1, tau=None, anchor=None):
    return UwbSample(
        range=10.0,
        anchor=rng.normal(size=3) * 8 if anchor is None else np.asarray(anchor, float),
        tag=rng.normal(size=3) * 0.3,
        tau=rng.uniform(t_prev + 1e-3, t_curr) if tau is None else tau,
        t_prev=t_prev,
        t_curr=t_curr,
    )


def random_ext(rng):
    return UwbExtrinsics(Pose(random_rotation(rng, 0.5), rng.normal(size=3)), 0.05)


def test_displacement_stationary():
    x = np.r_[1.0, np.zeros(15)]
    s = UwbSample(7.0, np.array([7.0, 0, 0]), np.zeros(3), 0.05, 0.0, 0.1)
    d = uwb_displacement(x, x, UwbExtrinsics(Pose.identity()), s)
    assert np.linalg.norm(d) == pytest.approx(7.0)


def test_displacement_at_step_time(rng):
    xp, ext = random_navstate(rng), random_ext(rng)
    xc = perturb_navstate(xp, rng, 0.3)
    s = sample(rng, tau=0.1)
    d = uwb_displacement(xp, xc, ext, s)
    Rc = Pose.from_row(xc[:7]).R
    np.testing.assert_allclose(d, xc[4:7] + Rc @ s.tag - ext.T_LW.R @ s.anchor - ext.T_LW.t, atol=1e-12)


def test_displacement_matches_independent_oracle(rng):
    for _ in range(100):
        xp, ext = random_navstate(rng), random_ext(rng)
        xc = perturb_navstate(xp, rng, 0.3)
        s = sample(rng)
        # scipy quaternions are (x,y,z,w)
        rp = SciRot.from_quat(np.r_[xp[1:4], xp[0]])
        rc = SciRot.from_quat(np.r_[xc[1:4], xc[0]])
        dt, Dt = s.tau - s.t_prev, s.t_curr - s.t_prev
        si = dt / Dt
        a = (Dt**2 - dt**2) / (2 * Dt)
        b = (Dt - dt) ** 2 / (2 * Dt)
        rot = rp * SciRot.from_rotvec(si * (rp.inv() * rc).as_rotvec())
        rw = SciRot.from_quat(np.r_[ext.T_LW.rotation.quat[1:], ext.T_LW.rotation.quat[0]])
        oracle = xc[4:7] + rot.apply(s.tag) - a * xp[7:10] - b * xc[7:10] - rw.apply(s.anchor) - ext.T_LW.t
        np.testing.assert_allclose(uwb_displacement(xp, xc, ext, s), oracle, atol=1e-10)


def synthesize(xp, xc, ext, samples):
    return [UwbSample(np.linalg.norm(uwb_displacement(xp, xc, ext, s)) + ext.bias, s.anchor, s.tag, s.tau,
                      s.t_prev, s.t_curr) for s in samples]


def test_residual_zero_at_truth_and_bias_shift(rng):
    xp, ext = random_navstate(rng), random_ext(rng)
    xc = perturb_navstate(xp, rng, 0.3)
    samples = synthesize(xp, xc, ext, [sample(rng) for _ in range(10)])
    r, _ = UwbFactor(samples, ext, 0.05).evaluate([xp, xc], False)
    assert np.abs(r).max() < 1e-10
    shifted = UwbExtrinsics(ext.T_LW, ext.bias + 0.05)
    r, _ = UwbFactor(samples, shifted, 1.0).evaluate([xp, xc], False)
    np.testing.assert_allclose(r, 0.05, atol=1e-12)


def test_residual_skips_singular_norm():
    x = np.r_[1.0, np.zeros(15)]
    s = UwbSample(1.0, np.zeros(3), np.zeros(3), 0.05, 0.0, 0.1)
    r, Js = UwbFactor([s], UwbExtrinsics(Pose.identity())).evaluate([x, x])
    assert r[0, 0] == 0 and not Js[0].any() and not Js[1].any()


def test_factor_jacobians(rng):
    for _ in range(200):
        xp, ext = random_navstate(rng), random_ext(rng)
        xc = perturb_navstate(xp, rng, 0.3)
        f = UwbFactor([sample(rng) for _ in range(3)], ext)
        _, Js = f.evaluate([xp, xc])
        fun = lambda v: f.evaluate(v, False)[0]
        for k in range(2):
            assert rel_err(Js[k], numeric_jacobian(fun, [xp, xc], [NAVSTATE, NAVSTATE], k)) < 1e-5


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_rigid_motion_invariance(seed):
    rng = np.random.default_rng(seed)
    xp, ext = random_navstate(rng), random_ext(rng)
    xc = perturb_navstate(xp, rng, 0.3)
    samples = [sample(rng) for _ in range(5)]
    r0, _ = UwbFactor(samples, ext).evaluate([xp, xc], False)
    G = Pose(random_rotation(rng), rng.normal(size=3) * 10)

    def move(x):
        y = x.copy()
        P = G * Pose.from_row(x[:7])
        y[:7] = P.to_row()
        y[7:10] = G.R @ x[7:10]
        return y

    ext2 = UwbExtrinsics(G * ext.T_LW, ext.bias)
    r1, _ = UwbFactor(samples, ext2).evaluate([move(xp), move(xc)], False)
    np.testing.assert_allclose(r1, r0, atol=1e-9)


# bundle adjustment form


def test_ba_residual_zero_at_truth(rng):
    T_LW = Pose(random_rotation(rng, 0.5), rng.normal(size=3))
    anchors = rng.normal(size=(3, 3)) * 8
    pose_n = Pose(random_rotation(rng), rng.normal(size=3))
    samples = []
    for k in range(12):
        pose_tau = pose_n * Pose(random_rotation(rng, 0.05), rng.normal(size=3) * 0.05)
        tag = rng.normal(size=3) * 0.3
        rng_true = np.linalg.norm(pose_tau.apply(tag[None])[0] - T_LW.apply(anchors[k % 3][None])[0]) + 0.05
        samples.append(MarginalizedUwbSample.from_poses(rng_true, anchors[k % 3], tag, pose_n, pose_tau))
    r, _ = UwbBaFactor(samples).evaluate([pose_n.to_row(), T_LW.to_row(), np.array([0.05])], False)
    assert np.abs(r).max() < 1e-10


def test_ba_displacement_matches_factor(rng):
    T_LW = Pose(random_rotation(rng, 0.5), rng.normal(size=3))
    pose_n = Pose(random_rotation(rng), rng.normal(size=3))
    s = MarginalizedUwbSample.from_poses(5.0, rng.normal(size=3), rng.normal(size=3) * 0.3, pose_n,
                                         pose_n * Pose(random_rotation(rng, 0.1), rng.normal(size=3) * 0.1))
    d = ba_displacement(pose_n.to_row(), T_LW.to_row(), s)
    r, _ = UwbBaFactor([s], 1.0).evaluate([pose_n.to_row(), T_LW.to_row(), np.array([0.0])], False)
    assert r[0, 0] == pytest.approx(np.linalg.norm(d) - 5.0, abs=1e-12)


def test_ba_jacobians(rng):
    for _ in range(200):
        T_LW = Pose(random_rotation(rng, 0.5), rng.normal(size=3)).to_row()
        pose_n = Pose(random_rotation(rng), rng.normal(size=3)).to_row()
        samples = [MarginalizedUwbSample(8.0, rng.normal(size=3) * 8, rng.normal(size=3) * 0.3,
                                         random_rotation(rng, 0.1).matrix(), rng.normal(size=3) * 0.1)
                   for _ in range(3)]
        f = UwbBaFactor(samples)
        vals = [pose_n, T_LW, np.array([rng.normal() * 0.1])]
        _, Js = f.evaluate(vals)
        fun = lambda v: f.evaluate(v, False)[0]
        mans = [POSE, POSE, Euclidean(1)]
        for k in range(3):
            assert rel_err(Js[k], numeric_jacobian(fun, vals, mans, k)) < 1e-5
