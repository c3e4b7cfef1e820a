"""Relative-pose factors shared by the bundle adjustment and loop verification.

Poses are 7-vectors (q, t) on :data:`viral.solver.POSE`.  The residual of a
measured relative transform T_m between poses i and j is

    r_rot = Log(R_m^T R_i^T R_j)
    r_t   = R_m^T (R_i^T (t_j - t_i) - t_m)
"""
from __future__ import annotations

import numpy as np

from .geometry import Pose, quat_to_matrix, right_jacobian_inv, skew, so3_log
from .solver import Factor


def relative_pose(a: np.ndarray, b: np.ndarray) -> Pose:
    """a^-1 * b for 7-vector poses."""
    return Pose.from_row(a).inverse() * Pose.from_row(b)


def relative_pose_residual(xi: np.ndarray, xj: np.ndarray, meas: Pose, jacobians: bool = True):
    Ri = quat_to_matrix(xi[:4])
    Rj = quat_to_matrix(xj[:4])
    Rm = meas.R
    E = Rm.T @ Ri.T @ Rj
    r = np.empty(6)
    r[:3] = so3_log(E)
    u = Ri.T @ (xj[4:7] - xi[4:7])
    r[3:] = Rm.T @ (u - meas.t)
    if not jacobians:
        return r, None, None
    Jri = right_jacobian_inv(r[:3])
    Ji = np.zeros((6, 6))
    Jj = np.zeros((6, 6))
    Ji[:3, :3] = -Jri @ Rj.T @ Ri
    Jj[:3, :3] = Jri
    Ji[3:, :3] = Rm.T @ skew(u)
    Ji[3:, 3:] = -Rm.T @ Ri.T
    Jj[3:, 3:] = Rm.T @ Ri.T
    return r, Ji, Jj


class RelativePoseFactor(Factor):
    """One relative-pose measurement between two pose blocks, whitened by ``sigmas`` (rot, trans)
    or by a full square-root information matrix ``sqrt_info`` (6x6) when given."""

    name = "relpose"

    def __init__(self, meas: Pose, sigma_rot: float = 1e-2, sigma_trans: float = 1e-2, sqrt_info=None):
        self.meas = meas
        if sqrt_info is None:
            self.W = np.diag(1.0 / np.r_[np.full(3, sigma_rot), np.full(3, sigma_trans)])
        else:
            self.W = np.asarray(sqrt_info, dtype=float).reshape(6, 6)

    def evaluate(self, values, jacobians=True):
        r, Ji, Jj = relative_pose_residual(values[0], values[1], self.meas, jacobians)
        r = self.W @ r
        if not jacobians:
            return r[None], None
        return r[None], [(self.W @ Ji)[None], (self.W @ Jj)[None]]


def edge_sqrt_info(meas: Pose, info_i, info_j, floor_rot: float, floor_trans: float, scale: float) -> np.ndarray:
    """Square-root information of an odometry edge: a diagonal floor plus ``scale`` times the
    summed per-keyframe covariances (each from a body-frame 6x6 information, rot then trans),
    both expressed in the frame of keyframe j."""
    C = np.diag(np.r_[np.full(3, floor_rot**2), np.full(3, floor_trans**2)])
    A = np.kron(np.eye(2), meas.R.T)  # frame i -> frame j
    for info, T in ((info_i, A), (info_j, np.eye(6))):
        if info is not None:
            # a unit-information regularizer caps each axis at 1 m / 1 rad
            C = C + scale * (T @ np.linalg.inv(np.asarray(info) + np.eye(6)) @ T.T)
    return np.linalg.cholesky(np.linalg.inv(C)).T


class PosePriorFactor(Factor):
    """Absolute prior on a single pose block."""

    name = "poseprior"

    def __init__(self, pose: Pose, sigma_rot: float = 1e-3, sigma_trans: float = 1e-3):
        self.pose = pose
        self.w = 1.0 / np.r_[np.full(3, sigma_rot), np.full(3, sigma_trans)]

    def evaluate(self, values, jacobians=True):
        x = values[0]
        R = quat_to_matrix(x[:4])
        r = np.empty(6)
        r[:3] = so3_log(self.pose.R.T @ R)
        r[3:] = x[4:7] - self.pose.t
        r = r * self.w
        if not jacobians:
            return r[None], None
        J = np.eye(6)
        J[:3, :3] = right_jacobian_inv(r[:3] / self.w[:3])
        return r[None], [(J * self.w[:, None])[None]]
