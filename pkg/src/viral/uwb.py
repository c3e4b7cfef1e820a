"""UWB anchor frame, sample model, range factors for the window and for BA.

Within a step (t_{m-1}, t_m] a sample at tau = t_{m-1} + dt uses

    d = p_m + R_{m-1} Exp(s Log(R_{m-1}^T R_m)) y - a v_{m-1} - b v_m - R_W x - t_W

with s = dt/Dt, a = (Dt^2 - dt^2)/(2 Dt), b = (Dt - dt)^2/(2 Dt), and the
range residual ||d|| + b_r - range.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import (
    InvalidArgument,
    Pose,
    left_jacobian_inv,
    quat_to_matrix,
    right_jacobian,
    right_jacobian_inv,
    skew,
    so3_exp,
    so3_log,
)
from .solver import Factor


class DegenerateGeometry(InvalidArgument):
    pass


@dataclass(frozen=True)
class AnchorNetwork:
    anchors: np.ndarray  # (3, 3) coordinates in W
    z_star: float
    distances: tuple[float, float, float]  # r01, r02, r12
    y_sign: int


def build_anchor_frame(r01: float, r02: float, r12: float, z_star: float = 1.0, y_sign: int = 1) -> AnchorNetwork:
    """Anchor coordinates in W from the inter-anchor distances at a nominal height."""
    if r01 <= 0:
        raise DegenerateGeometry("r01 must be positive")
    if y_sign not in (1, -1):
        raise InvalidArgument("y_sign must be +1 or -1")
    x2 = (r01**2 - r12**2 + r02**2) / (2 * r01)
    h = r02**2 - x2**2
    if h < -1e-9 * max(r02**2, 1.0):
        raise DegenerateGeometry("anchor distances violate the triangle inequality")
    y2 = y_sign * np.sqrt(max(h, 0.0))
    A = np.array([[0.0, 0.0, z_star], [r01, 0.0, z_star], [x2, y2, z_star]])
    return AnchorNetwork(A, z_star, (r01, r02, r12), y_sign)


@dataclass(frozen=True)
class UwbExtrinsics:
    T_LW: Pose
    bias: float = 0.0

    def to_dict(self) -> dict:
        return {"T_LW": self.T_LW.to_row(), "bias": self.bias}


def interp_coeffs(dt: float, Dt: float):
    """(s, a, b) for a sample dt after t_{m-1} in a step of length Dt."""
    if Dt <= 0:
        raise InvalidArgument("step length must be positive")
    if dt < 0 or dt > Dt:
        raise InvalidArgument(f"dt={dt} outside [0, {Dt}]")
    return dt / Dt, (Dt * Dt - dt * dt) / (2 * Dt), (Dt - dt) ** 2 / (2 * Dt)


@dataclass(frozen=True)
class UwbSample:
    range: float
    anchor: np.ndarray  # anchor coordinate in W
    tag: np.ndarray  # ranging node in the body frame
    tau: float
    t_prev: float
    t_curr: float

    def coeffs(self):
        return interp_coeffs(self.tau - self.t_prev, self.t_curr - self.t_prev)


def uwb_displacement(x_prev: np.ndarray, x_curr: np.ndarray, ext: UwbExtrinsics, s: UwbSample) -> np.ndarray:
    """The anchor-to-tag vector of the sample model, evaluated term by term."""
    Rp = quat_to_matrix(x_prev[:4])
    Rc = quat_to_matrix(x_curr[:4])
    si, ai, bi = s.coeffs()
    Q = Rp @ so3_exp(si * so3_log(Rp.T @ Rc))
    return x_curr[4:7] + Q @ s.tag - ai * x_prev[7:10] - bi * x_curr[7:10] - ext.T_LW.R @ s.anchor - ext.T_LW.t


class UwbFactor(Factor):
    """Range residuals of one bundle, between states m-1 and m, with fixed extrinsics."""

    name = "uwb"

    def __init__(self, samples: list[UwbSample], ext: UwbExtrinsics, sigma: float = 0.05):
        self.samples = list(samples)
        self.ext = ext
        self.sigma = sigma
        self.coeffs = np.array([s.coeffs() for s in self.samples]).reshape(-1, 3)
        self.anchor_L = np.array([ext.T_LW.R @ s.anchor + ext.T_LW.t for s in self.samples]).reshape(-1, 3)
        self.tags = np.array([s.tag for s in self.samples]).reshape(-1, 3)
        self.ranges = np.array([s.range for s in self.samples])

    def __len__(self):
        return len(self.samples)

    def evaluate(self, values, jacobians=True):
        xp, xc = values
        Rp = quat_to_matrix(xp[:4])
        Rc = quat_to_matrix(xc[:4])
        phi = so3_log(Rp.T @ Rc)
        n = len(self.samples)
        si, ai, bi = self.coeffs.T
        sphi = si[:, None] * phi
        E = so3_exp(sphi)
        Q = Rp @ E
        d = (xc[4:7] + np.einsum("kij,kj->ki", Q, self.tags) - ai[:, None] * xp[7:10] - bi[:, None] * xc[7:10]
             - self.anchor_L)
        nd = np.linalg.norm(d, axis=1)
        ok = nd >= 1e-6  # near-singular norms are skipped
        r = np.where(ok, (nd + self.ext.bias - self.ranges) / self.sigma, 0.0)[:, None]
        if not jacobians:
            return r, None
        u = np.where(ok[:, None], d / np.where(ok, nd, 1.0)[:, None], 0.0) / self.sigma
        uQy = -np.einsum("ki,kij->kj", u, Q @ skew(self.tags))
        Jr_s = right_jacobian(sphi)
        Jp = np.zeros((n, 1, 15))
        Jc = np.zeros((n, 1, 15))
        Jc[:, 0, 0:3] = np.einsum("ki,kij->kj", uQy, si[:, None, None] * Jr_s @ right_jacobian_inv(phi))
        Jp[:, 0, 0:3] = np.einsum("ki,kij->kj", uQy,
                                  E.transpose(0, 2, 1) - si[:, None, None] * Jr_s @ left_jacobian_inv(phi))
        Jc[:, 0, 3:6] = u
        Jp[:, 0, 6:9] = -ai[:, None] * u
        Jc[:, 0, 6:9] = -bi[:, None] * u
        return r, [Jp, Jc]


# --------------------------------------------------------------------------
# bundle adjustment


@dataclass(frozen=True)
class MarginalizedUwbSample:
    """A sample near a keyframe, carried by the relative body transform from t_n to tau."""

    range: float
    anchor: np.ndarray
    tag: np.ndarray
    R_rel: np.ndarray  # R_n^T R_tau
    t_rel: np.ndarray  # R_tau^T (p_tau - p_n)
    tau: float = 0.0

    @staticmethod
    def from_poses(range_: float, anchor, tag, pose_n: Pose, pose_tau: Pose, tau: float = 0.0):
        R_rel = pose_n.R.T @ pose_tau.R
        t_rel = pose_tau.R.T @ (pose_tau.t - pose_n.t)
        return MarginalizedUwbSample(range_, np.asarray(anchor, float), np.asarray(tag, float), R_rel, t_rel, tau)


def ba_displacement(pose_n: np.ndarray, T_LW: np.ndarray, s: MarginalizedUwbSample) -> np.ndarray:
    Rn = quat_to_matrix(pose_n[:4])
    Rw = quat_to_matrix(T_LW[:4])
    return pose_n[4:7] + Rn @ s.R_rel @ (s.tag + s.t_rel) - Rw @ s.anchor - T_LW[4:7]


class UwbBaFactor(Factor):
    """Marginalized range residuals for one keyframe.  Blocks: keyframe pose, T_LW, bias."""

    name = "uwb_ba"

    def __init__(self, samples: list[MarginalizedUwbSample], sigma: float = 0.05):
        self.samples = list(samples)
        self.sigma = sigma
        self.body = np.array([s.R_rel @ (s.tag + s.t_rel) for s in self.samples]).reshape(-1, 3)
        self.anchors = np.array([s.anchor for s in self.samples]).reshape(-1, 3)
        self.ranges = np.array([s.range for s in self.samples])

    def __len__(self):
        return len(self.samples)

    def evaluate(self, values, jacobians=True):
        xn, tw, bias = values
        Rn = quat_to_matrix(xn[:4])
        Rw = quat_to_matrix(tw[:4])
        d = xn[4:7] + self.body @ Rn.T - self.anchors @ Rw.T - tw[4:7]
        nd = np.linalg.norm(d, axis=1)
        ok = nd > 1e-6
        r = np.where(ok, (nd + bias[0] - self.ranges) / self.sigma, 0.0)[:, None]
        if not jacobians:
            return r, None
        u = np.where(ok[:, None], d / np.where(ok, nd, 1.0)[:, None], 0.0) / self.sigma
        n = len(self.samples)
        Jn = np.zeros((n, 1, 6))
        Jw = np.zeros((n, 1, 6))
        Jn[:, 0, 0:3] = np.cross(self.body, u @ Rn)  # u^T (-R_n [b]x)
        Jn[:, 0, 3:6] = u
        Jw[:, 0, 0:3] = -np.cross(self.anchors, u @ Rw)  # u^T (R_W [x]x)
        Jw[:, 0, 3:6] = -u
        Jb = (ok / self.sigma).reshape(n, 1, 1)
        return r, [Jn, Jw, Jb]
