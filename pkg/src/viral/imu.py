"""IMU preintegration, the 15-dim inertial residual, and state propagation.

Error-state ordering everywhere is (rotation, position, velocity, gyro bias,
accel bias), matching the NavState tangent.  Gravity is (0, 0, -g) in the
local frame.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import InvalidArgument, Rotation, quat_to_matrix, right_jacobian, right_jacobian_inv, skew, so3_exp, so3_log
from .solver import Factor

I3 = np.eye(3)


@dataclass
class ImuNoise:
    gyro_noise: float = 1e-3  # rad/s/sqrt(Hz)
    accel_noise: float = 1e-2  # m/s^2/sqrt(Hz)
    gyro_walk: float = 1e-5  # rad/s^2/sqrt(Hz)
    accel_walk: float = 1e-4  # m/s^3/sqrt(Hz)


def gravity_vector(g: float) -> np.ndarray:
    return np.array([0.0, 0.0, -g])


@dataclass
class ImuSegment:
    t: np.ndarray
    gyro: np.ndarray
    acc: np.ndarray

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=float).reshape(-1)
        self.gyro = np.asarray(self.gyro, dtype=float).reshape(-1, 3)
        self.acc = np.asarray(self.acc, dtype=float).reshape(-1, 3)

    def __len__(self):
        return self.t.size

    @property
    def duration(self) -> float:
        return float(self.t[-1] - self.t[0]) if len(self) else 0.0


@dataclass
class NavState:
    rotation: Rotation = field(default_factory=Rotation.identity)
    p: np.ndarray = field(default_factory=lambda: np.zeros(3))
    v: np.ndarray = field(default_factory=lambda: np.zeros(3))
    bg: np.ndarray = field(default_factory=lambda: np.zeros(3))
    ba: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        for name in ("p", "v", "bg", "ba"):
            arr = np.array(getattr(self, name), dtype=float).reshape(3)
            if not np.all(np.isfinite(arr)):
                raise InvalidArgument(f"NavState.{name} must be finite")
            setattr(self, name, arr)

    @property
    def R(self) -> np.ndarray:
        return self.rotation.matrix()

    def to_array(self) -> np.ndarray:
        return np.concatenate([self.rotation.quat, self.p, self.v, self.bg, self.ba])

    @classmethod
    def from_array(cls, x) -> "NavState":
        x = np.asarray(x, dtype=float)
        return cls(Rotation(x[:4]), x[4:7], x[7:10], x[10:13], x[13:16])


def unpack(x: np.ndarray):
    """(R, p, v, bg, ba) from a 16-vector NavState array."""
    return quat_to_matrix(x[:4]), x[4:7], x[7:10], x[10:13], x[13:16]


@dataclass(frozen=True, eq=False)
class Preintegration:
    dR: np.ndarray
    dp: np.ndarray
    dv: np.ndarray
    dt: float
    cov: np.ndarray  # 9x9 over (theta, p, v)
    bg0: np.ndarray
    ba0: np.ndarray
    jac_bias: np.ndarray  # 9x6: d(theta, p, v) / d(bg, ba)
    gravity: float
    noise: ImuNoise

    @property
    def dR_dbg(self):
        return self.jac_bias[0:3, 0:3]

    @property
    def dp_dbg(self):
        return self.jac_bias[3:6, 0:3]

    @property
    def dp_dba(self):
        return self.jac_bias[3:6, 3:6]

    @property
    def dv_dbg(self):
        return self.jac_bias[6:9, 0:3]

    @property
    def dv_dba(self):
        return self.jac_bias[6:9, 3:6]

    def residual_covariance(self) -> np.ndarray:
        P = np.zeros((15, 15))
        P[:9, :9] = self.cov
        P[9:12, 9:12] = I3 * self.noise.gyro_walk**2 * self.dt
        P[12:15, 12:15] = I3 * self.noise.accel_walk**2 * self.dt
        return P

    def sqrt_information(self) -> np.ndarray:
        cached = getattr(self, "_sqrt_info", None)
        if cached is None:
            P = self.residual_covariance()
            info = np.linalg.inv(P)
            info = 0.5 * (info + info.T)
            cached = np.linalg.cholesky(info).T
            object.__setattr__(self, "_sqrt_info", cached)
        return cached


def preintegrate(
    segment: ImuSegment,
    bg: np.ndarray | None = None,
    ba: np.ndarray | None = None,
    gravity_magnitude: float = 9.81,
    noise: ImuNoise | None = None,
) -> Preintegration:
    """Midpoint preintegration of a segment with the bias linearization point subtracted."""
    if len(segment) < 2:
        raise InvalidArgument("preintegration needs at least two IMU samples")
    noise = noise or ImuNoise()
    bg = np.zeros(3) if bg is None else np.asarray(bg, dtype=float)
    ba = np.zeros(3) if ba is None else np.asarray(ba, dtype=float)
    t, gyro, acc = segment.t, segment.gyro, segment.acc
    if np.any(np.diff(t) <= 0):
        raise InvalidArgument("IMU timestamps must be strictly increasing")

    # per-sample terms in batch; only the recursions below are sequential
    n = len(t) - 1
    h = np.diff(t)
    w = 0.5 * (gyro[:-1] + gyro[1:]) - bg
    a0 = acc[:-1] - ba
    a1 = acc[1:] - ba
    steps = so3_exp(w * h[:, None])
    Jr = right_jacobian(w * h[:, None])
    Rs = np.empty((n + 1, 3, 3))
    Rs[0] = np.eye(3)
    for k in range(n):
        Rs[k + 1] = Rs[k] @ steps[k]
    R0, R1 = Rs[:-1], Rs[1:]
    mid = 0.5 * (np.einsum("kij,kj->ki", R0, a0) + np.einsum("kij,kj->ki", R1, a1))
    R1S1 = R1 @ skew(a1)
    Ct = -0.5 * R0 @ skew(a0) - 0.5 * R1S1 @ steps.transpose(0, 2, 1)
    Cbg = 0.5 * R1S1 @ Jr * h[:, None, None]
    Cba = -0.5 * (R0 + R1)
    hh = h[:, None, None]
    F = np.zeros((n, 9, 9))
    F[:, 0:3, 0:3] = steps.transpose(0, 2, 1)
    F[:, 3:6, 0:3] = 0.5 * Ct * hh * hh
    F[:, 3:6, 3:6] = I3
    F[:, 3:6, 6:9] = I3 * hh
    F[:, 6:9, 0:3] = Ct * hh
    F[:, 6:9, 6:9] = I3
    B = np.zeros((n, 9, 6))
    B[:, 0:3, 0:3] = -Jr * hh
    B[:, 3:6, 0:3] = 0.5 * Cbg * hh * hh
    B[:, 3:6, 3:6] = 0.5 * Cba * hh * hh
    B[:, 6:9, 0:3] = Cbg * hh
    B[:, 6:9, 3:6] = Cba * hh
    # white measurement noise enters with the same structure as the bias
    q = np.c_[np.tile(noise.gyro_noise**2, (n, 3)), np.tile(noise.accel_noise**2, (n, 3))] / h[:, None]
    BQB = (B * q[:, None, :]) @ B.transpose(0, 2, 1)

    dp = np.zeros(3)
    dv = np.zeros(3)
    P = np.zeros((9, 9))
    Jb = np.zeros((9, 6))
    for k in range(n):
        Jb = F[k] @ Jb + B[k]
        P = F[k] @ P @ F[k].T + BQB[k]
        dp = dp + dv * h[k] + 0.5 * mid[k] * h[k] ** 2
        dv = dv + mid[k] * h[k]
    dR = Rs[-1]
    P = 0.5 * (P + P.T) + np.eye(9) * 1e-18
    return Preintegration(
        dR=dR, dp=dp, dv=dv, dt=float(t[-1] - t[0]), cov=P, bg0=bg.copy(), ba0=ba.copy(),
        jac_bias=Jb, gravity=gravity_magnitude, noise=noise,
    )


def _corrected(pre: Preintegration, bg: np.ndarray, ba: np.ndarray):
    dbg = bg - pre.bg0
    dba = ba - pre.ba0
    phi = pre.dR_dbg @ dbg
    dR = pre.dR @ so3_exp(phi)
    dp = pre.dp + pre.dp_dbg @ dbg + pre.dp_dba @ dba
    dv = pre.dv + pre.dv_dbg @ dbg + pre.dv_dba @ dba
    return dR, dp, dv, phi


def imu_residual(x_prev: np.ndarray, x_curr: np.ndarray, pre: Preintegration, whiten: bool = True, jacobians: bool = True):
    """Residual between two 16-vector states; returns (r15, J_prev, J_curr)."""
    Ri, pi, vi, bgi, bai = unpack(x_prev)
    Rj, pj, vj, bgj, baj = unpack(x_curr)
    g = np.array([0.0, 0.0, -pre.gravity])
    T = pre.dt
    dR, dp, dv, phi = _corrected(pre, bgi, bai)
    E = dR.T @ Ri.T @ Rj
    r_theta = so3_log(E)
    u_p = pj - pi - vi * T - 0.5 * g * T * T
    u_v = vj - vi - g * T
    r = np.empty(15)
    r[0:3] = r_theta
    r[3:6] = Ri.T @ u_p - dp
    r[6:9] = Ri.T @ u_v - dv
    r[9:12] = bgj - bgi
    r[12:15] = baj - bai
    if not jacobians:
        return (pre.sqrt_information() @ r if whiten else r), None, None

    Jri = right_jacobian_inv(r_theta)
    Ji = np.zeros((15, 15))
    Jj = np.zeros((15, 15))
    Ji[0:3, 0:3] = -Jri @ Rj.T @ Ri
    Ji[0:3, 9:12] = -Jri @ E.T @ right_jacobian(phi) @ pre.dR_dbg
    Jj[0:3, 0:3] = Jri
    Ji[3:6, 0:3] = skew(Ri.T @ u_p)
    Ji[3:6, 3:6] = -Ri.T
    Ji[3:6, 6:9] = -Ri.T * T
    Ji[3:6, 9:12] = -pre.dp_dbg
    Ji[3:6, 12:15] = -pre.dp_dba
    Jj[3:6, 3:6] = Ri.T
    Ji[6:9, 0:3] = skew(Ri.T @ u_v)
    Ji[6:9, 6:9] = -Ri.T
    Ji[6:9, 9:12] = -pre.dv_dbg
    Ji[6:9, 12:15] = -pre.dv_dba
    Jj[6:9, 6:9] = Ri.T
    Ji[9:12, 9:12] = -I3
    Jj[9:12, 9:12] = I3
    Ji[12:15, 12:15] = -I3
    Jj[12:15, 12:15] = I3
    if whiten:
        S = pre.sqrt_information()
        return S @ r, S @ Ji, S @ Jj
    return r, Ji, Jj


def propagate_array(x: np.ndarray, pre: Preintegration) -> np.ndarray:
    R, p, v, bg, ba = unpack(x)
    g = np.array([0.0, 0.0, -pre.gravity])
    dR, dp, dv, _ = _corrected(pre, bg, ba)
    T = pre.dt
    out = x.copy()
    out[:4] = Rotation.from_matrix(R @ dR).quat
    out[4:7] = p + v * T + 0.5 * g * T * T + R @ dp
    out[7:10] = v + g * T + R @ dv
    return out


def propagate(x: NavState, segment: ImuSegment, gravity_magnitude: float = 9.81, noise: ImuNoise | None = None) -> NavState:
    """IMU mechanization over ``segment`` starting at ``x`` with its bias estimates."""
    pre = preintegrate(segment, x.bg, x.ba, gravity_magnitude, noise)
    return NavState.from_array(propagate_array(x.to_array(), pre))


def gravity_aligned_rotation(mean_acc: np.ndarray) -> Rotation:
    """Roll/pitch from an at-rest specific-force reading, zero yaw."""
    a = np.asarray(mean_acc, dtype=float)
    z = a / np.linalg.norm(a)  # body-frame "up"
    roll = np.arctan2(z[1], z[2])
    pitch = np.arctan2(-z[0], np.hypot(z[1], z[2]))
    cr, sr, cp, sp = np.cos(roll), np.sin(roll), np.cos(pitch), np.sin(pitch)
    Ry = np.array([[cp, 0, sp], [0, 1, 0], [-sp, 0, cp]])
    Rx = np.array([[1, 0, 0], [0, cr, -sr], [0, sr, cr]])
    return Rotation.from_matrix(Ry @ Rx)


class ImuFactor(Factor):
    name = "imu"

    def __init__(self, pre: Preintegration):
        self.pre = pre

    def evaluate(self, values, jacobians=True):
        r, Ji, Jj = imu_residual(values[0], values[1], self.pre, whiten=True, jacobians=jacobians)
        if not jacobians:
            return r[None], None
        return r[None], [Ji[None], Jj[None]]
