"""SO(3) / SE(3) primitives.

Quaternions are stored as (w, x, y, z), Hamilton convention, canonicalized to
w >= 0.  Matrix-level helpers accept batched inputs with trailing (3,) or
(3, 3) axes; the factor code works on matrices, the value types below are for
the public API and serialization.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

SMALL_ANGLE = 1e-8


class InvalidArgument(ValueError):
    pass


def skew(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    if v.ndim == 1:
        x, y, z = v
        return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


# --------------------------------------------------------------------------
# quaternion helpers (arrays, (..., 4))


def _canonical(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    flip = q[..., 0] < 0
    # w == 0 has a residual double cover; pick the first nonzero imaginary part positive
    zero_w = q[..., 0] == 0
    if np.any(zero_w):
        imag = q[..., 1:]
        first = np.take_along_axis(imag, np.argmax(imag != 0, axis=-1)[..., None], axis=-1)[..., 0]
        flip = flip | (zero_w & (first < 0))
    return np.where(flip[..., None], -q, q)


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = np.moveaxis(np.asarray(a, dtype=float), -1, 0)
    bw, bx, by, bz = np.moveaxis(np.asarray(b, dtype=float), -1, 0)
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    if q.ndim == 1:
        w, x, y, z = q
        return np.array([[1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
                         [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
                         [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)]])
    w, x, y, z = np.moveaxis(q, -1, 0)
    out = np.empty(q.shape[:-1] + (3, 3))
    out[..., 0, 0] = 1 - 2 * (y * y + z * z)
    out[..., 0, 1] = 2 * (x * y - w * z)
    out[..., 0, 2] = 2 * (x * z + w * y)
    out[..., 1, 0] = 2 * (x * y + w * z)
    out[..., 1, 1] = 1 - 2 * (x * x + z * z)
    out[..., 1, 2] = 2 * (y * z - w * x)
    out[..., 2, 0] = 2 * (x * z - w * y)
    out[..., 2, 1] = 2 * (y * z + w * x)
    out[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return out


def matrix_to_quat(R: np.ndarray) -> np.ndarray:
    """Shepperd's method, batched."""
    R = np.asarray(R, dtype=float)
    m = R.reshape(-1, 3, 3)
    tr = np.trace(m, axis1=1, axis2=2)
    diag = np.stack([m[:, 0, 0], m[:, 1, 1], m[:, 2, 2]], axis=1)
    choice = np.argmax(np.concatenate([tr[:, None], diag], axis=1), axis=1)
    q = np.empty((m.shape[0], 4))
    for i in range(m.shape[0]):
        r = m[i]
        c = choice[i]
        if c == 0:
            s = 2.0 * np.sqrt(1.0 + tr[i])
            q[i] = [0.25 * s, (r[2, 1] - r[1, 2]) / s, (r[0, 2] - r[2, 0]) / s, (r[1, 0] - r[0, 1]) / s]
        elif c == 1:
            s = 2.0 * np.sqrt(1.0 + r[0, 0] - r[1, 1] - r[2, 2])
            q[i] = [(r[2, 1] - r[1, 2]) / s, 0.25 * s, (r[0, 1] + r[1, 0]) / s, (r[0, 2] + r[2, 0]) / s]
        elif c == 2:
            s = 2.0 * np.sqrt(1.0 - r[0, 0] + r[1, 1] - r[2, 2])
            q[i] = [(r[0, 2] - r[2, 0]) / s, (r[0, 1] + r[1, 0]) / s, 0.25 * s, (r[1, 2] + r[2, 1]) / s]
        else:
            s = 2.0 * np.sqrt(1.0 - r[0, 0] - r[1, 1] + r[2, 2])
            q[i] = [(r[1, 0] - r[0, 1]) / s, (r[0, 2] + r[2, 0]) / s, (r[1, 2] + r[2, 1]) / s, 0.25 * s]
    return _canonical(q).reshape(R.shape[:-2] + (4,))


def quat_exp(omega: np.ndarray) -> np.ndarray:
    omega = np.asarray(omega, dtype=float)
    theta = np.linalg.norm(omega, axis=-1)
    small = theta < SMALL_ANGLE
    safe = np.where(small, 1.0, theta)
    half = 0.5 * theta
    # second-order Taylor for the small branch
    w = np.where(small, 1.0 - theta**2 / 8.0, np.cos(half))
    k = np.where(small, 0.5 - theta**2 / 48.0, np.sin(half) / safe)
    q = np.concatenate([w[..., None], k[..., None] * omega], axis=-1)
    return _canonical(q)


def _quat_log_1(q: np.ndarray) -> np.ndarray:
    w, v = q[0], q[1:]
    n = math.sqrt(v @ v)
    if n < SMALL_ANGLE:
        k = 2.0 / w * (1.0 - n * n / (3.0 * w * w))
    else:
        k = 2.0 * math.atan2(n, w) / n
    return k * v


def quat_log(q: np.ndarray) -> np.ndarray:
    q = _canonical(q)
    if q.ndim == 1:
        return _quat_log_1(q)
    w = q[..., 0]
    v = q[..., 1:]
    n = np.linalg.norm(v, axis=-1)
    small = n < SMALL_ANGLE
    safe_n = np.where(small, 1.0, n)
    safe_w = np.where(small, w, 1.0)
    k_small = 2.0 / safe_w * (1.0 - n**2 / (3.0 * safe_w**2))
    k_big = 2.0 * np.arctan2(n, w) / safe_n
    k = np.where(small, k_small, k_big)
    return k[..., None] * v


# --------------------------------------------------------------------------
# matrix-level maps used by the factors


def so3_exp(omega: np.ndarray) -> np.ndarray:
    omega = np.asarray(omega, dtype=float)
    if omega.ndim == 1:
        th = math.sqrt(omega @ omega)
        if th < SMALL_ANGLE:
            a, b = 1.0 - th * th / 6.0, 0.5 - th * th / 24.0
        else:
            a, b = math.sin(th) / th, (1.0 - math.cos(th)) / (th * th)
        K = skew(omega)
        return np.eye(3) + a * K + b * (K @ K)
    theta = np.linalg.norm(omega, axis=-1)
    small = theta < SMALL_ANGLE
    safe = np.where(small, 1.0, theta)
    a = np.where(small, 1.0 - theta**2 / 6.0, np.sin(theta) / safe)
    b = np.where(small, 0.5 - theta**2 / 24.0, (1.0 - np.cos(theta)) / safe**2)
    K = skew(omega)
    eye = np.broadcast_to(np.eye(3), K.shape)
    return eye + a[..., None, None] * K + b[..., None, None] * (K @ K)


def so3_log(R: np.ndarray) -> np.ndarray:
    R = np.asarray(R, dtype=float)
    if R.ndim == 2 and R[0, 0] + R[1, 1] + R[2, 2] > 0:
        # common single-matrix case: the trace branch of Shepperd's method, w > 0 already canonical
        s = 2.0 * math.sqrt(1.0 + R[0, 0] + R[1, 1] + R[2, 2])
        q = np.array([0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s])
        return _quat_log_1(q / math.sqrt(q @ q))
    return quat_log(matrix_to_quat(R))


def right_jacobian(phi: np.ndarray) -> np.ndarray:
    phi = np.asarray(phi, dtype=float)
    if phi.ndim == 1:
        th = math.sqrt(phi @ phi)
        if th < 1e-5:
            a, b = 0.5 - th * th / 24.0, 1.0 / 6.0 - th * th / 120.0
        else:
            a, b = (1.0 - math.cos(th)) / (th * th), (th - math.sin(th)) / th**3
        K = skew(phi)
        return np.eye(3) - a * K + b * (K @ K)
    theta = np.linalg.norm(phi, axis=-1)
    small = theta < 1e-5
    safe = np.where(small, 1.0, theta)
    a = np.where(small, 0.5 - theta**2 / 24.0, (1.0 - np.cos(theta)) / safe**2)
    b = np.where(small, 1.0 / 6.0 - theta**2 / 120.0, (theta - np.sin(theta)) / safe**3)
    K = skew(phi)
    eye = np.broadcast_to(np.eye(3), K.shape)
    return eye - a[..., None, None] * K + b[..., None, None] * (K @ K)


def right_jacobian_inv(phi: np.ndarray) -> np.ndarray:
    phi = np.asarray(phi, dtype=float)
    if phi.ndim == 1:
        th = math.sqrt(phi @ phi)
        if th < 1e-5:
            c = 1.0 / 12.0 + th * th / 720.0
        else:
            c = 1.0 / (th * th) - (1.0 + math.cos(th)) / (2.0 * th * math.sin(th))
        K = skew(phi)
        return np.eye(3) + 0.5 * K + c * (K @ K)
    theta = np.linalg.norm(phi, axis=-1)
    small = theta < 1e-5
    safe = np.where(small, 1.0, theta)
    c = np.where(
        small,
        1.0 / 12.0 + theta**2 / 720.0,
        1.0 / safe**2 - (1.0 + np.cos(theta)) / (2.0 * safe * np.sin(np.where(small, 1.0, theta))),
    )
    K = skew(phi)
    eye = np.broadcast_to(np.eye(3), K.shape)
    return eye + 0.5 * K + c[..., None, None] * (K @ K)


def left_jacobian_inv(phi: np.ndarray) -> np.ndarray:
    return right_jacobian_inv(-np.asarray(phi, dtype=float))


# --------------------------------------------------------------------------
# value types


def _finite(v, name):
    arr = np.asarray(v, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise InvalidArgument(f"{name} must be finite, got {v!r}")
    return arr


@dataclass(frozen=True, eq=False)
class Rotation:
    quat: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.quat, dtype=float).reshape(4)
        n = np.linalg.norm(q)
        if not np.isfinite(n) or n == 0:
            raise InvalidArgument("quaternion must be finite and nonzero")
        object.__setattr__(self, "quat", _canonical(q))

    @classmethod
    def identity(cls) -> "Rotation":
        return cls(np.array([1.0, 0.0, 0.0, 0.0]))

    @classmethod
    def from_matrix(cls, R) -> "Rotation":
        return cls(matrix_to_quat(np.asarray(R, dtype=float)))

    @classmethod
    def from_axis_angle(cls, axis, angle: float) -> "Rotation":
        axis = np.asarray(axis, dtype=float)
        return exp_so3(axis / np.linalg.norm(axis) * angle)

    def matrix(self) -> np.ndarray:
        return quat_to_matrix(self.quat)

    def inverse(self) -> "Rotation":
        w, x, y, z = self.quat
        return Rotation(np.array([w, -x, -y, -z]))

    def __mul__(self, other):
        if isinstance(other, Rotation):
            return Rotation(quat_multiply(self.quat, other.quat))
        return NotImplemented

    def apply(self, v) -> np.ndarray:
        return np.asarray(v, dtype=float) @ self.matrix().T

    def angle_to(self, other: "Rotation") -> float:
        return float(np.linalg.norm(log_so3(self.inverse() * other)))

    def __eq__(self, other):
        return isinstance(other, Rotation) and np.array_equal(self.quat, other.quat)

    def __repr__(self):
        return f"Rotation({np.array2string(self.quat, precision=6)})"


def exp_so3(omega) -> Rotation:
    omega = _finite(omega, "omega").reshape(3)
    return Rotation(quat_exp(omega))


def log_so3(r: Rotation) -> np.ndarray:
    return quat_log(r.quat)


def slerp_fraction(r0: Rotation, r1: Rotation, s: float) -> Rotation:
    """Geodesic point a fraction ``s`` of the way from ``r0`` to ``r1``."""
    if not (0.0 <= s <= 1.0):
        raise InvalidArgument(f"interpolation fraction must lie in [0, 1], got {s}")
    return r0 * exp_so3(s * log_so3(r0.inverse() * r1))


@dataclass(frozen=True, eq=False)
class Pose:
    rotation: Rotation = field(default_factory=Rotation.identity)
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "translation", _finite(self.translation, "translation").reshape(3).copy())

    @classmethod
    def identity(cls) -> "Pose":
        return cls()

    @classmethod
    def from_matrix(cls, R, t) -> "Pose":
        return cls(Rotation.from_matrix(R), np.asarray(t, dtype=float))

    @classmethod
    def from_row(cls, row) -> "Pose":
        row = np.asarray(row, dtype=float)
        return cls(Rotation(row[:4]), row[4:7])

    def to_row(self) -> list[float]:
        return [float(x) for x in np.concatenate([self.rotation.quat, self.translation])]

    @property
    def R(self) -> np.ndarray:
        return self.rotation.matrix()

    @property
    def t(self) -> np.ndarray:
        return self.translation

    def __mul__(self, other):
        if isinstance(other, Pose):
            return Pose(self.rotation * other.rotation, self.rotation.apply(other.translation) + self.translation)
        return NotImplemented

    def inverse(self) -> "Pose":
        inv = self.rotation.inverse()
        return Pose(inv, -inv.apply(self.translation))

    def apply(self, points) -> np.ndarray:
        return np.asarray(points, dtype=float) @ self.R.T + self.translation

    def __eq__(self, other):
        return isinstance(other, Pose) and self.rotation == other.rotation and np.array_equal(
            self.translation, other.translation
        )

    def __repr__(self):
        q = np.array2string(self.rotation.quat, precision=6)
        return f"Pose(q={q}, t={np.array2string(self.translation, precision=6)})"


def rot_z(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
