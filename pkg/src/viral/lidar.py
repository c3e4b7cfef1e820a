"""Local point maps and point-to-plane feature-map matching (FMM) factors."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .geometry import InvalidArgument, Pose, quat_to_matrix
from .solver import Factor


@dataclass
class LidarConfig:
    knn: int = 5
    voxel: float = 0.4
    plane_gate: float = 0.1  # |n*^T x + 1| bound on every neighbor
    max_neighbor_dist: float = 1.0
    min_weight: float = 0.1
    sigma: float = 0.05  # m, whitening of the point-to-plane distance
    huber: float = 1.0


def fit_planes(neighbors: np.ndarray, gate: float = 0.1):
    """Batched least-squares ``n`` with ``n^T x = -1`` over neighbor sets of shape (m, k, 3).

    Returns (n (m,3), ok (m,), |n^T x + 1| (m,k)).  A set is rejected when its
    normal matrix is rank deficient or any neighbor misses the gate.
    """
    X = np.asarray(neighbors, dtype=float)
    m = X.shape[0]
    if m == 0 or X.shape[1] < 3:
        return np.zeros((m, 3)), np.zeros(m, dtype=bool), np.zeros(X.shape[:2])
    A = np.einsum("mki,mkj->mij", X, X)
    b = -X.sum(axis=1)
    w = np.linalg.eigvalsh(A)
    good = w[:, 0] > 1e-10 * np.maximum(w[:, -1], 1e-300)
    A[~good] = np.eye(3)
    n = np.linalg.solve(A, b[..., None])[..., 0]
    res = np.abs(np.einsum("mki,mi->mk", X, n) + 1.0)
    ok = good & np.all(res < gate, axis=1) & np.all(np.isfinite(n), axis=1)
    n[~good] = 0.0
    return n, ok, res


def fit_plane(neighbors: np.ndarray, gate: float = 0.1):
    """Single-set version of :func:`fit_planes`; returns (n, ok, |n^T x + 1|)."""
    X = np.asarray(neighbors, dtype=float)
    n, ok, res = fit_planes(X[None], gate)
    return n[0], bool(ok[0]), res[0]


def voxel_downsample(points: np.ndarray, res: float) -> np.ndarray:
    """One point per occupied voxel: the one nearest the voxel center."""
    P = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(P) == 0 or res <= 0:
        return P.copy()
    keys = np.floor(P / res).astype(np.int64)
    dist = np.linalg.norm(P - (keys + 0.5) * res, axis=1)
    order = np.lexsort((dist, keys[:, 2], keys[:, 1], keys[:, 0]))
    k = keys[order]
    first = np.ones(len(order), dtype=bool)
    first[1:] = np.any(k[1:] != k[:-1], axis=1)
    return P[order[first]]


class LocalMap:
    """Immutable point set with a KD-tree for nearest-neighbor queries."""

    def __init__(self, points: np.ndarray, voxel: float = 0.0):
        self.points = np.ascontiguousarray(np.asarray(points, dtype=float).reshape(-1, 3))
        self.points.flags.writeable = False
        self.voxel = voxel
        self.tree = cKDTree(self.points) if len(self.points) else None

    def __len__(self):
        return len(self.points)

    def knn(self, queries: np.ndarray, k: int):
        q = np.asarray(queries, dtype=float).reshape(-1, 3)
        if self.tree is None:
            raise InvalidArgument("local map is empty")
        k = min(k, len(self.points))
        d, i = self.tree.query(q, k=k)
        return d.reshape(len(q), k), i.reshape(len(q), k)


def build_local_map(keyframes: list[tuple[Pose, np.ndarray]], voxel: float = 0.4) -> LocalMap:
    """Union of keyframe clouds (body frame) moved by their poses, voxel-downsampled."""
    if not keyframes:
        raise InvalidArgument("local map needs at least one keyframe")
    pts = [pose.apply(np.asarray(cloud).reshape(-1, 3)) for pose, cloud in keyframes if len(cloud)]
    if not pts:
        raise InvalidArgument("selected keyframes carry no points")
    return LocalMap(voxel_downsample(np.vstack(pts), voxel), voxel)


@dataclass(frozen=True)
class FmmCoefficients:
    """A batch of plane associations: body point ``f``, unit normal, offset and weight."""

    f: np.ndarray
    normal: np.ndarray
    d: np.ndarray
    weight: np.ndarray

    def __len__(self):
        return len(self.d)

    @staticmethod
    def empty() -> "FmmCoefficients":
        return FmmCoefficients(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0), np.zeros(0))

    def distances(self, pose: Pose) -> np.ndarray:
        """Unweighted signed point-to-plane distances at ``pose``."""
        return np.einsum("ij,ij->i", self.normal, pose.apply(self.f)) + self.d


def extract_fmm(points: np.ndarray, pose: Pose, local_map: LocalMap, config: LidarConfig | None = None) -> FmmCoefficients:
    cfg = config or LidarConfig()
    F = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(F) == 0 or len(local_map) < cfg.knn:
        return FmmCoefficients.empty()
    world = pose.apply(F)
    dist, idx = local_map.knn(world, cfg.knn)
    near = np.flatnonzero(dist[:, -1] <= cfg.max_neighbor_dist)
    if near.size == 0:
        return FmmCoefficients.empty()
    n, ok, res = fit_planes(local_map.points[idx[near]], cfg.plane_gate)
    if not ok.any():
        return FmmCoefficients.empty()
    n, res, sel = n[ok], res[ok], near[ok]
    norm = np.linalg.norm(n, axis=1)
    weight = np.maximum(1.0 - res.mean(axis=1) / cfg.plane_gate, cfg.min_weight)
    return FmmCoefficients(F[sel], n / norm[:, None], 1.0 / norm, weight)


def lidar_residual(R: np.ndarray, p: np.ndarray, c: FmmCoefficients, sigma: float = 1.0, jacobians: bool = True):
    """Weighted point-to-plane residuals (n,) and Jacobians (n,3) w.r.t. rotation and position."""
    a = c.normal @ R  # rows R^T n
    r = (np.einsum("ij,ij->i", a, c.f) + c.normal @ p + c.d) * c.weight / sigma
    if not jacobians:
        return r, None, None
    s = (c.weight / sigma)[:, None]
    return r, np.cross(c.f, a) * s, c.normal * s


class LidarFactor(Factor):
    """FMM residuals on one state or pose block; rotation and position lead its tangent."""

    name = "lidar"

    def __init__(self, coeffs: FmmCoefficients, sigma: float = 0.05, local_size: int = 15):
        self.c = coeffs
        self.sigma = sigma
        self.local_size = local_size

    def evaluate(self, values, jacobians=True):
        x = values[0]
        r, Jr, Jp = lidar_residual(quat_to_matrix(x[:4]), x[4:7], self.c, self.sigma, jacobians)
        if not jacobians:
            return r[:, None], None
        J = np.zeros((len(r), 1, self.local_size))
        J[:, 0, 0:3] = Jr
        J[:, 0, 3:6] = Jp
        return r[:, None], [J]
