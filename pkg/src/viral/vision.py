"""Pinhole cameras, inverse-depth visual tracks, reprojection factors and
map-matching marginalization (MMM) of visual features against the lidar map.

Observations are normalized image coordinates (x, y); the homogeneous ray is
(x, y, 1), so a feature at inverse depth lambda sits at (x, y, 1) / lambda in
its anchor camera.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import InvalidArgument, Pose, quat_to_matrix, skew
from .lidar import LocalMap, fit_planes
from .solver import Factor


class BehindCamera(InvalidArgument):
    pass


@dataclass(frozen=True)
class CameraModel:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int = 752
    height: int = 480
    extrinsic: Pose = field(default_factory=Pose.identity)  # camera -> body

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise InvalidArgument("focal lengths must be positive")

    def to_pixel(self, xy: np.ndarray) -> np.ndarray:
        xy = np.asarray(xy, dtype=float)
        return np.stack([xy[..., 0] * self.fx + self.cx, xy[..., 1] * self.fy + self.cy], axis=-1)

    def to_normalized(self, uv: np.ndarray) -> np.ndarray:
        uv = np.asarray(uv, dtype=float)
        return np.stack([(uv[..., 0] - self.cx) / self.fx, (uv[..., 1] - self.cy) / self.fy], axis=-1)

    def in_image(self, uv: np.ndarray) -> np.ndarray:
        uv = np.asarray(uv, dtype=float)
        return (uv[..., 0] >= 0) & (uv[..., 0] < self.width) & (uv[..., 1] >= 0) & (uv[..., 1] < self.height)

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy, "width": self.width,
                "height": self.height, "extrinsic": self.extrinsic.to_row()}

    @classmethod
    def from_dict(cls, d: dict) -> "CameraModel":
        return cls(d["fx"], d["fy"], d["cx"], d["cy"], d.get("width", 752), d.get("height", 480),
                   Pose.from_row(d["extrinsic"]))


def project(point_cam: np.ndarray) -> np.ndarray:
    p = np.asarray(point_cam, dtype=float)
    if np.any(p[..., 2] <= 0):
        raise BehindCamera("point behind the camera")
    return p[..., :2] / p[..., 2:3]


def back_project(xy: np.ndarray, inv_depth: float) -> np.ndarray:
    xy = np.asarray(xy, dtype=float)
    return np.append(xy, 1.0) / inv_depth


def observe(points: np.ndarray, ids: np.ndarray, body: Pose, cameras: list[CameraModel],
            max_range: float = 30.0, min_depth: float = 0.2) -> np.ndarray:
    """Noise-free observations (camera, id, x, y) of world points from a body pose."""
    out = []
    for ci, cam in enumerate(cameras):
        T = body * cam.extrinsic
        pc = T.inverse().apply(points)
        vis = (pc[:, 2] > min_depth) & (np.linalg.norm(pc, axis=1) < max_range)
        xy = pc[vis, :2] / pc[vis, 2:3]
        inside = cam.in_image(cam.to_pixel(xy))
        sel = np.flatnonzero(vis)[inside]
        if sel.size:
            out.append(np.c_[np.full(sel.size, ci), ids[sel], xy[inside]])
    return np.vstack(out) if out else np.zeros((0, 4))


def compensate_delay(xy_now: np.ndarray, xy_prev: np.ndarray | None, dt_prev: float, delay: float) -> np.ndarray:
    """Shift an observation taken ``delay`` seconds after the step time back to the step time.

    The image-plane velocity is the finite difference of the previous two
    observations of the same feature.
    """
    if xy_prev is None or dt_prev <= 0 or delay == 0:
        return np.asarray(xy_now, dtype=float)
    vel = (np.asarray(xy_now) - np.asarray(xy_prev)) / dt_prev
    return np.asarray(xy_now, dtype=float) - delay * vel


def triangulate(Ta: Pose, za: np.ndarray, Tb: Pose, zb: np.ndarray) -> float | None:
    """Inverse depth of the feature in camera a from two camera poses in a common frame."""
    ua = Ta.R @ np.append(za, 1.0)
    ub = Tb.R @ np.append(zb, 1.0)
    A = np.c_[ua, -ub]
    rhs = Tb.t - Ta.t
    M = A.T @ A
    if np.linalg.cond(M) > 1e10:
        return None
    s, _ = np.linalg.solve(M, A.T @ rhs)
    if s <= 1e-3:
        return None
    return 1.0 / s


# --------------------------------------------------------------------------
# tracks


@dataclass
class VisualTrack:
    """A feature anchored at its first observation; ``obs`` holds (camera, step, xy)."""

    id: int
    anchor_cam: int
    anchor_step: int
    anchor_xy: np.ndarray
    inv_depth: float
    obs: list[tuple[int, int, np.ndarray]] = field(default_factory=list)
    status: str = "free"  # free | mmm
    fbar: np.ndarray | None = None

    @property
    def marginalized(self) -> bool:
        return self.status == "mmm"

    def steps(self) -> set[int]:
        return {self.anchor_step} | {s for _, s, _ in self.obs}


def visual_residual(xa, xb, za, zb, inv_depth, cam_a: CameraModel, cam_b: CameraModel, jacobians=True):
    """Single-observation reprojection residual (unwhitened) with Jacobians (x_a rot|pos, x_b rot|pos, lambda)."""
    Ra, pa = quat_to_matrix(xa[:4]), xa[4:7]
    Rb, pb = quat_to_matrix(xb[:4]), xb[4:7]
    ray = np.append(za, 1.0)
    g = cam_a.extrinsic.R @ (ray / inv_depth) + cam_a.extrinsic.t
    fL = Ra @ g + pa
    w = Rb.T @ (fL - pb)
    Rcb = cam_b.extrinsic.R
    fc = Rcb.T @ (w - cam_b.extrinsic.t)
    if fc[2] <= 1e-6:
        raise BehindCamera("feature behind camera b")
    r = fc[:2] / fc[2] - zb
    if not jacobians:
        return r, None
    P = np.array([[1 / fc[2], 0, -fc[0] / fc[2] ** 2], [0, 1 / fc[2], -fc[1] / fc[2] ** 2]])
    A = Rcb.T @ Rb.T
    Ja = np.zeros((2, 6))
    Jb = np.zeros((2, 6))
    Ja[:, :3] = P @ A @ (-Ra @ skew(g))
    Ja[:, 3:] = P @ A
    Jb[:, :3] = P @ Rcb.T @ skew(w)
    Jb[:, 3:] = -P @ A
    Jl = P @ A @ (Ra @ cam_a.extrinsic.R @ ray) * (-1.0 / inv_depth**2)
    return r, (Ja, Jb, Jl)


class VisualFactor(Factor):
    """All reprojection residuals of a window in one batch.

    Parameter blocks: the window's NavStates followed by one vector of free
    inverse depths.  Each sample i links anchor state ``a[i]`` and observing
    state ``b[i]`` (possibly equal).  ``depth_index[i] < 0`` marks a sample whose
    inverse depth is the fixed constant ``fixed_depth[i]`` (MMM features).
    """

    name = "visual"

    def __init__(self, n_states, a, b, cam_a, cam_b, za, zb, depth_index, fixed_depth, cameras, sigma_norm):
        self.n_states = n_states
        self.a = np.asarray(a, dtype=int)
        self.b = np.asarray(b, dtype=int)
        self.cam_a = np.asarray(cam_a, dtype=int)
        self.cam_b = np.asarray(cam_b, dtype=int)
        self.za = np.asarray(za, dtype=float).reshape(-1, 2)
        self.zb = np.asarray(zb, dtype=float).reshape(-1, 2)
        self.depth_index = np.asarray(depth_index, dtype=int)
        self.fixed_depth = np.asarray(fixed_depth, dtype=float)
        self.Rc = np.array([c.extrinsic.R for c in cameras])
        self.tc = np.array([c.extrinsic.t for c in cameras])
        self.scale = 1.0 / sigma_norm
        self.n_free = int(self.depth_index.max() + 1) if self.depth_index.size and self.depth_index.max() >= 0 else 0

    def __len__(self):
        return len(self.a)

    def _core(self, values):
        n = len(self.a)
        states = values[: self.n_states]
        depths = values[self.n_states] if len(values) > self.n_states else np.zeros(0)
        R = np.array([quat_to_matrix(x[:4]) for x in states])
        P = np.array([x[4:7] for x in states])
        lam = np.where(self.depth_index >= 0, depths[np.maximum(self.depth_index, 0)] if depths.size else 0.0,
                       self.fixed_depth)
        lam_safe = np.where(lam > 1e-9, lam, 1e-9)
        ray = np.c_[self.za, np.ones(n)]
        Rca, tca = self.Rc[self.cam_a], self.tc[self.cam_a]
        Rcb, tcb = self.Rc[self.cam_b], self.tc[self.cam_b]
        Ra, Rb = R[self.a], R[self.b]
        g = np.einsum("nij,nj->ni", Rca, ray / lam_safe[:, None]) + tca
        fL = np.einsum("nij,nj->ni", Ra, g) + P[self.a]
        w = np.einsum("nji,nj->ni", Rb, fL - P[self.b])
        fc = np.einsum("nji,nj->ni", Rcb, w - tcb)
        valid = (fc[:, 2] > 1e-3) & (lam > 1e-9)
        z = np.where(valid, fc[:, 2], 1.0)
        r = (fc[:, :2] / z[:, None] - self.zb) * self.scale
        r[~valid] = 0.0
        return r, (n, depths, lam_safe, ray, Rca, Rcb, Ra, Rb, g, w, fc, z, valid)

    def _sample_jacobians(self, core):
        """Per-sample Jacobians w.r.t. the anchor state, the observing state and the depth."""
        n, depths, lam_safe, ray, Rca, Rcb, Ra, Rb, g, w, fc, z, valid = core
        Pj = np.zeros((n, 2, 3))
        Pj[:, 0, 0] = 1 / z
        Pj[:, 1, 1] = 1 / z
        Pj[:, 0, 2] = -fc[:, 0] / z**2
        Pj[:, 1, 2] = -fc[:, 1] / z**2
        Pj *= (self.scale * valid)[:, None, None]
        A = np.einsum("nji,nkj->nik", Rcb, Rb)  # Rcb^T Rb^T
        PA = Pj @ A
        JA = np.zeros((n, 2, 15))
        JB = np.zeros((n, 2, 15))
        JA[:, :, 0:3] = -PA @ Ra @ _skew_batch(g)
        JA[:, :, 3:6] = PA
        JB[:, :, 0:3] = Pj @ np.transpose(Rcb, (0, 2, 1)) @ _skew_batch(w)
        JB[:, :, 3:6] = -PA
        d_ray = np.einsum("nij,nj->ni", Ra, np.einsum("nij,nj->ni", Rca, ray))
        JD = (np.einsum("nij,nj->ni", PA, d_ray) * (-1.0 / lam_safe**2)[:, None])[:, :, None]
        JD[self.depth_index < 0] = 0.0
        return JA, JB, JD

    def evaluate(self, values, jacobians=True):
        r, core = self._core(values)
        if not jacobians:
            return r, None
        n, depths = core[0], core[1]
        JA, JB, JD = self._sample_jacobians(core)
        Js = []
        for s in range(self.n_states):
            J = np.zeros((n, 2, 15))
            J[self.a == s] += JA[self.a == s]
            J[self.b == s] += JB[self.b == s]
            Js.append(J)
        if len(values) > self.n_states:
            Jd = np.zeros((n, 2, len(depths)))
            free = np.flatnonzero(self.depth_index >= 0)
            Jd[free, :, self.depth_index[free]] = JD[free, :, 0]
            Js.append(Jd)
        return r, Js

    def evaluate_compact(self, values):
        r, core = self._core(values)
        JA, JB, JD = self._sample_jacobians(core)
        same = self.a == self.b
        JA[same] += JB[same]
        JB[same] = 0.0
        return r, [np.concatenate([JA, JB], axis=2), JD]

    def accumulate(self, H, g, r, Js, offsets):
        JL, JD = Js
        S = self.n_states
        G = np.einsum("nki,nk->ni", JL, r)
        key = self.a * S + self.b
        order = np.argsort(key, kind="stable")
        ks = key[order]
        JLs = JL[order]
        starts = np.flatnonzero(np.r_[True, ks[1:] != ks[:-1]])
        ends = np.r_[starts[1:], len(ks)]
        for st, en in zip(starts, ends):
            J = JLs[st:en].reshape(-1, 30)
            blk = J.T @ J
            ia, ib = divmod(int(ks[st]), S)
            oa, ob = offsets[ia], offsets[ib]
            if oa is not None:
                H[oa : oa + 15, oa : oa + 15] += blk[:15, :15]
            if ob is not None:
                H[ob : ob + 15, ob : ob + 15] += blk[15:, 15:]
            if oa is not None and ob is not None:
                H[oa : oa + 15, ob : ob + 15] += blk[:15, 15:]
                H[ob : ob + 15, oa : oa + 15] += blk[15:, :15]
        for s in range(S):
            o = offsets[s]
            if o is None:
                continue
            g[o : o + 15] += G[self.a == s, :15].sum(axis=0) + G[self.b == s, 15:].sum(axis=0)
        od = offsets[S] if len(offsets) > S else None
        free = self.depth_index >= 0
        if od is None or not free.any():
            return
        k = self.depth_index[free]
        jd = JD[free, :, 0]  # (m, 2)
        m = self.n_free
        H[od + np.arange(m), od + np.arange(m)] += np.bincount(k, np.einsum("nk,nk->n", jd, jd), minlength=m)
        g[od : od + m] += np.bincount(k, np.einsum("nk,nk->n", jd, r[free]), minlength=m)
        C = np.einsum("nk,nki->ni", jd, JL[free])  # (m_samples, 30)
        for half, states in ((slice(0, 15), self.a[free]), (slice(15, 30), self.b[free])):
            idx = k * S + states
            block = np.stack([np.bincount(idx, C[:, half][:, c], minlength=m * S) for c in range(15)], axis=1)
            block = block.reshape(m, S, 15)
            for s in range(S):
                o = offsets[s]
                if o is None or not block[:, s].any():
                    continue
                H[od : od + m, o : o + 15] += block[:, s]
                H[o : o + 15, od : od + m] += block[:, s].T


def _skew_batch(v):
    S = np.zeros(v.shape[:-1] + (3, 3))
    S[..., 0, 1] = -v[..., 2]
    S[..., 0, 2] = v[..., 1]
    S[..., 1, 0] = v[..., 2]
    S[..., 1, 2] = -v[..., 0]
    S[..., 2, 0] = -v[..., 1]
    S[..., 2, 1] = v[..., 0]
    return S


# --------------------------------------------------------------------------
# map-matching marginalization


@dataclass
class MmmConfig:
    knn: int = 5
    nearest_gate: float = 0.25
    cluster_gate: float = 1.0
    plane_gate: float = 0.1


def mmm_marginalize_batch(za: np.ndarray, inv_depth: np.ndarray, Ra: np.ndarray, pa: np.ndarray,
                          cams: list[CameraModel], local_map: LocalMap, config: MmmConfig | None = None):
    """Vectorized MMM.  Inputs per feature: anchor xy (n,2), inverse depth (n,),
    anchor rotation (n,3,3) and position (n,3), anchor camera model.
    Returns (accepted (n,), fbar (n,3)).
    """
    cfg = config or MmmConfig()
    za = np.asarray(za, dtype=float).reshape(-1, 2)
    n = len(za)
    acc = np.zeros(n, dtype=bool)
    fbar = np.full((n, 3), np.nan)
    if n == 0 or len(local_map) < cfg.knn:
        return acc, fbar
    ray = np.c_[za, np.ones(n)]
    Rc = np.array([c.extrinsic.R for c in cams])
    tc = np.array([c.extrinsic.t for c in cams])
    f_body = np.einsum("nij,nj->ni", Rc, ray / np.asarray(inv_depth)[:, None]) + tc
    fL = np.einsum("nij,nj->ni", Ra, f_body) + pa
    dist, idx = local_map.knn(fL, cfg.knn)
    N = local_map.points[idx]  # (n, k, 3)
    nstar, ok, res = fit_planes(N, np.inf)
    cam_p = np.einsum("nij,nj->ni", Ra, tc) + pa
    u = np.einsum("nij,nj->ni", Ra, np.einsum("nij,nj->ni", Rc, ray))
    denom = np.einsum("ni,ni->n", nstar, u)
    ok &= np.abs(denom) > 1e-9
    safe = np.where(ok, denom, 1.0)
    c = cam_p - u * ((1.0 + np.einsum("ni,ni->n", nstar, cam_p)) / safe)[:, None]
    near = dist[:, 0] <= cfg.nearest_gate
    close = (np.linalg.norm(c - fL, axis=1) < cfg.cluster_gate) & np.all(
        np.linalg.norm(N - c[:, None, :], axis=2) < cfg.cluster_gate, axis=1)
    planar = np.all(res < cfg.plane_gate, axis=1)
    # the intersection must lie in front of the camera
    front = np.einsum("ni,ni->n", c - cam_p, u) > 0
    acc = ok & near & close & planar & front
    fbar[acc] = c[acc]
    return acc, fbar


def mmm_marginalize(za, inv_depth, anchor: Pose, cam: CameraModel, local_map: LocalMap, config: MmmConfig | None = None):
    """Single-feature MMM; returns the marginalized world point or None."""
    acc, fbar = mmm_marginalize_batch(np.asarray(za)[None], np.array([inv_depth]), anchor.R[None],
                                      anchor.t[None], [cam], local_map, config)
    return fbar[0] if acc[0] else None


def depth_in_anchor(fbar: np.ndarray, anchor: Pose, cam: CameraModel) -> float:
    """Inverse depth of a world point in the anchor camera."""
    pc = (anchor * cam.extrinsic).inverse().apply(fbar)
    return 1.0 / pc[2]
