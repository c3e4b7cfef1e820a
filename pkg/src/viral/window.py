"""Sliding-window odometry: assemble IMU, lidar, UWB and visual factors over the
last M states, solve, run MMM, slide and nominate keyframe candidates."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .geometry import InvalidArgument, Pose, Rotation, quat_to_matrix, so3_exp, so3_log
from .globalmap import KeyframeCandidate
from .imu import ImuFactor, ImuNoise, NavState, Preintegration, gravity_aligned_rotation, preintegrate, propagate_array
from .lidar import LidarConfig, LidarFactor, LocalMap, build_local_map, extract_fmm
from .solver import (
    NAVSTATE,
    EvaluationError,
    Euclidean,
    LinearPrior,
    Problem,
    SolveOptions,
    arctan,
    huber,
    marginal_prior,
    solve,
)
from .timebase import StepFrame, UwbMeasurement
from .uwb import AnchorNetwork, MarginalizedUwbSample, UwbExtrinsics, UwbFactor, UwbSample, interp_coeffs
from .vision import (
    CameraModel,
    MmmConfig,
    VisualFactor,
    VisualTrack,
    compensate_delay,
    depth_in_anchor,
    mmm_marginalize_batch,
    triangulate,
)

log = logging.getLogger(__name__)

MapProvider = Callable[[Pose], "LocalMap | None"]


class EstimatorAbort(RuntimeError):
    pass


@dataclass
class WindowConfig:
    size: int = 10
    iterations: int = 6
    tolerance: float = 1e-6
    lidar: LidarConfig = field(default_factory=LidarConfig)
    lidar_max_points: int = 300  # per step, after voxel thinning
    lidar_voxel: float = 0.3
    mmm: MmmConfig = field(default_factory=MmmConfig)
    mmm_min_states: int = 4
    mmm_max_depth_sigma: float = 0.1  # m, parallax-based depth uncertainty a free track must reach first
    pixel_sigma: float = 1.0
    visual_loss: float = 3.0  # arctan scale on whitened residuals
    max_tracks: int = 120
    min_inv_depth: float = 1.0 / 40.0
    max_inv_depth: float = 1.0 / 0.3
    imu_noise: ImuNoise = field(default_factory=ImuNoise)
    uwb_sigma: float = 0.05
    uwb_gate: float = 5.0  # innovation gate, in sigmas
    uwb_window: float = 0.2  # s, keyframe association
    prior_sigmas: tuple = (0.02, 0.02, 1e-4, 1e-4, 1e-4, 1e-4, 0.05, 0.05, 0.05, 1e-2, 1e-2, 1e-2, 0.05, 0.05, 0.05)
    max_failures: int = 5
    use_cam: bool = True
    use_uwb: bool = True


@dataclass
class MmmEvent:
    step: int
    t: float
    track: int
    fbar: np.ndarray
    kind: str = "marginalized"  # marginalized | released (left the window with its final f_bar)


@dataclass
class WindowReport:
    step: int
    t: float
    state: np.ndarray
    cost_before: float
    cost_after: float
    iterations: int
    monotone: bool
    counts: dict
    degraded: bool = False
    fusion: bool = False
    candidate: KeyframeCandidate | None = None
    mmm: list[MmmEvent] = field(default_factory=list)
    cost_history: list[float] = field(default_factory=list)


@dataclass
class _Slot:
    """Per-state window entry; ``pre`` and ``uwb`` link this state to the one before it."""

    step: int
    t: float
    x: np.ndarray
    cloud: np.ndarray
    pre: Preintegration | None
    uwb: tuple[UwbMeasurement, ...]
    landmarks: frozenset
    fmm: object = None
    scan: np.ndarray | None = None  # full cloud, for maps and keyframes


def _thin(points: np.ndarray, voxel: float, cap: int) -> np.ndarray:
    """Deterministic voxel thinning (first point per cell), then an even stride down to ``cap``."""
    P = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(P) == 0:
        return P
    if voxel > 0:
        keys = np.floor(P / voxel).astype(np.int64)
        _, first = np.unique(keys, axis=0, return_index=True)
        P = P[np.sort(first)]
    if len(P) > cap:
        P = P[np.linspace(0, len(P) - 1, cap).round().astype(int)]
    return P


def interpolated_pose(x_prev: np.ndarray, x_curr: np.ndarray, tau: float, t_prev: float, t_curr: float) -> Pose:
    """Body pose at ``tau`` under the UWB sample model (slerped rotation, velocity-corrected position)."""
    s, a, b = interp_coeffs(tau - t_prev, t_curr - t_prev)
    Rp, Rc = quat_to_matrix(x_prev[:4]), quat_to_matrix(x_curr[:4])
    R = Rp @ so3_exp(s * so3_log(Rp.T @ Rc))
    return Pose.from_matrix(R, x_curr[4:7] - a * x_prev[7:10] - b * x_curr[7:10])


class SlidingWindow:
    def __init__(self, config: WindowConfig, cameras: list[CameraModel], anchors: AnchorNetwork | None,
                 tags: np.ndarray | None, gravity: float = 9.81, map_provider: MapProvider | None = None):
        self.cfg = config
        self.cameras = cameras
        self.anchors = anchors
        self.tags = None if tags is None else np.asarray(tags, dtype=float)
        self.gravity = gravity
        self.noise = config.imu_noise
        self.map_provider = map_provider
        self.slots: list[_Slot] = []
        self.prior: LinearPrior | None = None
        self.prior_steps: list[int] = []
        self.tracks: dict[int, VisualTrack] = {}
        self._released: list[MmmEvent] = []
        self.ext: UwbExtrinsics | None = None  # fusion enabled iff set
        self.bootstrap_map: LocalMap | None = None
        self.failures = 0
        self.init_acc: np.ndarray | None = None
        self._last_xy: dict[tuple[int, int], tuple[int, np.ndarray]] = {}

    # ------------------------------------------------------------------ API

    @property
    def fusion(self) -> bool:
        return self.ext is not None

    def set_extrinsics(self, ext: UwbExtrinsics | None) -> None:
        """Swap the UWB extrinsics; only called between steps."""
        self.ext = ext

    def states(self) -> list[tuple[int, float, np.ndarray]]:
        return [(s.step, s.t, s.x.copy()) for s in self.slots]

    def step(self, frame: StepFrame, init_acc: np.ndarray | None = None) -> WindowReport:
        if self.slots and frame.t <= self.slots[-1].t:
            raise InvalidArgument("frames must arrive in increasing time order")
        cloud = _thin(frame.cloud.points, self.cfg.lidar_voxel, self.cfg.lidar_max_points)
        landmarks = frozenset()
        if frame.image is not None and len(frame.image.obs):
            landmarks = frozenset(int(i) for i in frame.image.obs[:, 1])
        if not self.slots:
            return self._bootstrap(frame, cloud, landmarks, init_acc)
        last = self.slots[-1]
        if frame.imu is None or len(frame.imu) < 2:
            raise InvalidArgument("step frame lacks an IMU segment")
        pre = preintegrate(frame.imu, last.x[10:13], last.x[13:16], self.gravity, self.noise)
        x_pred = propagate_array(last.x, pre)
        self.slots.append(_Slot(frame.index, frame.t, x_pred, cloud, pre, tuple(frame.uwb), landmarks,
                                scan=frame.cloud.points))
        if self.cfg.use_cam and frame.image is not None:
            self._add_observations(frame)
        local = self._local_map(Pose.from_row(x_pred[:7]))
        saved = [s.x.copy() for s in self.slots]
        counts: dict = {}
        degraded = False
        try:
            rep = self._solve(local, counts)
            self.failures = 0
        except EvaluationError as e:
            self.failures += 1
            log.warning("step %d: solver evaluation failed (%s); keeping the IMU prediction", frame.index, e)
            if self.failures > self.cfg.max_failures:
                raise EstimatorAbort(f"{self.failures} consecutive solver failures; last: {e}") from e
            for s, x in zip(self.slots, saved):
                s.x = x
            degraded = True
            rep = None
        events, self._released = self._released, []
        if not degraded:
            events += self._mmm_pass(local, frame)
        candidate = self._candidate()
        report = WindowReport(
            frame.index, frame.t, self.slots[-1].x.copy(),
            rep.initial_cost if rep else float("nan"), rep.final_cost if rep else float("nan"),
            rep.iterations if rep else 0, rep.monotone if rep else True, counts, degraded, self.fusion,
            candidate, events, list(rep.cost_history) if rep else [],
        )
        if len(self.slots) >= self.cfg.size:
            self._slide(local)
        return report

    # ------------------------------------------------------------ bootstrap

    def _bootstrap(self, frame: StepFrame, cloud, landmarks, init_acc) -> WindowReport:
        rot = gravity_aligned_rotation(init_acc) if init_acc is not None else Rotation.identity()
        x0 = NavState(rot).to_array()
        sig = np.asarray(self.cfg.prior_sigmas, dtype=float)
        self.prior = LinearPrior(np.diag(1.0 / sig), np.zeros(15), [x0], [NAVSTATE])
        self.prior_steps = [frame.index]
        scan = frame.cloud.points
        self.slots.append(_Slot(frame.index, frame.t, x0, cloud, None, (), landmarks, scan=scan))
        self.bootstrap_map = build_local_map([(Pose.from_row(x0[:7]), scan)], self.cfg.lidar.voxel)
        if self.cfg.use_cam and frame.image is not None:
            self._add_observations(frame)
        cand = KeyframeCandidate(frame.index, frame.t, x0[:7].copy(), scan, landmarks, ())
        return WindowReport(frame.index, frame.t, x0.copy(), 0.0, 0.0, 0, True, {}, False, self.fusion, cand)

    def _local_map(self, predicted: Pose) -> LocalMap:
        local = self.map_provider(predicted) if self.map_provider is not None else None
        return local if local is not None and len(local) >= self.cfg.lidar.knn else self.bootstrap_map

    # --------------------------------------------------------------- vision

    def _slot_index(self, step: int) -> int | None:
        for i, s in enumerate(self.slots):
            if s.step == step:
                return i
        return None

    def _add_observations(self, frame: StepFrame):
        obs = frame.image.obs
        step = frame.index
        dt_prev = frame.t - frame.t_prev if frame.t_prev is not None else 0.0
        by_id: dict[int, dict[int, np.ndarray]] = {}
        for cam, lid, x, y in obs:
            cam, lid = int(cam), int(lid)
            xy = np.array([x, y])
            prev = self._last_xy.get((cam, lid))
            xy_prev = prev[1] if prev is not None and prev[0] == step - 1 else None
            self._last_xy[(cam, lid)] = (step, xy)
            by_id.setdefault(lid, {})[cam] = compensate_delay(xy, xy_prev, dt_prev, frame.delay)
        for lid, views in by_id.items():
            tr = self.tracks.get(lid)
            if tr is not None:
                for cam, xy in sorted(views.items()):
                    tr.obs.append((cam, step, xy))
                continue
            if 0 in views and 1 in views and len(self.cameras) > 1:
                lam = triangulate(self.cameras[0].extrinsic, views[0], self.cameras[1].extrinsic, views[1])
                if lam is None or not (self.cfg.min_inv_depth <= lam <= self.cfg.max_inv_depth):
                    continue
                self.tracks[lid] = VisualTrack(lid, 0, step, views[0], lam, [(1, step, views[1])])
        stale = [k for k, (s, _) in self._last_xy.items() if s < step - 1]
        for k in stale:
            del self._last_xy[k]

    def _visual_factor(self, blocks, counts):
        cfg = self.cfg
        index = {s.step: i for i, s in enumerate(self.slots)}
        # prefer long tracks when capping
        tracks = sorted((t for t in self.tracks.values() if t.anchor_step in index and t.obs),
                        key=lambda t: (-len(t.obs), t.id))[: cfg.max_tracks]
        a, b, ca, cb, za, zb, di, fd = [], [], [], [], [], [], [], []
        free: list[VisualTrack] = []
        for tr in tracks:
            obs = [(c, s, xy) for c, s, xy in tr.obs if s in index]
            if not obs:
                continue
            if tr.marginalized:
                k, lam = -1, tr.inv_depth
            else:
                k, lam = len(free), 0.0
                free.append(tr)
            for c, s, xy in obs:
                a.append(index[tr.anchor_step])
                b.append(index[s])
                ca.append(tr.anchor_cam)
                cb.append(c)
                za.append(tr.anchor_xy)
                zb.append(xy)
                di.append(k)
                fd.append(lam)
        if not a:
            return None
        f = VisualFactor(len(self.slots), a, b, ca, cb, za, zb, di, fd, self.cameras,
                         cfg.pixel_sigma / self.cameras[0].fx)
        counts["visual"] = len(a)
        return f, free

    def _depth_sigma(self, t, cams) -> float:
        """Depth uncertainty of a track from its widest baseline across the anchor ray."""
        Ra, ca = cams[t.anchor_step][t.anchor_cam]
        u = Ra @ np.append(t.anchor_xy, 1.0)
        u /= np.linalg.norm(u)
        d = np.array([cams[st][c][1] for c, st, _ in t.obs]).reshape(-1, 3) - ca
        base = np.sqrt(np.max(np.sum(d * d, axis=1) - (d @ u) ** 2, initial=0.0).clip(0.0))
        z = 1.0 / t.inv_depth
        return z * z * self.cfg.pixel_sigma / self.cameras[t.anchor_cam].fx / max(base, 1e-9)

    def _mmm_pass(self, local: LocalMap, frame: StepFrame) -> list[MmmEvent]:
        """Check mature free tracks and re-check marginalized ones against the newest map."""
        if not self.cfg.use_cam:
            return []
        index = {s.step: i for i, s in enumerate(self.slots)}
        cams = {s.step: self._cam_transforms(s.x) for s in self.slots}
        cand = [t for t in self.tracks.values() if t.anchor_step in index and (
            t.marginalized or (len(t.steps()) >= self.cfg.mmm_min_states
                               and self._depth_sigma(t, cams) <= self.cfg.mmm_max_depth_sigma))]
        if not cand:
            return []
        cand.sort(key=lambda t: t.id)
        X = [self.slots[index[t.anchor_step]].x for t in cand]
        Ra = np.array([quat_to_matrix(x[:4]) for x in X])
        pa = np.array([x[4:7] for x in X])
        acc, fbar = mmm_marginalize_batch(np.array([t.anchor_xy for t in cand]), np.array([t.inv_depth for t in cand]),
                                          Ra, pa, [self.cameras[t.anchor_cam] for t in cand], local, self.cfg.mmm)
        events = []
        for t, ok, f, R, p in zip(cand, acc, fbar, Ra, pa):
            lam = depth_in_anchor(f, Pose.from_matrix(R, p), self.cameras[t.anchor_cam]) if ok else -1.0
            # a failed re-check keeps the earlier match: the newest map may no longer cover the feature
            if lam > 0:
                if not t.marginalized:
                    events.append(MmmEvent(frame.index, frame.t, t.id, f.copy()))
                t.status, t.fbar, t.inv_depth = "mmm", f.copy(), lam
        return events

    # ------------------------------------------------------------------ uwb

    def _uwb_samples(self, i: int) -> list[UwbSample]:
        s, prev = self.slots[i], self.slots[i - 1]
        return [UwbSample(u.range, self.anchors.anchors[u.anchor], self.tags[u.tag], u.t, prev.t, s.t) for u in s.uwb]

    def _uwb_factor(self, i: int):
        samples = self._uwb_samples(i)
        if not samples:
            return None
        f = UwbFactor(samples, self.ext, self.cfg.uwb_sigma)
        r, _ = f.evaluate([self.slots[i - 1].x, self.slots[i].x], False)
        keep = [smp for smp, ri in zip(samples, r[:, 0]) if abs(ri) <= self.cfg.uwb_gate]
        return UwbFactor(keep, self.ext, self.cfg.uwb_sigma) if keep else None

    # ---------------------------------------------------------------- solve

    def _build(self, local: LocalMap, counts: dict):
        cfg = self.cfg
        prob = Problem()
        blocks = [prob.add_block(s.x, NAVSTATE, name=f"x{s.step}") for s in self.slots]
        index = {s.step: i for i, s in enumerate(self.slots)}
        if self.prior is not None:
            prob.add_residual(self.prior, [blocks[index[k]] for k in self.prior_steps])
            counts["prior"] = 1
        counts.setdefault("imu", 0)
        counts.setdefault("lidar", 0)
        counts.setdefault("uwb", 0)
        counts.setdefault("visual", 0)
        for i in range(1, len(self.slots)):
            prob.add_residual(ImuFactor(self.slots[i].pre), [blocks[i - 1], blocks[i]])
            counts["imu"] += 1
        for i, s in enumerate(self.slots):
            s.fmm = extract_fmm(s.cloud, Pose.from_row(s.x[:7]), local, cfg.lidar)
            if len(s.fmm):
                prob.add_residual(LidarFactor(s.fmm, cfg.lidar.sigma), [blocks[i]], huber(cfg.lidar.huber))
                counts["lidar"] += len(s.fmm)
        if cfg.use_uwb and self.fusion and self.anchors is not None:
            for i in range(1, len(self.slots)):
                f = self._uwb_factor(i)
                if f is not None:
                    prob.add_residual(f, [blocks[i - 1], blocks[i]])
                    counts["uwb"] += len(f)
        vis = None
        if cfg.use_cam and self.tracks:
            vis = self._visual_factor(blocks, counts)
            if vis is not None:
                f, free = vis
                vb = list(blocks)
                if free:
                    depth = prob.add_block(np.array([t.inv_depth for t in free]), Euclidean(len(free)), name="depth")
                    vb.append(depth)
                prob.add_residual(f, vb, arctan(cfg.visual_loss))
                vis = (free, vb[-1] if free else None)
        return prob, blocks, vis

    def _solve(self, local: LocalMap, counts: dict):
        prob, blocks, vis = self._build(local, counts)
        rep = solve(prob, SolveOptions(max_iterations=self.cfg.iterations, function_tolerance=self.cfg.tolerance))
        for s, b in zip(self.slots, blocks):
            s.x = b.value.copy()
        if vis is not None and vis[1] is not None:
            free, depth = vis
            for t, lam in zip(free, depth.value):
                t.inv_depth = float(lam)
            for t in free:
                if not (self.cfg.min_inv_depth <= t.inv_depth <= self.cfg.max_inv_depth):
                    del self.tracks[t.id]
        return rep

    # ---------------------------------------------------------------- slide

    def _slide(self, local: LocalMap):
        """Marginalize the oldest state into a prior on its neighbours; visual terms are dropped."""
        cfg = self.cfg
        prob = Problem()
        blocks = [prob.add_block(s.x, NAVSTATE) for s in self.slots]
        index = {s.step: i for i, s in enumerate(self.slots)}
        if self.prior is not None:
            prob.add_residual(self.prior, [blocks[index[k]] for k in self.prior_steps])
        if len(self.slots) > 1:
            prob.add_residual(ImuFactor(self.slots[1].pre), blocks[:2])
        s0 = self.slots[0]
        if s0.fmm is None:
            s0.fmm = extract_fmm(s0.cloud, Pose.from_row(s0.x[:7]), local, cfg.lidar)
        if len(s0.fmm):
            prob.add_residual(LidarFactor(s0.fmm, cfg.lidar.sigma), [blocks[0]], huber(cfg.lidar.huber))
        if cfg.use_uwb and self.fusion and self.anchors is not None and len(self.slots) > 1:
            f = self._uwb_factor(1)
            if f is not None:
                prob.add_residual(f, blocks[:2])
        sig = np.asarray(cfg.prior_sigmas, dtype=float) * 1e3
        res = marginal_prior(prob.residuals, [blocks[0]], {id(b): sig for b in blocks})
        gone = self.slots.pop(0)
        if res is None:
            self.prior, self.prior_steps = None, []
        else:
            prior, kept = res
            step_of = {id(b): s.step for b, s in zip(blocks, [gone] + self.slots)}
            self.prior, self.prior_steps = prior, [step_of[id(b)] for b in kept]
        self._reanchor(gone)

    def _cam_transforms(self, x: np.ndarray):
        """(R, t) of each camera in L for body state ``x``."""
        R, p = quat_to_matrix(x[:4]), x[4:7]
        return [(R @ c.extrinsic.R, R @ c.extrinsic.t + p) for c in self.cameras]

    def _drop(self, tr: VisualTrack):
        del self.tracks[tr.id]
        if tr.marginalized:
            last = self.slots[-1]
            self._released.append(MmmEvent(last.step, last.t, tr.id, tr.fbar.copy(), "released"))

    def _reanchor(self, gone: _Slot):
        index = {s.step: i for i, s in enumerate(self.slots)}
        cams_gone = self._cam_transforms(gone.x)
        cams: dict[int, list] = {}
        for tid in list(self.tracks):
            tr = self.tracks[tid]
            tr.obs = [o for o in tr.obs if o[1] in index]
            if tr.anchor_step in index:
                continue
            if not tr.obs:
                self._drop(tr)
                continue
            if tr.marginalized:
                point = tr.fbar
            else:
                Ra, ta = cams_gone[tr.anchor_cam]
                point = Ra @ (np.append(tr.anchor_xy, 1.0) / tr.inv_depth) + ta
            c, s, xy = tr.obs.pop(0)
            if s not in cams:
                cams[s] = self._cam_transforms(self.slots[index[s]].x)
            Rb, tb = cams[s][c]
            depth = (Rb[:, 2] @ (point - tb))
            lam = 1.0 / depth if depth > 0 else -1.0
            if not tr.obs or not (self.cfg.min_inv_depth <= lam <= self.cfg.max_inv_depth):
                self._drop(tr)
                continue
            tr.anchor_cam, tr.anchor_step, tr.anchor_xy, tr.inv_depth = c, s, xy, lam

    # ------------------------------------------------------------ keyframes

    def _candidate(self) -> KeyframeCandidate | None:
        M = self.cfg.size
        if len(self.slots) < M:
            return None
        i = len(self.slots) - 1 - M // 2
        s = self.slots[i]
        uwb = []
        if self.cfg.use_uwb and self.anchors is not None:
            pose_n = Pose.from_row(s.x[:7])
            for j in range(1, len(self.slots)):
                for u in self.slots[j].uwb:
                    if abs(u.t - s.t) > self.cfg.uwb_window:
                        continue
                    prev = self.slots[j - 1]
                    pose_tau = interpolated_pose(prev.x, self.slots[j].x, u.t, prev.t, self.slots[j].t)
                    uwb.append(MarginalizedUwbSample.from_poses(u.range, self.anchors.anchors[u.anchor],
                                                                self.tags[u.tag], pose_n, pose_tau, u.t))
        return KeyframeCandidate(s.step, s.t, s.x[:7].copy(), s.scan, s.landmarks, tuple(uwb), self._lidar_info(s))

    def _lidar_info(self, s: _Slot) -> np.ndarray | None:
        """Information of the slot's pose from its scan-to-map match, body frame (rot, trans)."""
        if s.fmm is None or len(s.fmm) == 0:
            return None
        _, (J,) = LidarFactor(s.fmm, self.cfg.lidar.sigma, 6).evaluate([s.x[:7]])
        J = J[:, 0, :]
        J[:, 3:] = J[:, 3:] @ quat_to_matrix(s.x[:4])  # world-frame position -> body-frame offset
        return J.T @ J
