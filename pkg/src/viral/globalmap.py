"""Keyframe store, local-map keyframe selection, loop closure and bundle
adjustment with UWB calibration.

The global thread owns a :class:`GlobalMapper`.  It consumes keyframe
candidates in order and answers each with a :class:`GlobalUpdate` holding
the admitted keyframe (if any), corrected keyframe poses after a BA round and
the current UWB extrinsics once calibration has started.
"""
from __future__ import annotations

import logging
import math
import queue
import threading
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial import cKDTree

from .geometry import Pose
from .lidar import LidarConfig, LidarFactor, build_local_map, extract_fmm
from .posegraph import RelativePoseFactor, edge_sqrt_info
from .solver import (
    POSE,
    EvaluationError,
    Problem,
    SolveOptions,
    apply_robust_loss,
    huber,
    solve,
)
from .uwb import MarginalizedUwbSample, UwbBaFactor, UwbExtrinsics

log = logging.getLogger(__name__)


@dataclass
class GlobalConfig:
    admit_distance: float = 0.5  # m
    admit_rotation: float = 10.0  # deg
    admit_neighbors: int = 5
    select_count: int = 10
    select_radius: float = 10.0
    select_voxel: float = 2.0
    loop_similarity: float = 0.3
    loop_exclusion_keyframes: int = 20
    loop_exclusion_time: float = 10.0
    loop_map_span: int = 5  # keyframes each side of p
    icp_gate: float = 1.0
    icp_iterations: int = 30
    icp_fitness: float = 0.09  # m^2
    loop_threshold: float = 0.04
    loop_rounds: int = 4
    odom_sigma_rot: float = 1e-3  # rad per odometry edge
    odom_sigma_trans: float = 3e-3  # m per odometry edge
    odom_info_scale: float = 0.1  # window smoothing relative to one scan-to-map match
    loop_sigma_rot: float = 2e-3
    loop_sigma_trans: float = 1e-2
    ba_every: int = 5
    ba_iterations: int = 20
    dilution_c1: float = 0.05
    dilution_c2: float = 10.0
    uwb_sigma: float = 0.05
    uwb_window: float = 0.2  # s around the keyframe time
    uwb_enabled: bool = True  # evaluate the dilution gate at all
    lidar: LidarConfig = field(default_factory=LidarConfig)


@dataclass
class KeyframeCandidate:
    step: int
    t: float
    pose: np.ndarray  # 7-vector in L, as estimated by the odometry
    cloud: np.ndarray  # combined feature cloud, body frame
    descriptor: frozenset = frozenset()
    uwb: tuple[MarginalizedUwbSample, ...] = ()
    info: np.ndarray | None = None  # 6x6 lidar information of the pose, body frame (rot, trans)


@dataclass
class KeyFrame:
    index: int
    step: int
    t: float
    pose: np.ndarray  # current global estimate
    odom_pose: np.ndarray  # odometry estimate at admission
    cloud: np.ndarray
    descriptor: frozenset = frozenset()
    uwb: tuple[MarginalizedUwbSample, ...] = ()
    info: np.ndarray | None = None


@dataclass
class LoopEdge:
    p: int
    c: int
    T_pc: Pose
    fitness: float
    score: float


# --------------------------------------------------------------------------
# admission and selection


def rotation_angle_deg(a: np.ndarray, b: np.ndarray) -> float:
    return math.degrees(Pose.from_row(a).rotation.angle_to(Pose.from_row(b).rotation))


def admit_keyframe(pose: np.ndarray, store: list[np.ndarray], dist_thresh: float = 0.5, rot_thresh: float = 10.0,
                   neighbors: int = 5) -> bool:
    """Admit iff, for each of the nearest stored poses, distance or rotation exceeds its threshold."""
    if not store:
        return True
    P = np.array([s[4:7] for s in store])
    d = np.linalg.norm(P - pose[4:7], axis=1)
    for k in np.argsort(d, kind="stable")[:neighbors]:
        if not (d[k] > dist_thresh or rotation_angle_deg(pose, store[k]) > rot_thresh):
            return False
    return True


def select_keyframes(positions: np.ndarray, predicted: np.ndarray, count: int = 10, radius: float = 10.0,
                     voxel: float = 2.0) -> list[int]:
    """Union of the last ``count`` keyframes, the ``count`` nearest to ``predicted`` and
    the most recent keyframe of every ``voxel``-sized cell within ``radius``."""
    P = np.asarray(positions, dtype=float).reshape(-1, 3)
    n = len(P)
    if n <= count:
        return list(range(n))
    last = set(range(n - count, n))
    d = np.linalg.norm(P - np.asarray(predicted)[:3], axis=1)
    nearest = set(np.argsort(d, kind="stable")[:count].tolist())
    cells: dict[tuple, int] = {}
    for i in np.flatnonzero(d <= radius):
        cells[tuple(np.floor(P[i] / voxel).astype(int))] = int(i)  # later index wins
    return sorted(last | nearest | set(cells.values()))


# --------------------------------------------------------------------------
# dilution of the keyframe positions


def gamma_singular_values(positions: np.ndarray) -> np.ndarray | None:
    """Singular values (descending) of the inverse scatter of the positions, or None if singular."""
    P = np.asarray(positions, dtype=float).reshape(-1, 3)
    if len(P) < 4:
        return None
    C = P - P.mean(axis=0)
    S = C.T @ C
    w = np.linalg.eigvalsh(S)
    if w[0] <= 1e-9 * max(w[-1], 1e-300):
        return None
    return np.sort(1.0 / w)[::-1]


def dilution_gate(positions: np.ndarray, c1: float = 0.05, c2: float = 10.0) -> bool:
    s = gamma_singular_values(positions)
    if s is None:
        return False
    return bool(s[0] < c1 and s[0] / s[2] < c2)


# --------------------------------------------------------------------------
# loop closure


def jaccard(a: frozenset, b: frozenset) -> float:
    if not a or not b:
        return 0.0
    return len(a & b) / len(a | b)


def detect_loop(new: KeyFrame, store: list[KeyFrame], cfg: GlobalConfig) -> tuple[int, int] | None:
    """Best earlier keyframe by place-signature similarity outside the exclusion window."""
    best, best_s = None, cfg.loop_similarity
    for kf in store:
        if kf.index >= new.index - cfg.loop_exclusion_keyframes or new.t - kf.t < cfg.loop_exclusion_time:
            continue
        s = jaccard(new.descriptor, kf.descriptor)
        if s >= best_s:
            best, best_s = kf.index, s
    return None if best is None else (best, new.index)


def _kabsch(src: np.ndarray, dst: np.ndarray) -> Pose:
    cs, cd = src.mean(0), dst.mean(0)
    U, _, Vt = np.linalg.svd((src - cs).T @ (dst - cd))
    S = np.diag([1.0, 1.0, np.sign(np.linalg.det(Vt.T @ U.T))])
    R = Vt.T @ S @ U.T
    return Pose.from_matrix(R, cd - R @ cs)


def icp(source: np.ndarray, target: np.ndarray, init: Pose, gate: float = 1.0, iterations: int = 30):
    """Point-to-point ICP of ``source`` onto ``target``.

    Returns (T, fitness) with fitness the mean of min(d^2, gate^2) over all source
    points, so unmatched points count at the gate; None when nothing matches.
    """
    tree = cKDTree(target)
    T = init
    for _ in range(iterations):
        d, i = tree.query(T.apply(source))
        m = d < gate
        if m.sum() < 3:
            return None
        step = _kabsch(T.apply(source[m]), target[i[m]])
        T = step * T
        if np.linalg.norm(step.t) < 1e-6 and step.rotation.angle_to(Pose.identity().rotation) < 1e-7:
            break
    d, _ = tree.query(T.apply(source))
    if not np.any(d < gate):
        return None
    return T, float(np.mean(np.minimum(d, gate) ** 2))


def loop_cost(T: np.ndarray, coeffs, cfg: GlobalConfig) -> float:
    r, _ = LidarFactor(coeffs, cfg.lidar.sigma, 6).evaluate([T], False)
    rho, _, _ = apply_robust_loss(huber(cfg.lidar.huber), r[:, 0] ** 2)
    return float(rho.sum())


def verify_loop(pair: tuple[int, int], store: list[KeyFrame], cfg: GlobalConfig) -> LoopEdge | None:
    """ICP for an initial guess, then FMM refinement of the current keyframe against
    the local map around the previous one, both in the previous keyframe's frame."""
    p, c = pair
    Tp = Pose.from_row(store[p].pose)
    lo, hi = max(0, p - cfg.loop_map_span), min(len(store), p + cfg.loop_map_span + 1)
    parts = [(Tp.inverse() * Pose.from_row(store[j].pose), store[j].cloud) for j in range(lo, hi) if j < c]
    local = build_local_map(parts, cfg.lidar.voxel)
    source = store[c].cloud
    init = Tp.inverse() * Pose.from_row(store[c].pose)
    res = icp(source, local.points, init, cfg.icp_gate, cfg.icp_iterations)
    if res is None:
        log.info("loop %d-%d rejected: ICP found no correspondences", p, c)
        return None
    T, fitness = res
    if fitness > cfg.icp_fitness:
        log.info("loop %d-%d rejected: ICP fitness %.4f", p, c, fitness)
        return None
    x = T.to_row()
    coeffs = None
    for _ in range(cfg.loop_rounds):
        coeffs = extract_fmm(source, Pose.from_row(x), local, cfg.lidar)
        if len(coeffs) < 10:
            return None
        prob = Problem()
        blk = prob.add_block(x, POSE)
        prob.add_residual(LidarFactor(coeffs, cfg.lidar.sigma, 6), [blk], huber(cfg.lidar.huber))
        solve(prob, SolveOptions(max_iterations=10))
        x = blk.value
    # mean robustified cost per coefficient, rescaled from whitened units to m^2
    score = cfg.lidar.sigma**2 * loop_cost(x, coeffs, cfg) / len(coeffs)
    if score > cfg.loop_threshold:
        log.info("loop %d-%d rejected: FMM score %.4f", p, c, score)
        return None
    return LoopEdge(p, c, Pose.from_row(x), fitness, score)


# --------------------------------------------------------------------------
# bundle adjustment


@dataclass
class BaReport:
    ok: bool
    uwb: bool
    iterations: int = 0
    initial_cost: float = 0.0
    final_cost: float = 0.0
    monotone: bool = True
    error: str = ""


@dataclass
class GlobalGraph:
    keyframes: list[KeyFrame] = field(default_factory=list)
    odom_edges: list[tuple] = field(default_factory=list)  # (i, j, T_ij) or (i, j, T_ij, sqrt_info)
    loop_edges: list[LoopEdge] = field(default_factory=list)
    ext: UwbExtrinsics = field(default_factory=lambda: UwbExtrinsics(Pose.identity(), 0.0))
    uwb_active: bool = False

    def positions(self) -> np.ndarray:
        return np.array([k.pose[4:7] for k in self.keyframes]).reshape(-1, 3)


def run_ba(graph: GlobalGraph, cfg: GlobalConfig, anchors_W: np.ndarray | None = None) -> BaReport:
    """Pose graph over odometry and loop edges, plus marginalized UWB ranges
    (jointly with T_LW and the ranging bias) once UWB is active."""
    kfs = graph.keyframes
    if len(kfs) < 2:
        return BaReport(True, graph.uwb_active)
    prob = Problem()
    blocks = [prob.add_block(k.pose, POSE, constant=(i == 0)) for i, k in enumerate(kfs)]
    for i, j, T, *W in graph.odom_edges:
        f = RelativePoseFactor(T, cfg.odom_sigma_rot, cfg.odom_sigma_trans, W[0] if W else None)
        prob.add_residual(f, [blocks[i], blocks[j]])
    for e in graph.loop_edges:
        prob.add_residual(RelativePoseFactor(e.T_pc, cfg.loop_sigma_rot, cfg.loop_sigma_trans),
                          [blocks[e.p], blocks[e.c]])
    use_uwb = graph.uwb_active and any(k.uwb for k in kfs)
    if use_uwb:
        tw = prob.add_block(graph.ext.T_LW.to_row(), POSE)
        bias = prob.add_block(np.array([graph.ext.bias]))
        for k, b in zip(kfs, blocks):
            if k.uwb:
                prob.add_residual(UwbBaFactor(list(k.uwb), cfg.uwb_sigma), [b, tw, bias])
    try:
        rep = solve(prob, SolveOptions(max_iterations=cfg.ba_iterations))
    except EvaluationError as e:
        log.error("BA failed: %s", e)
        return BaReport(False, use_uwb, error=str(e))
    for k, b in zip(kfs, blocks):
        k.pose = b.value.copy()
    if use_uwb:
        graph.ext = UwbExtrinsics(Pose.from_row(tw.value), float(bias.value[0]))
    return BaReport(True, use_uwb, rep.iterations, rep.initial_cost, rep.final_cost, rep.monotone)


# --------------------------------------------------------------------------
# the global thread's state machine


@dataclass
class GlobalUpdate:
    seq: int
    admitted: KeyFrame | None = None
    poses: dict[int, np.ndarray] | None = None  # corrected keyframe poses after BA
    ext: UwbExtrinsics | None = None
    loop: LoopEdge | None = None
    ba: BaReport | None = None
    gate_opened: bool = False


class GlobalMapper:
    def __init__(self, config: GlobalConfig | None = None):
        self.cfg = config or GlobalConfig()
        self.graph = GlobalGraph()
        self.since_ba = 0
        self.ba_rounds = 0
        self.uwb_ba_rounds = 0
        self.ba_reports: list[BaReport] = []
        self.anchor_log: list[dict] = []
        self.gate_time: float | None = None

    @property
    def keyframes(self) -> list[KeyFrame]:
        return self.graph.keyframes

    def process(self, seq: int, cand: KeyframeCandidate) -> GlobalUpdate:
        g = self.graph
        cfg = self.cfg
        store = [k.odom_pose for k in g.keyframes]
        if not admit_keyframe(cand.pose, store, cfg.admit_distance, cfg.admit_rotation, cfg.admit_neighbors):
            return GlobalUpdate(seq)
        n = len(g.keyframes)
        if n:
            prev = g.keyframes[-1]
            rel = Pose.from_row(prev.odom_pose).inverse() * Pose.from_row(cand.pose)
            pose = (Pose.from_row(prev.pose) * rel).to_row()
        else:
            rel, pose = None, cand.pose
        kf = KeyFrame(n, cand.step, cand.t, np.array(pose, dtype=float), np.array(cand.pose, dtype=float),
                      np.asarray(cand.cloud), cand.descriptor, tuple(cand.uwb), cand.info)
        g.keyframes.append(kf)
        if rel is not None:
            W = edge_sqrt_info(rel, prev.info, kf.info, cfg.odom_sigma_rot, cfg.odom_sigma_trans, cfg.odom_info_scale)
            g.odom_edges.append((n - 1, n, rel, W))
        self.since_ba += 1
        upd = GlobalUpdate(seq, admitted=replace(kf, pose=kf.pose.copy()))

        pair = detect_loop(kf, g.keyframes[:-1], cfg)
        if pair is not None:
            edge = verify_loop(pair, g.keyframes, cfg)
            if edge is not None:
                g.loop_edges.append(edge)
                upd.loop = edge
        if upd.loop is not None or self.since_ba >= cfg.ba_every:
            self._ba(upd, kf.t)
        return upd

    def _ba(self, upd: GlobalUpdate, t: float):
        g = self.graph
        cfg = self.cfg
        if cfg.uwb_enabled and not g.uwb_active and dilution_gate(g.positions(), cfg.dilution_c1, cfg.dilution_c2):
            g.uwb_active = True
            self.gate_time = t
            upd.gate_opened = True
        rep = run_ba(g, self.cfg)
        self.since_ba = 0
        self.ba_rounds += 1
        self.ba_reports.append(rep)
        upd.ba = rep
        if rep.ok:
            upd.poses = {k.index: k.pose.copy() for k in g.keyframes}
            if rep.uwb:
                self.uwb_ba_rounds += 1
                upd.ext = g.ext
                self.anchor_log.append({"round": self.ba_rounds, "t": t, "T_LW": g.ext.T_LW.to_row(),
                                        "bias": g.ext.bias})

    def finish(self, seq: int) -> GlobalUpdate:
        """A closing BA round over everything admitted."""
        upd = GlobalUpdate(seq)
        if len(self.graph.keyframes) >= 2:
            self._ba(upd, self.graph.keyframes[-1].t)
        return upd


class GlobalWorker:
    """Runs a :class:`GlobalMapper` on a background thread.

    Requests are processed strictly in submission order; :meth:`result` blocks
    until the update for a given sequence number is ready, so the caller can
    apply updates at deterministic points regardless of thread timing.
    """

    def __init__(self, mapper: GlobalMapper, threaded: bool = True):
        self.mapper = mapper
        self.threaded = threaded
        self._done: dict[int, GlobalUpdate] = {}
        self._cond = threading.Condition()
        self._error: BaseException | None = None
        self._pending: list[tuple[int, object]] = []
        if threaded:
            self._q: queue.Queue = queue.Queue()
            self._thread = threading.Thread(target=self._loop, name="global-map", daemon=True)
            self._thread.start()

    def _handle(self, seq, item):
        if item == "finish":
            return self.mapper.finish(seq)
        return self.mapper.process(seq, item)

    def _loop(self):
        while True:
            seq, item = self._q.get()
            if seq is None:
                return
            try:
                upd = self._handle(seq, item)
            except BaseException as e:  # surfaced to the caller in result()
                with self._cond:
                    self._error = e
                    self._cond.notify_all()
                return
            with self._cond:
                self._done[seq] = upd
                self._cond.notify_all()

    def submit(self, seq: int, item) -> None:
        if self.threaded:
            self._q.put((seq, item))
        else:
            self._pending.append((seq, item))

    def result(self, seq: int) -> GlobalUpdate:
        if not self.threaded:
            while self._pending and self._pending[0][0] <= seq:
                s, item = self._pending.pop(0)
                self._done[s] = self._handle(s, item)
            return self._done.pop(seq)
        with self._cond:
            while seq not in self._done:
                if self._error is not None:
                    raise self._error
                self._cond.wait()
            return self._done.pop(seq)

    def close(self):
        if self.threaded:
            self._q.put((None, None))
            self._thread.join()
