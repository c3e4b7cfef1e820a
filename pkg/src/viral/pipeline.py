"""The two-thread pipeline: odometry window in the caller's thread, global map in
a worker, replaying a dataset and writing the results directory."""
from __future__ import annotations

import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset import SENSORS, LoadedDataset
from .geometry import InvalidArgument, Pose
from .globalmap import GlobalConfig, GlobalMapper, GlobalUpdate, GlobalWorker, select_keyframes
from .lidar import LocalMap, build_local_map
from .metrics import ate
from .window import EstimatorAbort, MmmEvent, SlidingWindow, WindowConfig, WindowReport

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1


@dataclass
class RunConfig:
    sensors: tuple = SENSORS
    window: WindowConfig = field(default_factory=WindowConfig)
    global_: GlobalConfig = field(default_factory=GlobalConfig)
    threaded: bool = True
    lag: int = 2  # steps between sending a candidate and applying its result

    def __post_init__(self):
        self.sensors = tuple(s for s in SENSORS if s in set(self.sensors))
        unknown = set(self.sensors) - set(SENSORS)
        if unknown:
            raise InvalidArgument(f"unknown sensors {sorted(unknown)}")
        if "imu" not in self.sensors or "lidar" not in self.sensors:
            raise InvalidArgument("imu and lidar must be enabled")
        self.window.use_cam = "cam" in self.sensors
        self.window.use_uwb = "uwb" in self.sensors
        self.global_.uwb_enabled = "uwb" in self.sensors


def _override(obj, values: dict, path: str = ""):
    for k, v in values.items():
        if not hasattr(obj, k):
            raise InvalidArgument(f"unknown configuration key {path}{k}")
        cur = getattr(obj, k)
        if dataclasses.is_dataclass(cur) and isinstance(v, dict):
            _override(cur, v, f"{path}{k}.")
        elif isinstance(cur, tuple):
            setattr(obj, k, tuple(v))
        elif isinstance(cur, (int, float)) and not isinstance(cur, bool):
            setattr(obj, k, type(cur)(v))
        else:
            setattr(obj, k, v)


def make_config(sensors=SENSORS, overrides: dict | None = None) -> RunConfig:
    """RunConfig from a sensor subset and a nested override dict
    (keys ``window``, ``global``, ``threaded``, ``lag``)."""
    window, glob = WindowConfig(), GlobalConfig()
    o = dict(overrides or {})
    if "window" in o:
        _override(window, o.pop("window"), "window.")
    if "global" in o:
        _override(glob, o.pop("global"), "global.")
    threaded = bool(o.pop("threaded", True))
    lag = int(o.pop("lag", 2))
    if o:
        raise InvalidArgument(f"unknown configuration keys {sorted(o)}")
    return RunConfig(tuple(sensors), window, glob, threaded, lag)


class KeyframeMap:
    """The odometry thread's snapshot of admitted keyframes, with a cached local map."""

    def __init__(self, cfg: GlobalConfig, voxel: float):
        self.cfg = cfg
        self.voxel = voxel
        self.poses: list[np.ndarray] = []
        self.clouds: list[np.ndarray] = []
        self.version = 0
        self._cache: tuple | None = None

    def add(self, pose, cloud):
        self.poses.append(np.asarray(pose, dtype=float).copy())
        self.clouds.append(cloud)

    def update(self, poses: dict[int, np.ndarray]):
        for i, p in poses.items():
            if i < len(self.poses):
                self.poses[i] = np.asarray(p, dtype=float).copy()
        self.version += 1

    def __call__(self, predicted: Pose) -> LocalMap | None:
        if not self.poses:
            return None
        P = np.array([p[4:7] for p in self.poses])
        sel = tuple(select_keyframes(P, predicted.t, self.cfg.select_count, self.cfg.select_radius,
                                     self.cfg.select_voxel))
        key = (self.version, sel)
        if self._cache is None or self._cache[0] != key:
            self._cache = (key, build_local_map([(Pose.from_row(self.poses[i]), self.clouds[i]) for i in sel],
                                                self.voxel))
        return self._cache[1]


@dataclass
class RunResult:
    reports: list[WindowReport]
    mapper: GlobalMapper
    keyframes: list  # final KeyFrame list
    mmm: list[MmmEvent]
    step_times: list[float]
    aborted: str = ""
    ate: dict = field(default_factory=dict)

    @property
    def gate_time(self):
        return self.mapper.gate_time

    def trajectory(self):
        t = np.array([r.t for r in self.reports])
        P = np.array([r.state[4:7] for r in self.reports]).reshape(-1, 3)
        return t, P

    def keyframe_trajectory(self):
        t = np.array([k.t for k in self.keyframes])
        P = np.array([k.pose[4:7] for k in self.keyframes]).reshape(-1, 3)
        return t, P

    def counts(self) -> dict:
        out = {"imu": 0, "lidar": 0, "uwb": 0, "visual": 0}
        for r in self.reports:
            for k in out:
                out[k] += int(r.counts.get(k, 0))
        return out


def run(dataset: LoadedDataset, config: RunConfig | None = None) -> RunResult:
    cfg = config or RunConfig()
    frames = dataset.frames(cfg.sensors)
    use_uwb = "uwb" in cfg.sensors
    kmap = KeyframeMap(cfg.global_, cfg.window.lidar.voxel)
    window = SlidingWindow(cfg.window, dataset.cameras, dataset.anchor_network if use_uwb else None,
                           dataset.tags if use_uwb else None, dataset.gravity, kmap)
    mapper = GlobalMapper(cfg.global_)
    worker = GlobalWorker(mapper, threaded=cfg.threaded)
    pending: list[tuple[int, int]] = []  # (seq, step at which it may be applied)
    reports: list[WindowReport] = []
    events: list[MmmEvent] = []
    times: list[float] = []
    seq = 0
    aborted = ""

    def apply(upd: GlobalUpdate):
        if upd.admitted is not None:
            kmap.add(upd.admitted.pose, upd.admitted.cloud)
        if upd.poses is not None:
            kmap.update(upd.poses)
        if upd.ext is not None and use_uwb:
            window.set_extrinsics(upd.ext)

    try:
        for frame in frames:
            while pending and pending[0][1] <= frame.index:
                apply(worker.result(pending.pop(0)[0]))
            t0 = time.perf_counter()
            init = dataset.mean_acc(frame.t) if not reports else None
            try:
                rep = window.step(frame, init)
            except EstimatorAbort as e:
                aborted = str(e)
                log.error("estimator aborted at step %d: %s", frame.index, e)
                break
            times.append(time.perf_counter() - t0)
            reports.append(rep)
            events.extend(rep.mmm)
            if rep.candidate is not None:
                seq += 1
                worker.submit(seq, rep.candidate)
                pending.append((seq, frame.index + cfg.lag))
        for s, _ in pending:
            apply(worker.result(s))
        seq += 1
        worker.submit(seq, "finish")
        apply(worker.result(seq))
    finally:
        worker.close()
    result = RunResult(reports, mapper, mapper.keyframes, events, times, aborted)
    if len(dataset.gt_t) and reports:
        t, P = result.trajectory()
        result.ate["odometry"] = ate(t, P, dataset.gt_t, dataset.gt_p)
        if result.keyframes:
            kt, KP = result.keyframe_trajectory()
            result.ate["keyframes"] = ate(kt, KP, dataset.gt_t, dataset.gt_p)
    return result


# --------------------------------------------------------------------------
# output


def _row(x) -> list[float]:
    return [float(v) for v in np.asarray(x).reshape(-1)]


def _dump_jsonl(path: Path, rows):
    with open(path, "w") as fh:
        for r in rows:
            fh.write(json.dumps(r, separators=(",", ":")) + "\n")


def write_outputs(result: RunResult, dataset: LoadedDataset, config: RunConfig, out: str | Path) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    _dump_jsonl(out / "trajectory.jsonl", (
        {"step": r.step, "t": r.t, "q": _row(r.state[:4]), "p": _row(r.state[4:7]), "v": _row(r.state[7:10]),
         "bg": _row(r.state[10:13]), "ba": _row(r.state[13:16]), "cost_before": r.cost_before,
         "cost_after": r.cost_after, "iterations": r.iterations, "counts": r.counts, "degraded": r.degraded,
         "fusion": r.fusion} for r in result.reports))
    _dump_jsonl(out / "keyframes.jsonl", (
        {"index": k.index, "step": k.step, "t": k.t, "pose": _row(k.pose), "odom_pose": _row(k.odom_pose),
         "uwb_samples": len(k.uwb)} for k in result.keyframes))
    _dump_jsonl(out / "mmm.jsonl", ({"step": e.step, "t": e.t, "track": e.track, "kind": e.kind, "fbar": _row(e.fbar)}
                                    for e in result.mmm))
    anchors = out / "anchors.jsonl"
    if "uwb" in config.sensors:
        W = dataset.anchor_network.anchors
        _dump_jsonl(anchors, (
            {"round": a["round"], "t": a["t"], "T_LW": _row(a["T_LW"]), "bias": a["bias"],
             "anchors_L": [_row(x) for x in Pose.from_row(a["T_LW"]).apply(W)]}
            for a in result.mapper.anchor_log))
    elif anchors.exists():
        anchors.unlink()
    m = result.mapper
    report = {
        "schema_version": SCHEMA_VERSION,
        "scenario": dataset.header.get("scenario"),
        "seed": dataset.header.get("seed"),
        "sensors": list(config.sensors),
        "steps": len(result.reports),
        "factor_counts": result.counts(),
        "keyframes": len(result.keyframes),
        "ba_rounds": m.ba_rounds,
        "uwb_ba_rounds": m.uwb_ba_rounds,
        "gate_time": m.gate_time,
        "loop_edges": [{"p": e.p, "c": e.c, "T_pc": e.T_pc.to_row(), "fitness": e.fitness, "score": e.score}
                       for e in m.graph.loop_edges],
        "degraded_steps": [r.step for r in result.reports if r.degraded],
        "mmm_count": sum(e.kind == "marginalized" for e in result.mmm),
        "solver_monotone": all(r.monotone for r in result.reports) and all(b.monotone for b in m.ba_reports),
        "extrinsics": {"T_LW": m.graph.ext.T_LW.to_row(), "bias": m.graph.ext.bias} if m.graph.uwb_active else None,
        "ate": result.ate,
        "aborted": result.aborted or None,
    }
    (out / "report.json").write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
    times = result.step_times
    (out / "timing.json").write_text(json.dumps({
        "per_step": times, "total": float(sum(times)), "mean": float(np.mean(times)) if times else 0.0,
        "max": float(max(times)) if times else 0.0}) + "\n")
    return out
