"""Synchronization of the sensor streams to the primary lidar's time steps.

Step k covers the interval (t_{k-1}, t_k].  UWB samples are bundled by that
right-closed interval, the IMU segment is cut at the step boundaries with
linearly interpolated end samples, and each step receives the image pair
nearest in time together with its signed delay t_img - t_k.
"""
from __future__ import annotations

import bisect
from dataclasses import dataclass

import numpy as np

from .geometry import InvalidArgument, Pose
from .imu import ImuSegment


class ImuGapError(RuntimeError):
    pass


class OutOfRange(InvalidArgument):
    pass


@dataclass
class ImuStream:
    t: np.ndarray
    gyro: np.ndarray
    acc: np.ndarray

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=float).reshape(-1)
        self.gyro = np.asarray(self.gyro, dtype=float).reshape(-1, 3)
        self.acc = np.asarray(self.acc, dtype=float).reshape(-1, 3)


@dataclass(frozen=True)
class LidarCloud:
    t: float
    points: np.ndarray  # (n, 3) in the emitting lidar's frame
    lidar: int = 0


@dataclass(frozen=True)
class UwbMeasurement:
    t: float
    anchor: int
    tag: int
    range: float


@dataclass(frozen=True)
class ImagePair:
    t: float
    obs: np.ndarray  # (n, 4): camera id, landmark id, normalized x, normalized y


@dataclass(frozen=True)
class FeatureCloud:
    """Combined feature cloud in the body frame; ``source`` holds the lidar id per point."""

    points: np.ndarray
    source: np.ndarray

    def __len__(self):
        return len(self.points)


@dataclass(frozen=True)
class StepFrame:
    index: int
    t: float
    t_prev: float | None
    cloud: FeatureCloud
    imu: ImuSegment | None
    uwb: tuple[UwbMeasurement, ...] = ()
    image: ImagePair | None = None
    delay: float = 0.0


@dataclass
class SyncConfig:
    max_imu_gap: float = 0.05
    max_image_delay: float | None = None  # default: half the lidar period


def interpolate_imu(stream: ImuStream, t: float):
    """(gyro, acc) at time ``t`` by linear interpolation of the bracketing samples."""
    ts = stream.t
    if ts.size == 0 or t < ts[0] or t > ts[-1]:
        raise OutOfRange(f"time {t:.6f} outside IMU span")
    j = int(np.searchsorted(ts, t, side="left"))
    if ts[j] == t:
        return stream.gyro[j].copy(), stream.acc[j].copy()
    i = j - 1
    w = (t - ts[i]) / (ts[j] - ts[i])
    return (1 - w) * stream.gyro[i] + w * stream.gyro[j], (1 - w) * stream.acc[i] + w * stream.acc[j]


def imu_segment(stream: ImuStream, t0: float, t1: float, max_gap: float = 0.05) -> ImuSegment:
    """Samples strictly inside (t0, t1) plus interpolated samples at both ends."""
    g0, a0 = interpolate_imu(stream, t0)
    g1, a1 = interpolate_imu(stream, t1)
    lo = int(np.searchsorted(stream.t, t0, side="right"))
    hi = int(np.searchsorted(stream.t, t1, side="left"))
    t = np.concatenate([[t0], stream.t[lo:hi], [t1]])
    gaps = np.diff(t)
    if gaps.size and gaps.max() > max_gap:
        k = int(np.argmax(gaps))
        raise ImuGapError(f"IMU gap of {gaps[k] * 1e3:.1f} ms in interval ({t[k]:.6f}, {t[k + 1]:.6f}]")
    gyro = np.vstack([g0, stream.gyro[lo:hi], g1])
    acc = np.vstack([a0, stream.acc[lo:hi], a1])
    return ImuSegment(t, gyro, acc)


def _nearest_image(stamps: list[float], t: float) -> int | None:
    """Index of the stamp nearest ``t``; ties go to the earlier stamp."""
    if not stamps:
        return None
    j = bisect.bisect_left(stamps, t)
    cands = [c for c in (j - 1, j) if 0 <= c < len(stamps)]
    return min(cands, key=lambda c: (abs(stamps[c] - t), stamps[c]))


def merge_clouds(clouds: list[LidarCloud], extrinsics: dict[int, Pose]) -> FeatureCloud:
    pts, src = [], []
    for c in clouds:
        T = extrinsics.get(c.lidar, Pose.identity())
        p = np.asarray(c.points, dtype=float).reshape(-1, 3)
        pts.append(T.apply(p) if p.size else p)
        src.append(np.full(len(p), c.lidar, dtype=int))
    if not pts:
        return FeatureCloud(np.zeros((0, 3)), np.zeros(0, dtype=int))
    return FeatureCloud(np.vstack(pts), np.concatenate(src))


def assign_steps(
    primary: list[LidarCloud],
    secondary: list[LidarCloud],
    imu: ImuStream,
    uwb: list[UwbMeasurement],
    images: list[ImagePair],
    lidar_extrinsics: dict[int, Pose] | None = None,
    config: SyncConfig | None = None,
) -> list[StepFrame]:
    """Group all streams into one :class:`StepFrame` per primary lidar stamp.

    Secondary clouds join the primary stamp nearest to them.  UWB samples before
    the first stamp or after the last one are dropped.
    """
    cfg = config or SyncConfig()
    if not primary:
        raise InvalidArgument("primary lidar stream is empty")
    stamps = [c.t for c in primary]
    if any(b <= a for a, b in zip(stamps, stamps[1:])):
        raise InvalidArgument("primary lidar stamps must be strictly increasing")
    ext = lidar_extrinsics or {}
    period = float(np.median(np.diff(stamps))) if len(stamps) > 1 else 0.1
    max_delay = cfg.max_image_delay if cfg.max_image_delay is not None else 0.5 * period

    extra: list[list[LidarCloud]] = [[] for _ in stamps]
    for c in secondary:
        k = _nearest_image(stamps, c.t)
        if abs(stamps[k] - c.t) <= 0.5 * period:
            extra[k].append(c)

    uwb_t = [u.t for u in uwb]
    img_t = [im.t for im in images]
    frames = []
    for k, cloud in enumerate(primary):
        t = stamps[k]
        t_prev = stamps[k - 1] if k > 0 else None
        seg = imu_segment(imu, t_prev, t, cfg.max_imu_gap) if t_prev is not None else None
        if t_prev is None:
            bundle = ()
        else:
            lo = bisect.bisect_right(uwb_t, t_prev)
            hi = bisect.bisect_right(uwb_t, t)
            bundle = tuple(uwb[lo:hi])
        image, delay = None, 0.0
        j = _nearest_image(img_t, t)
        if j is not None and abs(img_t[j] - t) <= max_delay:
            image, delay = images[j], img_t[j] - t
        frames.append(StepFrame(k, t, t_prev, merge_clouds([cloud] + extra[k], ext), seg, bundle, image, delay))
    return frames
