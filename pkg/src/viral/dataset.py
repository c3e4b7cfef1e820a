"""Reading datasets written by :mod:`viral.sim` (header.json + one JSONL per stream)."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import InvalidArgument, Pose
from .imu import ImuNoise
from .timebase import ImagePair, ImuStream, LidarCloud, StepFrame, SyncConfig, UwbMeasurement, assign_steps
from .uwb import AnchorNetwork, build_anchor_frame
from .vision import CameraModel

SENSORS = ("imu", "lidar", "cam", "uwb")


class DatasetError(RuntimeError):
    pass


def _read_jsonl(path: Path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


@dataclass
class LoadedDataset:
    path: Path
    header: dict
    imu: ImuStream
    lidar: list[LidarCloud]
    images: list[ImagePair]
    uwb: list[UwbMeasurement]
    gt_t: np.ndarray
    gt_q: np.ndarray
    gt_p: np.ndarray
    gt_v: np.ndarray

    @property
    def cameras(self) -> list[CameraModel]:
        return [CameraModel.from_dict(c) for c in self.header["cameras"]]

    @property
    def lidar_extrinsics(self) -> dict[int, Pose]:
        return {d["id"]: Pose.from_row(d["extrinsic"]) for d in self.header["lidars"]}

    @property
    def anchor_network(self) -> AnchorNetwork:
        u = self.header["uwb"]
        return build_anchor_frame(*u["distances"], u["z_star"], u["y_sign"])

    @property
    def tags(self) -> np.ndarray:
        return np.asarray(self.header["uwb"]["tags"], dtype=float)

    @property
    def gravity(self) -> float:
        return float(self.header.get("gravity", 9.81))

    @property
    def imu_noise(self) -> ImuNoise:
        return ImuNoise(**self.header["imu_noise"])

    def frames(self, sensors=SENSORS, sync: SyncConfig | None = None) -> list[StepFrame]:
        """Step frames with the streams of disabled sensors left out."""
        if "imu" not in sensors or "lidar" not in sensors:
            raise InvalidArgument("IMU and lidar are always required")
        primary = [c for c in self.lidar if c.lidar == 0]
        secondary = [c for c in self.lidar if c.lidar != 0]
        uwb = self.uwb if "uwb" in sensors else []
        images = self.images if "cam" in sensors else []
        return assign_steps(primary, secondary, self.imu, uwb, images, self.lidar_extrinsics, sync)

    def mean_acc(self, t0: float, span: float = 0.1) -> np.ndarray:
        sel = (self.imu.t >= t0 - span) & (self.imu.t <= t0)
        if not sel.any():
            sel = slice(0, 1)
        return self.imu.acc[sel].mean(axis=0)

    def groundtruth_at(self, t: float, tol: float = 0.01):
        """(q, p, v) of the ground-truth record nearest ``t`` (within ``tol``)."""
        k = int(np.argmin(np.abs(self.gt_t - t)))
        if abs(self.gt_t[k] - t) > tol:
            raise InvalidArgument(f"no ground truth within {tol} s of {t}")
        return self.gt_q[k], self.gt_p[k], self.gt_v[k]


def load_dataset(path: str | Path) -> LoadedDataset:
    path = Path(path)
    try:
        header = json.loads((path / "header.json").read_text())
        imu = _read_jsonl(path / "imu.jsonl")
        lidar = _read_jsonl(path / "lidar.jsonl")
        cam = _read_jsonl(path / "cam.jsonl")
        uwb = _read_jsonl(path / "uwb.jsonl")
        gt = _read_jsonl(path / "groundtruth.jsonl")
    except (OSError, ValueError) as e:
        raise DatasetError(f"cannot read dataset at {path}: {e}") from e
    stream = ImuStream([r["t"] for r in imu], [r["gyro"] for r in imu], [r["acc"] for r in imu])
    clouds = [LidarCloud(r["t"], np.asarray(r["points"], dtype=float).reshape(-1, 3), r["lidar"]) for r in lidar]
    images = [ImagePair(r["t"], np.asarray(r["obs"], dtype=float).reshape(-1, 4)) for r in cam]
    ranges = [UwbMeasurement(r["t"], r["anchor"], r["tag"], r["range"]) for r in uwb]
    return LoadedDataset(
        path, header, stream, clouds, images, ranges,
        np.array([r["t"] for r in gt]), np.array([r["q"] for r in gt]).reshape(-1, 4),
        np.array([r["p"] for r in gt]).reshape(-1, 3), np.array([r["v"] for r in gt]).reshape(-1, 3),
    )
