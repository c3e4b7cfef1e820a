"""Deterministic synthetic worlds, trajectories and sensor streams.

The world is a set of finite planar patches with visual landmarks and a
three-anchor UWB network.  The ground-truth trajectory is obtained by midpoint
integration of the emitted (noise-free) 400 Hz IMU signal, so the inertial
model holds exactly on noise-free data.  UWB ranges follow the interpolated
sample model over the bracketing lidar steps.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.interpolate import CubicSpline

from .geometry import InvalidArgument, Pose, Rotation, so3_exp
from .imu import ImuNoise
from .uwb import UwbExtrinsics, UwbSample, build_anchor_frame, uwb_displacement
from .vision import CameraModel, observe

GRAVITY = 9.81
DATASET_VERSION = 1
STREAMS = ("imu", "lidar", "cam", "uwb", "groundtruth")


class GenerationError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# world


@dataclass(frozen=True)
class Patch:
    """Rectangle ``origin + a*u + b*v`` with a in [0, eu], b in [0, ev]; ``normal`` faces the free space."""

    origin: tuple
    u: tuple
    v: tuple
    eu: float
    ev: float

    @property
    def normal(self) -> np.ndarray:
        return np.cross(self.u, self.v)

    @property
    def area(self) -> float:
        return self.eu * self.ev

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        ab = rng.uniform(0, 1, (n, 2)) * [self.eu, self.ev]
        return np.asarray(self.origin) + ab[:, :1] * np.asarray(self.u) + ab[:, 1:] * np.asarray(self.v)

    def distance(self, x: np.ndarray) -> np.ndarray:
        """Euclidean distance from points (n,3) to the rectangle."""
        d = np.asarray(x, dtype=float).reshape(-1, 3) - np.asarray(self.origin)
        a = np.clip(d @ np.asarray(self.u), 0, self.eu)
        b = np.clip(d @ np.asarray(self.v), 0, self.ev)
        closest = np.asarray(self.origin) + a[:, None] * np.asarray(self.u) + b[:, None] * np.asarray(self.v)
        return np.linalg.norm(x - closest, axis=1)


def patch(origin, u, v, eu, ev) -> Patch:
    u = np.asarray(u, float) / np.linalg.norm(u)
    v = np.asarray(v, float) / np.linalg.norm(v)
    return Patch(tuple(map(float, origin)), tuple(u.tolist()), tuple(v.tolist()), float(eu), float(ev))


@dataclass
class World:
    patches: list[Patch]
    landmarks: np.ndarray  # (n, 3)
    landmark_ids: np.ndarray
    on_plane: np.ndarray  # bool per landmark
    anchors_L: np.ndarray  # (3, 3) true anchor positions in L
    z_star: float = 1.0
    y_sign: int = -1
    uwb_bias: float = 0.05
    tags: np.ndarray = field(default_factory=lambda: np.array([[0.2, 0.1, 0.05], [-0.2, -0.1, 0.05]]))
    bounds: tuple = ((-5, 20), (-10, 5), (-1, 4))

    def anchor_distances(self) -> tuple[float, float, float]:
        A = self.anchors_L
        return (float(np.linalg.norm(A[1] - A[0])), float(np.linalg.norm(A[2] - A[0])),
                float(np.linalg.norm(A[2] - A[1])))

    def true_extrinsics(self) -> UwbExtrinsics:
        """The rigid transform taking the distance-built anchor frame W onto the true anchors."""
        W = build_anchor_frame(*self.anchor_distances(), self.z_star, self.y_sign).anchors
        return UwbExtrinsics(kabsch(W, self.anchors_L), self.uwb_bias)


def kabsch(src: np.ndarray, dst: np.ndarray) -> Pose:
    """Rigid T minimizing ||T src - dst||."""
    cs, cd = src.mean(0), dst.mean(0)
    U, _, Vt = np.linalg.svd((src - cs).T @ (dst - cd))
    S = np.diag([1.0, 1.0, np.sign(np.linalg.det(Vt.T @ U.T))])
    R = Vt.T @ S @ U.T
    return Pose.from_matrix(R, cd - R @ cs)


def place_landmarks(patches: list[Patch], density: float, off_fraction: float, rng: np.random.Generator):
    pts, on = [], []
    for p in patches:
        n = int(rng.poisson(p.area * density))
        x = p.sample(rng, n)
        off = rng.uniform(0, 1, n) < off_fraction
        x[off] += np.outer(rng.uniform(0.5, 1.0, off.sum()), p.normal)
        pts.append(x)
        on.append(~off)
    P = np.vstack(pts) if pts else np.zeros((0, 3))
    return P, np.arange(len(P)), np.concatenate(on) if on else np.zeros(0, bool)


def room_patches() -> list[Patch]:
    """Floor and four walls of a 25 x 15 m hall with suspended boards; patches on
    different planes stay at least 1.5 m apart."""
    return [
        patch([-3.5, -8.5, -1.0], [1, 0, 0], [0, 1, 0], 22.0, 12.0),  # floor
        patch([-3.5, 5.0, -1.0], [0, 0, 1], [1, 0, 0], 5.0, 22.0),  # y = 5 wall
        patch([-3.5, -10.0, -1.0], [1, 0, 0], [0, 0, 1], 22.0, 5.0),  # y = -10 wall
        patch([-5.0, -10.0, -1.0], [0, 1, 0], [0, 0, 1], 15.0, 5.0),  # x = -5 wall
        patch([20.0, -10.0, -1.0], [0, 0, 1], [0, 1, 0], 5.0, 15.0),  # x = 20 wall
        patch([2.5, -3.5, 0.5], [0, 0, 1], [0, 1, 0], 2.5, 2.0),  # island board
        patch([2.0, 3.5, 0.5], [1, 0, 0], [0, -0.6, 0.8], 6.0, 2.5),  # tilted board, north
        patch([8.0, -8.5, 0.5], [0, 0.6, 0.8], [1, 0, 0], 2.5, 6.0),  # tilted board, south
        patch([13.0, -6.0, 0.5], [0, 1, 0], [0, 0, 1], 6.0, 3.0),  # east board
    ]


def facade_patches() -> list[Patch]:
    """Ground and a single long facade with a few shallow fins: lidar barely constrains the along-facade axis."""
    return [
        patch([-8.0, -12.0, -1.0], [1, 0, 0], [0, 1, 0], 36.0, 15.5),
        patch([-8.0, 5.0, -1.0], [0, 0, 1], [1, 0, 0], 8.0, 36.0),
        # shallow fins give the along-facade axis a weak hold
        *(patch([x, 4.0, -1.0], [0, 1, 0], [0, 0, 1], 1.0, 5.0) for x in (-4.0, 9.0, 22.0)),
    ]


# --------------------------------------------------------------------------
# trajectory


def _smootherstep(x):
    return x**3 * (x * (6 * x - 15) + 10)


@dataclass
class Trajectory:
    """Waypoint splines in a warped time tau(t): a hold, a C2 ramp, then unit rate."""

    knots: np.ndarray  # tau of each waypoint
    xyz: np.ndarray  # (n, 3)
    yaw: np.ndarray  # (n,) rad
    duration: float
    hold: float = 1.0
    ramp: float = 2.0
    tilt: float = 0.05  # roll/pitch amplitude, rad

    def __post_init__(self):
        self.sp = CubicSpline(self.knots, self.xyz, bc_type="clamped")
        self.sy = CubicSpline(self.knots, self.yaw, bc_type="clamped")

    def warp(self, t):
        t = np.asarray(t, dtype=float)
        x = np.clip((t - self.hold) / self.ramp, 0, 1)
        inside = self.ramp * (x**6 - 3 * x**5 + 2.5 * x**4)
        after = 0.5 * self.ramp + (t - self.hold - self.ramp)
        tau = np.where(t <= self.hold, 0.0, np.where(t < self.hold + self.ramp, inside, after))
        d1 = np.where(t < self.hold + self.ramp, _smootherstep(x), 1.0)
        d2 = np.where((t > self.hold) & (t < self.hold + self.ramp), 30 * x * x * (x - 1) ** 2 / self.ramp, 0.0)
        return tau, d1, d2

    def evaluate(self, t):
        """Position, acceleration, Euler angles (roll, pitch, yaw) and their rates at times ``t``."""
        tau, d1, d2 = self.warp(t)
        tau_c = np.minimum(tau, self.knots[-1])
        p = self.sp(tau_c)
        acc = self.sp(tau_c, 2) * (d1**2)[:, None] + self.sp(tau_c, 1) * d2[:, None]
        yaw = self.sy(tau_c)
        yaw_d = self.sy(tau_c, 1) * d1
        w1, w2 = 0.9, 1.3
        roll = self.tilt * np.sin(w1 * tau)
        pitch = self.tilt * np.sin(w2 * tau)
        roll_d = self.tilt * w1 * np.cos(w1 * tau) * d1
        pitch_d = self.tilt * w2 * np.cos(w2 * tau) * d1
        return p, acc, np.c_[roll, pitch, yaw], np.c_[roll_d, pitch_d, yaw_d]


def euler_matrix(rpy) -> np.ndarray:
    r, p, y = rpy
    cr, sr, cp, sp, cy, sy = np.cos(r), np.sin(r), np.cos(p), np.sin(p), np.cos(y), np.sin(y)
    Rz = np.array([[cy, -sy, 0], [sy, cy, 0], [0, 0, 1]])
    Ry = np.array([[cp, 0, sp], [0, 1, 0], [-sp, 0, cp]])
    Rx = np.array([[1, 0, 0], [0, cr, -sr], [0, sr, cr]])
    return Rz @ Ry @ Rx


def body_rates(rpy, rpy_d) -> np.ndarray:
    """Body angular velocity of Z-Y-X Euler angles."""
    r, p, _ = rpy
    rd, pd, yd = rpy_d
    return np.array([rd - yd * np.sin(p),
                     pd * np.cos(r) + yd * np.cos(p) * np.sin(r),
                     -pd * np.sin(r) + yd * np.cos(p) * np.cos(r)])


def path_trajectory(points, speed: float, yaw=None, duration: float | None = None, tilt: float = 0.05) -> Trajectory:
    pts = np.asarray(points, dtype=float)
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    knots = np.r_[0.0, np.cumsum(seg / speed)]
    if yaw is None:
        d = np.diff(pts[:, :2], axis=0)
        heading = np.unwrap(np.arctan2(d[:, 1], d[:, 0]))
        yaw = np.r_[0.0, heading]
    total = knots[-1] + 1.0 + 1.0  # the ramp costs ramp/2 of tau
    return Trajectory(knots, pts, np.asarray(yaw, float), duration or float(total), tilt=tilt)


# --------------------------------------------------------------------------
# scenarios


@dataclass
class Scenario:
    name: str
    world: World
    trajectory: Trajectory
    description: str = ""


TRUE_ANCHORS = np.array([[0.0, 0.0, 1.0], [15.0, 0.0, 1.25], [7.5, -5.0, 1.5]])


def _box_loop(rng) -> Scenario:
    patches = room_patches()
    lm, ids, on = place_landmarks(patches, 0.5, 0.2, rng)
    world = World(patches, lm, ids, on, TRUE_ANCHORS.copy())
    # a square loop and a bit more, weaving in height for 3D excitation
    xy = [(0, 0), (1.25, 0.3), (2.5, 0), (3.75, -0.3), (5, 0), (5.3, -2.5), (5, -5), (3.75, -5.3), (2.5, -5),
          (1.25, -4.7), (0, -5), (-0.3, -2.5), (0, 0), (1.25, 0.3), (2.5, 0), (3.75, -0.3), (5, 0)]
    z = [0.0, 2.6, -0.6, 2.6, 0.0, 2.6, -0.6, 2.6, -0.6, 2.6, -0.4, 2.4, 0.0, 2.2, 0.0, 1.5, 0.5]
    pts = np.c_[np.asarray(xy, float), z]
    yaw = [0.0, 0.0, 0.0, 0.0, -0.6, -1.57, -2.4, -3.14, -3.14, -3.14, -3.9, -4.71, -5.6, -6.28, -6.28, -6.28,
           -6.28]
    traj = path_trajectory(pts, 1.3, yaw)
    return Scenario("box-loop", world, traj, "lab-scale loop with revisit and 3D excitation")


def _line(rng) -> Scenario:
    patches = room_patches()
    lm, ids, on = place_landmarks(patches, 0.5, 0.2, rng)
    world = World(patches, lm, ids, on, TRUE_ANCHORS.copy())
    pts = np.c_[np.linspace(0, 11, 6), np.zeros(6), np.zeros(6)]
    traj = path_trajectory(pts, 1.0, np.zeros(6), tilt=0.0)
    return Scenario("line", world, traj, "straight run; keyframes collinear")


def _facade(rng) -> Scenario:
    patches = facade_patches()
    lm, ids, on = place_landmarks(patches, 0.05, 0.2, rng)
    world = World(patches, lm, ids, on, TRUE_ANCHORS.copy(), bounds=((-8, 28), (-12, 5), (-1, 7)))
    xy = [(0, 0), (1.5, 1.0), (3, -1.5), (4.5, 1.0), (6, -2.0), (6.5, -4.5), (4.5, -5.0), (3, -2.5), (1.5, -5.0),
          (0, -3.5), (-1, -1), (0.5, 0.5)]
    z = [0.0, 2.6, -0.6, 2.6, -0.2, 2.6, -0.6, 2.6, -0.4, 2.4, 0.6, 2.2]
    pts = np.c_[np.asarray(xy, float), z]
    traj = path_trajectory(pts, 1.3, None)
    return Scenario("facade", world, traj, "low-texture facade; one wall and the ground")


_SCENARIOS = {"box-loop": _box_loop, "line": _line, "facade": _facade}


def scenario_library() -> list[str]:
    return list(_SCENARIOS)


def make_scenario(name: str, seed: int = 0) -> Scenario:
    if name not in _SCENARIOS:
        raise InvalidArgument(f"unknown scenario {name!r}; choose from {', '.join(_SCENARIOS)}")
    # world layout depends on the seed only through its own stream
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0]))
    return _SCENARIOS[name](rng)


# --------------------------------------------------------------------------
# sensors


R_BC = np.array([[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]])


def default_cameras() -> list[CameraModel]:
    return [CameraModel(400, 400, 376, 240, 752, 480, Pose.from_matrix(R_BC, [0.1, 0.1, 0.0])),
            CameraModel(400, 400, 376, 240, 752, 480, Pose.from_matrix(R_BC, [0.1, -0.1, 0.0]))]


def default_lidars() -> list[Pose]:
    vertical = np.array([[1.0, 0, 0], [0, 0, -1.0], [0, 1.0, 0]])  # 90 deg about body x
    return [Pose.identity(), Pose.from_matrix(vertical, [0.0, 0.0, 0.1])]


@dataclass
class NoiseSpec:
    lidar: float = 0.02  # m, along the ray
    pixel: float = 1.0  # px
    uwb: float = 0.05  # m
    imu: ImuNoise = field(default_factory=ImuNoise)
    gyro_bias: float = 1e-3  # rad/s, std of the constant bias draw
    accel_bias: float = 1e-2  # m/s^2

    @classmethod
    def zero(cls) -> "NoiseSpec":
        return cls(0.0, 0.0, 0.0, ImuNoise(0.0, 0.0, 0.0, 0.0), 0.0, 0.0)

    @property
    def is_zero(self) -> bool:
        return self == NoiseSpec.zero()


@dataclass
class Rates:
    imu: float = 400.0
    lidar: float = 10.0
    cam: float = 10.0
    uwb: float = 50.0


@dataclass
class SensorSetup:
    cameras: list[CameraModel] = field(default_factory=default_cameras)
    lidars: list[Pose] = field(default_factory=default_lidars)
    lidar_points: int = 1000  # per lidar per scan
    lidar_range: tuple = (0.5, 25.0)
    lidar_fov: float = math.radians(20.0)  # half elevation
    cam_range: float = 30.0


def _imu_and_truth(traj: Trajectory, n: int, h: float):
    t = np.arange(n) * h
    p, acc, rpy, rpy_d = traj.evaluate(t)
    gyro = np.array([body_rates(a, b) for a, b in zip(rpy, rpy_d)])
    Rs = [euler_matrix(a) for a in rpy]
    g = np.array([0.0, 0.0, -GRAVITY])
    f = np.array([R.T @ (a - g) for R, a in zip(Rs, acc)])
    # ground truth: midpoint integration of the emitted signal
    R = Rs[0].copy()
    pos = p[0].copy()
    v = np.zeros(3)
    q = np.zeros((n, 4))
    P = np.zeros((n, 3))
    V = np.zeros((n, 3))
    q[0], P[0], V[0] = Rotation.from_matrix(R).quat, pos, v
    for k in range(n - 1):
        w = 0.5 * (gyro[k] + gyro[k + 1])
        R1 = R @ so3_exp(w * h)
        mid = 0.5 * (R @ f[k] + R1 @ f[k + 1]) + g
        pos = pos + v * h + 0.5 * mid * h * h
        v = v + mid * h
        R = R1
        q[k + 1], P[k + 1], V[k + 1] = Rotation.from_matrix(R).quat, pos, v
    return t, gyro, f, q, P, V


def _check_inside(world: World, P: np.ndarray):
    lo = np.array([b[0] for b in world.bounds]) + 0.3
    hi = np.array([b[1] for b in world.bounds]) - 0.3
    bad = np.any((P < lo) | (P > hi), axis=1)
    if bad.any():
        k = int(np.argmax(bad))
        raise GenerationError(f"trajectory leaves the world at sample {k}: {P[k].round(3).tolist()}")


def scan_patches(world: World, pose: Pose, lidar: Pose, setup: SensorSetup, noise: float, rng) -> np.ndarray:
    T = pose * lidar
    areas = np.array([p.area for p in world.patches])
    counts = rng.multinomial(12 * setup.lidar_points, areas / areas.sum())
    cand = np.vstack([p.sample(rng, c) for p, c in zip(world.patches, counts)])
    local = T.inverse().apply(cand)
    r = np.linalg.norm(local, axis=1)
    elev = np.arcsin(np.clip(local[:, 2] / np.maximum(r, 1e-9), -1, 1))
    keep = (r > setup.lidar_range[0]) & (r < setup.lidar_range[1]) & (np.abs(elev) < setup.lidar_fov)
    # denser returns nearby
    keep &= rng.uniform(0, 1, len(r)) < np.minimum(1.0, (4.0 / np.maximum(r, 1e-9)) ** 2)
    local, r = local[keep], r[keep]
    if len(local) > setup.lidar_points:
        sel = np.sort(rng.choice(len(local), setup.lidar_points, replace=False))
        local, r = local[sel], r[sel]
    if noise > 0 and len(local):
        local = local + (local / r[:, None]) * rng.normal(0, noise, len(r))[:, None]
    return local


@dataclass
class Dataset:
    header: dict
    imu: list[dict]
    lidar: list[dict]
    cam: list[dict]
    uwb: list[dict]
    groundtruth: list[dict]

    def write(self, out: str | Path) -> Path:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "header.json").write_text(json.dumps(self.header, indent=1, sort_keys=True) + "\n")
        for name in STREAMS:
            with open(out / f"{name}.jsonl", "w") as fh:
                for rec in getattr(self, name):
                    fh.write(json.dumps(rec, separators=(",", ":")) + "\n")
        return out


def _tolist(x):
    return np.asarray(x, dtype=float).tolist()


def generate(scenario: Scenario, seed: int = 0, noise: NoiseSpec | None = None, rates: Rates | None = None,
             setup: SensorSetup | None = None, duration: float | None = None) -> Dataset:
    noise = noise or NoiseSpec()
    rates = rates or Rates()
    setup = setup or SensorSetup()
    world, traj = scenario.world, scenario.trajectory
    h = 1.0 / rates.imu
    dur = duration or traj.duration
    n = int(round(dur * rates.imu)) + 1
    lidar_every = int(round(rates.imu / rates.lidar))
    cam_every = int(round(rates.imu / rates.cam))
    uwb_every = int(round(rates.imu / rates.uwb))
    streams = np.random.SeedSequence([seed, 1]).spawn(5)
    r_imu, r_lidar, r_cam, r_uwb, r_bias = (np.random.default_rng(s) for s in streams)

    t, gyro, acc, q, P, V = _imu_and_truth(traj, n, h)
    _check_inside(world, P)
    poses = [Pose(Rotation(qq), pp) for qq, pp in zip(q, P)]

    bg = r_bias.normal(0, noise.gyro_bias, 3) if noise.gyro_bias > 0 else np.zeros(3)
    ba = r_bias.normal(0, noise.accel_bias, 3) if noise.accel_bias > 0 else np.zeros(3)
    gyro_m = gyro + bg + r_imu.normal(0, 1, (n, 3)) * (noise.imu.gyro_noise / math.sqrt(h))
    acc_m = acc + ba + r_imu.normal(0, 1, (n, 3)) * (noise.imu.accel_noise / math.sqrt(h))
    imu = [{"t": float(t[k]), "gyro": _tolist(gyro_m[k]), "acc": _tolist(acc_m[k])} for k in range(n)]

    steps = list(range(lidar_every, n, lidar_every))
    lidar = []
    for k in steps:
        for li, T in enumerate(setup.lidars):
            pts = scan_patches(world, poses[k], T, setup, noise.lidar, r_lidar)
            lidar.append({"t": float(t[k]), "lidar": li, "points": pts.tolist()})

    cam = []
    for k in range(cam_every, n, cam_every):
        obs = observe(world.landmarks, world.landmark_ids, poses[k], setup.cameras, setup.cam_range)
        if noise.pixel > 0 and len(obs):
            ci = obs[:, 0].astype(int)
            f = np.array([[c.fx, c.fy] for c in setup.cameras])[ci]
            obs[:, 2:] += r_cam.normal(0, noise.pixel, (len(obs), 2)) / f
        cam.append({"t": float(t[k]), "obs": [[int(o[0]), int(o[1]), float(o[2]), float(o[3])] for o in obs]})

    ext = world.true_extrinsics()
    net = build_anchor_frame(*world.anchor_distances(), world.z_star, world.y_sign)
    uwb = []
    pairs = [(a, g) for a in range(3) for g in range(len(world.tags))]
    j = 0
    for k in range(uwb_every // 2 + 1, n, uwb_every):
        m = -(-k // lidar_every)  # step index with t_{m-1} < tau <= t_m
        if m < 2 or m * lidar_every >= n:
            continue
        kp, kc = (m - 1) * lidar_every, m * lidar_every
        a, g = pairs[j % len(pairs)]
        j += 1
        xs = [np.r_[q[i], P[i], V[i], np.zeros(6)] for i in (kp, kc)]
        s = UwbSample(1.0, net.anchors[a], world.tags[g], float(t[k]), float(t[kp]), float(t[kc]))
        rng_true = float(np.linalg.norm(uwb_displacement(xs[0], xs[1], ext, s))) + world.uwb_bias
        meas = rng_true + (r_uwb.normal(0, noise.uwb) if noise.uwb > 0 else 0.0)
        uwb.append({"t": float(t[k]), "anchor": a, "tag": g, "range": meas})

    gt_every = max(1, int(round(rates.imu / 100.0)))
    groundtruth = [{"t": float(t[k]), "q": _tolist(q[k]), "p": _tolist(P[k]), "v": _tolist(V[k])}
                   for k in range(0, n, gt_every)]

    header = {
        "version": DATASET_VERSION,
        "scenario": scenario.name,
        "seed": seed,
        "duration": float(t[-1]),
        "rates": asdict(rates),
        "gravity": GRAVITY,
        "imu_noise": asdict(noise.imu),
        "noise": {"lidar": noise.lidar, "pixel": noise.pixel, "uwb": noise.uwb},
        "lidars": [{"id": i, "extrinsic": T.to_row()} for i, T in enumerate(setup.lidars)],
        "cameras": [c.to_dict() for c in setup.cameras],
        "uwb": {"distances": list(world.anchor_distances()), "z_star": world.z_star, "y_sign": world.y_sign,
                "tags": world.tags.tolist(), "sigma": noise.uwb},
        "truth": {
            "T_LW": ext.T_LW.to_row(),
            "bias": world.uwb_bias,
            "anchors_L": world.anchors_L.tolist(),
            "gyro_bias": bg.tolist(),
            "accel_bias": ba.tolist(),
            "landmarks": world.landmarks.tolist(),
            "on_plane": world.on_plane.astype(int).tolist(),
            "patches": [asdict(p) for p in world.patches],
        },
    }
    return Dataset(header, imu, lidar, cam, uwb, groundtruth)
