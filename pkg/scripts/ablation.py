"""Sensor ablation on generated scenarios: keyframe ATE, runtime and UWB calibration per configuration.

    python3 scripts/ablation.py --seed 0 --scenarios box-loop facade
"""
import argparse
import tempfile
import time
from pathlib import Path

import numpy as np

from viral.dataset import load_dataset
from viral.pipeline import make_config, run
from viral.sim import generate, make_scenario

CONFIGS = ("imu,lidar", "imu,lidar,cam", "imu,lidar,uwb", "imu,lidar,cam,uwb")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--scenarios", nargs="+", default=["box-loop", "facade"])
    ap.add_argument("--configs", nargs="+", default=list(CONFIGS))
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    print(f"{'scenario':10} {'sensors':20} {'odom ATE':>9} {'kf ATE':>8} {'time':>6} {'loops':>5} {'gate':>6} "
          f"{'anchor err':>10} {'bias':>6}")
    with tempfile.TemporaryDirectory() as tmp:
        for name in args.scenarios:
            path = Path(tmp) / name
            generate(make_scenario(name, args.seed), args.seed).write(path)
            ds = load_dataset(path)
            for sensors in args.configs:
                t0 = time.perf_counter()
                res = run(ds, make_config(sensors.split(",")))
                secs = time.perf_counter() - t0
                m = res.mapper
                gate = f"{m.gate_time:.1f}" if m.gate_time is not None else "-"
                err, bias = "-", "-"
                if m.graph.uwb_active:
                    est = m.graph.ext.T_LW.apply(ds.anchor_network.anchors)
                    err = f"{np.abs(est - np.array(ds.header['truth']['anchors_L'])).max():.3f}"
                    bias = f"{m.graph.ext.bias:.3f}"
                print(f"{name:10} {sensors:20} {res.ate['odometry']:9.3f} {res.ate['keyframes']:8.3f} {secs:5.0f}s "
                      f"{len(m.graph.loop_edges):5d} {gate:>6} {err:>10} {bias:>6}", flush=True)


if __name__ == "__main__":
    main()
