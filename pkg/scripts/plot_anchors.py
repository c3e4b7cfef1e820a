"""Plot per-round anchor estimates from a run's anchors.jsonl against the dataset truth.

    python3 scripts/plot_anchors.py --run out/ --dataset data/ --png anchors.png
"""
import argparse
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--run", required=True, help="output directory of `viral run`")
    ap.add_argument("--dataset", required=True)
    ap.add_argument("--png", default="anchors.png")
    args = ap.parse_args()
    rows = [json.loads(line) for line in (Path(args.run) / "anchors.jsonl").read_text().splitlines() if line]
    if not rows:
        raise SystemExit("no UWB BA rounds in this run")
    header = json.loads((Path(args.dataset) / "header.json").read_text())["truth"]
    truth = np.array(header["anchors_L"])
    t = np.array([r["t"] for r in rows])
    err = np.array([r["anchors_L"] for r in rows]) - truth  # rounds x anchors x 3
    fig, axes = plt.subplots(2, 1, sharex=True, figsize=(7, 6))
    for a in range(err.shape[1]):
        for k, axis in enumerate("xyz"):
            axes[0].plot(t, err[:, a, k], label=f"anchor {a} {axis}")
    axes[0].axhspan(-0.1, 0.1, color="0.9")
    axes[0].set_ylabel("anchor error (m)")
    axes[0].legend(fontsize=6, ncol=3)
    axes[1].plot(t, [r["bias"] for r in rows], "k.-")
    axes[1].axhline(header["bias"], color="0.5", ls="--")
    axes[1].set_ylabel("ranging bias (m)")
    axes[1].set_xlabel("time (s)")
    fig.tight_layout()
    fig.savefig(args.png, dpi=120)
    print(f"wrote {args.png}")


if __name__ == "__main__":
    main()
