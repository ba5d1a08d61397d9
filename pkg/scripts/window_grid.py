"""Sweep recent/weekly window lengths on a synthetic panel through the CLI grid stanza."""

import argparse
import json
import sys
import tempfile
from pathlib import Path

import yaml

from hypercast.cli import main as cli


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default=None, help="output directory (default: a temporary one)")
    ap.add_argument("--T-r", type=int, nargs="+", default=[7, 14, 21])
    ap.add_argument("--T-w", type=int, nargs="+", default=[1, 2, 3])
    ap.add_argument("--epochs", type=int, default=20)
    ap.add_argument("--d-h", type=int, default=32)
    args = ap.parse_args()

    out = Path(args.out or tempfile.mkdtemp(prefix="window_grid_"))
    out.mkdir(parents=True, exist_ok=True)
    config = {
        "output_dir": str(out),
        "model": {"K": 2, "T_f": 3, "d_h": args.d_h},
        "train": {"lr_init": 1e-3, "max_epochs": args.epochs},
        "grid": {"T_r": args.T_r, "T_w": args.T_w},
    }
    path = out / "grid.yaml"
    path.write_text(yaml.safe_dump(config))
    for command in ("synth", "train"):
        code = cli([command, "-c", str(path)])
        if code:
            sys.exit(code)
    rows = json.loads((out / "grid_metrics.json").read_text())
    for r in sorted(rows, key=lambda r: -(r["R2"] if r["R2"] is not None else float("-inf"))):
        print(f"T_r={r['T_r']:>3} T_w={r['T_w']:>2}  R2={r['R2']:.3f}  MAE={r['MAE']:.3f}")


if __name__ == "__main__":
    main()
