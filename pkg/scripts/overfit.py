"""Fit a noiseless 2-station panel until the training loss falls below a fraction of epoch 1."""

import argparse
import json
import time

from hypercast.data import build_windows, chronological_split, synthetic_panel
from hypercast.hypergraph import fcm_soft_clusters
from hypercast.model import HyperCast, ModelConfig
from hypercast.train import TrainConfig, train


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--days", type=int, default=90)
    ap.add_argument("--lr", type=float, default=1e-3)
    ap.add_argument("--target-ratio", type=float, default=0.01)
    ap.add_argument("--max-epochs", type=int, default=2000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    panel = synthetic_panel(args.seed, 2, args.days, 0.0)
    cfg = ModelConfig(N_s=2, K=1, T_r=7, T_w=2, T_f=3)
    train_s, _ = chronological_split(build_windows(panel, cfg.T_r, cfg.T_w, cfg.T_f))
    model = HyperCast(cfg, seed=args.seed, H_dist=fcm_soft_clusters(panel.coords, cfg.K, seed=args.seed).values)
    first = []

    def reached(rec):
        if not first:
            first.append(rec.train_loss)
        return rec.train_loss < args.target_ratio * first[0]

    t0 = time.perf_counter()
    _, tlog = train(model, train_s, TrainConfig(lr_init=args.lr, early_stop_min_delta=1e-4,
                                                max_epochs=args.max_epochs, seed=args.seed), on_epoch=reached)
    last = tlog.records[-1]
    print(json.dumps({
        "reached": tlog.stop_reason == "callback",
        "epoch": last.epoch,
        "loss_ratio": last.train_loss / tlog.records[0].train_loss,
        "seconds": round(time.perf_counter() - t0, 1),
    }, indent=2))


if __name__ == "__main__":
    main()
