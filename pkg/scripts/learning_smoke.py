"""Train the default configuration on the default synthetic data over five seeds."""
import argparse
import time

import numpy as np

from convemo.config import RunConfig, SyntheticSpec
from convemo.data import synthetic_splits
from convemo.train import evaluate, train


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", default="1,2,3,4,5")
    ap.add_argument("--epochs", type=int, default=30)
    args = ap.parse_args()
    scores = []
    t0 = time.perf_counter()
    for seed in map(int, args.seeds.split(",")):
        splits, header = synthetic_splits(SyntheticSpec(), seed)
        cfg = RunConfig(seed=seed, epochs=args.epochs)
        res = train(cfg, splits["train"], splits["valid"], header)
        rep = evaluate(res.params, splits["test"], cfg, header)
        scores.append(rep.w_f1)
        print(f"seed {seed}: test w-F1 {rep.w_f1:.4f}  w-Acc {rep.w_acc:.4f}  best epoch {res.best_epoch}")
    print(f"median w-F1 {np.median(scores):.4f} in {time.perf_counter() - t0:.0f}s")


if __name__ == "__main__":
    main()
