"""Sweep one ablation axis (gamma by default) on the desk-scale synthetic data."""
import argparse
from pathlib import Path

from convemo.ablate import rows_csv, run_axis, summarize, summary_csv
from convemo.config import RunConfig, SyntheticSpec
from convemo.data import synthetic_splits


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--axis", default="gamma")
    ap.add_argument("--seeds", default="1,2,3,4,5")
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--workers", type=int, default=1)
    ap.add_argument("--out", default="sweeps")
    args = ap.parse_args()
    spec = SyntheticSpec()
    seeds = [int(s) for s in args.seeds.split(",")]
    rows = run_axis(RunConfig(epochs=args.epochs), args.axis, lambda s: synthetic_splits(spec, s)[0],
                    synthetic_splits(spec, seeds[0])[1], seeds=seeds, workers=args.workers)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"ablation_{args.axis}.csv").write_text(rows_csv(rows))
    summary = summarize(rows)
    (out / f"ablation_{args.axis}_summary.csv").write_text(summary_csv(summary))
    for row in summary:
        print(f"{args.axis}={row['axis_value']:<16} median w-F1 {row['median_w_f1']:.4f}")


if __name__ == "__main__":
    main()
