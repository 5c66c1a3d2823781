"""Command line entry point: generate, train, eval, ablate, gradcheck, dump."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from . import numerics as nx
from .ablate import AXES, DEFAULT_SEEDS, rows_csv, run_axis, summarize, summary_csv
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, SyntheticSpec, impulse_heavy
from .data import MODALITY_KEYS, DialogueRecord, graph_speakers, load_dataset, make_batch, synthetic_splits, \
    write_dataset
from .diff_denoise import multi_head_diff
from .encoding import encode
from .errors import ConfigError, ConvEmoError, DataError
from .gradcheck import TOLERANCE, run_suite
from .relation_graph import Relation, build_subgraphs
from .train import evaluate, train, write_history, write_metrics

log = logging.getLogger("convemo")

SPLITS = ("train", "valid", "test")

# flag -> RunConfig field; parsed values left as None are not applied
CONFIG_FLAGS = {
    "d": int, "heads": int, "window": int, "gamma": float, "lambda_init": float, "delta": int,
    "denoise": str, "diff_on": str, "graph_strategy": str, "fusion": str, "fusion_weights": str,
    "modality": str, "msl_factor": float, "lr": float, "epochs": int, "batch_size": int,
    "dropout": float, "segmentation": str, "segment_length": int, "speaker_noise": float,
    "degree_mode": str, "dtype": str,
}
RENAMED = {"modality": "modalities"}


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON run config (may name a preset)")
    p.add_argument("--seed", type=int)
    for flag, kind in CONFIG_FLAGS.items():
        p.add_argument("--" + flag.replace("_", "-"), type=kind, dest=flag)
    p.add_argument("--no-speaker", action="store_true", default=None)
    p.add_argument("--no-gate", action="store_true", default=None)


def _add_data_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", type=Path, help="directory with train/valid/test .jsonl (default: synthetic)")
    p.add_argument("--data-seed", type=int, help="synthetic data seed (default: the run seed)")
    p.add_argument("--impulse-heavy", action="store_true", help="synthetic a/v with frequent large impulses")


def build_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    changes = {RENAMED.get(k, k): getattr(args, k) for k in CONFIG_FLAGS if getattr(args, k, None) is not None}
    if getattr(args, "seed", None) is not None:
        changes["seed"] = args.seed
    if getattr(args, "no_speaker", None):
        changes["no_speaker"] = True
    if getattr(args, "no_gate", None):
        changes["use_gate"] = False
    try:
        return cfg.replace(**changes)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def _spec(args) -> SyntheticSpec:
    return impulse_heavy() if getattr(args, "impulse_heavy", False) else SyntheticSpec()


def load_splits(args, seed: int):
    if args.data is None:
        return synthetic_splits(_spec(args), seed if args.data_seed is None else args.data_seed)
    splits, header = {}, None
    for name in SPLITS:
        path = args.data / f"{name}.jsonl"
        if not path.exists():
            if name == "train":
                raise DataError(f"missing {path}")
            splits[name] = []
            continue
        splits[name], h = load_dataset(path)
        if header is not None and (h.classes != header.classes or h.dims != header.dims):
            raise DataError(f"{path}: header disagrees with the train split")
        header = header or h
    return splits, header


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# --- subcommands -------------------------------------------------------------
def cmd_generate(args) -> int:
    spec = _spec(args)
    if args.spec:
        try:
            spec = spec.replace(**json.loads(Path(args.spec).read_text()))
        except (OSError, json.JSONDecodeError, TypeError) as exc:
            raise ConfigError(f"bad synthetic spec {args.spec}: {exc}") from exc
    splits, header = synthetic_splits(spec, args.seed)
    out = _out(args)
    for name in SPLITS:
        write_dataset(out / f"{name}.jsonl", splits[name], header)
    (out / "spec.json").write_text(json.dumps(spec.to_dict(), indent=2))
    print(f"wrote {sum(len(v) for v in splits.values())} dialogues to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = build_config(args)
    splits, header = load_splits(args, cfg.seed)
    out = _out(args)
    res = train(cfg, splits["train"], splits["valid"], header)
    cfg.save(out / "config.json")
    write_history(out / "history.csv", res.history)
    save_checkpoint(out / "checkpoint", res.params, cfg, header)
    if splits["test"]:
        report = evaluate(res.params, splits["test"], cfg, header)
        write_metrics(out / "metrics.csv", report)
        print(report.table())
    print(f"best epoch {res.best_epoch}, {res.seconds:.1f}s, outputs in {out}")
    return 0


def _checkpoint_config(args, ckpt_cfg: RunConfig) -> RunConfig:
    """Inference-time overrides only; architecture comes from the checkpoint."""
    changes = {}
    for key in ("segmentation", "segment_length", "speaker_noise"):
        if getattr(args, key, None) is not None:
            changes[key] = getattr(args, key)
    if getattr(args, "no_speaker", None):
        changes["no_speaker"] = True
    return ckpt_cfg.replace(**changes)


def _eval_records(args, cfg, header) -> list[DialogueRecord]:
    if args.data is None:
        splits, _ = synthetic_splits(_spec(args), cfg.seed if args.data_seed is None else args.data_seed)
        return splits[args.split]
    path = args.data if args.data.suffix == ".jsonl" else args.data / f"{args.split}.jsonl"
    records, h = load_dataset(path)
    if h.dims != header.dims or h.classes != header.classes:
        raise DataError(f"{path}: dims/classes {h.dims}/{h.classes} do not match the checkpoint")
    return records


def cmd_eval(args) -> int:
    params, cfg, header = load_checkpoint(args.checkpoint)
    cfg = _checkpoint_config(args, cfg)
    records = _eval_records(args, cfg, header)
    report = evaluate(params, records, cfg, header)
    out = _out(args)
    write_metrics(out / "metrics.csv", report)
    print(report.table())
    return 0


def cmd_ablate(args) -> int:
    base = build_config(args)
    axis = "gamma" if args.gamma_sweep else args.axis
    if axis is None:
        raise ConfigError("ablate needs --axis (or --gamma-sweep)")
    if axis not in AXES:
        raise ConfigError(f"unknown ablation axis '{axis}'; choose from {sorted(AXES)}")
    values = None
    if args.values:
        values = [v.strip() for v in args.values.split(",")]
        if axis in ("window", "delta"):
            values = [int(v) for v in values]
        elif axis in ("gamma", "msl_factor"):
            values = [float(v) for v in values]
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else list(DEFAULT_SEEDS)
    header = load_splits(args, seeds[0])[1]
    rows = run_axis(base, axis, lambda s: load_splits(args, s)[0], header, values, seeds, args.workers)
    out = _out(args)
    (out / f"ablation_{axis}.csv").write_text(rows_csv(rows))
    summary = summarize(rows)
    (out / f"ablation_{axis}_summary.csv").write_text(summary_csv(summary))
    for row in summary:
        print(f"{axis}={row['axis_value']:<16} median w-F1 {row['median_w_f1']:.4f}  w-Acc {row['median_w_acc']:.4f}")
    return 0


def cmd_gradcheck(args) -> int:
    results, seconds = run_suite(args.seed or 0)
    worst = max(results.values())
    for name, err in results.items():
        print(f"{name:<18} {err:.3e}  {'ok' if err < TOLERANCE else 'FAIL'}")
    print(f"{seconds:.1f}s, worst {worst:.3e} (tolerance {TOLERANCE:g})")
    return 0 if worst < TOLERANCE else 4


def cmd_dump(args) -> int:
    params, cfg, header = load_checkpoint(args.checkpoint)
    cfg = _checkpoint_config(args, cfg)
    records = _eval_records(args, cfg, header)
    if not 0 <= args.dialogue < len(records):
        raise DataError(f"dialogue index {args.dialogue} out of range (have {len(records)})")
    batch = make_batch([records[args.dialogue]], header)
    out = _out(args)
    topo_path = out / "topology.csv"
    with open(topo_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["graph", "source", "target", "type"])
        spk = graph_speakers(batch, len(header.speakers), cfg.speaker_noise, cfg.no_speaker, cfg.seed)
        for g in build_subgraphs(spk[0], cfg.window, batch.mask[0]):
            for e in g.edges:
                w.writerow([g.kind, e.source, e.target, Relation(e.relation).name.lower()])
    attn_path = out / "attn_diff.csv"
    with open(attn_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["modality", "head", "query", "key", "alpha", "alpha_ref", "weight"])
        with nx.default_dtype(cfg.dtype), nx.no_grad():
            enc = encode(params.encoding, batch.feats, batch.speakers, batch.mask, cfg.modalities,
                         cfg.encode_text_with_se_pe)
            for m, p in sorted(params.denoise.items()):
                _, parts = multi_head_diff(enc[m], p, cfg.heads, batch.mask, cfg.delta, cfg.scale_full_d,
                                           cfg.gn_eps, return_parts=True)
                n = len(records[args.dialogue])
                for hd in range(cfg.heads):
                    for i in range(n):
                        for j in range(n):
                            w.writerow([MODALITY_KEYS[m], hd, i, j, f"{parts['alpha'].data[0, hd, i, j]:.6g}",
                                        f"{parts['alpha_ref'].data[0, hd, i, j]:.6g}",
                                        f"{parts['weights'].data[0, hd, i, j]:.6g}"])
    print(f"wrote {topo_path} and {attn_path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="convemo", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic dataset")
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--out", required=True)
    p.add_argument("--impulse-heavy", action="store_true")
    p.add_argument("--spec", help="JSON file of SyntheticSpec overrides")
    p.set_defaults(fn=cmd_generate)

    p = sub.add_parser("train", help="train, then evaluate on the test split")
    _add_config_flags(p)
    _add_data_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True, type=Path)
    _add_data_flags(p)
    p.add_argument("--split", default="test", choices=SPLITS)
    p.add_argument("--segmentation")
    p.add_argument("--segment-length", type=int, dest="segment_length")
    p.add_argument("--speaker-noise", type=float, dest="speaker_noise")
    p.add_argument("--no-speaker", action="store_true", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("ablate", help="sweep one axis over seeds")
    _add_config_flags(p)
    _add_data_flags(p)
    p.add_argument("--axis", help=f"one of {sorted(AXES)}")
    p.add_argument("--gamma-sweep", action="store_true", help="shorthand for --axis gamma")
    p.add_argument("--values", help="comma-separated axis values (default: the axis grid)")
    p.add_argument("--seeds", help="comma-separated seeds (default 1,2,3,4,5)")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("dump", help="topology and differential-attention maps for one dialogue")
    p.add_argument("--checkpoint", required=True, type=Path)
    _add_data_flags(p)
    p.add_argument("--split", default="test", choices=SPLITS)
    p.add_argument("--dialogue", type=int, default=0)
    p.add_argument("--speaker-noise", type=float, dest="speaker_noise")
    p.add_argument("--no-speaker", action="store_true", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_dump)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except ConvEmoError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FloatingPointError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
