"""Ablation runner: one train/eval per (axis value, seed), CSV out."""
from __future__ import annotations

import csv
import io
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .config import GRAPH_STRATEGIES, SEGMENTATION, RunConfig
from .data import DatasetHeader, DialogueRecord
from .errors import ConfigError
from .train import evaluate, train

log = logging.getLogger(__name__)

DEFAULT_SEEDS = (1, 2, 3, 4, 5)

COMPONENTS = {
    "full": {},
    "no_differential": {"denoise": "none"},
    "no_gating": {"use_gate": False},
    "no_graph": {"graph_strategy": "none"},
    "no_diffusion": {"fusion": "none"},
}


def _speaker_noise(value) -> dict:
    if value == "off":
        return {"no_speaker": True}
    return {"speaker_noise": float(value)}


# axis -> (default values, value -> config overrides)
AXES = {
    "window": ([0, 1, 2, 4, 6, 8], lambda v: {"window": int(v)}),
    "gamma": ([round(0.2 * i, 1) for i in range(6)], lambda v: {"gamma": float(v)}),
    "strategy": ([s for s in GRAPH_STRATEGIES if s != "none"], lambda v: {"graph_strategy": v}),
    "denoise": (["diff", "none", "ma", "ema", "median"], lambda v: {"denoise": v}),
    "delta": ([1, 2, 3], lambda v: {"delta": int(v)}),
    "msl_factor": ([0.0, 0.05, 0.1, 0.2, 0.5], lambda v: {"msl_factor": float(v)}),
    "modality": (["t", "a", "v", "ta", "tv", "av", "tav"], lambda v: {"modalities": v}),
    "diff_on": (["none", "a", "v", "av"], lambda v: {"diff_on": v}),
    "speaker_noise": ([0.0, 0.3, "off"], _speaker_noise),
    "segmentation": (list(SEGMENTATION), lambda v: {"segmentation": v}),
    "component": (list(COMPONENTS), lambda v: dict(COMPONENTS[v])),
}


@dataclass
class AblationRow:
    axis: str
    axis_value: str
    seed: int
    w_acc: float
    w_f1: float


def axis_values(axis: str, values=None) -> list:
    if axis not in AXES:
        raise ConfigError(f"unknown ablation axis '{axis}'; choose from {sorted(AXES)}")
    return list(AXES[axis][0] if values is None else values)


def axis_config(base: RunConfig, axis: str, value) -> RunConfig:
    if axis not in AXES:
        raise ConfigError(f"unknown ablation axis '{axis}'")
    if axis == "component" and value not in COMPONENTS:
        raise ConfigError(f"unknown component switch '{value}'")
    return base.replace(**AXES[axis][1](value))


def _run_one(base, axis, value, seed, splits, header) -> AblationRow:
    cfg = axis_config(base, axis, value).replace(seed=seed)
    if axis == "segmentation":
        # segmentation is inference-only: train unsegmented, evaluate segmented
        res = train(cfg.replace(segmentation="none"), splits["train"], splits["valid"], header)
    else:
        res = train(cfg, splits["train"], splits["valid"], header)
    report = evaluate(res.params, splits["test"], cfg, header)
    log.info("%s=%s seed=%d w_f1=%.4f", axis, value, seed, report.w_f1)
    return AblationRow(axis, str(value), seed, report.w_acc, report.w_f1)


def run_axis(base: RunConfig, axis: str, splits_for_seed, header: DatasetHeader, values=None,
             seeds=DEFAULT_SEEDS, workers: int = 1) -> list[AblationRow]:
    """``splits_for_seed(seed)`` returns {"train", "valid", "test"} record lists.

    Rows come back ordered by (value, seed) regardless of ``workers``.
    """
    values = axis_values(axis, values)
    for v in values:
        axis_config(base, axis, v)  # fail fast on bad values
    jobs = [(v, s) for v in values for s in seeds]
    data = {s: splits_for_seed(s) for s in seeds}
    if workers <= 1:
        return [_run_one(base, axis, v, s, data[s], header) for v, s in jobs]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(_run_one, base, axis, v, s, data[s], header) for v, s in jobs]
        return [f.result() for f in futures]


def summarize(rows: list[AblationRow]) -> list[dict]:
    """Median over seeds per (axis, value), in first-seen order."""
    groups: dict[tuple[str, str], list[AblationRow]] = {}
    for r in rows:
        groups.setdefault((r.axis, r.axis_value), []).append(r)
    return [{"axis": a, "axis_value": v, "n_seeds": len(g),
             "median_w_acc": float(np.median([r.w_acc for r in g])),
             "median_w_f1": float(np.median([r.w_f1 for r in g]))}
            for (a, v), g in groups.items()]


def rows_csv(rows: list[AblationRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["axis", "axis_value", "seed", "w_acc", "w_f1"])
    for r in rows:
        w.writerow([r.axis, r.axis_value, r.seed, f"{r.w_acc:.6f}", f"{r.w_f1:.6f}"])
    return buf.getvalue()


def summary_csv(summary: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=["axis", "axis_value", "n_seeds", "median_w_acc", "median_w_f1"],
                       lineterminator="\n")
    w.writeheader()
    for row in summary:
        w.writerow({**row, "median_w_acc": f"{row['median_w_acc']:.6f}",
                    "median_w_f1": f"{row['median_w_f1']:.6f}"})
    return buf.getvalue()
