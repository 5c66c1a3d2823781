"""Training loop, evaluation and inference-time segmentation."""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .config import RunConfig
from .data import DatasetHeader, DialogueRecord, iter_batches, make_batch
from .errors import DataError, NumericError
from .head_loss import MetricsReport, class_weights_from_labels, compute_metrics
from .model import ModelParams, forward, init_model, joint_loss
from .optim import Adam, cosine_lr

log = logging.getLogger(__name__)

EVAL_BATCH = 64


@dataclass
class TrainResult:
    params: ModelParams
    history: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    class_weights: np.ndarray | None = None
    seconds: float = 0.0


def _labels(records: list[DialogueRecord]) -> np.ndarray:
    return np.asarray([y for r in records for y in r.labels if y is not None], dtype=np.int64)


def train(cfg: RunConfig, train_records: list[DialogueRecord], valid_records: list[DialogueRecord],
          header: DatasetHeader) -> TrainResult:
    """Adam + cosine schedule over the joint loss; keeps the best-validation-w-F1 weights."""
    if not train_records:
        raise DataError("training needs at least one dialogue")
    t0 = time.perf_counter()
    with nx.default_dtype(cfg.dtype):
        rng = np.random.default_rng(cfg.seed)
        params = init_model(cfg, header, rng)
        weights = class_weights_from_labels(_labels(train_records), header.n_classes)
        result = TrainResult(params, class_weights=weights)
        if cfg.epochs == 0:
            return result
        opt = Adam(params.parameters(), cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay)
        steps_per_epoch = -(-len(train_records) // cfg.batch_size)
        total = cfg.epochs * steps_per_epoch
        best, best_state, step = -1.0, params.state(), 0
        for epoch in range(1, cfg.epochs + 1):
            losses = []
            for bi, batch in enumerate(iter_batches(train_records, header, cfg.batch_size, rng)):
                if not batch.label_mask.any():
                    continue
                lr = cosine_lr(step, total, cfg.lr, cfg.lr_min)
                try:
                    loss = joint_loss(forward(params, batch, cfg, training=True, rng=rng), batch, weights,
                                      cfg.msl_factor)
                    params.zero_grad()
                    nx.backward(loss)
                except NumericError as exc:
                    raise NumericError(f"epoch {epoch}, batch {bi}: {exc}") from exc
                opt.step(lr)
                losses.append(loss.item())
                step += 1
            row = {"epoch": epoch, "lr": lr, "train_loss": float(np.mean(losses)) if losses else float("nan")}
            for m, p in sorted(params.denoise.items()):
                row[f"lambda_{m}"] = p.lam.item()
            if valid_records:
                report, vloss = evaluate(params, valid_records, cfg, header, class_weights=weights,
                                         return_loss=True)
                row.update(valid_loss=vloss, valid_w_acc=report.w_acc, valid_w_f1=report.w_f1)
                score = report.w_f1
            else:
                score = epoch
            result.history.append(row)
            log.info("epoch %d %s", epoch, {k: round(v, 4) for k, v in row.items() if k != "epoch"})
            if score > best:
                best, best_state, result.best_epoch = score, params.state(), epoch
        params.load_state(best_state)
    result.seconds = time.perf_counter() - t0
    return result


# --- segmentation ----------------------------------------------------------
def segment_plan(n: int, length: int, mode: str) -> tuple[list[tuple[int, int]], list[int]]:
    """Segments (start, end) covering ``n`` utterances and, for each utterance,
    the index of the segment its prediction is read from."""
    length = max(1, length)
    if mode == "none" or n <= length:
        return [(0, n)], [0] * n
    if mode == "no_overlap":
        segs = [(s, min(s + length, n)) for s in range(0, n, length)]
        return segs, [t // length for t in range(n)]
    if mode != "overlap50":
        raise ValueError(f"unknown segmentation mode {mode}")
    stride = max(1, length // 2)
    starts = list(range(0, n - length + 1, stride))
    if starts[-1] != n - length:
        starts.append(n - length)
    segs = [(s, s + length) for s in starts]
    assign = []
    for t in range(n):
        best, best_i = -1, 0
        for i, (s, e) in enumerate(segs):
            if s <= t < e and min(t - s, e - 1 - t) > best:
                best, best_i = min(t - s, e - 1 - t), i
        assign.append(best_i)
    return segs, assign


def _segment(records: list[DialogueRecord], cfg: RunConfig):
    length = cfg.segment_length or cfg.window
    pieces, index = [], []
    for r, rec in enumerate(records):
        segs, assign = segment_plan(len(rec), length, cfg.segmentation)
        base = len(pieces)
        for s, e in segs:
            pieces.append(DialogueRecord(rec.dialogue_id if len(segs) == 1 else f"{rec.dialogue_id}@{s}",
                                         rec.utterances[s:e]))
        index.append([(base + assign[t], t - segs[assign[t]][0]) for t in range(len(rec))])
    return pieces, index


def predict_scores(params: ModelParams, records: list[DialogueRecord], cfg: RunConfig,
                   header: DatasetHeader) -> list[np.ndarray]:
    """Fused scores Z_f per dialogue, (n_utterances, C), after optional segmentation."""
    pieces, index = _segment(records, cfg)
    scores: list[np.ndarray] = [None] * len(pieces)
    with nx.default_dtype(cfg.dtype), nx.no_grad():
        for i in range(0, len(pieces), EVAL_BATCH):
            chunk = pieces[i:i + EVAL_BATCH]
            out = forward(params, make_batch(chunk, header), cfg)
            for j, rec in enumerate(chunk):
                scores[i + j] = out.Z_f.data[j, :len(rec)]
    return [np.stack([scores[p][t] for p, t in idx]) for idx in index]


def predict(params, records, cfg, header) -> list[np.ndarray]:
    return [np.argmax(s, axis=-1) for s in predict_scores(params, records, cfg, header)]


def evaluate(params: ModelParams, records: list[DialogueRecord], cfg: RunConfig, header: DatasetHeader,
             class_weights=None, return_loss: bool = False):
    preds = predict(params, records, cfg, header)
    gold = np.concatenate([np.asarray([-1 if y is None else y for y in r.labels]) for r in records])
    pred = np.concatenate(preds)
    report = compute_metrics(pred, gold, gold >= 0, header.n_classes, header.classes)
    if not return_loss:
        return report
    weights = np.ones(header.n_classes) if class_weights is None else class_weights
    total, count = 0.0, 0
    with nx.default_dtype(cfg.dtype), nx.no_grad():
        for batch in iter_batches(records, header, EVAL_BATCH):
            if batch.label_mask.any():
                n = int(batch.label_mask.sum())
                total += joint_loss(forward(params, batch, cfg), batch, weights, cfg.msl_factor).item() * n
                count += n
    return report, total / max(count, 1)


def write_history(path, history: list[dict]) -> None:
    keys: list[str] = []
    for row in history:
        keys += [k for k in row if k not in keys]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=keys or ["epoch"])
        writer.writeheader()
        writer.writerows(history)


def write_metrics(path, report: MetricsReport) -> None:
    Path(path).write_text(report.to_csv())
