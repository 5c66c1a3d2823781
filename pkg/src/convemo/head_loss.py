"""Per-modality classifiers, weighted logit fusion, joint loss and weighted metrics."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .encoding import glorot, one_hot, zeros
from .errors import DataError, NumericError
from .numerics import Tensor

LOG_FLOOR = 1e-12


@dataclass
class Classifier:
    W: Tensor  # (d, C)
    b: Tensor  # (C,)

    @classmethod
    def init(cls, rng, d: int, C: int) -> "Classifier":
        return cls(glorot(rng, d, C), zeros(C))


@dataclass
class HeadParams:
    classifiers: dict[str, Classifier]
    alpha: dict[str, float | Tensor]  # Tensor entries are learnable (LSF)

    @classmethod
    def init(cls, rng, d: int, C: int, alpha: dict[str, float], modalities: str = "tav",
             learnable_alpha: bool = False) -> "HeadParams":
        classifiers = {m: Classifier.init(rng, d, C) for m in "tav" if m in modalities}
        if learnable_alpha:
            alpha = {m: nx.tensor(alpha[m], requires_grad=True) for m in classifiers}
        else:
            alpha = {m: float(alpha[m]) for m in classifiers}
        return cls(classifiers, alpha)


def modality_logits(Z: Tensor, clf: Classifier) -> Tensor:
    return Z @ clf.W + clf.b


def fuse_logits(logits: dict[str, Tensor], alpha: dict) -> tuple[Tensor, Tensor]:
    """Weighted sum of modality scores and its row softmax."""
    Z_f = None
    for m, L in logits.items():
        term = alpha[m] * L
        Z_f = term if Z_f is None else Z_f + term
    return Z_f, nx.softmax_rows(Z_f)


def predict(scores) -> np.ndarray:
    """Argmax over classes; ties go to the lowest class index."""
    data = scores.data if isinstance(scores, Tensor) else np.asarray(scores)
    return np.argmax(data, axis=-1)


def _label_weights(labels, mask, class_weights, dtype) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    n_valid = int(mask.sum())
    if n_valid == 0:
        raise DataError("loss over an empty batch (every row masked)")
    labels = np.where(mask, np.asarray(labels), 0)
    return (np.asarray(class_weights)[labels] * mask / n_valid).astype(dtype)


def fusion_loss(Y_hat: Tensor, labels, class_weights, mask) -> Tensor:
    """Class-weighted masked NLL, averaged over valid rows."""
    C = Y_hat.shape[-1]
    labels = np.where(np.asarray(mask, dtype=bool), np.asarray(labels), 0)
    w = _label_weights(labels, mask, class_weights, Y_hat.dtype)
    picked = (Y_hat * one_hot(labels, C, Y_hat.dtype)).sum(axis=-1)
    return -(nx.log(picked, floor=LOG_FLOOR) * w).sum()


def self_supervised_loss(Y_hats: dict[str, Tensor], labels, mask, factor: float = 0.1,
                         return_weights: bool = False, weights: dict[str, float] | None = None):
    """Sum of per-modality CE terms, each weighted by ``factor`` times its own
    current (detached) value. Passing ``weights`` freezes them instead."""
    frozen = weights
    total, weights = None, {}
    for m, Y in Y_hats.items():
        ce = fusion_loss(Y, labels, np.ones(Y.shape[-1]), mask)
        weights[m] = frozen[m] if frozen is not None else factor * ce.item()
        term = weights[m] * ce
        total = term if total is None else total + term
    if total is None:
        total = nx.tensor(0.0)
    return (total, weights) if return_weights else total


def total_loss(L_f: Tensor, L_u: Tensor) -> Tensor:
    out = L_f + L_u
    if not np.isfinite(out.data).all():
        raise NumericError("total loss is non-finite")
    return out


def class_weights_from_labels(labels, n_classes: int) -> np.ndarray:
    """Inverse label frequency normalised to mean 1 over observed classes; unseen classes get 1."""
    counts = np.bincount(np.asarray(labels, dtype=np.int64).ravel(), minlength=n_classes).astype(float)
    w = np.ones(n_classes)
    seen = counts > 0
    if seen.any():
        inv = 1.0 / counts[seen]
        w[seen] = inv / inv.mean()
    return w


@dataclass
class MetricsReport:
    w_acc: float
    w_f1: float
    accuracy: np.ndarray
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    support: np.ndarray
    confusion: np.ndarray  # rows = gold, cols = predicted
    class_names: list[str] = field(default_factory=list)

    def rows(self) -> list[dict]:
        names = self.class_names or [str(i) for i in range(len(self.support))]
        out = []
        for i, name in enumerate(names):
            out.append({"class": name, "support": int(self.support[i]), "accuracy": self.accuracy[i],
                        "precision": self.precision[i], "recall": self.recall[i], "f1": self.f1[i]})
        out.append({"class": "weighted", "support": int(self.support.sum()), "accuracy": self.w_acc,
                    "precision": float("nan"), "recall": float("nan"), "f1": self.w_f1})
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=["class", "support", "accuracy", "precision", "recall", "f1"])
        writer.writeheader()
        for row in self.rows():
            writer.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in row.items()})
        return buf.getvalue()

    def table(self) -> str:
        lines = [f"{'class':>12} {'n':>6} {'acc':>7} {'prec':>7} {'rec':>7} {'f1':>7}"]
        for r in self.rows():
            lines.append(f"{r['class']:>12} {r['support']:>6} {r['accuracy']:7.4f} {r['precision']:7.4f} "
                         f"{r['recall']:7.4f} {r['f1']:7.4f}")
        return "\n".join(lines)


def compute_metrics(predictions, labels, mask=None, n_classes: int | None = None,
                    class_names=None) -> MetricsReport:
    pred = np.asarray(predictions).ravel()
    gold = np.asarray(labels).ravel()
    if mask is not None:
        keep = np.asarray(mask, dtype=bool).ravel()
        pred, gold = pred[keep], gold[keep]
    if gold.size == 0:
        raise DataError("no valid utterances to score")
    C = n_classes or int(max(pred.max(), gold.max())) + 1
    conf = np.zeros((C, C), dtype=np.int64)
    np.add.at(conf, (gold, pred), 1)
    tp = np.diag(conf).astype(float)
    support = conf.sum(axis=1).astype(float)
    predicted = conf.sum(axis=0).astype(float)
    with np.errstate(divide="ignore", invalid="ignore"):
        recall = np.where(support > 0, tp / support, 0.0)
        precision = np.where(predicted > 0, tp / predicted, 0.0)
        f1 = np.where(precision + recall > 0, 2 * precision * recall / (precision + recall), 0.0)
    n = support.sum()
    return MetricsReport(
        w_acc=float((support * recall).sum() / n), w_f1=float((support * f1).sum() / n),
        accuracy=recall, precision=precision, recall=recall, f1=f1,
        support=support.astype(np.int64), confusion=conf, class_names=list(class_names or []),
    )
