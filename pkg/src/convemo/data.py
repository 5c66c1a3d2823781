"""Dialogue records, the JSONL dataset format, synthetic generation and batching.

A dataset is ``<name>.jsonl`` (one dialogue per line) plus a sidecar
``<name>.header.json`` holding the class list, per-modality feature dims and
the speaker list::

    {"dialogue_id": "d0", "utterances": [
        {"speaker": "A", "label": "happy",
         "features": {"text": [...], "audio": [...], "visual": [...]}}, ...]}
"""
from __future__ import annotations

import json
import logging
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .config import SyntheticSpec
from .errors import DataError

log = logging.getLogger(__name__)

MODALITY_KEYS = {"t": "text", "a": "audio", "v": "visual"}
DEFAULT_CLASS_NAMES = ["neutral", "happy", "sad", "angry", "excited", "frustrated", "surprise", "fear"]


@dataclass
class Utterance:
    speaker: str
    label: int | None
    text: np.ndarray
    audio: np.ndarray
    visual: np.ndarray

    def features(self, m: str) -> np.ndarray:
        return getattr(self, MODALITY_KEYS[m])


@dataclass
class DialogueRecord:
    dialogue_id: str
    utterances: list[Utterance]

    def __len__(self) -> int:
        return len(self.utterances)

    @property
    def labels(self) -> list[int | None]:
        return [u.label for u in self.utterances]

    @property
    def speakers(self) -> list[str]:
        return [u.speaker for u in self.utterances]


@dataclass
class DatasetHeader:
    classes: list[str]
    dims: dict[str, int]  # keys: text, audio, visual
    speakers: list[str]
    class_counts: dict[str, int] = field(default_factory=dict)

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    @property
    def raw_dims(self) -> dict[str, int]:
        return {m: self.dims[key] for m, key in MODALITY_KEYS.items()}

    def to_dict(self) -> dict:
        return {"classes": self.classes, "dims": self.dims, "speakers": self.speakers}

    @classmethod
    def from_dict(cls, data: dict) -> "DatasetHeader":
        try:
            classes = [str(c) for c in data["classes"]]
            dims = {k: int(data["dims"][k]) for k in ("text", "audio", "visual")}
            speakers = [str(s) for s in data["speakers"]]
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"malformed dataset header: {exc}") from exc
        if not classes or not speakers or min(dims.values()) < 1:
            raise DataError("dataset header needs classes, speakers and positive dims")
        return cls(classes, dims, speakers)


# --- synthetic generation --------------------------------------------------
def synthetic_header(spec: SyntheticSpec) -> DatasetHeader:
    C = spec.n_classes
    classes = DEFAULT_CLASS_NAMES[:C] if C <= len(DEFAULT_CLASS_NAMES) else [f"class{i}" for i in range(C)]
    speakers = [chr(ord("A") + i) for i in range(spec.speakers_per_dialogue)]
    return DatasetHeader(classes, {"text": spec.text_dim, "audio": spec.audio_dim, "visual": spec.visual_dim},
                         speakers)


def _av_noise(rng, spec: SyntheticSpec, L: int, dim: int) -> np.ndarray:
    """Static per-dialogue offset + stationary AR(1) noise + sparse impulses."""
    sigma, phi = spec.av_noise, spec.ar_coef
    noise = np.empty((L, dim))
    noise[0] = sigma * rng.standard_normal(dim)
    innov = sigma * np.sqrt(1.0 - phi * phi)
    for t in range(1, L):
        noise[t] = phi * noise[t - 1] + innov * rng.standard_normal(dim)
    noise += spec.av_static * rng.standard_normal(dim)
    hits = rng.random(L) < spec.impulse_prob
    noise[hits] += spec.impulse_mag * max(sigma, 1e-12) * rng.standard_normal((int(hits.sum()), dim))
    return noise


def generate_synthetic(spec: SyntheticSpec, seed: int, n_dialogues: int | None = None,
                       id_prefix: str = "syn") -> list[DialogueRecord]:
    """Dialogues whose per-speaker emotions follow a Markov chain and whose
    features are class prototypes plus modality noise. Seed-deterministic."""
    spec.validate()
    rng = np.random.default_rng(seed)
    C = spec.n_classes
    T = np.asarray(spec.transition, dtype=float)
    protos = {
        "text": spec.separation * rng.standard_normal((C, spec.text_dim)),
        "audio": spec.separation * rng.standard_normal((C, spec.audio_dim)),
        "visual": spec.separation * rng.standard_normal((C, spec.visual_dim)),
    }
    names = synthetic_header(spec).speakers
    S = len(names)
    n = n_dialogues if n_dialogues is not None else spec.n_train + spec.n_valid + spec.n_test
    records = []
    for k in range(n):
        L = int(rng.integers(spec.min_len, spec.max_len + 1))
        spk = [int(rng.integers(S))]
        for _ in range(1, L):
            if S > 1 and rng.random() < spec.switch_prob:
                spk.append(int((spk[-1] + rng.integers(1, S)) % S))
            else:
                spk.append(spk[-1])
        state: dict[int, int] = {}
        labels = []
        for s in spk:
            state[s] = int(rng.integers(C)) if s not in state else int(rng.choice(C, p=T[state[s]]))
            labels.append(state[s])
        y = np.asarray(labels)
        text = protos["text"][y] + spec.text_noise * rng.standard_normal((L, spec.text_dim))
        audio = protos["audio"][y] + _av_noise(rng, spec, L, spec.audio_dim)
        visual = protos["visual"][y] + _av_noise(rng, spec, L, spec.visual_dim)
        utts = [Utterance(names[spk[t]], labels[t], text[t], audio[t], visual[t]) for t in range(L)]
        records.append(DialogueRecord(f"{id_prefix}{k:05d}", utts))
    return records


def synthetic_splits(spec: SyntheticSpec, seed: int) -> tuple[dict[str, list[DialogueRecord]], DatasetHeader]:
    records = generate_synthetic(spec, seed)
    a, b = spec.n_train, spec.n_train + spec.n_valid
    splits = {"train": records[:a], "valid": records[a:b], "test": records[b:]}
    return splits, synthetic_header(spec)


# --- JSONL format ----------------------------------------------------------
def header_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".header.json")


def record_to_json(rec: DialogueRecord, header: DatasetHeader) -> str:
    utts = []
    for u in rec.utterances:
        utts.append({
            "speaker": u.speaker,
            "label": None if u.label is None else header.classes[u.label],
            "features": {"text": u.text.tolist(), "audio": u.audio.tolist(), "visual": u.visual.tolist()},
        })
    return json.dumps({"dialogue_id": rec.dialogue_id, "utterances": utts}, separators=(",", ":"))


def write_dataset(path, records: list[DialogueRecord], header: DatasetHeader) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for rec in records:
            fh.write(record_to_json(rec, header) + "\n")
    header_path(path).write_text(json.dumps(header.to_dict(), indent=2))


def _parse_label(raw, header: DatasetHeader, where: str):
    if raw is None:
        return None
    if isinstance(raw, bool):
        raise DataError(f"{where}: field 'label' must be a class name or index")
    if isinstance(raw, int):
        if not 0 <= raw < header.n_classes:
            raise DataError(f"{where}: field 'label' index {raw} outside [0, {header.n_classes})")
        return raw
    if isinstance(raw, str) and raw in header.classes:
        return header.classes.index(raw)
    raise DataError(f"{where}: field 'label' value {raw!r} not in declared classes")


def _parse_vector(raw, dim: int, where: str, name: str) -> np.ndarray:
    if not isinstance(raw, list):
        raise DataError(f"{where}: field '{name}' must be a list of numbers")
    try:
        vec = np.asarray(raw, dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise DataError(f"{where}: field '{name}' holds non-numeric values") from exc
    if vec.shape != (dim,):
        raise DataError(f"{where}: field '{name}' has dim {vec.size}, header declares {dim}")
    if not np.all(np.isfinite(vec)):
        raise DataError(f"{where}: field '{name}' holds non-finite values")
    return vec


def parse_record(line: str, header: DatasetHeader, lineno: int) -> DialogueRecord:
    where = f"line {lineno}"
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise DataError(f"{where}: invalid JSON ({exc.msg})") from exc
    if not isinstance(obj, dict) or not isinstance(obj.get("dialogue_id"), str):
        raise DataError(f"{where}: field 'dialogue_id' missing or not a string")
    utts_raw = obj.get("utterances")
    if not isinstance(utts_raw, list) or not utts_raw:
        raise DataError(f"{where}: field 'utterances' must be a non-empty list")
    utts = []
    for i, u in enumerate(utts_raw):
        uw = f"{where}, utterance {i}"
        if not isinstance(u, dict) or not isinstance(u.get("speaker"), str):
            raise DataError(f"{uw}: field 'speaker' missing or not a string")
        if u["speaker"] not in header.speakers:
            raise DataError(f"{uw}: field 'speaker' value {u['speaker']!r} not in header speaker list")
        feats = u.get("features")
        if not isinstance(feats, dict):
            raise DataError(f"{uw}: field 'features' missing")
        vecs = {k: _parse_vector(feats.get(k), header.dims[k], uw, k) for k in ("text", "audio", "visual")}
        utts.append(Utterance(u["speaker"], _parse_label(u.get("label"), header, uw), **vecs))
    return DialogueRecord(obj["dialogue_id"], utts)


def load_dataset(path) -> tuple[list[DialogueRecord], DatasetHeader]:
    path = Path(path)
    hp = header_path(path)
    if not path.exists():
        raise DataError(f"dataset file {path} not found")
    if not hp.exists():
        raise DataError(f"sidecar header {hp} not found")
    try:
        header = DatasetHeader.from_dict(json.loads(hp.read_text()))
    except json.JSONDecodeError as exc:
        raise DataError(f"{hp}: invalid JSON ({exc.msg})") from exc
    records = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if line.strip():
                records.append(parse_record(line, header, lineno))
    if not records:
        raise DataError(f"dataset {path} is empty")
    counts = np.zeros(header.n_classes, dtype=int)
    for rec in records:
        for y in rec.labels:
            if y is not None:
                counts[y] += 1
    header.class_counts = {c: int(n) for c, n in zip(header.classes, counts)}
    log.info("loaded %d dialogues from %s; class counts %s", len(records), path, header.class_counts)
    return records, header


# --- batching --------------------------------------------------------------
@dataclass
class DialogueBatch:
    feats: dict[str, np.ndarray]   # m -> (B, N, d_raw)
    speakers: np.ndarray           # (B, N) int, index into header speakers
    labels: np.ndarray             # (B, N) int, -1 where absent/padded
    mask: np.ndarray               # (B, N) bool validity
    dialogue_ids: list[str]

    @property
    def label_mask(self) -> np.ndarray:
        return self.mask & (self.labels >= 0)

    @property
    def lengths(self) -> np.ndarray:
        return self.mask.sum(axis=1)


def make_batch(records: list[DialogueRecord], header: DatasetHeader, pad_to: int | None = None) -> DialogueBatch:
    B = len(records)
    N = max(pad_to or 0, max(len(r) for r in records))
    feats = {m: np.zeros((B, N, header.dims[key])) for m, key in MODALITY_KEYS.items()}
    speakers = np.zeros((B, N), dtype=np.int64)
    labels = np.full((B, N), -1, dtype=np.int64)
    mask = np.zeros((B, N), dtype=bool)
    spk_index = {s: i for i, s in enumerate(header.speakers)}
    for b, rec in enumerate(records):
        for t, u in enumerate(rec.utterances):
            for m in MODALITY_KEYS:
                feats[m][b, t] = u.features(m)
            speakers[b, t] = spk_index[u.speaker]
            labels[b, t] = -1 if u.label is None else u.label
            mask[b, t] = True
    return DialogueBatch(feats, speakers, labels, mask, [r.dialogue_id for r in records])


def iter_batches(records: list[DialogueRecord], header: DatasetHeader, batch_size: int,
                 rng: np.random.Generator | None = None) -> Iterator[DialogueBatch]:
    order = np.arange(len(records)) if rng is None else rng.permutation(len(records))
    for i in range(0, len(order), batch_size):
        yield make_batch([records[j] for j in order[i:i + batch_size]], header)


def graph_speakers(batch: DialogueBatch, n_speakers: int, noise: float = 0.0, no_speaker: bool = False,
                   seed: int = 0) -> np.ndarray:
    """Speaker ids as seen by graph construction: collapsed to one speaker, or
    each utterance relabelled to a different speaker with probability ``noise``.
    Corruption is keyed on (seed, dialogue id) so reruns agree."""
    spk = batch.speakers.copy()
    if no_speaker:
        return np.zeros_like(spk)
    if noise <= 0.0 or n_speakers < 2:
        return spk
    for b, did in enumerate(batch.dialogue_ids):
        rng = np.random.default_rng([seed, zlib.crc32(did.encode())])
        n = int(batch.mask[b].sum())
        flip = rng.random(n) < noise
        shift = rng.integers(1, n_speakers, size=n)
        spk[b, :n] = np.where(flip, (spk[b, :n] + shift) % n_speakers, spk[b, :n])
    return spk
