"""Modality projection plus speaker / sinusoidal position embeddings."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .errors import ConfigError, DimensionError
from .numerics import Tensor

MODALITIES = ("t", "a", "v")


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> Tensor:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return nx.tensor(rng.uniform(-limit, limit, size=shape or (fan_in, fan_out)), requires_grad=True)


def zeros(*shape) -> Tensor:
    return nx.tensor(np.zeros(shape), requires_grad=True)


@dataclass
class Projection:
    weight: Tensor  # (d_raw, d)
    bias: Tensor    # (d,)

    @classmethod
    def init(cls, rng, d_raw: int, d: int) -> "Projection":
        return cls(glorot(rng, d_raw, d), zeros(d))


@dataclass
class EncodingParams:
    proj: dict[str, Projection]
    speaker: Tensor  # (M, d)

    @classmethod
    def init(cls, rng, raw_dims: dict[str, int], d: int, n_speakers: int) -> "EncodingParams":
        proj = {m: Projection.init(rng, raw_dims[m], d) for m in MODALITIES if m in raw_dims}
        spk = nx.tensor(rng.normal(0.0, 0.02, size=(n_speakers, d)), requires_grad=True)
        return cls(proj, spk)


def _mask_rows(x: Tensor, mask) -> Tensor:
    if mask is None:
        return x
    m = np.asarray(mask, dtype=x.dtype)[..., None]
    return x * m


def project_modality(H: Tensor, proj: Projection, mask=None) -> Tensor:
    """Z = H W + b, row-wise; padded rows are zeroed."""
    H = H if isinstance(H, Tensor) else nx.tensor(H)
    if H.shape[-1] != proj.weight.shape[0]:
        raise DimensionError(f"modality feature dim {H.shape[-1]} != projection input {proj.weight.shape[0]}")
    return _mask_rows(H @ proj.weight + proj.bias, mask)


def one_hot(ids, depth: int, dtype=None) -> np.ndarray:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= depth):
        raise IndexError(f"id out of range [0, {depth}): {ids.min()}..{ids.max()}")
    out = np.zeros(ids.shape + (depth,), dtype=dtype or nx.get_default_dtype())
    np.put_along_axis(out, ids[..., None], 1.0, axis=-1)
    return out


def speaker_embed(speaker_ids, E_spk: Tensor) -> Tensor:
    """Row i is ``E_spk[speaker_ids[i]]``, written as one-hot times the table."""
    return nx.tensor(one_hot(speaker_ids, E_spk.shape[0], E_spk.dtype), dtype=E_spk.dtype) @ E_spk


def positional_encoding(N: int, d: int) -> np.ndarray:
    if d % 2:
        raise ConfigError(f"positional encoding needs an even dimension, got {d}")
    pos = np.arange(N, dtype=np.float64)[:, None]
    freq = 10000.0 ** (np.arange(0, d, 2, dtype=np.float64) / d)
    pe = np.empty((N, d))
    pe[:, 0::2] = np.sin(pos / freq)
    pe[:, 1::2] = np.cos(pos / freq)
    return pe


def compose_input(Z: Tensor, SE, PE, mask=None) -> Tensor:
    """Z + SE + PE with padded rows zeroed after the sum."""
    out = Z + SE + PE
    if out.shape != Z.shape:
        raise DimensionError(f"compose_input: embedding shapes broadcast Z {Z.shape} to {out.shape}")
    return _mask_rows(out, mask)


def encode(params: EncodingParams, feats: dict[str, np.ndarray], speakers, mask,
           modalities: str = "tav", text_with_se_pe: bool = False) -> dict[str, Tensor]:
    """Project every present modality and attach speaker/position embeddings.

    ``feats[m]`` is (B, N, d_raw); speakers and mask are (B, N). Returns the
    text projection unchanged (unless ``text_with_se_pe``) and the composed
    audio/visual inputs.
    """
    mask = np.asarray(mask, dtype=bool)
    N = mask.shape[-1]
    d = params.speaker.shape[1]
    SE = speaker_embed(speakers, params.speaker)
    PE = nx.tensor(positional_encoding(N, d), dtype=params.speaker.dtype)
    out = {}
    for m in modalities:
        Z = project_modality(nx.tensor(feats[m], dtype=params.speaker.dtype), params.proj[m], mask)
        if m != "t" or text_with_se_pe:
            Z = compose_input(Z, SE, PE, mask)
        out[m] = Z
    return out
