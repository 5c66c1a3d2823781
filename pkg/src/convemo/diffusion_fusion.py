"""Text-anchored cross-modal diffusion attention fusion.

Audio and visual values are transferred into the text stream through a mix of
the product of degree-normalised self-attention maps (the diffusion term) and
the plain sum of the maps, then blended by an elementwise sigmoid gate.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .encoding import glorot
from .errors import ConfigError, DegenerateRowError, DimensionError
from .numerics import Tensor


@dataclass
class ModalityQKV:
    W_Q: Tensor
    W_K: Tensor
    W_V: Tensor

    @classmethod
    def init(cls, rng, d: int) -> "ModalityQKV":
        return cls(glorot(rng, d, d), glorot(rng, d, d), glorot(rng, d, d))


@dataclass
class FusionParams:
    qkv: dict[str, ModalityQKV]
    W_g: Tensor  # (2d, d)

    @classmethod
    def init(cls, rng, d: int, modalities: str = "tav") -> "FusionParams":
        return cls({m: ModalityQKV.init(rng, d) for m in "atv" if m in modalities}, glorot(rng, 2 * d, d))


def _row_mask(mask, like: Tensor):
    if mask is None:
        return None
    return np.asarray(mask, dtype=like.dtype)[..., None]


def self_attention_matrix(Z: Tensor, qkv: ModalityQKV, mask=None, scale_sqrt: bool = False) -> Tensor:
    """S = softmax(Q K^T / d) with padded keys excluded and padded query rows zeroed."""
    d = Z.shape[-1]
    scale = np.sqrt(d) if scale_sqrt else float(d)
    logits = (Z @ qkv.W_Q) @ (Z @ qkv.W_K).T * (1.0 / scale)
    return attention_from_logits(logits, mask)


def attention_from_logits(logits: Tensor, mask=None) -> Tensor:
    keymask = None if mask is None else np.asarray(mask, dtype=bool)[..., None, :]
    S = nx.softmax_rows(logits, keymask)
    rm = _row_mask(mask, S)
    return S if rm is None else S * rm


def degree_normalize(S: Tensor, mask=None, mode: str = "row") -> Tensor:
    """D^{-1/2} S D^{-1/2}; ``row`` uses row sums on both sides, ``sym`` uses
    row sums on the left and column sums on the right."""
    if mode not in ("row", "sym"):
        raise ConfigError(f"unknown degree mode '{mode}'")
    N = S.shape[-1]
    valid = np.ones(S.shape[:-1], dtype=bool) if mask is None else np.broadcast_to(
        np.asarray(mask, dtype=bool), S.shape[:-1])
    rows = S.sum(axis=-1)
    if np.any(valid & (rows.data <= 0)):
        raise DegenerateRowError("degree_normalize: valid row with zero degree")
    pad = (~valid).astype(S.dtype)
    keep = valid.astype(S.dtype)
    r_left = ((rows + pad) ** -0.5) * keep
    if mode == "row":
        r_right = r_left
    else:
        cols = S.sum(axis=-2)
        if np.any(valid & (cols.data <= 0)):
            raise DegenerateRowError("degree_normalize: valid column with zero degree")
        r_right = ((cols + pad) ** -0.5) * keep
    lead = S.shape[:-2]
    return S * nx.reshape(r_left, lead + (N, 1)) * nx.reshape(r_right, lead + (1, N))


def cross_modal_attention(S_hat_t: Tensor, S_hat_m: Tensor, S_t: Tensor, S_m: Tensor, gamma: float) -> Tensor:
    """gamma * (S_hat_t S_hat_m^T) + (1 - gamma) * (S_t + S_m)."""
    if not 0.0 <= gamma <= 1.0:
        raise ConfigError(f"gamma must lie in [0, 1], got {gamma}")
    return gamma * (S_hat_t @ S_hat_m.T) + (1.0 - gamma) * (S_t + S_m)


def transfer_values(S_cross: Tensor, V_m: Tensor) -> Tensor:
    if S_cross.shape[-1] != V_m.shape[-2]:
        raise DimensionError(f"transfer_values: {S_cross.shape} x {V_m.shape}")
    return S_cross @ V_m


def gated_fuse(Z_out: Tensor, U_a: Tensor, U_v: Tensor, W_g: Tensor, bias=None, return_gate: bool = False):
    """Z_out + T * U_a + (1 - T) * U_v with T = sigmoid([U_a | U_v] W_g)."""
    if not (Z_out.shape == U_a.shape == U_v.shape):
        raise DimensionError(f"gated_fuse: shapes {Z_out.shape}, {U_a.shape}, {U_v.shape}")
    pre = nx.concat([U_a, U_v], axis=-1) @ W_g
    if bias is not None:
        pre = pre + bias
    T = nx.sigmoid(pre)
    out = Z_out + T * U_a + (1.0 - T) * U_v
    return (out, T) if return_gate else out


def fuse(Z_out_t: Tensor, Z_m: dict[str, Tensor], p: FusionParams, gamma: float = 1.0, mask=None,
         degree_mode: str = "row", scale_sqrt: bool = False, return_parts: bool = False):
    """Fuse whichever of audio/visual are present in ``Z_m`` into the text stream.

    With both present the gate blends them; with one present its transferred
    values are added directly; with none the text passes through.
    """
    rm = _row_mask(mask, Z_out_t)
    S_t = self_attention_matrix(Z_out_t, p.qkv["t"], mask, scale_sqrt)
    S_hat_t = degree_normalize(S_t, mask, degree_mode)
    U, parts = {}, {"S_t": S_t}
    for m in ("a", "v"):
        if m not in Z_m:
            continue
        S_m = self_attention_matrix(Z_m[m], p.qkv[m], mask, scale_sqrt)
        S_cross = cross_modal_attention(S_hat_t, degree_normalize(S_m, mask, degree_mode), S_t, S_m, gamma)
        U_m = transfer_values(S_cross, Z_m[m] @ p.qkv[m].W_V)
        U[m] = U_m if rm is None else U_m * rm
        parts[f"S_{m}"], parts[f"S_t{m}"], parts[f"U_{m}"] = S_m, S_cross, U[m]
    if len(U) == 2:
        out, T = gated_fuse(Z_out_t, U["a"], U["v"], p.W_g, return_gate=True)
        parts["T"] = T
    elif len(U) == 1:
        out = Z_out_t + next(iter(U.values()))
    else:
        out = Z_out_t
    if rm is not None:
        out = out * rm
    return (out, parts) if return_parts else out
