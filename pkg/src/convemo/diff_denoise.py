"""Differential attention denoising for the audio and visual streams.

Each head attends twice: once with the current keys and once with keys shifted
back ``delta`` steps in time. The difference ``(alpha - lam * alpha_ref) V``
cancels attention structure that is stable across adjacent steps. Heads are
group-normalised, mixed by ``W_O``, added back to the input and passed through
an elementwise sigmoid gate.

Classical smoothing filters (moving average, zero-phase EMA, median) are
provided as drop-in replacements for comparison runs.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .encoding import glorot, zeros
from .errors import ConfigError, DimensionError
from .numerics import Tensor


@dataclass
class DiffAttnParams:
    W_Q: Tensor
    W_K: Tensor
    W_V: Tensor
    W_O: Tensor
    lam: Tensor        # scalar, shared by all heads
    gn_gamma: Tensor   # (d,) = per-head affine blocks
    gn_beta: Tensor
    W_g: Tensor
    b_g: Tensor

    @classmethod
    def init(cls, rng, d: int, lambda_init: float = 0.5) -> "DiffAttnParams":
        return cls(
            W_Q=glorot(rng, d, d), W_K=glorot(rng, d, d), W_V=glorot(rng, d, d), W_O=glorot(rng, d, d),
            lam=nx.tensor(lambda_init, requires_grad=True),
            gn_gamma=nx.tensor(np.ones(d), requires_grad=True), gn_beta=zeros(d),
            W_g=glorot(rng, d, d), b_g=zeros(d),
        )


def _batched(x: Tensor, mask):
    """Add a leading batch axis to unbatched (N, d) input."""
    if x.ndim == 2:
        mask = None if mask is None else np.asarray(mask, dtype=bool)[None]
        return nx.reshape(x, (1,) + x.shape), mask, True
    return x, (None if mask is None else np.asarray(mask, dtype=bool)), False


def _key_mask(mask, ndim: int):
    if mask is None:
        return None
    m = np.asarray(mask, dtype=bool)[..., None, :]
    while m.ndim < ndim:
        m = np.expand_dims(m, -3)
    return m


def shift_matrix(N: int, delta: int, mask=None) -> np.ndarray:
    """0/1 selection matrix P with (P K)_t = K_{t-delta} for t >= delta, else K_t.

    Padded positions select themselves. Shape ``mask.shape + (N,)`` or (N, N).
    """
    if delta < 1:
        raise ConfigError(f"reference shift must be >= 1, got {delta}")
    valid = np.ones(N, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    t = np.arange(N)
    src = np.where(t >= delta, t - delta, t)
    src = np.where(valid, src, t)
    P = np.zeros(src.shape + (N,))
    np.put_along_axis(P, src[..., None], 1.0, axis=-1)
    return P


def shift_reference_keys(K: Tensor, delta: int = 1, mask=None) -> Tensor:
    """Keys shifted back ``delta`` steps; the first ``delta`` rows replicate themselves."""
    N = K.shape[-2]
    P = shift_matrix(N, delta, mask)
    while P.ndim < K.ndim:
        P = np.expand_dims(P, -3)
    return nx.tensor(P, dtype=K.dtype) @ K


def diff_attention(Q: Tensor, K: Tensor, V: Tensor, lam, delta: int = 1, mask=None,
                   scale: float | None = None, return_maps: bool = False):
    """(alpha - lam * alpha_ref) V over the last two axes (..., N, d_h)."""
    scale = np.sqrt(Q.shape[-1]) if scale is None else scale
    K_ref = shift_reference_keys(K, delta, mask)
    km = _key_mask(mask, Q.ndim)
    alpha = nx.softmax_rows((Q @ K.T) * (1.0 / scale), km)
    alpha_ref = nx.softmax_rows((Q @ K_ref.T) * (1.0 / scale), km)
    weights = alpha - lam * alpha_ref
    out = weights @ V
    if return_maps:
        return out, {"alpha": alpha, "alpha_ref": alpha_ref, "weights": weights}
    return out


def split_heads(x: Tensor, heads: int) -> Tensor:
    B, N, d = x.shape
    return nx.transpose(nx.reshape(x, (B, N, heads, d // heads)), (0, 2, 1, 3))


def merge_heads(x: Tensor) -> Tensor:
    B, h, N, dh = x.shape
    return nx.reshape(nx.transpose(x, (0, 2, 1, 3)), (B, N, h * dh))


def multi_head_diff(Z: Tensor, p: DiffAttnParams, heads: int, mask=None, delta: int = 1,
                    scale_full_d: bool = False, gn_eps: float = 1e-5, dropout: float = 0.0,
                    rng=None, training: bool = False, return_parts: bool = False):
    d = Z.shape[-1]
    if heads < 1 or d % heads:
        raise ConfigError(f"hidden dim {d} not divisible by {heads} heads")
    Zb, mask_b, squeeze = _batched(Z, mask)
    dh = d // heads
    scale = np.sqrt(d) if scale_full_d else np.sqrt(dh)
    Q = split_heads(Zb @ p.W_Q, heads)
    K = split_heads(Zb @ p.W_K, heads)
    V = split_heads(Zb @ p.W_V, heads)
    head_out, maps = diff_attention(Q, K, V, p.lam, delta, mask_b, scale, return_maps=True)
    # groups=h over the concatenation == groups=1 per head with per-head affine
    normed = nx.group_norm(merge_heads(head_out), heads, p.gn_gamma, p.gn_beta, gn_eps)
    out = nx.dropout(normed @ p.W_O, dropout, rng, training)
    if squeeze:
        out = nx.reshape(out, out.shape[1:])
    if return_parts:
        return out, {"heads": head_out, "normed": normed, **maps}
    return out


def gated_filter(Z_in: Tensor, Z_attn: Tensor, W_g: Tensor, b_g: Tensor, return_gate: bool = False):
    """Residual then elementwise sigmoid gate computed from the residual."""
    if Z_in.shape != Z_attn.shape:
        raise DimensionError(f"gated_filter: {Z_in.shape} vs {Z_attn.shape}")
    res = Z_in + Z_attn
    F = nx.sigmoid(res @ W_g + b_g)
    out = res * F
    return (out, F) if return_gate else out


def denoise_stream(Z_in: Tensor, p: DiffAttnParams, heads: int, mask, delta: int = 1,
                   use_gate: bool = True, scale_full_d: bool = False, gn_eps: float = 1e-5,
                   dropout: float = 0.0, rng=None, training: bool = False) -> Tensor:
    attn = multi_head_diff(Z_in, p, heads, mask, delta, scale_full_d, gn_eps, dropout, rng, training)
    out = gated_filter(Z_in, attn, p.W_g, p.b_g) if use_gate else Z_in + attn
    return out * np.asarray(mask, dtype=out.dtype)[..., None]


# --- classical baselines ---------------------------------------------------
def _lengths(mask, B: int, N: int) -> np.ndarray:
    if mask is None:
        return np.full(B, N)
    return np.asarray(mask, dtype=bool).reshape(B, N).sum(axis=1)


def moving_average_matrix(n: int, window: int) -> np.ndarray:
    r = window // 2
    A = np.zeros((n, n))
    for t in range(n):
        for o in range(-r, r + 1):
            A[t, min(max(t + o, 0), n - 1)] += 1.0 / window
    return A


def ema_matrix(n: int, coef: float) -> np.ndarray:
    """Zero-phase EMA: causal pass then anti-causal pass, each seeded with its first sample."""
    A = np.zeros((n, n))
    for t in range(n):
        A[t, 0] = (1 - coef) ** t
        for s in range(1, t + 1):
            A[t, s] = coef * (1 - coef) ** (t - s)
    J = np.eye(n)[::-1]
    return (J @ A @ J) @ A


def _median_sources(x: np.ndarray, lengths, window: int) -> np.ndarray:
    """Index of the time step supplying each output element of a median filter."""
    B, N, d = x.shape
    r = window // 2
    src = np.broadcast_to(np.arange(N)[None, :, None], (B, N, d)).copy()
    for b, n in enumerate(lengths):
        if n == 0:
            continue
        idx = np.clip(np.arange(n)[:, None] + np.arange(-r, r + 1)[None, :], 0, n - 1)  # (n, w)
        vals = x[b][idx]                                     # (n, w, d)
        order = np.argsort(vals, axis=1, kind="stable")
        mid = np.take_along_axis(idx[:, :, None].repeat(d, axis=2), order, axis=1)[:, r, :]
        src[b, :n] = mid
    return src


def baseline_denoise(Z: Tensor, method: str, window: int = 3, coef: float = 0.5, mask=None) -> Tensor:
    """Temporal smoothing along the utterance axis with replicated boundaries."""
    method = method.lower()
    if method in ("ma", "median") and (window < 1 or window % 2 == 0):
        raise ConfigError(f"{method} window must be odd and >= 1, got {window}")
    if method == "ema" and not 0.0 < coef < 1.0:
        raise ConfigError(f"EMA coefficient must lie in (0, 1), got {coef}")
    if method not in ("ma", "ema", "median"):
        raise ConfigError(f"unknown baseline denoiser '{method}'")
    Zb, mask_b, squeeze = _batched(Z, mask)
    B, N, d = Zb.shape
    lengths = _lengths(mask_b, B, N)
    if method == "median":
        src = _median_sources(Zb.data, lengths, window)
        bidx = np.arange(B)[:, None, None]
        fidx = np.arange(d)[None, None, :]

        def fwd(x):
            return x[bidx, src, fidx]

        def adj(g):
            out = np.zeros_like(g)
            np.add.at(out, (np.broadcast_to(bidx, src.shape), src, np.broadcast_to(fidx, src.shape)), g)
            return out

        out = nx.custom_linear(Zb, fwd, adj, "median_filter")
    else:
        A = np.zeros((B, N, N))
        for b, n in enumerate(lengths):
            if n:
                A[b, :n, :n] = moving_average_matrix(n, window) if method == "ma" else ema_matrix(n, coef)
        out = nx.tensor(A, dtype=Zb.dtype) @ Zb
    if mask_b is not None:
        out = out * mask_b[..., None].astype(out.dtype)
    if squeeze:
        out = nx.reshape(out, out.shape[1:])
    return out
