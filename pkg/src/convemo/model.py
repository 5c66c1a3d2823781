"""Full pipeline wiring and the named parameter collection."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import numerics as nx
from .config import RunConfig
from .data import DatasetHeader, DialogueBatch, graph_speakers
from .diff_denoise import DiffAttnParams, baseline_denoise, denoise_stream
from .diffusion_fusion import FusionParams, fuse
from .encoding import EncodingParams, encode
from .head_loss import (HeadParams, fuse_logits, fusion_loss, modality_logits, self_supervised_loss,
                        total_loss)
from .numerics import Tensor
from .relation_graph import BatchTopology, GraphParams, interact


@dataclass
class ModelParams:
    encoding: EncodingParams
    denoise: dict[str, DiffAttnParams]
    graph: GraphParams | None
    fusion: FusionParams | None
    heads: HeadParams

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        """Every learnable tensor once, under a stable dotted name (shared tensors keep their first name)."""
        seen: set[int] = set()
        for name, t in _walk(self, ""):
            if t.requires_grad and id(t) not in seen:
                seen.add(id(t))
                yield name, t

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def zero_grad(self) -> None:
        for t in self.parameters():
            t.grad = None

    def state(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self.named_parameters()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for n, t in self.named_parameters():
            t.data[...] = state[n]

    def count(self) -> int:
        return sum(t.size for t in self.parameters())


def _walk(obj, prefix: str):
    if isinstance(obj, Tensor):
        yield prefix, obj
    elif dataclasses.is_dataclass(obj):
        for f in dataclasses.fields(obj):
            yield from _walk(getattr(obj, f.name), f"{prefix}.{f.name}" if prefix else f.name)
    elif isinstance(obj, dict):
        for k in sorted(obj):
            yield from _walk(obj[k], f"{prefix}.{k}" if prefix else str(k))


def init_model(cfg: RunConfig, header: DatasetHeader, rng: np.random.Generator) -> ModelParams:
    """Allocate parameters for exactly the components ``cfg`` switches on.
    Call inside ``numerics.default_dtype(cfg.dtype)``."""
    d, C, mods = cfg.d, header.n_classes, cfg.modalities
    encoding = EncodingParams.init(rng, {m: header.raw_dims[m] for m in mods}, d, len(header.speakers))
    denoise = {}
    if cfg.denoise == "diff":
        denoise = {m: DiffAttnParams.init(rng, d, cfg.lambda_init) for m in "av"
                   if m in mods and m in cfg.denoised_modalities}
    graph = None
    if "t" in mods and cfg.graph_strategy != "none":
        graph = GraphParams.init(rng, d, cfg.graph_strategy, cfg.rel_dim, cfg.graph_heads)
    fusion = None
    if "t" in mods and cfg.fusion == "diffusion" and ("a" in mods or "v" in mods):
        fusion = FusionParams.init(rng, d, mods)
    heads = HeadParams.init(rng, d, C, cfg.alpha, mods, learnable_alpha=cfg.fusion_weights == "lsf")
    return ModelParams(encoding, denoise, graph, fusion, heads)


@dataclass
class ForwardOutput:
    logits: dict[str, Tensor]
    Z_f: Tensor
    Y_hat: Tensor
    features: dict[str, Tensor] = field(default_factory=dict)

    def modality_probs(self) -> dict[str, Tensor]:
        return {m: nx.softmax_rows(L) for m, L in self.logits.items()}

    def predictions(self) -> np.ndarray:
        return np.argmax(self.Z_f.data, axis=-1)


def forward(params: ModelParams, batch: DialogueBatch, cfg: RunConfig, training: bool = False,
            rng: np.random.Generator | None = None) -> ForwardOutput:
    mask = batch.mask
    mods = cfg.modalities
    # dropout is a train-mode (32-bit) feature only
    p_drop = cfg.dropout if (training and cfg.dtype == "float32") else 0.0
    enc = encode(params.encoding, batch.feats, batch.speakers, mask, mods, cfg.encode_text_with_se_pe)
    feats: dict[str, Tensor] = {}
    for m in "av":
        if m not in mods:
            continue
        Z = enc[m]
        if m in cfg.denoised_modalities:
            if cfg.denoise == "diff":
                Z = denoise_stream(Z, params.denoise[m], cfg.heads, mask, cfg.delta, cfg.use_gate,
                                   cfg.scale_full_d, cfg.gn_eps, p_drop, rng, training)
            elif cfg.denoise in ("ma", "ema", "median"):
                Z = baseline_denoise(Z, cfg.denoise, cfg.smooth_window, cfg.ema_coef, mask)
        feats[m] = Z
    if "t" in mods:
        Zt = enc["t"]
        if params.graph is not None:
            spk = graph_speakers(batch, len(params.encoding.speaker.data), cfg.speaker_noise,
                                 cfg.no_speaker, cfg.seed)
            topo = BatchTopology.build(spk, mask, cfg.window)
            Zt = interact(Zt, topo, params.graph, cfg.leaky_slope, cfg.gat_activation, p_drop, rng, training)
            Zt = Zt * mask[..., None].astype(Zt.dtype)
        if params.fusion is not None:
            Zt = fuse(Zt, feats, params.fusion, cfg.gamma, mask, cfg.degree_mode, cfg.fusion_scale_sqrt)
        feats["t"] = Zt
    logits = {m: modality_logits(feats[m], params.heads.classifiers[m]) for m in "tav" if m in mods}
    Z_f, Y_hat = fuse_logits(logits, params.heads.alpha)
    return ForwardOutput(logits, Z_f, Y_hat, feats)


def joint_loss(out: ForwardOutput, batch: DialogueBatch, class_weights, msl_factor: float = 0.1,
               msl_weights: dict[str, float] | None = None) -> Tensor:
    """Fusion loss plus the self-supervised term; ``msl_weights`` pins the
    per-modality weights (used by gradient checks)."""
    lm = batch.label_mask
    L_f = fusion_loss(out.Y_hat, batch.labels, class_weights, lm)
    if msl_factor > 0:
        L_u = self_supervised_loss(out.modality_probs(), batch.labels, lm, msl_factor, weights=msl_weights)
    else:
        L_u = nx.tensor(0.0, dtype=L_f.dtype)
    return total_loss(L_f, L_u)
