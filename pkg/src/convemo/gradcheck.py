"""Finite-difference gradient suite on a tiny instance (d=8, 3 utterances)."""
from __future__ import annotations

import time

import numpy as np

from . import numerics as nx
from .config import RunConfig
from .data import DatasetHeader, DialogueBatch
from .diff_denoise import DiffAttnParams, denoise_stream
from .diffusion_fusion import FusionParams, fuse
from .encoding import EncodingParams, encode
from .head_loss import HeadParams, fuse_logits, fusion_loss, modality_logits, self_supervised_loss
from .model import forward, init_model, joint_loss
from .relation_graph import BatchTopology, GraphParams, interact

TOLERANCE = 1e-4


def tiny_instance(seed: int = 0, N: int = 3, d: int = 8):
    """Three speakers, one utterance each: with two speakers the two utterances
    of the same speaker share their only cross-speaker neighbour, so after the
    first graph pass their features are bit-identical and several parameters
    sit on exactly flat directions that a relative finite-difference test
    cannot resolve."""
    rng = np.random.default_rng(seed)
    header = DatasetHeader(classes=["c0", "c1", "c2"], dims={"text": 6, "audio": 5, "visual": 5},
                           speakers=["A", "B", "C"])
    feats = {m: rng.normal(size=(1, N, header.raw_dims[m])) for m in "tav"}
    speakers = np.arange(N)[None] % 3
    labels = rng.integers(0, 3, size=(1, N))
    batch = DialogueBatch(feats, speakers, labels, np.ones((1, N), dtype=bool), ["tiny"])
    cfg = RunConfig(d=d, heads=2, window=2, graph_heads=2, rel_dim=3, dtype="float64", dropout=0.0)
    return rng, header, batch, cfg


def module_checks(seed: int = 0, h: float = 1e-5) -> dict[str, float]:
    """Max relative error per module, inputs and parameters perturbed together."""
    results: dict[str, float] = {}
    with nx.default_dtype("float64"):
        rng, header, batch, cfg = tiny_instance(seed)
        d, mask = cfg.d, batch.mask
        w = {k: rng.normal(size=(1, 3, d)) for k in ("enc", "den", "gra", "fus")}

        enc = EncodingParams.init(rng, header.raw_dims, d, len(header.speakers))
        enc.speaker.data[...] = rng.normal(size=enc.speaker.shape)
        enc_params = [t for p in enc.proj.values() for t in (p.weight, p.bias)] + [enc.speaker]
        results["encoding"] = nx.finite_diff_check(
            lambda _: sum((encode(enc, batch.feats, batch.speakers, mask, "tav")[m] * w["enc"]).sum()
                          for m in "tav"), enc_params, h)

        Z = nx.tensor(rng.normal(size=(1, 3, d)))
        dp = DiffAttnParams.init(rng, d, 0.5)
        dp.gn_beta.data[...] = rng.normal(size=d) * 0.1
        results["diff_denoise"] = nx.finite_diff_check(
            lambda _: (denoise_stream(Z, dp, cfg.heads, mask) * w["den"]).sum(),
            [Z, dp.W_Q, dp.W_K, dp.W_V, dp.W_O, dp.lam, dp.gn_gamma, dp.gn_beta, dp.W_g, dp.b_g], h)

        Zt = nx.tensor(rng.normal(size=(1, 3, d)))
        gp = GraphParams.init(rng, d, "incremental", cfg.rel_dim, cfg.graph_heads)
        topo = BatchTopology.build(batch.speakers, mask, cfg.window)
        gparams = [Zt] + [t for g in gp.gats.values() for t in (g.W, g.a)] + list(gp.relations.values())
        results["relation_graph"] = nx.finite_diff_check(
            lambda _: (interact(Zt, topo, gp) * w["gra"]).sum(), gparams, h)

        Zs = {m: nx.tensor(rng.normal(size=(1, 3, d))) for m in "tav"}
        fp = FusionParams.init(rng, d, "tav")
        fparams = list(Zs.values()) + [t for q in fp.qkv.values() for t in (q.W_Q, q.W_K, q.W_V)] + [fp.W_g]
        results["diffusion_fusion"] = nx.finite_diff_check(
            lambda _: (fuse(Zs["t"], {"a": Zs["a"], "v": Zs["v"]}, fp, 0.6, mask) * w["fus"]).sum(),
            fparams, h)

        hp = HeadParams.init(rng, d, header.n_classes, cfg.alpha, "tav")
        hparams = list(Zs.values()) + [t for c in hp.classifiers.values() for t in (c.W, c.b)]
        cw = np.array([0.5, 1.0, 1.5])

        def head_loss(frozen=None, return_weights=False):
            logits = {m: modality_logits(Zs[m], hp.classifiers[m]) for m in "tav"}
            _, Y = fuse_logits(logits, hp.alpha)
            probs = {m: nx.softmax_rows(L) for m, L in logits.items()}
            L_u, lam = self_supervised_loss(probs, batch.labels, mask, return_weights=True, weights=frozen)
            loss = fusion_loss(Y, batch.labels, cw, mask) + L_u
            return (loss, lam) if return_weights else loss

        # the self-supervised weights are detached, so they stay frozen while perturbing
        frozen = head_loss(return_weights=True)[1]
        results["head_loss"] = nx.finite_diff_check(lambda _: head_loss(frozen), hparams, h)
        results["joint_loss"] = full_loss_check(seed, h)
    return results


def full_loss_check(seed: int = 0, h: float = 1e-5) -> float:
    """Whole-pipeline joint loss against every learnable parameter, lambda included."""
    with nx.default_dtype("float64"):
        rng, header, batch, cfg = tiny_instance(seed)
        params = init_model(cfg, header, rng)
        params.encoding.speaker.data[...] = rng.normal(size=params.encoding.speaker.shape)
        cw = np.array([0.5, 1.0, 1.5])
        with nx.no_grad():
            probs = forward(params, batch, cfg).modality_probs()
        frozen = self_supervised_loss(probs, batch.labels, batch.label_mask, cfg.msl_factor,
                                      return_weights=True)[1]
        return nx.finite_diff_check(
            lambda _: joint_loss(forward(params, batch, cfg), batch, cw, cfg.msl_factor, frozen),
            params.parameters(), h)


def run_suite(seed: int = 0, h: float = 1e-5) -> tuple[dict[str, float], float]:
    t0 = time.perf_counter()
    res = module_checks(seed, h)
    return res, time.perf_counter() - t0
