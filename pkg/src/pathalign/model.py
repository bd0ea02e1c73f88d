"""Model assembly: all trainable parameter groups plus the joint objective

    total = instance_alignment + lambda * pathology_alignment + beta * covariance_mse

Images are encoded as one batch; reports vary in length and are encoded
per sample.  Covariance targets are plain arrays computed once per sample
(keyed by generator seed) and treated as constants by the graph.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import cce, icma, nn, pcma
from . import tensor as T
from .config import TrainConfig
from .encoders import (EncoderConfig, ImageEncoderParams, TextEncoderParams,
                       encode_image, encode_images, encode_report,
                       init_image_encoder, init_text_encoder)
from .errors import ContractError, TrainingDivergence
from .synth import SyntheticPair, WorldSpec
from .tensor import Tensor


@dataclass
class ModelParams:
    image_enc: ImageEncoderParams
    text_enc: TextEncoderParams
    img_head: icma.ProjectionHead
    txt_head: icma.ProjectionHead
    queries: pcma.QueryTokens
    vpoe: list[pcma.VpoeLayer]
    cce_head: cce.CceHead


def encoder_config(cfg: TrainConfig, world: WorldSpec) -> EncoderConfig:
    return EncoderConfig(
        image_side=cfg.image_side,
        embed_patch=cfg.embed_patch,
        d_model=cfg.d_model,
        n_layers=cfg.n_layers,
        n_heads=cfg.n_heads,
        vocab_size=world.vocab_size,
        max_report_len=world.max_report_len,
    )


def init_model(cfg: TrainConfig, world: WorldSpec, seed: int | None = None) -> ModelParams:
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    ecfg = encoder_config(cfg, world)
    return ModelParams(
        image_enc=init_image_encoder(rng, ecfg),
        text_enc=init_text_encoder(rng, ecfg),
        img_head=icma.init_projection_head(rng, cfg.d_model),
        txt_head=icma.init_projection_head(rng, cfg.d_model),
        queries=pcma.init_query_tokens(rng, cfg.n_query, cfg.d_model),
        vpoe=pcma.init_vpoe(rng, cfg.d_model, cfg.n_heads, cfg.vpoe_layers),
        cce_head=cce.init_cce_head(rng, cfg.d_model, cfg.image_side, cfg.patch_size),
    )


def named_parameters(model: ModelParams) -> list[tuple[str, Tensor]]:
    return list(nn.named_tensors(model))


def parameters(model: ModelParams) -> list[Tensor]:
    return [t for _, t in named_parameters(model)]


def covariance_targets(pairs: list[SyntheticPair], cfg: TrainConfig) -> dict[int, np.ndarray]:
    """Packed per-sample targets keyed by generator seed."""
    return {p.seed: cce.covariance_target(p.image, cfg.patch_size) for p in pairs}


def total_loss(model: ModelParams, pairs: list[SyntheticPair], cfg: TrainConfig,
               world: WorldSpec, targets: dict[int, np.ndarray] | None = None
               ) -> tuple[Tensor, dict[str, float]]:
    """Joint objective on one batch; returns the scalar loss and the
    per-term breakdown {'icma', 'pcma', 'cce', 'total'}."""
    if not pairs:
        raise ContractError("empty batch")
    ecfg = encoder_config(cfg, world)
    d = cfg.d_model

    images = np.stack([p.image for p in pairs])
    img_locals, img_globals = encode_images(images, ecfg, model.image_enc)
    reports = [encode_report(p.tokens, p.spans, ecfg, model.text_enc) for p in pairs]
    txt_globals = T.concat([T.reshape(r.global_rep, (1, d)) for r in reports], axis=0)

    img_proj = icma.project(img_globals, model.img_head, normalize=cfg.l2_normalize)
    txt_proj = icma.project(txt_globals, model.txt_head, normalize=cfg.l2_normalize)
    icma_term = icma.icma_loss(img_proj, txt_proj, tau1=cfg.tau1)

    vpors = pcma.vpoe_forward(model.queries, img_locals, model.vpoe)
    per_sample = []
    for i, report in enumerate(reports):
        vpor = T.reshape(T.gather_rows(vpors, [i]), (cfg.n_query, d))
        bundle = pcma.build_bundle(report, vpor)
        per_sample.append(pcma.pcma_loss(bundle, tau2=cfg.tau2, normalize=cfg.l2_normalize))
    pcma_term = per_sample[0]
    for term in per_sample[1:]:
        pcma_term = pcma_term + term
    pcma_term = pcma_term * (1.0 / len(per_sample))

    if targets is None:
        targets = covariance_targets(pairs, cfg)
    target_mat = Tensor(np.stack([targets[p.seed] for p in pairs]))
    preds = cce.predict_covariance(txt_globals, model.cce_head)
    cce_term = cce.cce_loss(target_mat, preds, full_matrix=cfg.cce_full_matrix)

    total = icma_term + cfg.lambda_ * pcma_term + cfg.beta * cce_term
    breakdown = {
        "icma": icma_term.item(),
        "pcma": pcma_term.item(),
        "cce": cce_term.item(),
        "total": total.item(),
    }
    return total, breakdown


def check_finite(breakdown: dict[str, float]) -> None:
    for name, value in breakdown.items():
        if not np.isfinite(value):
            raise TrainingDivergence(f"loss term '{name}' is non-finite ({value})")


def image_global_features(model: ModelParams, pairs: list[SyntheticPair], cfg: TrainConfig,
                          world: WorldSpec, batch: int = 64) -> np.ndarray:
    """Frozen [N, D] image representations (no graph)."""
    ecfg = encoder_config(cfg, world)
    out = []
    with T.no_grad():
        for lo in range(0, len(pairs), batch):
            chunk = np.stack([p.image for p in pairs[lo:lo + batch]])
            _, globals_ = encode_images(chunk, ecfg, model.image_enc)
            out.append(globals_.data)
    return np.concatenate(out, axis=0)


def projected_image_features(model: ModelParams, pairs, cfg: TrainConfig, world: WorldSpec) -> np.ndarray:
    with T.no_grad():
        feats = image_global_features(model, pairs, cfg, world)
        return icma.project(Tensor(feats), model.img_head, normalize=cfg.l2_normalize).data


def projected_report_features(model: ModelParams, pairs, cfg: TrainConfig, world: WorldSpec) -> np.ndarray:
    ecfg = encoder_config(cfg, world)
    out = []
    with T.no_grad():
        for p in pairs:
            rep = encode_report(p.tokens, p.spans, ecfg, model.text_enc)
            out.append(icma.project(rep.global_rep, model.txt_head, normalize=cfg.l2_normalize).data)
    return np.stack(out)


def sample_pathology_bundle(model: ModelParams, pair: SyntheticPair, cfg: TrainConfig,
                            world: WorldSpec) -> pcma.PathologyBundle:
    """Bundle (V-PORs, T-PORs, matching attention, weights) for one pair."""
    ecfg = encoder_config(cfg, world)
    enc = encode_image(pair.image, ecfg, model.image_enc)
    report = encode_report(pair.tokens, pair.spans, ecfg, model.text_enc)
    vpor = pcma.vpoe_forward(model.queries, enc.local, model.vpoe)
    return pcma.build_bundle(report, vpor)
