"""Toy image and text encoders.

Both are small pre-norm transformers over width-`d_model` tokens: the
image side embeds non-overlapping pixel patches, the text side embeds
token ids, and each adds a learned positional table.  The image's global
representation is the mean of its local tokens; the report's is the CLS
row (position 0).  The text encoder also exposes the final layer's
head-averaged attention row from CLS to every token, which downstream
sentence weighting consumes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from . import tensor as T
from .errors import ConfigError, ContractError, DimensionError
from .tensor import Tensor

Span = tuple[int, int]  # [start, stop) token indices, CLS excluded


@dataclass
class EncoderConfig:
    image_side: int = 32
    embed_patch: int = 8
    d_model: int = 32
    n_layers: int = 2
    n_heads: int = 4
    vocab_size: int = 20
    max_report_len: int = 32

    def __post_init__(self):
        if self.image_side % self.embed_patch != 0:
            raise ConfigError(f"image_side {self.image_side} not divisible by embed_patch {self.embed_patch}")
        if self.d_model % self.n_heads != 0:
            raise ConfigError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")

    @property
    def n_visual_tokens(self) -> int:
        return (self.image_side // self.embed_patch) ** 2


@dataclass
class EncodedImage:
    local: Tensor       # [n_visual_tokens, d_model]
    global_rep: Tensor  # [d_model], mean of local rows


@dataclass
class EncodedReport:
    local: Tensor          # [n_tokens, d_model]
    global_rep: Tensor     # [d_model], the CLS row
    cls_attention: Tensor  # [n_tokens], final-layer head-averaged CLS row
    sentence_spans: list[Span] = field(default_factory=list)


@dataclass
class ImageEncoderParams:
    patch: nn.LinearParams
    pos: Tensor
    blocks: list[nn.BlockParams]
    final_ln: nn.LayerNormParams


@dataclass
class TextEncoderParams:
    tok_emb: Tensor
    pos: Tensor
    blocks: list[nn.BlockParams]
    final_ln: nn.LayerNormParams


def init_image_encoder(rng: np.random.Generator, cfg: EncoderConfig) -> ImageEncoderParams:
    return ImageEncoderParams(
        patch=nn.init_linear(rng, cfg.embed_patch ** 2, cfg.d_model),
        pos=Tensor(rng.normal(0.0, nn.INIT_STD, size=(cfg.n_visual_tokens, cfg.d_model)), requires_grad=True),
        blocks=[nn.init_block(rng, cfg.d_model, cfg.n_heads) for _ in range(cfg.n_layers)],
        final_ln=nn.init_layer_norm(cfg.d_model),
    )


TOKEN_EMBED_STD = 0.3  # token content must stay louder than the 0.02
                       # positional signal, or sentence pooling keys on
                       # report position instead of what the words say


def init_text_encoder(rng: np.random.Generator, cfg: EncoderConfig) -> TextEncoderParams:
    return TextEncoderParams(
        tok_emb=Tensor(rng.normal(0.0, TOKEN_EMBED_STD, size=(cfg.vocab_size, cfg.d_model)), requires_grad=True),
        pos=Tensor(rng.normal(0.0, nn.INIT_STD, size=(cfg.max_report_len, cfg.d_model)), requires_grad=True),
        blocks=[nn.init_block(rng, cfg.d_model, cfg.n_heads) for _ in range(cfg.n_layers)],
        final_ln=nn.init_layer_norm(cfg.d_model),
    )


def _patch_rows(pixels: np.ndarray, ps: int) -> np.ndarray:
    """Tile (..., S, S) into (..., (S/ps)^2, ps^2), row-major over the grid."""
    *lead, s, _ = pixels.shape
    g = s // ps
    x = pixels.reshape(*lead, g, ps, g, ps)
    x = np.moveaxis(x, -3, -2)
    return x.reshape(*lead, g * g, ps * ps)


def _image_tokens(pixels: np.ndarray, cfg: EncoderConfig, p: ImageEncoderParams) -> Tensor:
    x = nn.linear(Tensor(_patch_rows(pixels, cfg.embed_patch)), p.patch) + p.pos
    for blk in p.blocks:
        x, _ = nn.block(x, blk)
    return nn.layer_norm(x, p.final_ln)


def encode_image(pixels, cfg: EncoderConfig, params: ImageEncoderParams) -> EncodedImage:
    """Encode one [image_side, image_side] image; pixels are treated as
    constants (no gradient flows into them)."""
    px = pixels.data if isinstance(pixels, Tensor) else np.asarray(pixels, dtype=np.float64)
    want = (cfg.image_side, cfg.image_side)
    if px.shape != want:
        raise DimensionError(f"expected image shape {want}, got {px.shape}")
    local = _image_tokens(px, cfg, params)
    return EncodedImage(local=local, global_rep=T.mean_pool(local))


def encode_images(pixel_batch: np.ndarray, cfg: EncoderConfig, params: ImageEncoderParams) -> tuple[Tensor, Tensor]:
    """Batched variant: [B, S, S] -> (locals [B, n, D], globals [B, D])."""
    px = np.asarray(pixel_batch, dtype=np.float64)
    if px.ndim != 3 or px.shape[1:] != (cfg.image_side, cfg.image_side):
        raise DimensionError(f"expected batch of {cfg.image_side}x{cfg.image_side} images, got {px.shape}")
    local = _image_tokens(px, cfg, params)
    return local, T.tmean(local, axis=1)


def _check_spans(spans: list[Span], n_tokens: int) -> None:
    if not spans:
        raise ContractError("at least one sentence span is required")
    seen = np.zeros(n_tokens, dtype=bool)
    for start, stop in spans:
        if not (1 <= start < stop <= n_tokens):
            raise ContractError(f"span ({start}, {stop}) out of range for {n_tokens} tokens")
        if seen[start:stop].any():
            raise ContractError(f"span ({start}, {stop}) overlaps another span")
        seen[start:stop] = True
    if not seen[1:].all():
        raise ContractError("sentence spans must cover every non-CLS token")


def encode_report(token_ids, spans: list[Span], cfg: EncoderConfig, params: TextEncoderParams) -> EncodedReport:
    """Encode one report; token_ids[0] must be the CLS token."""
    ids = list(token_ids)
    if len(ids) < 2:
        raise ContractError("a report needs CLS plus at least one content token")
    if len(ids) > cfg.max_report_len:
        raise ContractError(f"report of {len(ids)} tokens exceeds max_report_len {cfg.max_report_len}")
    if any(i < 0 or i >= cfg.vocab_size for i in ids):
        raise ContractError("token id out of vocabulary range")
    spans = [(int(a), int(b)) for a, b in spans]
    _check_spans(spans, len(ids))

    n = len(ids)
    x = T.gather_rows(params.tok_emb, ids) + T.gather_rows(params.pos, range(n))
    last_weights = None
    for blk in params.blocks:
        x, last_weights = nn.block(x, blk)
    local = nn.layer_norm(x, params.final_ln)

    global_rep = T.reshape(T.gather_rows(local, [0]), (local.shape[1],))
    head_mean = T.tmean(last_weights, axis=0)  # [n, n]
    cls_attention = T.reshape(T.gather_rows(head_mean, [0]), (n,))
    return EncodedReport(local=local, global_rep=global_rep,
                         cls_attention=cls_attention, sentence_spans=spans)
