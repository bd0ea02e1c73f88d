"""Pathology-level cross-modal alignment.

A bank of learnable query tokens is refined by a stack of
self-attention -> cross-attention layers that read the local visual
tokens, yielding one visual observation vector per query.  Sentence-mean
report vectors are matched to those observations with a scaled
dot-product attention, and a within-sample symmetric InfoNCE over the
query positions aligns each observation with its attended counterpart.
The report-to-image direction weights each position by the sentence
importance mass (CLS attention) transported through the matching
attention, scaled so uniform sentence weights reproduce the unweighted
loss.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .encoders import EncodedReport
from .errors import ConfigError, ContractError, DimensionError
from .tensor import Tensor

DEFAULT_TAU2 = 0.10
DEFAULT_N_QUERY = 4  # the full-scale reference setting uses 12


@dataclass
class QueryTokens:
    q: Tensor  # [n_query, d_model], trainable


@dataclass
class VpoeLayer:
    """One extractor layer: queries self-attend, then cross-attend into
    the visual tokens; both sublayers are pre-norm residual."""

    ln_self: nn.LayerNormParams
    self_attn: nn.AttentionParams
    ln_cross: nn.LayerNormParams
    cross_attn: nn.AttentionParams


@dataclass
class PathologyBundle:
    tpor: Tensor      # [n_sentences, D] sentence-mean report vectors
    vpor: Tensor      # [n_query, D] extracted visual observations
    attended: Tensor  # [n_query, D] attention mixture of T-PORs per query
    attn: Tensor      # [n_query, n_sentences], rows sum to 1
    weights: Tensor   # [n_sentences] normalized sentence weights


def init_query_tokens(rng: np.random.Generator, n_query: int, d_model: int) -> QueryTokens:
    """Unit-scale rows: each query keeps a distinct identity in the
    residual stream, which the extractor's small-init attention then
    perturbs with image content."""
    if n_query < 1:
        raise ConfigError(f"need at least one query token, got {n_query}")
    return QueryTokens(q=Tensor(rng.normal(0.0, 1.0, size=(n_query, d_model)), requires_grad=True))


def init_vpoe(rng: np.random.Generator, d_model: int, n_heads: int, n_layers: int = 2) -> list[VpoeLayer]:
    if n_layers < 1:
        raise ConfigError(f"extractor needs at least one layer, got {n_layers}")
    # small attention init keeps each query's identity in the residual
    # stream early on, so queries can specialize instead of averaging out
    return [
        VpoeLayer(
            ln_self=nn.init_layer_norm(d_model),
            self_attn=nn.init_attention(rng, d_model, n_heads, std=nn.INIT_STD),
            ln_cross=nn.init_layer_norm(d_model),
            cross_attn=nn.init_attention(rng, d_model, n_heads, std=nn.INIT_STD),
        )
        for _ in range(n_layers)
    ]


def vpoe_forward(queries: QueryTokens, visual_local: Tensor, layers: list[VpoeLayer]) -> Tensor:
    """Run the extractor; output keeps the query-token shape regardless of
    how many visual tokens are attended over.

    `visual_local` may be [n_vis, D] or batched [B, n_vis, D]; in the
    batched case the shared queries broadcast over the batch and the
    result is [B, n_query, D].
    """
    x = queries.q
    if visual_local.ndim == 3:
        x = T.broadcast_to(x, (visual_local.shape[0],) + x.shape)
    for layer in layers:
        h = nn.layer_norm(x, layer.ln_self)
        attended, _ = nn.attention(layer.self_attn, h, h, h)
        x = x + attended
        h = nn.layer_norm(x, layer.ln_cross)
        attended, _ = nn.attention(layer.cross_attn, h, visual_local, visual_local)
        x = x + attended
    return x


def extract_tpor(report: EncodedReport) -> Tensor:
    """Sentence-mean pooling of local token vectors, one row per span."""
    if not report.sentence_spans:
        raise ContractError("report has no sentence spans")
    rows = []
    for start, stop in report.sentence_spans:
        if stop <= start:
            raise ContractError(f"empty sentence span ({start}, {stop})")
        pooled = T.mean_pool(report.local, rows=range(start, stop))
        rows.append(T.reshape(pooled, (1, pooled.shape[0])))
    return T.concat(rows, axis=0)


def cross_modal_attend(vpor: Tensor, tpor: Tensor) -> tuple[Tensor, Tensor]:
    """Match visual observations to sentence vectors.

    attn[j, k] = softmax_k(vpor_j . tpor_k / sqrt(D)); attended row j is
    the attn-weighted mixture of the sentence vectors.
    """
    if vpor.shape[-1] != tpor.shape[-1]:
        raise DimensionError(f"width mismatch: {vpor.shape} vs {tpor.shape}")
    scores = T.matmul(vpor, T.swapaxes(tpor, -1, -2)) * (1.0 / math.sqrt(vpor.shape[-1]))
    attn = T.softmax(scores, axis=-1)
    return attn, T.matmul(attn, tpor)


def sentence_weights(report: EncodedReport) -> Tensor:
    """Per-sentence CLS-attention mass, normalized to sum to 1."""
    mass = []
    for start, stop in report.sentence_spans:
        s = T.tsum(T.gather_rows(report.cls_attention, range(start, stop)))
        mass.append(T.reshape(s, (1,)))
    w = T.concat(mass, axis=0)
    total = float(w.data.sum())
    if total <= 0.0:
        raise ContractError("CLS attention mass over sentences is zero")
    return T.div(w, T.tsum(w))


def build_bundle(report: EncodedReport, vpor: Tensor) -> PathologyBundle:
    tpor = extract_tpor(report)
    attn, attended = cross_modal_attend(vpor, tpor)
    return PathologyBundle(tpor=tpor, vpor=vpor, attended=attended,
                           attn=attn, weights=sentence_weights(report))


def pcma_loss(bundle: PathologyBundle, tau2: float = DEFAULT_TAU2, normalize: bool = True) -> Tensor:
    """Within-sample symmetric InfoNCE over the query positions.

    The contrast set is the sample's own positions.  In the
    report-to-image direction each position's log term is scaled by
    n_sentences * (attn @ weights), which transports the sentence weights
    onto query positions and equals 1 under uniform weights.
    """
    if tau2 <= 0:
        raise ConfigError(f"tau2 must be positive, got {tau2}")
    o, c = bundle.vpor, bundle.attended
    if normalize:
        o, c = T.l2_normalize(o), T.l2_normalize(c)
    n_q = o.shape[0]
    n_s = bundle.weights.shape[0]
    sims = T.matmul(o, T.swapaxes(c, -1, -2)) * (1.0 / tau2)
    eye = Tensor(np.eye(n_q))

    img_from_txt = T.tsum(T.mul(T.log_softmax(sims, axis=1), eye)) * (-1.0 / n_q)

    diag = T.tsum(T.mul(T.log_softmax(T.swapaxes(sims, -1, -2), axis=1), eye), axis=1)  # [n_q]
    transported = T.reshape(T.matmul(bundle.attn, T.reshape(bundle.weights, (n_s, 1))), (n_q,))
    txt_from_img = T.tsum(T.mul(diag, transported * float(n_s))) * (-1.0 / n_q)

    return (img_from_txt + txt_from_img) * 0.5
