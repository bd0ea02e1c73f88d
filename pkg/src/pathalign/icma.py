"""Instance-level cross-modal alignment.

Two per-modality MLP heads project the global image and report
representations into a shared latent space, where a symmetric InfoNCE
loss over the batch pulls matched pairs together.  Projections are
L2-normalized by default so the temperature acts on cosine similarities;
set ``normalize=False`` to run on raw dot products instead.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .errors import ConfigError, DimensionError
from .tensor import Tensor

DEFAULT_TAU1 = 0.07


@dataclass
class ProjectionHead:
    """Two-layer perceptron with a nonlinearity between the layers."""

    fc1: nn.LinearParams
    fc2: nn.LinearParams


def init_projection_head(rng: np.random.Generator, d_in: int, d_latent: int | None = None) -> ProjectionHead:
    d_latent = d_in if d_latent is None else d_latent
    return ProjectionHead(fc1=nn.init_linear(rng, d_in, d_in), fc2=nn.init_linear(rng, d_in, d_latent))


def project(global_rep: Tensor, head: ProjectionHead, normalize: bool = True) -> Tensor:
    """Project a [D] vector or [B, D] batch into the latent space."""
    single = global_rep.ndim == 1
    x = T.reshape(global_rep, (1, global_rep.shape[0])) if single else global_rep
    if x.shape[-1] != head.fc1.w.shape[0]:
        raise DimensionError(f"projection input width {x.shape[-1]} != head width {head.fc1.w.shape[0]}")
    out = nn.linear(T.gelu(nn.linear(x, head.fc1)), head.fc2)
    if normalize:
        out = T.l2_normalize(out)
    return T.reshape(out, (out.shape[1],)) if single else out


def icma_loss(img_proj: Tensor, txt_proj: Tensor, tau1: float = DEFAULT_TAU1) -> Tensor:
    """Symmetric InfoNCE over the batch at temperature tau1.

    Each direction is the batch-mean negative log-probability of the
    matched pair under a softmax over the batch; the two directions are
    averaged with weight 1/2 each.
    """
    if tau1 <= 0:
        raise ConfigError(f"tau1 must be positive, got {tau1}")
    if img_proj.shape != txt_proj.shape or img_proj.ndim != 2:
        raise DimensionError(f"projection batches must share shape [B, D], got {img_proj.shape} and {txt_proj.shape}")
    b = img_proj.shape[0]
    sims = T.matmul(img_proj, T.swapaxes(txt_proj, -1, -2)) * (1.0 / tau1)
    eye = Tensor(np.eye(b))
    img_to_txt = T.tsum(T.mul(T.log_softmax(sims, axis=1), eye)) * (-1.0 / b)
    txt_to_img = T.tsum(T.mul(T.log_softmax(T.swapaxes(sims, -1, -2), axis=1), eye)) * (-1.0 / b)
    return (img_to_txt + txt_to_img) * 0.5
