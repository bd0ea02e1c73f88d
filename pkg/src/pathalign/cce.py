"""Cross-modal covariance prediction.

The image is tiled into patches whose raw pixels act as variables; the
pairwise sample covariance of those variables is the regression target,
predicted from the global report representation by a single bias-free
linear head.  Since the matrix is symmetric and self-covariance is
excluded, only the strict upper triangle is predicted (packed row-major),
halving the head size.  Targets are plain float64 arrays computed once
per sample, outside the autodiff graph.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import CheckpointError, ConfigError, DimensionError
from .tensor import Tensor

DEFAULT_PATCH_SIZE = 8  # the full-scale reference setting uses 32


@dataclass
class PatchGrid:
    patches: Tensor  # [n_patches, pixels_per_patch], row-major grid order
    patch_size: int

    @property
    def n_patches(self) -> int:
        return self.patches.shape[0]

    @property
    def pixels_per_patch(self) -> int:
        return self.patches.shape[1]


@dataclass
class CovTarget:
    packed: Tensor  # [n_patches * (n_patches - 1) / 2] strict upper triangle


@dataclass
class CceHead:
    w: Tensor  # [d_model, packed_length], no bias


def packed_length(n_patches: int) -> int:
    return n_patches * (n_patches - 1) // 2


def head_param_count(d_model: int, image_side: int, patch_size: int) -> int:
    n_patches = (image_side // patch_size) ** 2
    return d_model * packed_length(n_patches)


def init_cce_head(rng: np.random.Generator, d_model: int, image_side: int, patch_size: int) -> CceHead:
    n_patches = (image_side // patch_size) ** 2
    w = rng.normal(0.0, 0.02, size=(d_model, packed_length(n_patches)))
    return CceHead(w=Tensor(w, requires_grad=True))


def split_patches(pixels, ps: int) -> PatchGrid:
    """Tile a square image into disjoint ps-by-ps patches, row-major; patch
    i covers grid cell (i // g, i % g) for grid width g."""
    px = pixels.data if isinstance(pixels, Tensor) else np.asarray(pixels, dtype=np.float64)
    if px.ndim != 2 or px.shape[0] != px.shape[1]:
        raise DimensionError(f"expected a square image, got {px.shape}")
    side = px.shape[0]
    if side % ps != 0:
        raise ConfigError(f"image side {side} not divisible by patch size {ps}")
    g = side // ps
    rows = px.reshape(g, ps, g, ps).transpose(0, 2, 1, 3).reshape(g * g, ps * ps)
    return PatchGrid(patches=Tensor(rows.copy()), patch_size=ps)


def covariance_matrix(grid: PatchGrid) -> Tensor:
    """Sample covariance between each pair of patches (ddof 1)."""
    if grid.pixels_per_patch < 2:
        raise ConfigError("covariance needs at least two pixels per patch")
    x = grid.patches.data
    centered = x - x.mean(axis=1, keepdims=True)
    return Tensor(centered @ centered.T / (grid.pixels_per_patch - 1))


def pack_upper(sigma: Tensor) -> CovTarget:
    """Strict upper triangle in row-major pair order (j < k)."""
    s = sigma.data
    if s.ndim != 2 or s.shape[0] != s.shape[1]:
        raise DimensionError(f"expected a square matrix, got {s.shape}")
    iu, ju = np.triu_indices(s.shape[0], k=1)
    return CovTarget(packed=Tensor(s[iu, ju].copy()))


def unpack_upper(packed: Tensor, n_patches: int) -> Tensor:
    """Rebuild the symmetric matrix with a zero diagonal (the diagonal is
    never packed; callers re-add it if they kept it)."""
    vals = packed.data if isinstance(packed, Tensor) else np.asarray(packed)
    if vals.shape != (packed_length(n_patches),):
        raise DimensionError(f"packed length {vals.shape} does not match {n_patches} patches")
    out = np.zeros((n_patches, n_patches))
    iu, ju = np.triu_indices(n_patches, k=1)
    out[iu, ju] = vals
    out[ju, iu] = vals
    return Tensor(out)


def covariance_target(pixels, ps: int) -> np.ndarray:
    """Packed float64 covariance target for one raw image."""
    sigma = covariance_matrix(split_patches(pixels, ps))
    return pack_upper(sigma).packed.data


def predict_covariance(u_gr: Tensor, head: CceHead) -> Tensor:
    """Linear prediction of the packed covariance from the global report
    representation; accepts [D] or a [B, D] batch."""
    single = u_gr.ndim == 1
    x = T.reshape(u_gr, (1, u_gr.shape[0])) if single else u_gr
    if x.shape[-1] != head.w.shape[0]:
        raise DimensionError(f"representation width {x.shape[-1]} != head input {head.w.shape[0]}")
    out = T.matmul(x, head.w)
    return T.reshape(out, (out.shape[1],)) if single else out


def _infer_n_patches(k: int) -> int:
    n = round((1 + (1 + 8 * k) ** 0.5) / 2)
    if packed_length(n) != k:
        raise DimensionError(f"packed length {k} is not a triangular number")
    return n


def cce_loss(target, pred: Tensor, full_matrix: bool = False) -> Tensor:
    """Mean squared error over packed entries, batch-averaged.

    With ``full_matrix`` the packed squared error is renormalized as if the
    whole symmetric matrix (off-diagonal pairs counted twice, diagonal
    excluded) were averaged over all n_patches^2 entries.
    """
    tgt = target.packed if isinstance(target, CovTarget) else target
    if not isinstance(tgt, Tensor):
        tgt = Tensor(np.asarray(tgt, dtype=np.float64))
    if tgt.shape != pred.shape:
        raise DimensionError(f"target shape {tgt.shape} != prediction shape {pred.shape}")
    diff = T.sub(pred, tgt)
    sq = T.mul(diff, diff)
    k = pred.shape[-1]
    if full_matrix:
        n = _infer_n_patches(k)
        per_sample = T.tsum(sq, axis=-1) * (2.0 / (n * n))
    else:
        per_sample = T.tmean(sq, axis=-1)
    return per_sample if per_sample.ndim == 0 else T.tmean(per_sample)


def write_target_cache(path, targets: dict[int, np.ndarray]) -> None:
    """Length-prefixed little-endian records: sample id (u64), count (u32),
    then count float64 values."""
    with open(path, "wb") as fh:
        for sample_id in sorted(targets):
            vals = np.asarray(targets[sample_id], dtype="<f8")
            fh.write(struct.pack("<QI", sample_id, vals.size))
            fh.write(vals.tobytes())


def read_target_cache(path) -> dict[int, np.ndarray]:
    out: dict[int, np.ndarray] = {}
    with open(path, "rb") as fh:
        blob = fh.read()
    pos = 0
    while pos < len(blob):
        if pos + 12 > len(blob):
            raise CheckpointError("truncated covariance target cache header")
        sample_id, count = struct.unpack_from("<QI", blob, pos)
        pos += 12
        end = pos + 8 * count
        if end > len(blob):
            raise CheckpointError("truncated covariance target cache payload")
        out[sample_id] = np.frombuffer(blob[pos:end], dtype="<f8").copy()
        pos = end
    return out
