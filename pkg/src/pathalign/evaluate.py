"""Label-free evaluation of a trained checkpoint at desk scale:
zero-shot image-to-text retrieval, per-finding query-token consistency,
query-token cluster separation, and a linear probe on frozen image
features.  All metrics are deterministic functions of (checkpoint,
dataset); ties in rankings break by index via stable sorts.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import model as M
from . import tensor as T
from .config import TrainConfig
from .errors import ContractError
from .synth import SyntheticPair, WorldSpec
from .tensor import Tensor
from .trainer import AdamWState, adamw_step


@dataclass
class RetrievalResult:
    precision_at_k: dict[int, float]
    ranked: np.ndarray  # [n_queries, n_corpus] report indices, best first


@dataclass
class ConsistencyResult:
    pathology: int
    n_samples: int
    modal_index: int
    top1: float
    top2: float


def retrieval_precision(query_feats: np.ndarray, corpus_feats: np.ndarray,
                        query_labels, corpus_labels, k_list=(1, 2, 5, 10)) -> RetrievalResult:
    """Precision@K of label matches among the top-K cosine-ranked reports."""
    query_labels = np.asarray(query_labels)
    corpus_labels = np.asarray(corpus_labels)
    n_corpus = corpus_feats.shape[0]
    if max(k_list) > n_corpus:
        raise ContractError(f"K={max(k_list)} exceeds corpus size {n_corpus}")
    q = query_feats / np.maximum(np.linalg.norm(query_feats, axis=1, keepdims=True), 1e-12)
    c = corpus_feats / np.maximum(np.linalg.norm(corpus_feats, axis=1, keepdims=True), 1e-12)
    sims = q @ c.T
    ranked = np.argsort(-sims, axis=1, kind="stable")
    matches = corpus_labels[ranked] == query_labels[:, None]
    precision = {int(k): float(matches[:, :k].mean()) for k in k_list}
    return RetrievalResult(precision_at_k=precision, ranked=ranked)


def sentence_labels(pair: SyntheticPair, spec: WorldSpec) -> list[tuple[int, int, int]]:
    """(region, pathology, severity) per sentence, in span order."""
    out = []
    for start, _ in pair.spans:
        out.append((pair.tokens[start] - spec.region_base,
                    pair.tokens[start + 1] - spec.pathology_base,
                    pair.tokens[start + 2] - spec.severity_base))
    return out


def _cosine_rows(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = a / np.maximum(np.linalg.norm(a, axis=-1, keepdims=True), 1e-12)
    b = b / np.maximum(np.linalg.norm(b, axis=-1, keepdims=True), 1e-12)
    return a @ b.T


def vpor_consistency(pairs: list[SyntheticPair], pathology: int, model_params,
                     cfg: TrainConfig, world: WorldSpec) -> ConsistencyResult | None:
    """How consistently the same query token wins the finding's sentence.

    For every sample whose report mentions the finding, the describing
    sentence's T-POR picks its nearest V-POR by cosine; top-1 is the modal
    index's frequency, top-2 additionally counts samples where the modal
    index ranks second.  Returns None when no sample qualifies.
    """
    votes = []
    rankings = []
    with T.no_grad():
        for pair in pairs:
            labels = sentence_labels(pair, world)
            matching = [k for k, (_, p, _) in enumerate(labels) if p == pathology]
            if not matching:
                continue
            bundle = M.sample_pathology_bundle(model_params, pair, cfg, world)
            sims = _cosine_rows(bundle.tpor.data[matching[0]][None, :], bundle.vpor.data)[0]
            order = np.argsort(-sims, kind="stable")
            votes.append(int(order[0]))
            rankings.append(order)
    if not votes:
        return None
    counts = np.bincount(votes, minlength=cfg.n_query)
    modal = int(counts.argmax())
    top1 = counts[modal] / len(votes)
    top2 = float(np.mean([modal in order[:2] for order in rankings]))
    return ConsistencyResult(pathology=pathology, n_samples=len(votes),
                             modal_index=modal, top1=float(top1), top2=top2)


def random_argmax_baseline(n_samples: int, n_query: int, n_draws: int = 10_000,
                           seed: int = 0) -> float:
    """Monte-Carlo mean of the modal-index frequency when each sample's
    winning query were uniform; the yardstick consistency must beat."""
    rng = np.random.default_rng(seed)
    draws = rng.integers(0, n_query, size=(n_draws, n_samples))
    freqs = np.zeros(n_draws)
    for i in range(n_draws):
        freqs[i] = np.bincount(draws[i], minlength=n_query).max() / n_samples
    return float(freqs.mean())


def separation_score(stacked: np.ndarray) -> float:
    """Silhouette-style score for [n_samples, n_groups, D] unit vectors
    grouped along axis 1: positive when each vector sits closer to its own
    group centroid than to the nearest other centroid."""
    n_groups = stacked.shape[1]
    if n_groups < 2:
        raise ContractError("separation needs at least two groups")
    centroids = stacked.mean(axis=0)  # [n_groups, D]
    scores = []
    for j in range(n_groups):
        dist = np.linalg.norm(stacked[:, j, :][:, None, :] - centroids[None, :, :], axis=2)
        own = dist[:, j]
        others = np.delete(dist, j, axis=1).min(axis=1)
        denom = np.maximum(np.maximum(own, others), 1e-300)
        s = (others - own) / denom
        s[np.maximum(own, others) == 0.0] = 0.0
        scores.append(s)
    return float(np.concatenate(scores).mean())


def vpor_cluster_separation(pairs: list[SyntheticPair], model_params,
                            cfg: TrainConfig, world: WorldSpec) -> float:
    """separation_score over unit-normalized V-PORs grouped by query index."""
    if cfg.n_query < 2:
        raise ContractError("cluster separation needs at least two query tokens")
    if len(pairs) < 10:
        raise ContractError("cluster separation needs at least 10 samples")
    collected = []
    with T.no_grad():
        for pair in pairs:
            bundle = M.sample_pathology_bundle(model_params, pair, cfg, world)
            v = bundle.vpor.data
            collected.append(v / np.maximum(np.linalg.norm(v, axis=1, keepdims=True), 1e-12))
    return separation_score(np.stack(collected))


def _multi_hot(pairs: list[SyntheticPair], n_classes: int) -> np.ndarray:
    out = np.zeros((len(pairs), n_classes))
    for i, pair in enumerate(pairs):
        for p in pair.pathology_set():
            out[i, p] = 1.0
    return out


def fit_probe(train_feats: np.ndarray, train_labels: np.ndarray,
              test_feats: np.ndarray, test_labels: np.ndarray,
              steps: int = 2000, lr: float = 0.1, seed: int = 0) -> tuple[float, np.ndarray]:
    """One linear layer under a multi-label logistic loss, full batch.

    Returns (mean accuracy, per-class accuracy) at threshold 0.5 on the
    test features.
    """
    rng = np.random.default_rng(seed)
    n_classes = train_labels.shape[1]
    w = Tensor(rng.normal(0.0, 0.02, size=(train_feats.shape[1], n_classes)), requires_grad=True)
    b = Tensor(np.zeros(n_classes), requires_grad=True)
    named = [("probe.w", w), ("probe.b", b)]
    opt = AdamWState.init(named)
    probe_cfg = TrainConfig(learning_rate=lr, weight_decay=0.0)
    x = Tensor(train_feats)
    target = Tensor(train_labels)
    for _ in range(steps):
        T.zero_grads([w, b])
        z = T.matmul(x, w) + b
        # binary cross-entropy via softplus(z) - y*z, stable for large |z|
        loss = T.tmean(T.softplus(z) - T.mul(target, z))
        loss.backward()
        adamw_step(named, opt, probe_cfg)

    logits = test_feats @ w.data + b.data
    per_class = ((logits > 0.0) == (test_labels > 0.5)).mean(axis=0)
    return float(per_class.mean()), per_class


def linear_probe(train_pairs: list[SyntheticPair], test_pairs: list[SyntheticPair],
                 model_params, cfg: TrainConfig, world: WorldSpec,
                 steps: int = 2000, lr: float = 0.1, seed: int = 0) -> tuple[float, np.ndarray]:
    """Probe the frozen encoder: which finding classes appear in the image,
    decoded linearly from the global image representation."""
    feats = M.image_global_features(model_params, train_pairs, cfg, world)
    test_feats = M.image_global_features(model_params, test_pairs, cfg, world)
    return fit_probe(feats, _multi_hot(train_pairs, world.n_pathologies),
                     test_feats, _multi_hot(test_pairs, world.n_pathologies),
                     steps=steps, lr=lr, seed=seed)
