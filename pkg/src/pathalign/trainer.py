"""Joint training loop: AdamW with decoupled weight decay, seeded epoch
shuffling, per-epoch validation, best-checkpoint tracking and early
stopping once validation stops improving for more than `patience` epochs.

Epoch 0 is an evaluation-only baseline row (no update step), so metrics
always include the untrained reference that progress checks compare
against.  Runs are deterministic given (seed, config): batch order is
derived from (seed, epoch) rather than a shared RNG stream, which also
lets a resumed run replay the exact schedule.  Wall-clock readings come
from an injectable clock so tests can pin them.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import checkpoint as ckpt
from . import model as M
from . import tensor as T
from .config import TrainConfig, config_hash, save_config
from .errors import CheckpointError, ConfigError
from .synth import SyntheticPair, make_split
from .tensor import Tensor

METRIC_COLUMNS = ("epoch", "train_total", "train_icma", "train_pcma", "train_cce",
                  "val_total", "val_icma", "val_pcma", "val_cce", "wall_seconds")


@dataclass
class AdamWState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def init(cls, named_params: Sequence[tuple[str, Tensor]]) -> "AdamWState":
        return cls(m={n: np.zeros_like(p.data) for n, p in named_params},
                   v={n: np.zeros_like(p.data) for n, p in named_params})


def clip_gradients(params: Sequence[Tensor], max_norm: float) -> None:
    if max_norm <= 0:
        return
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    norm = np.sqrt(total)
    if norm > max_norm:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad *= scale


def adamw_step(named_params: Sequence[tuple[str, Tensor]], state: AdamWState, cfg: TrainConfig) -> None:
    """One update; decoupled decay shrinks weights multiplicatively before
    the bias-corrected adaptive step."""
    state.step += 1
    t = state.step
    b1, b2, eps, lr = cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps, cfg.learning_rate
    for name, p in named_params:
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if cfg.weight_decay > 0:
            p.data *= 1.0 - lr * cfg.weight_decay
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        p.data -= lr * m_hat / (np.sqrt(v_hat) + eps)


@dataclass
class TrainResult:
    best_epoch: int
    best_val_total: float
    last_epoch: int
    metrics_path: Path
    best_checkpoint: Path
    last_checkpoint: Path


def _epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(epoch,))).permutation(n)


def _batches(order: np.ndarray, batch_size: int):
    for lo in range(0, len(order), batch_size):
        yield order[lo:lo + batch_size]


def evaluate_split(model_params, pairs, cfg, world, targets, batch: int = 64) -> dict[str, float]:
    """Loss breakdown over a split without building graphs."""
    sums = {"icma": 0.0, "pcma": 0.0, "cce": 0.0, "total": 0.0}
    with T.no_grad():
        for lo in range(0, len(pairs), batch):
            chunk = pairs[lo:lo + batch]
            _, breakdown = M.total_loss(model_params, chunk, cfg, world, targets)
            for key in sums:
                sums[key] += breakdown[key] * len(chunk)
    return {k: v / len(pairs) for k, v in sums.items()}


def _metrics_row(epoch: int, train: dict[str, float], val: dict[str, float], wall: float) -> str:
    vals = [str(epoch)] + [f"{x:.12g}" for x in
                           (train["total"], train["icma"], train["pcma"], train["cce"],
                            val["total"], val["icma"], val["pcma"], val["cce"], wall)]
    return ",".join(vals)


def _state_tensors(model_params, opt: AdamWState, epoch: int, best_val: float,
                   best_epoch: int) -> dict[str, np.ndarray]:
    out = {name: p.data for name, p in M.named_parameters(model_params)}
    out.update({f"opt.m.{n}": arr for n, arr in opt.m.items()})
    out.update({f"opt.v.{n}": arr for n, arr in opt.v.items()})
    out["meta.step"] = np.asarray(float(opt.step))
    out["meta.epoch"] = np.asarray(float(epoch))
    out["meta.best_val_total"] = np.asarray(best_val)
    out["meta.best_epoch"] = np.asarray(float(best_epoch))
    return out


def _restore_state(tensors: dict[str, np.ndarray], model_params, opt: AdamWState) -> tuple[int, float, int]:
    for name, p in M.named_parameters(model_params):
        if name not in tensors:
            raise CheckpointError(f"checkpoint is missing tensor {name!r}")
        if tensors[name].shape != p.data.shape:
            raise CheckpointError(f"tensor {name!r} has shape {tensors[name].shape}, expected {p.data.shape}")
        p.data = tensors[name].copy()
    for n in opt.m:
        opt.m[n] = tensors[f"opt.m.{n}"].copy()
        opt.v[n] = tensors[f"opt.v.{n}"].copy()
    opt.step = int(tensors["meta.step"])
    epoch = int(tensors["meta.epoch"])
    best_val = float(tensors["meta.best_val_total"])
    best_epoch = int(tensors["meta.best_epoch"])
    return epoch, best_val, best_epoch


def _run_epochs(model_params, opt, cfg, world, datasets, out_dir, clock,
                start_epoch, best_val, best_epoch, metrics_lines,
                on_epoch_end=None) -> TrainResult:
    train_pairs, val_pairs, _ = datasets
    targets = M.covariance_targets(list(train_pairs) + list(val_pairs), cfg)
    named = M.named_parameters(model_params)
    plain = [p for _, p in named]
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    best_path = out_dir / "best.ckpt"
    last_path = out_dir / "last.ckpt"
    metrics_path = out_dir / "metrics.csv"
    t0 = clock()

    def snapshot(path, epoch):
        ckpt.write_checkpoint(path, cfg, _state_tensors(model_params, opt, epoch, best_val, best_epoch))

    def flush_metrics():
        metrics_path.write_text("\n".join([",".join(METRIC_COLUMNS)] + metrics_lines) + "\n")

    if start_epoch == 0:
        train_eval = evaluate_split(model_params, train_pairs, cfg, world, targets)
        val_eval = evaluate_split(model_params, val_pairs, cfg, world, targets)
        best_val, best_epoch = val_eval["total"], 0
        metrics_lines.append(_metrics_row(0, train_eval, val_eval, clock() - t0))
        snapshot(best_path, 0)
        snapshot(last_path, 0)
        flush_metrics()

    epoch = start_epoch
    for epoch in range(start_epoch + 1, cfg.max_epochs + 1):
        order = _epoch_order(cfg.seed, epoch, len(train_pairs))
        acc = {"icma": 0.0, "pcma": 0.0, "cce": 0.0, "total": 0.0}
        for idx in _batches(order, cfg.batch_size):
            batch = [train_pairs[i] for i in idx]
            T.zero_grads(plain)
            loss, breakdown = M.total_loss(model_params, batch, cfg, world, targets)
            M.check_finite(breakdown)
            loss.backward()
            clip_gradients(plain, cfg.clip_norm)
            adamw_step(named, opt, cfg)
            for key in acc:
                acc[key] += breakdown[key] * len(batch)
        train_eval = {k: v / len(train_pairs) for k, v in acc.items()}
        val_eval = evaluate_split(model_params, val_pairs, cfg, world, targets)
        if val_eval["total"] < best_val:
            best_val, best_epoch = val_eval["total"], epoch
            snapshot(best_path, epoch)
        metrics_lines.append(_metrics_row(epoch, train_eval, val_eval, clock() - t0))
        snapshot(last_path, epoch)
        flush_metrics()
        if on_epoch_end is not None:
            on_epoch_end(epoch, train_eval, val_eval)
        if epoch - best_epoch > cfg.patience:
            break

    flush_metrics()
    return TrainResult(best_epoch=best_epoch, best_val_total=best_val, last_epoch=epoch,
                       metrics_path=metrics_path, best_checkpoint=best_path, last_checkpoint=last_path)


def train(cfg: TrainConfig, out_dir, datasets=None,
          clock: Callable[[], float] = time.monotonic, on_epoch_end=None) -> TrainResult:
    """Train from scratch; generates the splits from the config when none
    are passed in.  Writes config.txt, metrics.csv, best.ckpt, last.ckpt.
    `on_epoch_end(epoch, train_eval, val_eval)` fires after the epoch's
    checkpoints and metrics hit disk, so interrupting there is safe."""
    world = cfg.world()
    if datasets is None:
        datasets = make_split(cfg.n_train, cfg.n_val, cfg.n_test, cfg.data_seed, world)
    model_params = M.init_model(cfg, world)
    opt = AdamWState.init(M.named_parameters(model_params))
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_config(out_dir / "config.txt", cfg)
    return _run_epochs(model_params, opt, cfg, world, datasets, out_dir, clock,
                       start_epoch=0, best_val=float("inf"), best_epoch=0, metrics_lines=[],
                       on_epoch_end=on_epoch_end)


def resume(checkpoint_path, cfg: TrainConfig, out_dir, datasets=None,
           clock: Callable[[], float] = time.monotonic, on_epoch_end=None) -> TrainResult:
    """Continue training from a `last.ckpt`; refuses a config whose hash
    differs from the one stored in the checkpoint."""
    stored_hash, tensors = ckpt.read_checkpoint(checkpoint_path)
    ckpt.verify_config(stored_hash, cfg)
    world = cfg.world()
    if datasets is None:
        datasets = make_split(cfg.n_train, cfg.n_val, cfg.n_test, cfg.data_seed, world)
    model_params = M.init_model(cfg, world)
    opt = AdamWState.init(M.named_parameters(model_params))
    epoch, best_val, best_epoch = _restore_state(tensors, model_params, opt)
    if epoch >= cfg.max_epochs:
        raise ConfigError(f"checkpoint is already at epoch {epoch} of {cfg.max_epochs}")
    return _run_epochs(model_params, opt, cfg, world, datasets, out_dir, clock,
                       start_epoch=epoch, best_val=best_val, best_epoch=best_epoch,
                       metrics_lines=[], on_epoch_end=on_epoch_end)


def load_model(checkpoint_path, cfg: TrainConfig) -> M.ModelParams:
    """Rebuild a model from a checkpoint for evaluation."""
    stored_hash, tensors = ckpt.read_checkpoint(checkpoint_path)
    ckpt.verify_config(stored_hash, cfg)
    model_params = M.init_model(cfg, cfg.world())
    for name, p in M.named_parameters(model_params):
        if name not in tensors:
            raise CheckpointError(f"checkpoint is missing tensor {name!r}")
        p.data = tensors[name].copy()
    return model_params
