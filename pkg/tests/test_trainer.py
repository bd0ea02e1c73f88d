import numpy as np
import pytest

from pathalign import checkpoint as ckpt
from pathalign import model as M
from pathalign import tensor as T
from pathalign.config import TrainConfig
from pathalign.errors import CheckpointError, ConfigError, TrainingDivergence
from pathalign.synth import make_split
from pathalign.tensor import Tensor
from pathalign.trainer import (AdamWState, adamw_step, load_model, resume, train)

STILL = lambda: 0.0  # frozen clock: wall_seconds column pinned to 0


def tiny_cfg(**kw):
    defaults = dict(n_train=24, n_val=8, n_test=8, batch_size=8, max_epochs=3,
                    patience=3, d_model=8, n_heads=2, n_layers=1, n_query=2,
                    vpoe_layers=1, seed=5)
    defaults.update(kw)
    return TrainConfig(**defaults)


# ---------------------------------------------------------------------------
# total_loss

def test_total_loss_reduces_to_icma_when_weights_zero():
    cfg = tiny_cfg(lambda_=0.0, beta=0.0)
    world = cfg.world()
    pairs, _, _ = make_split(4, 1, 1, cfg.data_seed, world)
    m = M.init_model(cfg, world)
    total, breakdown = M.total_loss(m, pairs[:4], cfg, world)
    assert total.item() == pytest.approx(breakdown["icma"], abs=1e-15)


def test_total_loss_is_linear_in_terms():
    cfg = tiny_cfg(lambda_=0.5, beta=0.5)
    world = cfg.world()
    pairs, _, _ = make_split(4, 1, 1, cfg.data_seed, world)
    m = M.init_model(cfg, world)
    total, b = M.total_loss(m, pairs[:4], cfg, world)
    assert total.item() == pytest.approx(b["icma"] + 0.5 * b["pcma"] + 0.5 * b["cce"], abs=1e-12)


def test_total_gradient_equals_weighted_component_gradients():
    cfg = tiny_cfg(lambda_=0.3, beta=0.7)
    world = cfg.world()
    pairs, _, _ = make_split(2, 1, 1, cfg.data_seed, world)
    batch = pairs[:2]
    m = M.init_model(cfg, world)
    params = M.parameters(m)
    targets = M.covariance_targets(batch, cfg)

    def grads_for(lambda_, beta):
        sub_cfg = tiny_cfg(lambda_=lambda_, beta=beta)
        T.zero_grads(params)
        loss, _ = M.total_loss(m, batch, sub_cfg, world, targets)
        loss.backward()
        return [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    combined = grads_for(0.3, 0.7)
    g_icma = grads_for(0.0, 0.0)
    g_icma_pcma = grads_for(1.0, 0.0)
    g_icma_cce = grads_for(0.0, 1.0)
    for got, gi, gip, gic in zip(combined, g_icma, g_icma_pcma, g_icma_cce):
        expect = gi + 0.3 * (gip - gi) + 0.7 * (gic - gi)
        np.testing.assert_allclose(got, expect, atol=1e-10)


def test_total_loss_rejects_empty_batch():
    cfg = tiny_cfg()
    with pytest.raises(Exception):
        M.total_loss(M.init_model(cfg, cfg.world()), [], cfg, cfg.world())


def test_breakdown_finite_at_initialization_many_seeds():
    cfg = tiny_cfg()
    world = cfg.world()
    pairs, _, _ = make_split(4, 1, 1, cfg.data_seed, world)
    targets = M.covariance_targets(pairs, cfg)
    for seed in range(100):
        m = M.init_model(cfg, world, seed=seed)
        with T.no_grad():
            _, b = M.total_loss(m, pairs, cfg, world, targets)
        assert all(np.isfinite(v) for v in b.values()), seed


def test_gradient_reaches_every_model_parameter():
    cfg = tiny_cfg()
    world = cfg.world()
    pairs, _, _ = make_split(4, 1, 1, cfg.data_seed, world)
    m = M.init_model(cfg, world)
    named = M.named_parameters(m)
    T.zero_grads([p for _, p in named])
    total, _ = M.total_loss(m, pairs, cfg, world)
    total.backward()
    for name, p in named:
        assert p.grad is not None and not np.all(p.grad == 0.0), name


def test_check_finite_names_offending_term():
    with pytest.raises(TrainingDivergence, match="pcma"):
        M.check_finite({"icma": 1.0, "pcma": float("nan"), "cce": 0.0, "total": float("nan")})


# ---------------------------------------------------------------------------
# AdamW

def adam_cfg(**kw):
    defaults = dict(learning_rate=0.1, weight_decay=0.0)
    defaults.update(kw)
    return TrainConfig(**defaults)


def test_adamw_no_gradient_no_decay_is_identity():
    w = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    w.grad = np.zeros(2)
    named = [("w", w)]
    adamw_step(named, AdamWState.init(named), adam_cfg())
    np.testing.assert_array_equal(w.data, [1.0, -2.0])


def test_adamw_first_step_moves_by_learning_rate():
    w = Tensor(np.array([1.0]), requires_grad=True)
    w.grad = np.array([1.0])
    named = [("w", w)]
    adamw_step(named, AdamWState.init(named), adam_cfg(learning_rate=0.1))
    assert w.data[0] == pytest.approx(0.9, abs=1e-7)


def test_adamw_decay_path_isolated():
    w = Tensor(np.array([2.0]), requires_grad=True)
    w.grad = np.array([0.0])
    named = [("w", w)]
    adamw_step(named, AdamWState.init(named), adam_cfg(learning_rate=1.0, weight_decay=0.1))
    assert w.data[0] == pytest.approx(2.0 * 0.9, abs=1e-12)


def test_adamw_bias_correction_against_hand_rollout():
    cfg = adam_cfg(learning_rate=0.05)
    w = Tensor(np.array([0.7]), requires_grad=True)
    named = [("w", w)]
    state = AdamWState.init(named)
    m = v = 0.0
    x = 0.7
    for t in range(1, 6):
        g = 2.0 * x  # gradient of x^2
        w.grad = np.array([g])
        adamw_step(named, state, cfg)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        mh = m / (1 - 0.9 ** t)
        vh = v / (1 - 0.999 ** t)
        x = x - 0.05 * mh / (np.sqrt(vh) + 1e-8)
        assert w.data[0] == pytest.approx(x, abs=1e-12)


# ---------------------------------------------------------------------------
# training loop

def test_metrics_csv_layout(tmp_path):
    cfg = tiny_cfg(max_epochs=2, patience=2)
    res = train(cfg, tmp_path / "run", clock=STILL)
    lines = res.metrics_path.read_text().strip().splitlines()
    assert lines[0] == ("epoch,train_total,train_icma,train_pcma,train_cce,"
                        "val_total,val_icma,val_pcma,val_cce,wall_seconds")
    assert [row.split(",")[0] for row in lines[1:]] == ["0", "1", "2"]


def test_two_runs_are_byte_identical(tmp_path):
    cfg = tiny_cfg()
    a = train(cfg, tmp_path / "a", clock=STILL)
    b = train(cfg, tmp_path / "b", clock=STILL)
    assert a.metrics_path.read_bytes() == b.metrics_path.read_bytes()
    assert a.best_checkpoint.read_bytes() == b.best_checkpoint.read_bytes()
    assert a.last_checkpoint.read_bytes() == b.last_checkpoint.read_bytes()


def test_different_seed_changes_metrics(tmp_path):
    a = train(tiny_cfg(seed=1), tmp_path / "a", clock=STILL)
    b = train(tiny_cfg(seed=2), tmp_path / "b", clock=STILL)
    assert a.metrics_path.read_bytes() != b.metrics_path.read_bytes()


def test_early_stopping_on_patience_zero(tmp_path):
    # patience 0 stops at the first epoch whose validation loss fails to
    # improve on the epoch-0 baseline or any later best
    cfg = tiny_cfg(max_epochs=8, patience=0, learning_rate=0.03)
    res = train(cfg, tmp_path / "run", clock=STILL)
    if res.last_epoch < cfg.max_epochs:
        assert res.last_epoch == res.best_epoch + 1


def test_training_reduces_icma_only_objective(tmp_path):
    cfg = TrainConfig(n_train=128, n_val=32, n_test=32, max_epochs=10, patience=10,
                      lambda_=0.0, beta=0.0)
    res = train(cfg, tmp_path / "run", clock=STILL)
    lines = res.metrics_path.read_text().strip().splitlines()[1:]
    first = dict(zip(("epoch", "tt", "ti"), lines[0].split(",")))
    best_val_icma = min(float(row.split(",")[6]) for row in lines[1:])
    epoch0_val_icma = float(lines[0].split(",")[6])
    assert best_val_icma < epoch0_val_icma


def test_divergence_aborts_naming_the_term(tmp_path):
    # poison one training image; the first batch containing it must abort
    cfg = tiny_cfg(max_epochs=4, patience=4)
    world = cfg.world()
    datasets = make_split(cfg.n_train, cfg.n_val, cfg.n_test, cfg.data_seed, world)
    datasets[0][0].image = np.full_like(datasets[0][0].image, np.nan)
    with pytest.raises(TrainingDivergence, match="icma|pcma|cce|total"):
        train(cfg, tmp_path / "run", datasets=datasets, clock=STILL)


# ---------------------------------------------------------------------------
# checkpoint + resume

def test_checkpoint_round_trip(tmp_path):
    cfg = tiny_cfg()
    tensors = {"a.b": np.arange(6.0).reshape(2, 3), "scalar": np.asarray(2.5)}
    path = tmp_path / "x.ckpt"
    ckpt.write_checkpoint(path, cfg, tensors)
    stored_hash, loaded = ckpt.read_checkpoint(path)
    ckpt.verify_config(stored_hash, cfg)
    assert set(loaded) == {"a.b", "scalar"}
    np.testing.assert_array_equal(loaded["a.b"], tensors["a.b"])
    assert loaded["scalar"].shape == ()


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "x.ckpt"
    path.write_bytes(b"XXXX" + b"\x00" * 40)
    with pytest.raises(CheckpointError):
        ckpt.read_checkpoint(path)


def test_checkpoint_reload_reproduces_forward_pass(tmp_path):
    cfg = tiny_cfg(max_epochs=2, patience=2)
    world = cfg.world()
    res = train(cfg, tmp_path / "run", clock=STILL)
    m = load_model(res.best_checkpoint, cfg)
    m2 = load_model(res.best_checkpoint, cfg)
    pairs, _, _ = make_split(2, 1, 1, cfg.data_seed, world)
    with T.no_grad():
        _, a = M.total_loss(m, pairs, cfg, world)
        _, b = M.total_loss(m2, pairs, cfg, world)
    assert a == b


class _Interrupted(Exception):
    pass


def _interrupt_after(epoch_limit):
    def hook(epoch, train_eval, val_eval):
        if epoch >= epoch_limit:
            raise _Interrupted()
    return hook


def test_resume_matches_uninterrupted_run(tmp_path):
    cfg = tiny_cfg(max_epochs=4, patience=4)
    full = train(cfg, tmp_path / "full", clock=STILL)
    full_rows = full.metrics_path.read_text().strip().splitlines()

    # kill the run right after epoch 2's checkpoints hit disk
    with pytest.raises(_Interrupted):
        train(cfg, tmp_path / "part", clock=STILL, on_epoch_end=_interrupt_after(2))
    resumed = resume(tmp_path / "part" / "last.ckpt", cfg, tmp_path / "resumed", clock=STILL)
    resumed_rows = resumed.metrics_path.read_text().strip().splitlines()

    # epochs 3..4 must replay exactly (header + rows for epochs 3, 4)
    assert resumed_rows[0] == full_rows[0]
    assert resumed_rows[1:] == full_rows[4:]
    assert resumed.last_checkpoint.read_bytes() == full.last_checkpoint.read_bytes()
    assert resumed.best_epoch == full.best_epoch


def test_resume_refuses_config_drift(tmp_path):
    cfg = tiny_cfg(max_epochs=4, patience=4)
    with pytest.raises(_Interrupted):
        train(cfg, tmp_path / "part", clock=STILL, on_epoch_end=_interrupt_after(2))
    altered = tiny_cfg(max_epochs=4, patience=4, batch_size=4)
    with pytest.raises(CheckpointError):
        resume(tmp_path / "part" / "last.ckpt", altered, tmp_path / "bad")


def test_resume_refuses_finished_run(tmp_path):
    cfg = tiny_cfg(max_epochs=2, patience=2)
    done = train(cfg, tmp_path / "done", clock=STILL)
    if done.last_epoch == cfg.max_epochs:
        with pytest.raises(ConfigError):
            resume(done.last_checkpoint, cfg, tmp_path / "again")
