import math

import numpy as np
import pytest

from pathalign import icma
from pathalign import nn
from pathalign import tensor as T
from pathalign.errors import ConfigError, DimensionError
from pathalign.tensor import Tensor


def make_head(rng, d=4):
    return icma.init_projection_head(rng, d)


def identity_head(d):
    head = icma.init_projection_head(np.random.default_rng(0), d)
    head.fc1.w.data[:] = np.eye(d)
    head.fc1.b.data[:] = 0.0
    head.fc2.w.data[:] = np.eye(d)
    head.fc2.b.data[:] = 0.0
    return head


def test_identity_head_fixes_basis_vector():
    head = identity_head(4)
    e1 = np.zeros(4)
    e1[0] = 1.0
    out = icma.project(Tensor(e1), head)
    # gelu scales the single nonzero entry; normalization restores e1
    np.testing.assert_allclose(out.data, e1, atol=1e-12)


def test_projection_is_unit_norm():
    rng = np.random.default_rng(1)
    head = make_head(rng)
    for _ in range(10):
        out = icma.project(Tensor(rng.normal(size=4)), head)
        assert abs(np.linalg.norm(out.data) - 1.0) < 1e-12


def test_projection_matches_two_layer_formula():
    rng = np.random.default_rng(2)
    head = make_head(rng, d=5)
    x = rng.normal(size=5)
    out = icma.project(Tensor(x), head, normalize=True)

    h = x @ head.fc1.w.data + head.fc1.b.data
    c = math.sqrt(2.0 / math.pi)
    h = 0.5 * h * (1.0 + np.tanh(c * (h + 0.044715 * h ** 3)))
    y = h @ head.fc2.w.data + head.fc2.b.data
    y = y / (np.linalg.norm(y) + 1e-12)
    np.testing.assert_allclose(out.data, y, atol=1e-12)


def test_projection_width_mismatch():
    head = make_head(np.random.default_rng(3), d=4)
    with pytest.raises(DimensionError):
        icma.project(Tensor(np.zeros(6)), head)


def test_zero_vector_projects_finitely():
    head = make_head(np.random.default_rng(4))
    head.fc1.b.data[:] = 0.0
    head.fc2.b.data[:] = 0.0
    out = icma.project(Tensor(np.zeros(4)), head)
    assert np.isfinite(out.data).all()


def test_loss_single_pair_is_zero():
    v = Tensor(np.array([[1.0, 0.0]]))
    assert icma.icma_loss(v, v, tau1=0.07).item() == pytest.approx(0.0, abs=1e-15)


def test_loss_uniform_similarities_is_log_batch():
    row = np.array([0.6, 0.8])
    batch = Tensor(np.tile(row, (4, 1)))
    loss = icma.icma_loss(batch, batch, tau1=0.07)
    assert loss.item() == pytest.approx(math.log(4.0), abs=1e-12)


def test_loss_matches_hand_computation_b2():
    proj = Tensor(np.eye(2))
    loss = icma.icma_loss(proj, proj, tau1=0.07)
    z = 1.0 / 0.07
    per_direction = -math.log(math.exp(z) / (math.exp(z) + 1.0))
    assert loss.item() == pytest.approx(per_direction, abs=1e-10)


def test_loss_invariant_under_joint_permutation():
    rng = np.random.default_rng(5)
    img = rng.normal(size=(5, 3))
    txt = rng.normal(size=(5, 3))
    perm = rng.permutation(5)
    a = icma.icma_loss(Tensor(img), Tensor(txt), tau1=0.2).item()
    b = icma.icma_loss(Tensor(img[perm]), Tensor(txt[perm]), tau1=0.2).item()
    assert a == pytest.approx(b, abs=1e-12)


def test_loss_decreases_when_diagonal_similarity_rises():
    base = np.array([[0.3, 0.1, 0.0], [0.1, 0.2, 0.1], [0.0, 0.1, 0.25]])
    txt = Tensor(np.eye(3))
    lo = icma.icma_loss(Tensor(base), txt, tau1=0.5).item()
    bumped = base.copy()
    bumped[1, 1] += 0.2
    hi = icma.icma_loss(Tensor(bumped), txt, tau1=0.5).item()
    assert hi < lo


def test_invalid_temperature():
    v = Tensor(np.eye(2))
    with pytest.raises(ConfigError):
        icma.icma_loss(v, v, tau1=0.0)


def test_loss_shape_checks():
    with pytest.raises(DimensionError):
        icma.icma_loss(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 3))))


def test_loss_gradient_matches_finite_differences():
    rng = np.random.default_rng(6)
    img = Tensor(rng.normal(size=(4, 8)), requires_grad=True)
    txt = Tensor(rng.normal(size=(4, 8)), requires_grad=True)
    err = T.grad_check(lambda: icma.icma_loss(img, txt, tau1=0.5), [img, txt])
    assert err < 1e-6


def test_full_head_gradient_matches_finite_differences():
    rng = np.random.default_rng(7)
    head_i = make_head(rng)
    head_t = make_head(rng)
    # O(1) weights keep the normalization well-conditioned for central differences
    for head in (head_i, head_t):
        head.fc1.w.data[:] = rng.normal(size=(4, 4))
        head.fc2.w.data[:] = rng.normal(size=(4, 4))
    gi = Tensor(rng.normal(size=(3, 4)))
    gt = Tensor(rng.normal(size=(3, 4)))
    params = nn.trainable(head_i) + nn.trainable(head_t)

    def f():
        return icma.icma_loss(icma.project(gi, head_i), icma.project(gt, head_t), tau1=0.3)

    assert T.grad_check(f, params) < 1e-6
