import numpy as np
import pytest

from geco.errors import DimensionError, OracleUndefinedError
from geco.field import (
    cosine_similarity,
    eval_field,
    geco_loss_and_grads,
    interpolate,
    monte_carlo_field,
    oracle_field,
    target_field,
)
from geco.net import FieldParams, NetworkSpec, finite_difference_grad, init_network, max_relative_error
from geco.schedule import DecaySchedule


def test_interpolate_examples():
    a, e = np.array([1.0, 0.0]), np.array([0.0, 1.0])
    np.testing.assert_array_equal(interpolate(a, e, 0.0), e)
    np.testing.assert_array_equal(interpolate(a, e, 1.0), a)
    np.testing.assert_array_equal(interpolate(a, e, 0.5), [0.5, 0.5])
    with pytest.raises(DimensionError):
        interpolate(a, np.zeros(3), 0.5)


def test_target_examples():
    a, e = np.array([1.0, 0.0]), np.zeros(2)
    np.testing.assert_array_equal(target_field(a, e, 1.0), [0.0, 0.0])
    np.testing.assert_array_equal(target_field(a, e, 0.05), [-4.0, 0.0])
    np.testing.assert_allclose(target_field(a, e, 0.55), [-2.0, 0.0], atol=1e-15)


def test_eval_field_zero_and_pure():
    spec = NetworkSpec(4, 2, (8,))
    p = init_network(spec, 0)
    z = p.zeros_like()
    x, s = np.array([0.3, -0.2]), np.array([1.0, 0.5])
    assert np.all(eval_field(z, x, s) == 0)
    np.testing.assert_array_equal(eval_field(p, x, s), eval_field(p, x, s))
    with pytest.raises(DimensionError):
        eval_field(p, np.zeros(3), s)


def test_loss_hand_evaluated():
    spec = NetworkSpec(4, 2, (8,))
    z = init_network(spec, 0).zeros_like()
    loss, _ = geco_loss_and_grads(z, np.array([[0.0, 0.0]]), np.array([[1.0, 0.0]]), DecaySchedule(), gamma=0.5, eps=np.zeros(2))
    assert loss == pytest.approx((4 * 0.5 / 0.9) ** 2, rel=1e-12)
    assert loss == pytest.approx(4.938, abs=1e-3)


def test_loss_zero_for_perfect_affine_fit():
    # one sample; an affine net whose bias equals the target gives zero loss
    a, eps, g = np.array([1.0, -1.0]), np.array([0.5, 0.25]), 0.3
    tgt = target_field(a, eps, g)
    spec = NetworkSpec(4, 2, ())
    p = FieldParams(spec, [np.zeros((2, 4))], [tgt.copy()])
    loss, grads = geco_loss_and_grads(p, np.array([[0.1, 0.2]]), a[None], DecaySchedule(), gamma=g, eps=eps[None])
    assert loss == 0.0
    assert np.all(grads.flat() == 0)


def test_loss_gradcheck():
    rng = np.random.default_rng(1)
    spec = NetworkSpec(6, 4, (7, 5))
    p = init_network(spec, 2)
    p = FieldParams(spec, p.weights, [rng.normal(0, 0.3, b.shape) for b in p.biases])
    conds, chunks = rng.normal(size=(3, 2)), rng.normal(size=(3, 4))
    g, eps = rng.uniform(size=3), rng.normal(size=(3, 4))
    sched = DecaySchedule(4.0, 0.5)

    def loss(q):
        return geco_loss_and_grads(q, conds, chunks, sched, gamma=g, eps=eps)[0]

    _, grads = geco_loss_and_grads(p, conds, chunks, sched, gamma=g, eps=eps)
    assert max_relative_error(grads.flat(), finite_difference_grad(p, loss).flat()) < 1e-4


def test_loss_rejects_empty_batch():
    p = init_network(NetworkSpec(4, 2, (3,)), 0)
    with pytest.raises(ValueError):
        geco_loss_and_grads(p, np.zeros((0, 2)), np.zeros((0, 2)), DecaySchedule(), rng=np.random.default_rng(0))


def test_gamma_is_not_a_network_input():
    # the field signature has no time slot: input width is chunk + condition
    p = init_network(NetworkSpec(34, 32, (4,)), 0)
    assert eval_field(p, np.zeros(32), np.zeros(2)).shape == (32,)
    with pytest.raises(DimensionError):
        eval_field(init_network(NetworkSpec(35, 32, (4,)), 0), np.zeros(32), np.zeros(2))


# --- oracle ---


def test_oracle_vanishes_at_single_mode():
    mu = np.array([0.5, -0.25, 1.0])
    np.testing.assert_allclose(oracle_field([(1.0, mu)], mu), 0.0, atol=1e-12)


def test_oracle_symmetric_modes_cancel_at_midpoint_direction():
    mu = np.array([1.0, 0.0])
    f = oracle_field([(0.5, mu), (0.5, -mu)], np.zeros(2))
    np.testing.assert_allclose(f, 0.0, atol=1e-12)


def test_oracle_constant_slope_near_single_mode():
    sched = DecaySchedule(4.0, 0.1)
    rng = np.random.default_rng(3)
    mu = rng.normal(size=8)
    for _ in range(10):
        d = rng.normal(size=8)
        x = mu + 0.15 * d / np.linalg.norm(d)
        f = oracle_field([(1.0, mu)], x, sched)
        np.testing.assert_allclose(f, sched.slope * (x - mu), rtol=0.05)


def test_oracle_matches_monte_carlo():
    sched = DecaySchedule(4.0, 0.1)
    rng = np.random.default_rng(4)
    mus = [rng.normal(size=4) * 0.6 for _ in range(2)]
    modes = [(0.5, mus[0]), (0.5, mus[1])]
    for i in range(10):
        j = rng.integers(2)
        g = rng.uniform(0.05, 0.9)
        x = g * mus[j] + (1 - g) * rng.normal(size=4)
        q = oracle_field(modes, x, sched, 4096)
        mc = monte_carlo_field(modes, x, sched, 1_000_000, np.random.default_rng(100 + i))
        assert np.linalg.norm(q - mc) / np.linalg.norm(q) < 0.02


def test_oracle_batch_equals_single():
    mus = [np.array([1.0, 0.0]), np.array([0.0, 1.0])]
    xs = np.array([[0.2, 0.3], [-1.0, 2.0]])
    batch = oracle_field([(1, mus[0]), (1, mus[1])], xs)
    for i in range(2):
        np.testing.assert_allclose(batch[i], oracle_field([(1, mus[0]), (1, mus[1])], xs[i]), rtol=1e-12)


def test_oracle_posterior_and_errors():
    mus = [np.array([1.0, 0.0]), np.array([-1.0, 0.0])]
    _, post = oracle_field([(1, mus[0]), (1, mus[1])], np.array([0.95, 0.0]), return_posterior=True)
    assert post.sum() == pytest.approx(1.0) and post[0] > 0.99
    with pytest.raises(ValueError):
        oracle_field([(1, mus[0])], np.zeros(2), n_nodes=0)
    with pytest.raises(DimensionError):
        oracle_field([(1, mus[0])], np.zeros(3))
    with pytest.raises(OracleUndefinedError):
        oracle_field([(1, mus[0])], np.array([np.inf, 0.0]))


def test_cosine_similarity_handles_zero():
    np.testing.assert_array_equal(cosine_similarity(np.zeros(3), np.ones(3)), [0.0])
    assert cosine_similarity(np.array([1.0, 0]), np.array([2.0, 0]))[0] == pytest.approx(1.0)
