import math
from dataclasses import replace

import numpy as np
import pytest

from loftlab.errors import ConfigError, DegenerateKernelError, DimensionError, PreconditionError
from loftlab.tensor import finite_difference_gradient, relative_error
from loftlab.theory import (TheoryConfig, forward_full, forward_subnetwork, grad_full, grad_subnetwork,
                            indicator_expectation, indicator_expectation_mc, init_theory_model,
                            initial_loss_bound, ntk_finite, ntk_infinite, smallest_eigenvalue)
from loftlab.theory.model import patch_dataset

from conftest import theory_data


def small_state(seed, m=8, n=4, xi=1.0):
    data = theory_data(n, seed, p=9)
    cfg = TheoryConfig(m=m, n=n, p=9, xi=xi)
    return init_theory_model(cfg, data, rng=np.random.default_rng(seed + 1))


def away_from_kinks(state, margin=1e-4):
    pre = np.einsum('ijd,rd->irj', state.patches, state.W)
    return np.min(np.abs(pre)) > margin


def test_config_defaults():
    cfg = TheoryConfig(m=32, n=16)
    assert cfg.kappa == pytest.approx(0.25)
    assert cfg.eta_coeff == 1.0
    assert cfg.d == 9
    assert cfg.side == 4


@pytest.mark.parametrize("kwargs", [dict(xi=0.0), dict(xi=1.5), dict(p=15), dict(q=4), dict(m=0),
                                    dict(mask_mode="random"), dict(eta_coeff=0.0), dict(delta=1.0)])
def test_config_rejects_invalid_values(kwargs):
    with pytest.raises(ConfigError):
        TheoryConfig(**dict(dict(m=8, n=4), **kwargs))


def test_init_shapes_and_scales():
    n, m = 6, 32
    data = theory_data(n, 3)
    state = init_theory_model(TheoryConfig(m=m, n=n), data, rng=np.random.default_rng(0))
    assert state.W.shape == (m, 9)
    assert state.a.shape == (m, 16)
    assert np.allclose(np.abs(state.a), 1 / (16 * math.sqrt(m)))
    assert state.patches.shape == (n, 16, 9)
    assert state.eta == pytest.approx(state.lambda0 / n**2)
    assert state.lambda0 > 0


def test_wide_init_moments():
    cfg = TheoryConfig(m=4096, n=4, d_hat=8, q=1)
    state = init_theory_model(cfg, theory_data(4, 13, d_hat=8, q=1), rng=np.random.default_rng(13))
    assert state.W.shape == (4096, 8)
    assert abs(state.W.mean()) <= 3 * cfg.kappa / math.sqrt(4096 * 8)
    assert state.W.var() == pytest.approx(cfg.kappa**2, rel=0.05)
    assert set(np.unique(np.sign(state.a))) == {-1.0, 1.0}


def test_forward_full_scaling():
    state = small_state(4, xi=0.5)
    u = forward_full(state)
    assert np.array_equal(forward_full(state.with_weights(2.0 * state.W)), 2.0 * u)
    assert np.allclose(forward_full(state.with_weights(0.3 * state.W)), 0.3 * u, rtol=1e-12, atol=1e-16)
    assert np.array_equal(forward_full(replace(state, xi=1.0)), 2.0 * u)
    assert np.all(forward_full(state.with_weights(np.zeros_like(state.W))) == 0)


def test_init_is_seeded_by_config():
    data = theory_data(4, 5)
    a = init_theory_model(TheoryConfig(m=8, n=4, seed=11), data)
    b = init_theory_model(TheoryConfig(m=8, n=4, seed=11), data)
    c = init_theory_model(TheoryConfig(m=8, n=4, seed=12), data)
    assert np.array_equal(a.W, b.W) and np.array_equal(a.a, b.a)
    assert not np.array_equal(a.W, c.W)


def test_init_rejects_unnormalized_data():
    X, y = theory_data(4, 0)
    with pytest.raises(PreconditionError):
        init_theory_model(TheoryConfig(m=8, n=4), (2 * X, y))


def test_init_rejects_labels_over_bound():
    X, y = theory_data(4, 0)
    y = y.copy()
    y[0] = 1.5
    with pytest.raises(PreconditionError):
        init_theory_model(TheoryConfig(m=8, n=4), (X, y))


def test_init_checks_shapes():
    X, y = theory_data(4, 0)
    with pytest.raises(DimensionError):
        init_theory_model(TheoryConfig(m=8, n=5), (X, y))
    with pytest.raises(DimensionError):
        init_theory_model(TheoryConfig(m=8, n=4), (X, y[:3]))


def test_full_gradient_matches_finite_differences():
    checked, seed = 0, 0
    while checked < 50:
        state = small_state(seed)
        seed += 1
        if not away_from_kinks(state):
            continue

        def objective(W):
            return 0.5 * float(np.sum((forward_full(state.with_weights(W)) - state.y) ** 2))
        assert relative_error(grad_full(state), finite_difference_gradient(objective, state.W)) < 1e-5
        checked += 1


@pytest.mark.parametrize("xi", [1.0, 0.5])
def test_subnetwork_gradient_matches_finite_differences(xi):
    checked, seed = 0, 100
    while checked < 20:
        state = small_state(seed, xi=xi)
        mask = np.random.default_rng(seed).random(state.m) < 0.5
        seed += 1
        if not mask.any() or not away_from_kinks(state):
            continue

        def objective(W):
            return 0.5 * float(np.sum((forward_subnetwork(state.with_weights(W), mask) - state.y) ** 2))
        grad = grad_subnetwork(state, mask)
        assert np.all(grad[~mask] == 0)
        assert relative_error(grad, finite_difference_gradient(objective, state.W)) < 1e-5
        checked += 1


def test_subnetwork_of_all_filters_drops_the_scaling():
    state = small_state(7, xi=0.25)
    assert np.allclose(forward_subnetwork(state, np.ones(state.m)), forward_full(state) / 0.25, atol=1e-14)
    with pytest.raises(DimensionError):
        forward_subnetwork(state, np.ones(state.m + 1))


def test_indicator_expectation_special_cases(rng):
    u = rng.standard_normal(9)
    v = rng.standard_normal(9)
    v -= (v @ u) / (u @ u) * u
    assert indicator_expectation(u, u) == pytest.approx(0.5)
    assert indicator_expectation(u, -u) == pytest.approx(0.0, abs=1e-12)
    assert indicator_expectation(u, v) == pytest.approx(0.25)
    assert indicator_expectation(u, np.zeros(9)) == 0.0


def test_indicator_expectation_against_sampling(rng):
    for _ in range(3):
        u, v = rng.standard_normal(9), rng.standard_normal(9)
        estimate = indicator_expectation_mc(u, v, 1_000_000, rng)
        assert abs(estimate - indicator_expectation(u, v)) < 2e-3


def test_infinite_kernel_is_positive_definite():
    patches = patch_dataset(theory_data(10, 4)[0], 9)
    H, lambda0 = ntk_infinite(patches)
    assert np.allclose(H, H.T)
    assert lambda0 > 0
    assert lambda0 == pytest.approx(np.linalg.eigvalsh(H)[0])


def test_infinite_kernel_rejects_duplicate_samples():
    X, _ = theory_data(4, 4)
    X = np.concatenate([X, X[:1]])
    with pytest.raises(DegenerateKernelError) as info:
        ntk_infinite(patch_dataset(X, 9), dataset_seed=4)
    assert info.value.dataset_seed == 4


def test_inverse_iteration_matches_eigh(rng):
    A = rng.standard_normal((8, 8))
    H = A @ A.T + 0.1 * np.eye(8)
    assert smallest_eigenvalue(H, "inverse_iteration") == pytest.approx(smallest_eigenvalue(H), rel=1e-8)
    with pytest.raises(ConfigError):
        smallest_eigenvalue(H, "power")


@pytest.mark.slow
def test_finite_kernel_approaches_infinite_kernel():
    data = theory_data(6, 21)
    medians = []
    for m in (128, 512, 2048):
        gaps = []
        for seed in range(20):
            state = init_theory_model(TheoryConfig(m=m, n=6), data, rng=np.random.default_rng(seed))
            gaps.append(np.linalg.norm(ntk_finite(state) - state.H_inf))
        medians.append(np.median(gaps))
    assert medians[0] > medians[1] > medians[2]


def test_initial_loss_within_bound():
    n, losses = 8, []
    data = theory_data(n, 9)
    for seed in range(200):
        state = init_theory_model(TheoryConfig(m=64, n=n), data, rng=np.random.default_rng(seed))
        losses.append(np.sum((state.y - forward_full(state)) ** 2))
    assert np.mean(losses) <= initial_loss_bound(16, 1.0, n)
