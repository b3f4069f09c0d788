import numpy as np
import pytest

from statflow import (
    frozen_theta_values,
    gradient_fd,
    gradient_frozen_sensitivity,
    objective_value,
    stationary_expectation,
)
from statflow.integrator import InvalidBudget
from statflow.oracle import frozen_values_batch

# small budgets keep the unit suite fast; accuracy is asserted against the
# estimator's own confidence interval, never a bare tolerance
BUDGET = dict(t=60.0, burn_in_frac=0.25, n_replicas=6, dt=0.01)


def test_stationary_expectation_ou(ou, coord_obj):
    # closed form: E_pi x = theta
    est = stationary_expectation(ou, np.array([1.3]), coord_obj.f, seed=0, **BUDGET)
    assert est.ci_half_width > 0
    assert abs(est.value - 1.3) < 4 * est.ci_half_width
    assert est.burn_in == pytest.approx(15.0)


def test_stationary_expectation_reproducible(ou, coord_obj):
    a = stationary_expectation(ou, np.array([0.2]), coord_obj.f, seed=3, **BUDGET)
    b = stationary_expectation(ou, np.array([0.2]), coord_obj.f, seed=3, **BUDGET)
    assert a.value == b.value and a.ci_half_width == b.ci_half_width
    c = stationary_expectation(ou, np.array([0.2]), coord_obj.f, seed=4, **BUDGET)
    assert c.value != a.value


def test_objective_value_propagation(ou, coord_obj):
    est = objective_value(ou, coord_obj, np.array([1.5]), seed=1, **BUDGET)
    gap = est.expectation.value - coord_obj.beta_target
    assert est.value == pytest.approx(gap * gap)
    assert est.ci_half_width >= est.expectation.ci_half_width ** 2


def test_gradient_fd_ou(ou, coord_obj):
    # dJ/dtheta = 2 (theta - beta); at theta=1.2, beta=0.7 -> 1.0
    g = gradient_fd(ou, coord_obj, np.array([1.2]), seed=5, **BUDGET)
    assert g.method == "fd"
    assert abs(g.value[0] - 1.0) < 5 * g.ci_half_width[0] + 0.02
    # CRN pairing: without it the quotient noise scales like sd_e/h ~ 7 at
    # this budget; paired it collapses to the O(1) replica-mean spread
    assert g.ci_half_width[0] < 1.0


def test_gradient_fd_bitwise_repeatable(ou, coord_obj):
    a = gradient_fd(ou, coord_obj, np.array([0.9]), seed=2, **BUDGET)
    b = gradient_fd(ou, coord_obj, np.array([0.9]), seed=2, **BUDGET)
    assert np.array_equal(a.value, b.value)


def test_gradient_frozen_sensitivity_ou(ou, coord_obj):
    g = gradient_frozen_sensitivity(ou, coord_obj, np.array([1.2]), seed=6, **BUDGET)
    assert g.method == "sensitivity"
    assert abs(g.value[0] - 1.0) < 5 * g.ci_half_width[0] + 0.02


def test_frozen_theta_values_cache(ou, coord_obj):
    cache = frozen_theta_values(ou, coord_obj, np.array([1.5]), seed=7, **BUDGET)
    beta = coord_obj.beta_target
    gap = cache.e_pi_f - beta
    assert cache.j_hat(beta) == pytest.approx(gap * gap)
    assert np.allclose(cache.grad_j_hat(beta), 2.0 * gap * cache.grad_e_pi_f)
    # OU sensitivity is exactly 1 in the long-run limit
    assert abs(cache.grad_e_pi_f[0] - 1.0) < 5 * cache.grad_hw[0] + 0.02


def test_batch_rows_independent_of_composition(ou, coord_obj):
    seqs = [np.random.SeedSequence([11, i]) for i in range(3)]
    thetas = np.array([[0.1], [0.8], [1.5]])
    batch = frozen_values_batch(ou, coord_obj, thetas, seed_seqs=seqs, **BUDGET)
    solo = frozen_values_batch(ou, coord_obj, thetas[1:2],
                               seed_seqs=[np.random.SeedSequence([11, 1])], **BUDGET)
    assert batch[1].e_pi_f == solo[0].e_pi_f
    assert np.array_equal(batch[1].grad_e_pi_f, solo[0].grad_e_pi_f)


def test_budget_validation(ou, coord_obj):
    with pytest.raises(InvalidBudget):
        stationary_expectation(ou, np.array([0.0]), coord_obj.f, t=0.05, dt=0.01)
    with pytest.raises(InvalidBudget):
        stationary_expectation(ou, np.array([0.0]), coord_obj.f, t=10.0, dt=0.01,
                               burn_in_frac=1.0)
