"""Replica-based oracles for stationary expectations, objective values, and gradients.

Every oracle runs a small family of independent frozen-theta simulations,
time-averages after a burn-in fraction, and reports a 95% Student-t interval
across replica means.  Gradients come in two flavors that must agree within
joint confidence intervals:

  * ``gradient_fd``: central finite differences of the objective value in
    theta, with mandatory common random numbers across the +h and -h runs;
  * ``gradient_frozen_sensitivity``: the product form
    2 (E f - beta) * E[f_grad(X) Xtilde], built from two independent long-run
    averages of the frozen pair simulation.
"""

from __future__ import annotations

import dataclasses

import numpy as np
from scipy import stats

from statflow.integrator import (
    DIVERGENCE_GUARD,
    DivergenceError,
    InvalidBudget,
    _step_frozen,
    _step_x,
    streams_from_seedseq,
)
from statflow.models import ObjectiveSpec, SdeModel

__all__ = [
    "ErgodicEstimate",
    "ObjectiveEstimate",
    "GradientEstimate",
    "OracleCache",
    "stationary_expectation",
    "objective_value",
    "gradient_fd",
    "gradient_frozen_sensitivity",
    "frozen_theta_values",
    "frozen_values_batch",
]

# Sub-stream domain tags so distinct oracle roles never share increments.
_TAG_STATIONARY = 90
_TAG_FD = 253
_TAG_VALUE_LINE = 160
_TAG_SENS_LINE = 176

_EPS = float(np.finfo(float).eps)


@dataclasses.dataclass(frozen=True)
class ErgodicEstimate:
    """Stationary expectation estimate with a 95% replica CI."""

    value: float
    ci_half_width: float
    t_used: float
    burn_in: float
    n_replicas: int


@dataclasses.dataclass(frozen=True)
class ObjectiveEstimate:
    """Objective value (E f - beta)^2 with a delta-method CI."""

    value: float
    ci_half_width: float
    expectation: ErgodicEstimate


@dataclasses.dataclass(frozen=True)
class GradientEstimate:
    """Per-component gradient estimate with 95% half-widths."""

    value: np.ndarray
    ci_half_width: np.ndarray
    method: str
    h: float | None = None


@dataclasses.dataclass(frozen=True)
class OracleCache:
    """Frozen-theta stationary values used by checkpoints and diagnostics.

    Carries E_pi f and grad_theta E_pi f at one theta, with their half-widths
    and the budget that produced them.  Downstream consumers must treat a
    missing cache as an error, never recompute silently.
    """

    theta: np.ndarray
    e_pi_f: float
    grad_e_pi_f: np.ndarray
    e_hw: float
    grad_hw: np.ndarray
    t_budget: float
    n_replicas: int
    refreshed_at: float = 0.0

    def j_hat(self, beta: float) -> float:
        return float((self.e_pi_f - beta) ** 2)

    def grad_j_hat(self, beta: float) -> np.ndarray:
        return 2.0 * (self.e_pi_f - beta) * self.grad_e_pi_f


def _t_quantile(n: int) -> float:
    return float(stats.t.ppf(0.975, n - 1))


def _budget_steps(t: float, burn_in_frac: float, dt: float) -> tuple[int, int]:
    n_steps = int(round(t / dt))
    if n_steps < 10:
        raise InvalidBudget(f"averaging horizon t={t} too short for dt={dt}")
    if not (0.0 <= burn_in_frac < 1.0):
        raise InvalidBudget(f"burn_in_frac must lie in [0, 1), got {burn_in_frac}")
    burn = int(round(burn_in_frac * n_steps))
    return n_steps, burn


def _chunk_size(rows: int, d: int) -> int:
    # cap the per-chunk noise buffer near 32 MB
    return max(256, int(4_000_000 // max(1, rows * d)))


def _x_ensemble_means(model, f_eval, thetas, x0, *, t, burn_in_frac, dt, streams, out_dim=0):
    """Per-replica time averages of f_eval(X) along X-only frozen ensembles.

    thetas has one row per stream; returns (rows,) or (rows, out_dim).
    """
    rows = thetas.shape[0]
    d = model.d
    n_steps, burn = _budget_steps(t, burn_in_frac, dt)
    x = np.array(np.broadcast_to(x0, (rows, d)), dtype=float)
    shape = (rows,) if out_dim == 0 else (rows, out_dim)
    sums = np.zeros(shape)
    chunk = _chunk_size(rows, d)
    k = 0
    while k < n_steps:
        m = min(chunk, n_steps - k)
        dws = np.stack([s.block_w(m, dt, d) for s in streams], axis=0)
        for j in range(m):
            if k + j >= burn:
                sums += f_eval(x)
            x = _step_x(model, thetas, x, dt, dws[:, j, :])
        mx = np.abs(x).max()
        if not np.isfinite(mx) or mx > DIVERGENCE_GUARD:
            raise DivergenceError("oracle ensemble diverged", t=(k + m) * dt)
        k += m
    return sums / float(n_steps - burn)


def _pair_ensemble_means(model, objective, thetas, x0, xt0, *, t, burn_in_frac, dt, streams):
    """Per-replica time averages of f_grad(X) Xtilde along frozen pair ensembles."""
    rows = thetas.shape[0]
    d, ell = model.d, model.ell
    n_steps, burn = _budget_steps(t, burn_in_frac, dt)
    x = np.array(np.broadcast_to(x0, (rows, d)), dtype=float)
    xt = np.array(np.broadcast_to(xt0, (rows, d, ell)), dtype=float)
    sums = np.zeros((rows, ell))
    chunk = _chunk_size(rows, d)
    k = 0
    while k < n_steps:
        m = min(chunk, n_steps - k)
        dws = np.stack([s.block_w(m, dt, d) for s in streams], axis=0)
        for j in range(m):
            if k + j >= burn:
                sums += np.einsum("...j,...jk->...k", objective.f_grad(x), xt)
            x, xt = _step_frozen(model, thetas, x, xt, dt, dws[:, j, :])
        mx = max(np.abs(x).max(), np.abs(xt).max())
        if not np.isfinite(mx) or mx > DIVERGENCE_GUARD:
            raise DivergenceError("oracle tangent ensemble diverged", t=(k + m) * dt)
        k += m
    return sums / float(n_steps - burn)


def _ci(means: np.ndarray, axis: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Mean and 95% t half-width across replicas; degenerate spread gets a floor."""
    n = means.shape[axis]
    if n < 2:
        raise InvalidBudget("need at least 2 replicas for a confidence interval")
    value = means.mean(axis=axis)
    sd = means.std(axis=axis, ddof=1)
    hw = _t_quantile(n) * sd / np.sqrt(n)
    floor = _EPS * (1.0 + np.abs(value))
    return value, np.maximum(hw, floor)


def stationary_expectation(
    model: SdeModel,
    theta,
    f,
    t: float = 500.0,
    burn_in_frac: float = 0.2,
    n_replicas: int = 8,
    dt: float = 0.01,
    seed: int = 0,
    x0=None,
) -> ErgodicEstimate:
    """Estimate E_pi f under the stationary law at frozen theta.

    Each replica time-averages f(X_s) after discarding the first
    ``burn_in_frac`` of the horizon; the CI is the 95% Student-t interval
    across replica means.  A constant f is returned exactly, with the CI
    floored at machine precision instead of zero.
    """
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    x0 = np.zeros(model.d) if x0 is None else np.asarray(x0, dtype=float)
    ss = np.random.SeedSequence([int(seed), _TAG_STATIONARY])
    streams = streams_from_seedseq(ss, n_replicas)
    thetas = np.broadcast_to(theta, (n_replicas, model.ell))
    means = _x_ensemble_means(
        model, lambda x: np.asarray(f(x), dtype=float), thetas, x0,
        t=t, burn_in_frac=burn_in_frac, dt=dt, streams=streams,
    )
    value, hw = _ci(means)
    return ErgodicEstimate(value=float(value), ci_half_width=float(hw),
                           t_used=float(t), burn_in=float(burn_in_frac) * float(t),
                           n_replicas=int(n_replicas))


def objective_value(
    model: SdeModel,
    objective: ObjectiveSpec,
    theta,
    **budget,
) -> ObjectiveEstimate:
    """J(theta) = (E_pi f - beta_target)^2 with a delta-method CI.

    The half-width keeps the second-order term so it stays positive when the
    expectation sits at the target.
    """
    est = stationary_expectation(model, theta, objective.f, **budget)
    gap = est.value - objective.beta_target
    hw = 2.0 * abs(gap) * est.ci_half_width + est.ci_half_width ** 2
    return ObjectiveEstimate(value=float(gap * gap), ci_half_width=float(hw),
                             expectation=est)


def gradient_fd(
    model: SdeModel,
    objective: ObjectiveSpec,
    theta,
    h: float = 1e-2,
    t: float = 500.0,
    burn_in_frac: float = 0.2,
    n_replicas: int = 8,
    dt: float = 0.01,
    seed: int = 0,
) -> GradientEstimate:
    """Central finite differences of the objective in theta, with CRN.

    For each coordinate the +h and -h ensembles consume identical Brownian
    increments (the streams are rebuilt from the same seed material), so the
    difference quotient is a paired per-replica statistic; the CI is the
    Student-t interval of those paired quotients.
    """
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    ell = model.ell
    beta = objective.beta_target
    x0 = np.zeros(model.d)
    value = np.empty(ell)
    hw = np.empty(ell)
    for i in range(ell):
        shift = np.zeros(ell)
        shift[i] = h
        thetas = np.concatenate([
            np.broadcast_to(theta + shift, (n_replicas, ell)),
            np.broadcast_to(theta - shift, (n_replicas, ell)),
        ])
        ss = np.random.SeedSequence([int(seed), _TAG_FD])
        streams = streams_from_seedseq(ss, n_replicas)
        streams += streams_from_seedseq(np.random.SeedSequence([int(seed), _TAG_FD]),
                                        n_replicas)  # identical increments: CRN
        means = _x_ensemble_means(
            model, lambda x: np.asarray(objective.f(x), dtype=float), thetas, x0,
            t=t, burn_in_frac=burn_in_frac, dt=dt, streams=streams,
        )
        e_plus, e_minus = means[:n_replicas], means[n_replicas:]
        g_r = ((e_plus - beta) ** 2 - (e_minus - beta) ** 2) / (2.0 * h)
        value[i], hw[i] = _ci(g_r)
    return GradientEstimate(value=value, ci_half_width=hw, method="fd", h=float(h))


def _value_and_sens(
    model, objective, thetas, *, t, burn_in_frac, n_replicas, dt, seed_seqs,
    x0=None, xt0=None,
):
    """Independent A/B ensembles per theta row: E f from A, E[f_grad X Xtilde] from B.

    Returns arrays (B,), (B,), (B, ell), (B, ell): value, value hw, sens, sens hw.
    """
    n_rows = thetas.shape[0]
    d, ell = model.d, model.ell
    x0 = np.zeros(d) if x0 is None else np.asarray(x0, dtype=float)
    xt0 = np.zeros((d, ell)) if xt0 is None else np.asarray(xt0, dtype=float)

    streams_a, streams_b = [], []
    for ss in seed_seqs:
        a, b = ss.spawn(2)
        streams_a.extend(streams_from_seedseq(a, n_replicas))
        streams_b.extend(streams_from_seedseq(b, n_replicas))
    th_rep = np.repeat(thetas, n_replicas, axis=0)

    means_a = _x_ensemble_means(
        model, lambda x: np.asarray(objective.f(x), dtype=float), th_rep, x0,
        t=t, burn_in_frac=burn_in_frac, dt=dt, streams=streams_a,
    ).reshape(n_rows, n_replicas)
    means_b = _pair_ensemble_means(
        model, objective, th_rep, x0, xt0,
        t=t, burn_in_frac=burn_in_frac, dt=dt, streams=streams_b,
    ).reshape(n_rows, n_replicas, ell)

    val, val_hw = _ci(means_a, axis=1)
    sens, sens_hw = _ci(means_b, axis=1)
    return val, val_hw, sens, sens_hw


def gradient_frozen_sensitivity(
    model: SdeModel,
    objective: ObjectiveSpec,
    theta,
    t: float = 500.0,
    burn_in_frac: float = 0.2,
    n_replicas: int = 8,
    dt: float = 0.01,
    seed: int = 0,
) -> GradientEstimate:
    """Gradient via the product of two independent frozen-theta averages.

    Estimates 2 (E_pi f - beta) E[f_grad(X) Xtilde], where the expectation
    factor comes from an X-only ensemble and the sensitivity factor from an
    independent (X, Xtilde) pair ensemble started at Xtilde = 0.  The CI is
    propagated by the delta method including the cross term.
    """
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    ss = np.random.SeedSequence([int(seed), _TAG_VALUE_LINE, _TAG_SENS_LINE])
    val, val_hw, sens, sens_hw = _value_and_sens(
        model, objective, theta[None, :],
        t=t, burn_in_frac=burn_in_frac, n_replicas=n_replicas, dt=dt,
        seed_seqs=[ss],
    )
    gap = val[0] - objective.beta_target
    value = 2.0 * gap * sens[0]
    hw = 2.0 * (np.abs(sens[0]) * val_hw[0] + abs(gap) * sens_hw[0]
                + val_hw[0] * sens_hw[0])
    return GradientEstimate(value=value, ci_half_width=hw, method="sensitivity")


def frozen_theta_values(
    model: SdeModel,
    objective: ObjectiveSpec,
    theta,
    t: float = 500.0,
    burn_in_frac: float = 0.2,
    n_replicas: int = 8,
    dt: float = 0.01,
    seed: int = 0,
    refreshed_at: float = 0.0,
) -> OracleCache:
    """One-stop frozen-theta oracle: E_pi f and grad_theta E_pi f with CIs."""
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    ss = np.random.SeedSequence([int(seed), _TAG_VALUE_LINE, _TAG_SENS_LINE])
    caches = frozen_values_batch(
        model, objective, theta[None, :],
        t=t, burn_in_frac=burn_in_frac, n_replicas=n_replicas, dt=dt,
        seed_seqs=[ss], refreshed_at=refreshed_at,
    )
    return caches[0]


def frozen_values_batch(
    model: SdeModel,
    objective: ObjectiveSpec,
    thetas: np.ndarray,
    *,
    t: float,
    burn_in_frac: float,
    n_replicas: int,
    dt: float,
    seed_seqs,
    refreshed_at: float = 0.0,
) -> list[OracleCache]:
    """Frozen-theta oracle values for a batch of thetas in one vectorized pass.

    ``seed_seqs`` supplies one SeedSequence per row so a row's draw depends
    only on its own seed material, never on batch composition.
    """
    thetas = np.asarray(thetas, dtype=float)
    val, val_hw, sens, sens_hw = _value_and_sens(
        model, objective, thetas,
        t=t, burn_in_frac=burn_in_frac, n_replicas=n_replicas, dt=dt,
        seed_seqs=list(seed_seqs),
    )
    return [
        OracleCache(
            theta=thetas[i].copy(),
            e_pi_f=float(val[i]),
            grad_e_pi_f=sens[i].copy(),
            e_hw=float(val_hw[i]),
            grad_hw=sens_hw[i].copy(),
            t_budget=float(t),
            n_replicas=int(n_replicas),
            refreshed_at=float(refreshed_at),
        )
        for i in range(thetas.shape[0])
    ]
