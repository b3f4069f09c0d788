"""SDE model containers, built-in model families, and assumption spot checks.

A model is a plain container of coefficient callables for

    dX_t = mu(X_t, theta) dt + sigma(X_t, theta) dW_t,   X in R^d, theta in R^ell,

together with the first-order Jacobians needed to drive the tangent line.
Every callable is vectorized over leading batch axes: ``drift`` accepts ``x``
of shape ``(..., d)`` and ``theta`` of shape ``(..., ell)`` and returns
``(..., d)``; the same convention holds for the other coefficients.  The
Jacobian of a map R^n -> R^m is stored as an m x n array, so
``drift_jac_x[i, k] = d mu_i / d x_k`` and
``diffusion_jac_x[i, j, k] = d sigma_ij / d x_k``.

Assumption checks are sampled: the underlying conditions are global, so a
check can falsify but never prove them.  Each check returns an
:class:`AssumptionReport` with the convention ``worst_violation <= 0`` exactly
when ``holds`` is true.
"""

from __future__ import annotations

import dataclasses
from typing import Callable

import numpy as np

__all__ = [
    "DISSIPATIVITY_FACTOR",
    "InvalidParameterError",
    "SdeModel",
    "ObjectiveSpec",
    "AssumptionReport",
    "make_ou_model",
    "make_tanh_model",
    "coordinate_objective",
    "mean_objective",
    "check_dissipativity",
    "check_lipschitz_and_growth",
    "jacobian_consistency",
    "objective_consistency",
]

# Weight on the squared diffusion mismatch in the dissipativity inequality.
DISSIPATIVITY_FACTOR = 3.5


class InvalidParameterError(ValueError):
    """Model, objective, or budget parameters violate a structural constraint."""


@dataclasses.dataclass(frozen=True)
class SdeModel:
    """Coefficient bundle for one parametric SDE family.

    Parameters
    ----------
    d, ell
        State and parameter dimensions.
    drift, diffusion
        ``(..., d), (..., ell) -> (..., d)`` and ``-> (..., d, d)``.
    drift_jac_x, drift_jac_theta
        ``-> (..., d, d)`` and ``-> (..., d, ell)``.
    diffusion_jac_x, diffusion_jac_theta
        ``-> (..., d, d, d)`` and ``-> (..., d, d, ell)``, indexed
        ``[i, j, k] = d sigma_ij / d (x_k or theta_k)``.

    All callables must be pure and deterministic; repeated evaluation at the
    same point must be bitwise identical.
    """

    d: int
    ell: int
    drift: Callable[[np.ndarray, np.ndarray], np.ndarray]
    diffusion: Callable[[np.ndarray, np.ndarray], np.ndarray]
    drift_jac_x: Callable[[np.ndarray, np.ndarray], np.ndarray]
    drift_jac_theta: Callable[[np.ndarray, np.ndarray], np.ndarray]
    diffusion_jac_x: Callable[[np.ndarray, np.ndarray], np.ndarray]
    diffusion_jac_theta: Callable[[np.ndarray, np.ndarray], np.ndarray]
    kind: str = "custom"
    params: dict = dataclasses.field(default_factory=dict)

    def __post_init__(self) -> None:
        if int(self.d) < 1 or int(self.ell) < 1:
            raise InvalidParameterError(
                f"dimensions must be positive, got d={self.d}, ell={self.ell}"
            )
        object.__setattr__(self, "d", int(self.d))
        object.__setattr__(self, "ell", int(self.ell))


@dataclasses.dataclass(frozen=True)
class ObjectiveSpec:
    """Scalar readout f with its gradient row and the target level.

    ``f`` maps ``(..., d) -> (...,)`` and ``f_grad`` returns the gradient row
    as a flat ``(..., d)`` array; it always multiplies the tangent state from
    the left, which is the row-vector convention.  ``grad_bound`` is the
    declared global bound B with ``|f_grad| <= B`` everywhere.
    """

    f: Callable[[np.ndarray], np.ndarray]
    f_grad: Callable[[np.ndarray], np.ndarray]
    beta_target: float
    grad_bound: float
    kind: str = "custom"

    def __post_init__(self) -> None:
        if not np.isfinite(self.beta_target):
            raise InvalidParameterError("beta_target must be finite")
        if not (np.isfinite(self.grad_bound) and self.grad_bound > 0):
            raise InvalidParameterError("grad_bound must be a positive finite number")
        object.__setattr__(self, "beta_target", float(self.beta_target))
        object.__setattr__(self, "grad_bound", float(self.grad_bound))


@dataclasses.dataclass(frozen=True)
class AssumptionReport:
    """Outcome of one sampled assumption check.

    ``worst_violation`` follows the residual convention LHS - RHS of the
    checked inequality, so ``worst_violation <= 0`` exactly when ``holds``.
    ``beta_hat`` carries the check-specific constant estimate: the
    dissipativity margin, the Lipschitz constant, or the worst relative
    Jacobian discrepancy (see each check's docstring).
    """

    check: str
    holds: bool
    worst_violation: float
    witness: tuple | None
    beta_hat: float
    samples_used: int
    details: dict = dataclasses.field(default_factory=dict)


def _diag_embed(batch_shape: tuple, d: int, values) -> np.ndarray:
    """Return a (*batch_shape, d, d) array with ``values`` on the diagonal."""
    out = np.zeros(batch_shape + (d, d))
    idx = np.arange(d)
    out[..., idx, idx] = values
    return out


def make_ou_model(a: float, sigma_const: float, d: int = 1) -> SdeModel:
    """Ornstein-Uhlenbeck family: mu = a (theta - x), sigma = sigma_const I.

    Stationary law is the product of N(theta_i, sigma_const^2 / (2 a)).
    Requires a > 0 (mean reversion) and sigma_const >= 0.
    """
    a = float(a)
    sigma_const = float(sigma_const)
    d = int(d)
    if not (a > 0):
        raise InvalidParameterError(f"mean-reversion rate must be positive, got a={a}")
    if sigma_const < 0:
        raise InvalidParameterError(f"sigma_const must be nonnegative, got {sigma_const}")

    def drift(x, theta):
        x = np.asarray(x, dtype=float)
        theta = np.asarray(theta, dtype=float)
        return a * (theta - x)

    def diffusion(x, theta):
        x = np.asarray(x, dtype=float)
        return _diag_embed(x.shape[:-1], d, sigma_const)

    def drift_jac_x(x, theta):
        x = np.asarray(x, dtype=float)
        return _diag_embed(x.shape[:-1], d, -a)

    def drift_jac_theta(x, theta):
        x = np.asarray(x, dtype=float)
        return _diag_embed(x.shape[:-1], d, a)

    def diffusion_jac_x(x, theta):
        x = np.asarray(x, dtype=float)
        return np.zeros(x.shape[:-1] + (d, d, d))

    def diffusion_jac_theta(x, theta):
        x = np.asarray(x, dtype=float)
        return np.zeros(x.shape[:-1] + (d, d, d))

    return SdeModel(
        d=d,
        ell=d,
        drift=drift,
        diffusion=diffusion,
        drift_jac_x=drift_jac_x,
        drift_jac_theta=drift_jac_theta,
        diffusion_jac_x=diffusion_jac_x,
        diffusion_jac_theta=diffusion_jac_theta,
        kind="ou",
        params={"a": a, "sigma": sigma_const, "d": d},
    )


def make_tanh_model(a: float, c: float, s0: float, s1: float, d: int = 1) -> SdeModel:
    """Nonlinear family: mu = -a x + c tanh(x) + theta, sigma = (s0 + s1 tanh(x_1)) I.

    The constructor enforces the dissipativity margin

        a - |c| - (7/2) s1^2 d > 0,

    since tanh is 1-Lipschitz and the diffusion mismatch is bounded by
    d s1^2 |dx_1|^2 in squared Frobenius norm.
    """
    a = float(a)
    c = float(c)
    s0 = float(s0)
    s1 = float(s1)
    d = int(d)
    margin = a - abs(c) - DISSIPATIVITY_FACTOR * s1 * s1 * d
    if not (margin > 0):
        raise InvalidParameterError(
            "dissipativity margin a - |c| - (7/2) s1^2 d = "
            f"{margin:.6g} is not positive (a={a}, c={c}, s1={s1}, d={d})"
        )

    def drift(x, theta):
        x = np.asarray(x, dtype=float)
        theta = np.asarray(theta, dtype=float)
        return -a * x + c * np.tanh(x) + theta

    def diffusion(x, theta):
        x = np.asarray(x, dtype=float)
        s = s0 + s1 * np.tanh(x[..., 0])
        return _diag_embed(x.shape[:-1], d, s[..., None])

    def drift_jac_x(x, theta):
        x = np.asarray(x, dtype=float)
        sech2 = 1.0 - np.tanh(x) ** 2
        return _diag_embed(x.shape[:-1], d, -a + c * sech2)

    def drift_jac_theta(x, theta):
        x = np.asarray(x, dtype=float)
        return _diag_embed(x.shape[:-1], d, 1.0)

    def diffusion_jac_x(x, theta):
        x = np.asarray(x, dtype=float)
        out = np.zeros(x.shape[:-1] + (d, d, d))
        sech2 = 1.0 - np.tanh(x[..., 0]) ** 2
        idx = np.arange(d)
        # sigma depends on x only through its first coordinate
        out[..., idx, idx, 0] = (s1 * sech2)[..., None]
        return out

    def diffusion_jac_theta(x, theta):
        x = np.asarray(x, dtype=float)
        return np.zeros(x.shape[:-1] + (d, d, d))

    return SdeModel(
        d=d,
        ell=d,
        drift=drift,
        diffusion=diffusion,
        drift_jac_x=drift_jac_x,
        drift_jac_theta=drift_jac_theta,
        diffusion_jac_x=diffusion_jac_x,
        diffusion_jac_theta=diffusion_jac_theta,
        kind="tanh",
        params={"a": a, "c": c, "s0": s0, "s1": s1, "d": d},
    )


def coordinate_objective(d: int, beta_target: float, index: int = 0) -> ObjectiveSpec:
    """f(x) = x_index, with |f_grad| = 1 everywhere."""
    d = int(d)
    index = int(index)
    if not (0 <= index < d):
        raise InvalidParameterError(f"index {index} out of range for d={d}")

    def f(x):
        return np.asarray(x, dtype=float)[..., index]

    def f_grad(x):
        x = np.asarray(x, dtype=float)
        out = np.zeros_like(x)
        out[..., index] = 1.0
        return out

    return ObjectiveSpec(f=f, f_grad=f_grad, beta_target=beta_target, grad_bound=1.0,
                         kind="coordinate")


def mean_objective(d: int, beta_target: float) -> ObjectiveSpec:
    """f(x) = mean(x), with |f_grad| = 1/sqrt(d)."""
    d = int(d)

    def f(x):
        return np.asarray(x, dtype=float).mean(axis=-1)

    def f_grad(x):
        x = np.asarray(x, dtype=float)
        return np.full_like(x, 1.0 / d)

    return ObjectiveSpec(f=f, f_grad=f_grad, beta_target=beta_target,
                         grad_bound=1.0 / np.sqrt(d), kind="mean")


def _sample_ball(rng: np.random.Generator, n: int, dim: int, radius: float) -> np.ndarray:
    """Uniform samples from the centered ball of the given radius."""
    v = rng.standard_normal((n, dim))
    v /= np.maximum(np.linalg.norm(v, axis=1, keepdims=True), 1e-300)
    r = radius * rng.random((n, 1)) ** (1.0 / dim)
    return v * r


def check_dissipativity(
    model: SdeModel,
    n_pairs: int = 2000,
    radius: float = 5.0,
    factor: float = DISSIPATIVITY_FACTOR,
    rng_seed: int = 0,
) -> AssumptionReport:
    """Sampled one-sided dissipativity check.

    For pairs (x1, x2) and parameters theta drawn uniformly from balls of the
    given radius, evaluates

        L = <mu(x1,th) - mu(x2,th), x1 - x2> + factor |sigma(x1,th) - sigma(x2,th)|_F^2

    and reports ``beta_hat = inf -L / |x1 - x2|^2`` over the sample.
    ``holds`` means ``beta_hat > 0``; the witness is the worst pair.
    Coincident pairs carry no information and are skipped.
    """
    rng = np.random.default_rng(rng_seed)
    x1 = _sample_ball(rng, n_pairs, model.d, radius)
    x2 = _sample_ball(rng, n_pairs, model.d, radius)
    th = _sample_ball(rng, n_pairs, model.ell, radius)
    dx = x1 - x2
    gap2 = np.sum(dx * dx, axis=1)
    keep = gap2 > 1e-24
    if not np.any(keep):
        raise InvalidParameterError("all sampled pairs were coincident; increase n_pairs")
    dmu = model.drift(x1, th) - model.drift(x2, th)
    dsig = model.diffusion(x1, th) - model.diffusion(x2, th)
    lhs = np.sum(dmu * dx, axis=1) + float(factor) * np.sum(dsig * dsig, axis=(1, 2))
    ratio = np.where(keep, lhs / np.where(keep, gap2, 1.0), -np.inf)
    worst_idx = int(np.argmax(ratio))
    worst = float(ratio[worst_idx])
    beta_hat = -worst
    return AssumptionReport(
        check="dissipativity",
        holds=bool(beta_hat > 0),
        worst_violation=worst,
        witness=(x1[worst_idx].copy(), x2[worst_idx].copy(), th[worst_idx].copy()),
        beta_hat=beta_hat,
        samples_used=int(np.count_nonzero(keep)),
        details={"factor": float(factor), "radius": float(radius)},
    )


def check_lipschitz_and_growth(
    model: SdeModel,
    n_points: int = 2000,
    radius: float = 5.0,
    rng_seed: int = 0,
) -> AssumptionReport:
    """Sampled joint Lipschitz estimate plus zero-point growth bound.

    The best constant C against the sum norm |dx| + |dtheta| is the supremum
    of the Jacobian operator norms, so ``beta_hat`` is the sampled

        max(|mu_x|_2, |mu_theta|_2) + max(|sigma_x|_2, |sigma_theta|_2)

    (diffusion Jacobians flattened to (d^2) x n matrices).  The condition is
    existential, so ``holds`` simply means every sampled quantity is finite;
    ``details`` carries the drift and diffusion constants separately, the
    sampled sup of max(|mu(0,theta)|, |sigma(0,theta)|_F), and a pairwise
    difference-quotient cross check.
    """
    rng = np.random.default_rng(rng_seed)
    xs = _sample_ball(rng, n_points, model.d, radius)
    ths = _sample_ball(rng, n_points, model.ell, radius)

    mu_x = np.linalg.matrix_norm(model.drift_jac_x(xs, ths), ord=2)
    mu_th = np.linalg.matrix_norm(model.drift_jac_theta(xs, ths), ord=2)
    sig_x = model.diffusion_jac_x(xs, ths).reshape(n_points, model.d * model.d, model.d)
    sig_th = model.diffusion_jac_theta(xs, ths).reshape(n_points, model.d * model.d, model.ell)
    sig_x_n = np.linalg.matrix_norm(sig_x, ord=2)
    sig_th_n = np.linalg.matrix_norm(sig_th, ord=2)

    c_drift_pts = np.maximum(mu_x, mu_th)
    c_drift = float(np.max(c_drift_pts))
    c_diff = float(np.max(np.maximum(sig_x_n, sig_th_n)))
    worst_idx = int(np.argmax(c_drift_pts))

    # cross check with raw difference quotients on half the sample
    m = n_points // 2
    num = (
        np.linalg.norm(model.drift(xs[:m], ths[:m]) - model.drift(xs[m:2 * m], ths[m:2 * m]), axis=1)
        + np.linalg.norm(
            (model.diffusion(xs[:m], ths[:m]) - model.diffusion(xs[m:2 * m], ths[m:2 * m])).reshape(m, -1),
            axis=1,
        )
    )
    den = (
        np.linalg.norm(xs[:m] - xs[m:2 * m], axis=1)
        + np.linalg.norm(ths[:m] - ths[m:2 * m], axis=1)
    )
    ok = den > 1e-12
    pair_max = float(np.max(num[ok] / den[ok])) if np.any(ok) else 0.0

    mu0 = model.drift(np.zeros((n_points, model.d)), ths)
    sig0 = model.diffusion(np.zeros((n_points, model.d)), ths)
    zero_bound = float(
        max(
            np.max(np.linalg.norm(mu0, axis=1)),
            np.max(np.linalg.norm(sig0.reshape(n_points, -1), axis=1)),
        )
    )

    beta_hat = c_drift + c_diff
    finite = bool(np.isfinite(beta_hat) and np.isfinite(zero_bound) and np.isfinite(pair_max))
    return AssumptionReport(
        check="lipschitz_and_growth",
        holds=finite,
        worst_violation=0.0 if finite else float("inf"),
        witness=(xs[worst_idx].copy(), ths[worst_idx].copy()),
        beta_hat=float(beta_hat),
        samples_used=n_points,
        details={
            "lipschitz_drift": c_drift,
            "lipschitz_diffusion": c_diff,
            "zero_point_bound": zero_bound,
            "pairwise_max_ratio": pair_max,
            "radius": float(radius),
        },
    )


def _central_fd(fn, x, th, wrt: str, step_scale: float) -> np.ndarray:
    """Central finite differences of fn(x, th) along each coordinate of x or th."""
    base = np.asarray(fn(x, th), dtype=float)
    target = x if wrt == "x" else th
    n = target.shape[-1]
    h = step_scale * (1.0 + np.linalg.norm(target, axis=-1))  # (n_points,)
    out = np.empty(base.shape + (n,))
    for k in range(n):
        shift = np.zeros_like(target)
        shift[..., k] = h
        if wrt == "x":
            hi = np.asarray(fn(x + shift, th), dtype=float)
            lo = np.asarray(fn(x - shift, th), dtype=float)
        else:
            hi = np.asarray(fn(x, th + shift), dtype=float)
            lo = np.asarray(fn(x, th - shift), dtype=float)
        denom = (2.0 * h).reshape((-1,) + (1,) * (base.ndim - 1))
        out[..., k] = (hi - lo) / denom
    return out


def jacobian_consistency(
    model: SdeModel,
    n_points: int = 50,
    radius: float = 5.0,
    fd_step: float = 1e-6,
    tol: float = 1e-4,
    rng_seed: int = 0,
) -> AssumptionReport:
    """Compare analytic Jacobians against central finite differences.

    The step is ``fd_step * (1 + |point|)`` per sampled point. The relative
    error of a Jacobian block is ``max|A - F| / max(1, max|A|)``; ``beta_hat``
    is the worst relative error over all four blocks and sampled points, and
    ``holds`` means it does not exceed ``tol``.
    """
    rng = np.random.default_rng(rng_seed)
    xs = _sample_ball(rng, n_points, model.d, radius)
    ths = _sample_ball(rng, n_points, model.ell, radius)

    blocks = {
        "drift_jac_x": (model.drift, model.drift_jac_x, "x"),
        "drift_jac_theta": (model.drift, model.drift_jac_theta, "theta"),
        "diffusion_jac_x": (model.diffusion, model.diffusion_jac_x, "x"),
        "diffusion_jac_theta": (model.diffusion, model.diffusion_jac_theta, "theta"),
    }
    worst = -np.inf
    worst_witness: tuple | None = None
    per_block: dict[str, float] = {}
    for name, (fn, jac, wrt) in blocks.items():
        analytic = np.asarray(jac(xs, ths), dtype=float)
        fd = _central_fd(fn, xs, ths, wrt, fd_step)
        flat_axes = tuple(range(1, analytic.ndim))
        err = np.max(np.abs(analytic - fd), axis=flat_axes)
        scale = np.maximum(1.0, np.max(np.abs(analytic), axis=flat_axes))
        rel = err / scale
        i = int(np.argmax(rel))
        per_block[name] = float(rel[i])
        if rel[i] > worst:
            worst = float(rel[i])
            worst_witness = (xs[i].copy(), ths[i].copy(), name)
    return AssumptionReport(
        check="jacobian_consistency",
        holds=bool(worst <= tol),
        worst_violation=float(worst - tol),
        witness=worst_witness,
        beta_hat=float(worst),
        samples_used=n_points,
        details={"tol": float(tol), "fd_step": float(fd_step), **per_block},
    )


def objective_consistency(
    objective: ObjectiveSpec,
    d: int,
    n_points: int = 200,
    radius: float = 5.0,
    fd_step: float = 1e-6,
    tol: float = 1e-4,
    rng_seed: int = 0,
) -> AssumptionReport:
    """Check f_grad against central differences of f and the declared bound."""
    rng = np.random.default_rng(rng_seed)
    xs = _sample_ball(rng, n_points, int(d), radius)
    grads = np.asarray(objective.f_grad(xs), dtype=float)
    h = fd_step * (1.0 + np.linalg.norm(xs, axis=-1))
    fd = np.empty_like(grads)
    for k in range(int(d)):
        shift = np.zeros_like(xs)
        shift[..., k] = h
        fd[..., k] = (np.asarray(objective.f(xs + shift), dtype=float)
                      - np.asarray(objective.f(xs - shift), dtype=float)) / (2.0 * h)
    err = np.max(np.abs(grads - fd), axis=-1)
    scale = np.maximum(1.0, np.max(np.abs(grads), axis=-1))
    rel = err / scale
    i = int(np.argmax(rel))
    worst = float(rel[i])
    grad_norms = np.linalg.norm(grads, axis=-1)
    bound_margin = float(objective.grad_bound - np.max(grad_norms))
    holds = bool(worst <= tol and bound_margin >= -1e-12)
    return AssumptionReport(
        check="objective_consistency",
        holds=holds,
        worst_violation=float(max(worst - tol, -bound_margin)),
        witness=(xs[i].copy(),),
        beta_hat=worst,
        samples_used=n_points,
        details={"tol": float(tol), "grad_bound_margin": bound_margin},
    )
