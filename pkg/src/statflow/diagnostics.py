"""Diagnostics for the coupled optimization system.

These routines quantify how far a run is from its idealized mean dynamics:
the fluctuation split of the parameter drift, time-windowed integrals of the
fluctuation terms, kappa-cycle detection on the gradient-norm series, moment
growth tracking, exponential decay-rate fits, and quadrature estimates of the
Poisson-equation solutions that control the fluctuation integrals.

Nothing here participates in the bitwise-reproducibility contract of the run
logs; replica noise for the estimators is drawn from a single seeded stream.
"""

from __future__ import annotations

import dataclasses
import math

import numpy as np

from statflow.integrator import (
    AlgorithmState,
    DivergenceError,
    InvalidBudget,
    _step_frozen,
    _step_x,
)
from statflow.models import ObjectiveSpec, SdeModel
from statflow.oracle import OracleCache
from statflow.schedule import Schedule

__all__ = [
    "FluctuationSample",
    "CycleRecord",
    "PoissonEstimate",
    "DecayFit",
    "MomentReport",
    "WindowIntegral",
    "CacheMissError",
    "SparseWindowError",
    "InsufficientSignalError",
    "EstimationFailureError",
    "fluctuation_terms",
    "reconstruction_residual",
    "windowed_fluctuation_integral",
    "dyadic_windows",
    "detect_cycles",
    "mu_for_kappa",
    "moment_tracker",
    "decay_rate_fit",
    "estimate_poisson_solution",
]

_TAG_MOMENTS = 201
_TAG_POISSON = 202


class CacheMissError(RuntimeError):
    """Fluctuation terms were requested without a stationary oracle cache."""


class SparseWindowError(ValueError):
    """A window integral was requested over too few checkpoint samples."""


class InsufficientSignalError(RuntimeError):
    """A decay fit found less than a decade of usable signal above the noise floor."""


class EstimationFailureError(RuntimeError):
    """An adaptive estimator exhausted its budget without meeting its criterion."""


@dataclasses.dataclass(frozen=True)
class FluctuationSample:
    """Drift decomposition at one state: G = grad_j_hat + 2 z1 + 2 z2."""

    t: float
    z1: np.ndarray
    z2: np.ndarray
    g: np.ndarray
    grad_j_hat: np.ndarray
    j_hat: float
    oracle_refreshed_at: float


@dataclasses.dataclass(frozen=True)
class WindowIntegral:
    t_lo: float
    t_hi: float
    value: np.ndarray
    norm: float
    n_samples: int


@dataclasses.dataclass(frozen=True)
class CycleRecord:
    """One kappa-cycle: an upcrossing of the gradient norm and its exit.

    ``exit_reason`` is "band" (norm left [g/2, 2g]), "budget" (the schedule
    integral from t_start reached mu), or "horizon" (series ended first).
    """

    t_start: float
    t_end: float
    grad_at_start: float
    exit_reason: str
    alpha_budget: float
    kappa: float
    mu: float


@dataclasses.dataclass(frozen=True)
class DecayFit:
    """Least-squares fit of log y against t over the usable signal window."""

    rate: float
    intercept: float
    r_squared: float
    t_lo: float
    t_hi: float
    n_points: int
    mode: str
    noise_floor: float


@dataclasses.dataclass(frozen=True)
class MomentReport:
    times: np.ndarray
    m8_running: np.ndarray
    sup4: np.ndarray
    plateau_ratio: float
    growth_exponent: float
    growth_window: tuple
    n_replicas: int
    dt: float


@dataclasses.dataclass(frozen=True)
class PoissonEstimate:
    """Quadrature estimate of a Poisson-equation solution with a tail bound.

    ``value`` integrates the centered transient expectation over [0, t_trunc];
    ``tail_bound`` bounds the discarded remainder using the fitted exponential
    decay rate ``lambda_hat`` (0.0 when the integrand fell below the Monte
    Carlo noise floor before the horizon).
    """

    value: np.ndarray
    norm: float
    tail_bound: float
    t_trunc: float
    lambda_hat: float
    n_replicas: int
    which: str


def fluctuation_terms(
    state: AlgorithmState,
    objective: ObjectiveSpec,
    cache: OracleCache | None,
) -> FluctuationSample:
    """Split the gradient estimate at ``state`` into mean and fluctuation parts.

    z1 = (E_pi f - beta) (f_grad(X) Xtilde - grad E_pi f)
    z2 = (f(Xbar) - E_pi f) (f_grad(X) Xtilde)

    The stationary values come from ``cache``; without one the split is not
    defined and :class:`CacheMissError` is raised.
    """
    if cache is None:
        raise CacheMissError(
            "fluctuation terms need stationary oracle values; no cache was provided"
        )
    beta = objective.beta_target
    sens = np.einsum("j,jk->k", np.asarray(objective.f_grad(state.x), dtype=float),
                     state.x_tilde)
    fb = float(np.asarray(objective.f(state.x_bar), dtype=float))
    e = cache.e_pi_f
    ge = cache.grad_e_pi_f
    gap = e - beta
    return FluctuationSample(
        t=state.t,
        z1=gap * (sens - ge),
        z2=(fb - e) * sens,
        g=2.0 * (fb - beta) * sens,
        grad_j_hat=2.0 * gap * ge,
        j_hat=gap * gap,
        oracle_refreshed_at=cache.refreshed_at,
    )


def reconstruction_residual(sample: FluctuationSample, alpha: float = 1.0) -> float:
    """Max-abs residual of alpha*G - alpha*(grad_j_hat + 2 z1 + 2 z2).

    The split is algebraically exact, so this is a floating-point sanity
    check: it should sit at rounding level regardless of the state.
    """
    r = alpha * (sample.g - (sample.grad_j_hat + 2.0 * sample.z1 + 2.0 * sample.z2))
    return float(np.max(np.abs(r)))


def dyadic_windows(t_min: float, t_max: float) -> list[tuple[float, float]]:
    """All windows [2^k, 2^(k+1)] contained in [t_min, t_max], k integer."""
    if t_min <= 0 or t_max <= t_min:
        raise ValueError("dyadic windows need 0 < t_min < t_max")
    k = math.ceil(math.log2(t_min) - 1e-12)
    out = []
    while 2.0 ** (k + 1) <= t_max * (1 + 1e-12):
        out.append((2.0**k, 2.0 ** (k + 1)))
        k += 1
    return out


def windowed_fluctuation_integral(
    t: np.ndarray,
    z: np.ndarray,
    schedule: Schedule,
    window: tuple[float, float],
    min_samples: int = 10,
) -> WindowIntegral:
    """Trapezoid integral of alpha(t) * z(t) over the checkpoint samples in ``window``.

    Raises :class:`SparseWindowError` when fewer than ``min_samples``
    checkpoints fall inside the window; a sparser grid would make the
    quadrature untrustworthy at the window scale.
    """
    t = np.asarray(t, dtype=float)
    z = np.asarray(z, dtype=float)
    if z.ndim == 1:
        z = z[:, None]
    lo, hi = float(window[0]), float(window[1])
    mask = (t >= lo - 1e-12) & (t <= hi + 1e-12)
    n = int(np.count_nonzero(mask))
    if n < min_samples:
        raise SparseWindowError(
            f"window [{lo}, {hi}] holds {n} checkpoint samples; "
            f"need at least {min_samples}"
        )
    ts = t[mask]
    zs = z[mask]
    weights = schedule.alpha(ts)[:, None]
    value = np.trapezoid(weights * zs, x=ts, axis=0)
    return WindowIntegral(t_lo=lo, t_hi=hi, value=value,
                          norm=float(np.linalg.norm(value)), n_samples=n)


def mu_for_kappa(kappa: float, lipschitz: float) -> float:
    """Schedule budget mu matched to the band width: 3*mu + mu/(8*kappa) = 1/(2L)."""
    if kappa <= 0 or lipschitz <= 0:
        raise ValueError("kappa and lipschitz must be positive")
    return 1.0 / (2.0 * lipschitz * (3.0 + 1.0 / (8.0 * kappa)))


def _interp_crossing(t0, y0, t1, y1, level):
    # linear interpolation; caller guarantees y0 != y1 bracket the level
    w = (level - y0) / (y1 - y0)
    return t0 + w * (t1 - t0)


def detect_cycles(
    t: np.ndarray,
    grad_norm: np.ndarray,
    schedule: Schedule,
    kappa: float,
    *,
    lipschitz: float | None = None,
    mu: float | None = None,
    t_end: float | None = None,
) -> list[CycleRecord]:
    """Find maximal non-overlapping kappa-cycles in a gradient-norm series.

    A cycle opens at the first upcrossing of ``kappa`` (linearly interpolated
    between samples; if the series already starts at or above kappa it opens
    at the first sample with its sampled value).  It closes at the earliest
    of: the norm leaving the band [g/2, 2g] around its opening value
    (interpolated), the schedule integral from the opening time reaching
    ``mu`` (closed form), or the horizon.  Scanning resumes after the close,
    so cycles never overlap.
    """
    t = np.asarray(t, dtype=float)
    g = np.asarray(grad_norm, dtype=float)
    if t.ndim != 1 or t.shape != g.shape or t.size < 2:
        raise ValueError("need matching 1-d t and grad_norm series with >= 2 samples")
    if np.any(np.diff(t) <= 0):
        raise ValueError("t must be strictly increasing")
    if mu is None:
        if lipschitz is None:
            raise ValueError("provide either mu or lipschitz")
        mu = mu_for_kappa(kappa, lipschitz)
    horizon = float(t[-1]) if t_end is None else float(t_end)

    cycles: list[CycleRecord] = []
    i = 0
    n = t.size
    while i < n:
        # locate the opening
        if g[i] >= kappa:
            tau, g_tau = float(t[i]), float(g[i])
            j = i + 1
        else:
            j = i + 1
            while j < n and g[j] < kappa:
                j += 1
            if j >= n:
                break
            tau = _interp_crossing(t[j - 1], g[j - 1], t[j], g[j], kappa)
            g_tau = kappa
        if tau >= horizon:
            break

        lo_band, hi_band = g_tau / 2.0, 2.0 * g_tau
        t_budget = schedule.alpha_integral_inverse(tau, mu)

        sigma = min(horizon, t_budget)
        reason = "horizon" if horizon <= t_budget else "budget"
        prev_t, prev_g = tau, g_tau
        while j < n and t[j] <= sigma:
            if g[j] < lo_band or g[j] > hi_band:
                level = lo_band if g[j] < lo_band else hi_band
                t_cross = _interp_crossing(prev_t, prev_g, t[j], g[j], level)
                if t_cross < sigma:
                    sigma, reason = t_cross, "band"
                break
            prev_t, prev_g = float(t[j]), float(g[j])
            j += 1

        cycles.append(CycleRecord(
            t_start=float(tau), t_end=float(sigma), grad_at_start=float(g_tau),
            exit_reason=reason, alpha_budget=schedule.alpha_integral(tau, sigma),
            kappa=float(kappa), mu=float(mu),
        ))
        # resume strictly after the close
        i = int(np.searchsorted(t, sigma, side="right"))
        if reason == "band" and i < n and g[i] >= kappa and i > 0 and g[i - 1] >= kappa:
            # still above kappa after a band exit: wait for a dip below first
            while i < n and g[i] >= kappa:
                i += 1
    return cycles


def moment_tracker(
    model: SdeModel,
    theta: np.ndarray,
    t_end: float,
    *,
    dt: float = 0.05,
    n_replicas: int = 200,
    seed: int = 0,
    x0: np.ndarray | None = None,
    n_record: int = 41,
) -> MomentReport:
    """Track E|X_t|^8 (running time average) and E[sup_{s<=t} |X_s|^4].

    The running eighth moment should plateau for a dissipative model; the
    running supremum should grow at most polylogarithmically.  The report
    carries a plateau ratio (terminal over midpoint of the running average)
    and the log-log slope of the supremum curve over the last two decades.
    """
    if n_replicas < 100:
        raise InvalidBudget(f"moment tracking needs n_replicas >= 100, got {n_replicas}")
    if t_end <= 0 or dt <= 0:
        raise InvalidBudget("t_end and dt must be positive")
    d = model.d
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    x = np.tile(np.zeros(d) if x0 is None else np.asarray(x0, dtype=float),
                (n_replicas, 1))
    n_steps = int(round(t_end / dt))
    rec_t = np.geomspace(max(dt, 1.0), t_end, n_record)
    rec_steps = np.unique(np.clip(np.round(rec_t / dt).astype(int), 1, n_steps))

    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, _TAG_MOMENTS])))
    sq_sup = np.sum(x * x, axis=-1)          # running max of |X|^2 per replica
    acc8 = 0.0
    times, m8, sup4 = [], [], []
    rec_set = set(int(s) for s in rec_steps)
    root_dt = math.sqrt(dt)

    chunk = max(256, int(4_000_000 // max(1, n_replicas * d)))
    k = 0
    while k < n_steps:
        m = min(chunk, n_steps - k)
        dw = rng.standard_normal((m, n_replicas, d)) * root_dt
        for j in range(m):
            sq = np.sum(x * x, axis=-1)
            acc8 += float(np.mean(sq**4))
            np.maximum(sq_sup, sq, out=sq_sup)
            x = _step_x(model, theta, x, dt, dw[j])
            step = k + j + 1
            if step in rec_set:
                times.append(step * dt)
                m8.append(acc8 / step)
                sup4.append(float(np.mean(sq_sup**2)))
        if not np.all(np.isfinite(x)):
            raise DivergenceError("moment tracking replica diverged", t=(k + m) * dt)
        k += m

    times = np.asarray(times)
    m8 = np.asarray(m8)
    sup4 = np.asarray(sup4)

    mid = int(np.argmin(np.abs(times - 0.5 * t_end)))
    plateau_ratio = float(m8[-1] / m8[mid]) if m8[mid] != 0 else 1.0

    fit_lo = max(times[0], t_end / 100.0)
    sel = times >= fit_lo
    lt = np.log(times[sel])
    ls = np.log(np.maximum(sup4[sel], 1e-300))
    slope = float(np.polyfit(lt, ls, 1)[0]) if np.count_nonzero(sel) >= 3 else float("nan")

    return MomentReport(times=times, m8_running=m8, sup4=sup4,
                        plateau_ratio=plateau_ratio, growth_exponent=slope,
                        growth_window=(float(fit_lo), float(t_end)),
                        n_replicas=n_replicas, dt=dt)


def decay_rate_fit(
    t: np.ndarray,
    y: np.ndarray,
    mode: str = "contraction",
    noise_floor: float | None = None,
) -> DecayFit:
    """Fit y(t) ~ exp(intercept + rate*t) on the stretch above the noise floor.

    The floor defaults to the median of |y| over the final tenth of the
    series; points below 3x the floor are dropped.  The surviving stretch
    must span at least one decade of amplitude, otherwise
    :class:`InsufficientSignalError` is raised rather than returning a fit
    dominated by Monte Carlo noise.
    """
    t = np.asarray(t, dtype=float)
    y = np.abs(np.asarray(y, dtype=float))
    if t.shape != y.shape or t.ndim != 1 or t.size < 3:
        raise ValueError("need matching 1-d series with >= 3 samples")
    if np.any(np.diff(t) <= 0):
        raise ValueError("t must be strictly increasing")

    if noise_floor is None:
        tail = y[int(0.9 * y.size):]
        noise_floor = float(max(np.median(tail), 1e-300))
    keep = y > 3.0 * noise_floor
    if np.count_nonzero(keep) < 3:
        raise InsufficientSignalError(
            f"only {int(np.count_nonzero(keep))} samples above 3x noise floor "
            f"{noise_floor:.3g}"
        )
    # use the initial contiguous stretch so late noise re-entries don't leak in
    first_bad = np.argmin(keep) if not keep.all() else keep.size
    if not keep[0]:
        raise InsufficientSignalError("series starts below the noise floor")
    ts = t[:first_bad]
    ys = y[:first_bad]
    if ys[0] <= 0 or ys.max() / max(ys.min(), 1e-300) < 10.0:
        raise InsufficientSignalError(
            "usable stretch spans less than one decade of amplitude"
        )
    ly = np.log(ys)
    rate, intercept = np.polyfit(ts, ly, 1)
    resid = ly - (intercept + rate * ts)
    ss_tot = float(np.sum((ly - ly.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid**2)) / ss_tot if ss_tot > 0 else 0.0
    return DecayFit(rate=float(rate), intercept=float(intercept), r_squared=r2,
                    t_lo=float(ts[0]), t_hi=float(ts[-1]), n_points=int(ts.size),
                    mode=mode, noise_floor=float(noise_floor))


def _tail_fit(ts, norms, floor):
    """Exponential fit over the final half of the integrand norms.

    Returns (lambda_hat, log_amplitude) or None when the tail is under the
    noise floor (nothing left to bound).
    """
    half = ts.size // 2
    tt, nn = ts[half:], norms[half:]
    if float(np.max(nn)) <= floor:
        return None
    keep = nn > max(floor, 1e-300)
    if np.count_nonzero(keep) < max(3, keep.size // 4):
        return None
    lam, b = np.polyfit(tt[keep], np.log(nn[keep]), 1)
    return float(lam), float(b)


def estimate_poisson_solution(
    model: SdeModel,
    objective: ObjectiveSpec,
    cache: OracleCache,
    *,
    which: str,
    x: np.ndarray,
    x_tilde: np.ndarray | None = None,
    x_bar: np.ndarray | None = None,
    t_trunc: float = 25.0,
    t_cap: float = 200.0,
    dt: float = 0.01,
    n_replicas: int = 2000,
    seed: int = 0,
    rel_tol: float = 0.05,
) -> PoissonEstimate:
    """Estimate a Poisson-equation solution by integrating the transient expectation.

    which="v1": v1(x, xtilde) = int_0^inf (E_pi f - beta) *
        E[(f_grad(X_t) Xtilde_t) - grad E_pi f] dt, the (X, Xtilde) pair
        started at (x, xtilde).
    which="v2": v2(xbar; x, xtilde) = int_0^inf
        (E[f(Xbar_t)] - E_pi f) * E[f_grad(X_t) Xtilde_t] dt with independent
        replica ensembles for the Xbar line and the pair, so the product of
        means is an unbiased product estimate.

    The horizon doubles from ``t_trunc`` until the fitted exponential tail
    bound drops below ``rel_tol`` of the integral norm (or the integrand sinks
    below the Monte Carlo noise floor, in which case the tail bound is 0.0).
    Hitting ``t_cap`` with a non-decaying integrand raises
    :class:`EstimationFailureError`.
    """
    if which not in ("v1", "v2"):
        raise ValueError(f"which must be 'v1' or 'v2', got {which!r}")
    theta = np.asarray(cache.theta, dtype=float)
    d, ell = model.d, model.ell
    x = np.asarray(x, dtype=float)
    beta = objective.beta_target
    gap = cache.e_pi_f - beta
    ge = cache.grad_e_pi_f

    if which == "v1" and x_tilde is None:
        raise ValueError("v1 needs x_tilde")
    if which == "v2" and (x_bar is None or x_tilde is None):
        raise ValueError("v2 needs x_bar and x_tilde")

    ss = np.random.SeedSequence([seed, _TAG_POISSON])
    rng = np.random.Generator(np.random.PCG64(ss))
    root_dt = math.sqrt(dt)

    horizon = float(t_trunc)
    while True:
        n_steps = int(round(horizon / dt))
        xs = np.tile(x, (n_replicas, 1))
        xts = np.tile(np.asarray(x_tilde, dtype=float), (n_replicas, 1, 1))
        xbs = np.tile(np.asarray(x_bar, dtype=float), (n_replicas, 1)) if which == "v2" else None
        # restart the stream so a longer horizon replays the same early path
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, _TAG_POISSON])))

        integrand = np.empty((n_steps + 1, ell))
        se_track = np.empty(n_steps + 1)
        chunk = max(128, int(2_000_000 // max(1, n_replicas * d)))
        k = 0
        while k <= n_steps:
            m = min(chunk, n_steps + 1 - k)
            dw = rng.standard_normal((m, n_replicas, d)) * root_dt
            dwb = (rng.standard_normal((m, n_replicas, d)) * root_dt
                   if which == "v2" else None)
            for j in range(m):
                sens = np.einsum("...j,...jk->...k", objective.f_grad(xs), xts)
                mean_sens = np.mean(sens, axis=0)
                if which == "v1":
                    integrand[k + j] = gap * (mean_sens - ge)
                    se = np.std(sens, axis=0).max() / math.sqrt(n_replicas)
                    se_track[k + j] = abs(gap) * se
                else:
                    fb = np.asarray(objective.f(xbs), dtype=float)
                    mean_fb = float(np.mean(fb))
                    integrand[k + j] = (mean_fb - cache.e_pi_f) * mean_sens
                    se_f = float(np.std(fb)) / math.sqrt(n_replicas)
                    se_s = float(np.std(sens, axis=0).max()) / math.sqrt(n_replicas)
                    se_track[k + j] = (se_f * float(np.max(np.abs(mean_sens)))
                                       + abs(mean_fb - cache.e_pi_f) * se_s + se_f * se_s)
                if k + j < n_steps:
                    xs, xts = _step_frozen(model, theta, xs, xts, dt, dw[j])
                    if which == "v2":
                        xbs = _step_x(model, theta, xbs, dt, dwb[j])
            if not (np.all(np.isfinite(xs)) and np.all(np.isfinite(xts))):
                raise DivergenceError("transient ensemble diverged", t=k * dt)
            k += m

        ts = np.arange(n_steps + 1) * dt
        value = np.trapezoid(integrand, x=ts, axis=0)
        norms = np.linalg.norm(integrand, axis=1)
        floor = 3.0 * float(np.median(se_track[n_steps // 2:]))

        fit = _tail_fit(ts, norms, floor)
        if fit is None:
            return PoissonEstimate(value=value, norm=float(np.linalg.norm(value)),
                                   tail_bound=0.0, t_trunc=horizon, lambda_hat=float("nan"),
                                   n_replicas=n_replicas, which=which)
        lam, b = fit
        if lam < 0:
            tail = math.exp(b + lam * horizon) / (-lam)
            scale = max(float(np.linalg.norm(value)), floor)
            if tail <= rel_tol * scale:
                return PoissonEstimate(value=value, norm=float(np.linalg.norm(value)),
                                       tail_bound=float(tail), t_trunc=horizon,
                                       lambda_hat=lam, n_replicas=n_replicas, which=which)
        if 2.0 * horizon > t_cap:
            raise EstimationFailureError(
                f"integrand not resolvably decaying by t={horizon} "
                f"(lambda_hat={lam:.3g}); refusing to report a tail bound"
            )
        horizon *= 2.0
