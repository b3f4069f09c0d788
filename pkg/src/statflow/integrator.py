"""Explicit Euler-Maruyama stepping for the coupled four-component system.

One update advances (theta, X, Xtilde, Xbar) jointly:

    theta's increment uses the stochastic gradient estimate built from Xbar
    and the tangent state; the X and Xtilde lines share the same Brownian
    increment dW; Xbar is driven by its own independent increment dW_bar.

All coefficients are evaluated at the pre-step state (fully explicit scheme).
There is exactly one stepping kernel, vectorized over an optional leading
batch axis, so single-step calls, frozen simulations, and batched ensembles
agree bitwise.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from statflow.models import ObjectiveSpec, SdeModel

__all__ = [
    "DIVERGENCE_GUARD",
    "DivergenceError",
    "AlgorithmState",
    "NoisePair",
    "NoiseStream",
    "FrozenPath",
    "make_noise_streams",
    "em_step",
    "simulate_frozen",
]

# Magnitude beyond which a trajectory is declared divergent.
DIVERGENCE_GUARD = 1e6


class InvalidBudget(ValueError):
    """Simulation horizon or budget parameters are unusable."""


class DivergenceError(RuntimeError):
    """A trajectory left the finite range; carries blow-up time and pre-step state."""

    def __init__(self, message: str, t: float | None = None, state=None):
        super().__init__(message)
        self.t = t
        self.state = state
        self.partial_log = None  # attached by run drivers when available


@dataclasses.dataclass(frozen=True)
class AlgorithmState:
    """Joint state (t, theta, X, Xtilde, Xbar) of the coupled system.

    Shapes: theta (ell,), x (d,), x_tilde (d, ell), x_bar (d,).  All entries
    must be finite; the constructor rejects non-finite input.
    """

    t: float
    theta: np.ndarray
    x: np.ndarray
    x_tilde: np.ndarray
    x_bar: np.ndarray

    def __post_init__(self) -> None:
        theta = np.atleast_1d(np.asarray(self.theta, dtype=float))
        x = np.atleast_1d(np.asarray(self.x, dtype=float))
        x_bar = np.atleast_1d(np.asarray(self.x_bar, dtype=float))
        x_tilde = np.asarray(self.x_tilde, dtype=float)
        if x_tilde.ndim != 2 or x_tilde.shape != (x.shape[0], theta.shape[0]):
            raise ValueError(
                f"x_tilde must have shape (d, ell) = ({x.shape[0]}, {theta.shape[0]}), "
                f"got {x_tilde.shape}"
            )
        if x_bar.shape != x.shape:
            raise ValueError(f"x_bar shape {x_bar.shape} does not match x shape {x.shape}")
        for name, arr in (("theta", theta), ("x", x), ("x_tilde", x_tilde), ("x_bar", x_bar)):
            if not np.all(np.isfinite(arr)):
                raise DivergenceError(
                    f"non-finite entries in {name} at t={self.t}", t=float(self.t)
                )
        object.__setattr__(self, "t", float(self.t))
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "x_tilde", x_tilde)
        object.__setattr__(self, "x_bar", x_bar)


@dataclasses.dataclass(frozen=True)
class NoisePair:
    """Brownian increments for one step: dW drives X and Xtilde, dW_bar drives Xbar.

    Both are N(0, dt I) draws of shape (d,).
    """

    dw: np.ndarray
    dw_bar: np.ndarray
    dt: float


@dataclasses.dataclass
class NoiseStream:
    """Two independent generators: one for dW, one for dW_bar.

    Consuming increments one pair at a time or in blocks yields the same
    values, because each generator fills arrays sequentially.
    """

    gen_w: np.random.Generator
    gen_wbar: np.random.Generator

    def pair(self, dt: float, d: int) -> NoisePair:
        s = np.sqrt(dt)
        return NoisePair(dw=s * self.gen_w.standard_normal(d),
                         dw_bar=s * self.gen_wbar.standard_normal(d),
                         dt=float(dt))

    def block(self, n: int, dt: float, d: int) -> tuple[np.ndarray, np.ndarray]:
        s = np.sqrt(dt)
        return (s * self.gen_w.standard_normal((n, d)),
                s * self.gen_wbar.standard_normal((n, d)))

    def block_w(self, n: int, dt: float, d: int) -> np.ndarray:
        return np.sqrt(dt) * self.gen_w.standard_normal((n, d))


def streams_from_seedseq(ss: np.random.SeedSequence, n_replicas: int) -> list[NoiseStream]:
    """Spawn n_replicas independent stream pairs from one seed sequence."""
    streams = []
    for child in ss.spawn(n_replicas):
        w_ss, wbar_ss = child.spawn(2)
        streams.append(NoiseStream(gen_w=np.random.Generator(np.random.PCG64(w_ss)),
                                   gen_wbar=np.random.Generator(np.random.PCG64(wbar_ss))))
    return streams


def make_noise_streams(seed: int, n_replicas: int) -> list[NoiseStream]:
    """Deterministic per-replica streams derived from one root seed.

    Replica r's stream depends only on (seed, r), never on n_replicas, so a
    replica drawn alone matches the same replica inside a larger family.
    """
    return streams_from_seedseq(np.random.SeedSequence(seed), n_replicas)


def _step_coupled(model, objective, theta, x, x_tilde, x_bar, alpha, dt, dw, dw_bar):
    """One explicit step of the four-line system; batched over leading axes.

    Returns (theta', x', x_tilde', x_bar', g) where g is the stochastic
    gradient estimate at the pre-step state.
    """
    mu = model.drift(x, theta)
    sig = model.diffusion(x, theta)
    mu_x = model.drift_jac_x(x, theta)
    mu_th = model.drift_jac_theta(x, theta)
    sig_x = model.diffusion_jac_x(x, theta)
    sig_th = model.diffusion_jac_theta(x, theta)
    mu_b = model.drift(x_bar, theta)
    sig_b = model.diffusion(x_bar, theta)

    sens = np.einsum("...j,...jk->...k", objective.f_grad(x), x_tilde)
    fb = np.asarray(objective.f(x_bar), dtype=float)
    g = 2.0 * (fb - objective.beta_target)[..., None] * sens

    theta_n = theta - (alpha * dt) * g
    x_n = x + mu * dt + np.einsum("...ij,...j->...i", sig, dw)
    tan_drift = np.einsum("...ij,...jk->...ik", mu_x, x_tilde) + mu_th
    tan_diff = np.einsum("...ijm,...mk->...ijk", sig_x, x_tilde) + sig_th
    xt_n = x_tilde + tan_drift * dt + np.einsum("...ijk,...j->...ik", tan_diff, dw)
    xb_n = x_bar + mu_b * dt + np.einsum("...ij,...j->...i", sig_b, dw_bar)
    return theta_n, x_n, xt_n, xb_n, g


def _step_frozen(model, theta, x, x_tilde, dt, dw):
    """One step of the (X, Xtilde) pair at frozen theta, sharing dW."""
    mu = model.drift(x, theta)
    sig = model.diffusion(x, theta)
    mu_x = model.drift_jac_x(x, theta)
    mu_th = model.drift_jac_theta(x, theta)
    sig_x = model.diffusion_jac_x(x, theta)
    sig_th = model.diffusion_jac_theta(x, theta)
    x_n = x + mu * dt + np.einsum("...ij,...j->...i", sig, dw)
    tan_drift = np.einsum("...ij,...jk->...ik", mu_x, x_tilde) + mu_th
    tan_diff = np.einsum("...ijm,...mk->...ijk", sig_x, x_tilde) + sig_th
    xt_n = x_tilde + tan_drift * dt + np.einsum("...ijk,...j->...ik", tan_diff, dw)
    return x_n, xt_n


def _step_x(model, theta, x, dt, dw):
    """One step of the X line alone at frozen theta."""
    mu = model.drift(x, theta)
    sig = model.diffusion(x, theta)
    return x + mu * dt + np.einsum("...ij,...j->...i", sig, dw)


def _magnitude(*arrays) -> float:
    m = 0.0
    for a in arrays:
        v = float(np.max(np.abs(a))) if a.size else 0.0
        # NaN propagates: max of abs is NaN, which fails the finite check below
        if not np.isfinite(v):
            return np.inf
        m = max(m, v)
    return m


def em_step(
    state: AlgorithmState,
    model: SdeModel,
    objective: ObjectiveSpec,
    alpha: float,
    dt: float,
    noise: NoisePair,
) -> AlgorithmState:
    """Advance the coupled system by one explicit step of size dt.

    All coefficients, the gradient estimate, and the schedule weight alpha are
    taken at the pre-step state. Raises :class:`DivergenceError` carrying the
    pre-step state if any output entry is non-finite or exceeds the guard.
    """
    theta_n, x_n, xt_n, xb_n, _ = _step_coupled(
        model, objective, state.theta, state.x, state.x_tilde, state.x_bar,
        float(alpha), float(dt), noise.dw, noise.dw_bar,
    )
    if _magnitude(theta_n, x_n, xt_n, xb_n) > DIVERGENCE_GUARD:
        raise DivergenceError(
            f"trajectory diverged during step starting at t={state.t}",
            t=state.t + float(dt), state=state,
        )
    return AlgorithmState(t=state.t + float(dt), theta=theta_n, x=x_n,
                          x_tilde=xt_n, x_bar=xb_n)


@dataclasses.dataclass(frozen=True)
class FrozenPath:
    """Recorded (X, Xtilde) trajectory at frozen theta.

    ``x`` has shape (n_records, d) for a single path or (n_records, R, d) for
    a batch started from stacked initial conditions; ``x_tilde`` appends the
    (d, ell) tangent axes.  ``noise`` holds the dW increments, row-major
    [step][component], when recording was requested.
    """

    t: np.ndarray
    x: np.ndarray
    x_tilde: np.ndarray
    noise: np.ndarray | None = None


def simulate_frozen(
    model: SdeModel,
    theta: np.ndarray,
    x0: np.ndarray,
    x_tilde0: np.ndarray,
    dt: float,
    t_end: float,
    rng_seed,
    record_stride: int = 1,
    return_noise: bool = False,
) -> FrozenPath:
    """Simulate the (X, Xtilde) pair at frozen theta on [0, t_end].

    The tangent line consumes the same dW increments as the X line. ``x0`` of
    shape (d,) gives a single path; shape (R, d) gives R independent replicas
    (per-replica streams spawned from ``rng_seed``). ``rng_seed`` may also be
    a :class:`NoiseStream` (single path only), which supports exact
    continuation: two consecutive segments driven by the same stream
    reproduce one longer run bitwise.
    """
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    x = np.asarray(x0, dtype=float).copy()
    xt = np.asarray(x_tilde0, dtype=float).copy()
    batched = x.ndim == 2
    if not batched:
        x = np.atleast_1d(x)
    d = x.shape[-1]
    n_steps = int(round(t_end / dt))
    if n_steps < 1:
        raise InvalidBudget(f"t_end={t_end} shorter than one step of dt={dt}")
    stride = max(1, int(record_stride))

    if isinstance(rng_seed, NoiseStream):
        if batched:
            raise ValueError("a single NoiseStream cannot drive a batch of replicas")
        streams = [rng_seed]
    else:
        streams = make_noise_streams(int(rng_seed), x.shape[0] if batched else 1)

    rec_t = [0.0]
    rec_x = [x.copy()]
    rec_xt = [xt.copy()]
    rec_noise = [] if return_noise else None

    chunk = 4096
    k = 0
    while k < n_steps:
        m = min(chunk, n_steps - k)
        dws = np.stack([s.block_w(m, dt, d) for s in streams], axis=0)  # (R, m, d)
        if not batched:
            dws = dws[0]
        for j in range(m):
            dw = dws[..., j, :]
            x, xt = _step_frozen(model, theta, x, xt, dt, dw)
            if return_noise:
                rec_noise.append(dw.copy())
            step = k + j
            if (step + 1) % stride == 0 or step == n_steps - 1:
                rec_t.append((step + 1) * dt)
                rec_x.append(x.copy())
                rec_xt.append(xt.copy())
        if _magnitude(x, xt) > DIVERGENCE_GUARD:
            raise DivergenceError(
                f"frozen simulation diverged before t={(k + m) * dt}",
                t=(k + m) * dt,
            )
        k += m

    return FrozenPath(
        t=np.asarray(rec_t),
        x=np.stack(rec_x, axis=0),
        x_tilde=np.stack(rec_xt, axis=0),
        noise=np.stack(rec_noise, axis=0) if return_noise else None,
    )
