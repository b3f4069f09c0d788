"""Forward propagation of the coupled optimization system.

``run_forward_prop`` advances (theta, X, Xtilde, Xbar) under a power-law
schedule, logging trajectory rows at a fixed stride and checkpoint rows that
carry oracle-backed diagnostics: the objective estimate J_hat, the gradient
norm |grad J_hat|, and the two fluctuation components Z1, Z2 of the drift
decomposition.  Stationary oracle values are expensive, so they are refreshed
at a sparse stride and held fixed in between; every consumer of a checkpoint
can see which refresh produced its values.

``run_ensemble`` advances many seeds in lockstep through the same vectorized
kernel.  A diverging seed is recorded and masked out; siblings are unaffected
because the kernel never reduces across the batch axis.  A single run is the
batch-size-1 case of the same code path, so results are bitwise independent
of batch composition.
"""

from __future__ import annotations

import dataclasses
import time

import numpy as np

from statflow.integrator import (
    DIVERGENCE_GUARD,
    AlgorithmState,
    DivergenceError,
    InvalidBudget,
    _step_coupled,
    make_noise_streams,
)
from statflow.models import ObjectiveSpec, SdeModel
from statflow.oracle import OracleCache, frozen_values_batch
from statflow.schedule import Schedule, validate_schedule

__all__ = [
    "RunConfig",
    "RunLog",
    "CheckpointSeries",
    "EnsembleResult",
    "gradient_estimate",
    "run_forward_prop",
    "run_ensemble",
]

# Sub-stream domain tags for oracle refreshes inside a run.
_TAG_CKPT_ORACLE = 196
_TAG_TERMINAL_ORACLE = 197


@dataclasses.dataclass
class RunConfig:
    """Everything needed to reproduce one run.

    Strides are in time units and are rounded to the step grid. Checkpoints
    are cheap (state-only); the expensive stationary oracle refresh happens
    every ``oracle_refresh_stride`` and its values are held fixed for the
    checkpoints in between.  ``t_end`` must cover at least 100 steps.
    """

    model: SdeModel
    objective: ObjectiveSpec
    schedule: Schedule
    dt: float = 0.01
    t_end: float = 100.0
    seed: int = 0
    theta0: np.ndarray | None = None
    x0: np.ndarray | None = None
    x_bar0: np.ndarray | None = None
    x_tilde0: np.ndarray | None = None
    log_stride: float = 1.0
    checkpoint_stride: float = 10.0
    oracle_refresh_stride: float = 100.0
    oracle_t: float = 500.0
    oracle_replicas: int = 8
    oracle_burn_in_frac: float = 0.2
    diagnostics: bool = True
    terminal_oracle: bool = True
    record_noise: bool = False
    kappa: float = 0.1

    def initial_arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        d, ell = self.model.d, self.model.ell
        theta = np.zeros(ell) if self.theta0 is None else np.atleast_1d(np.asarray(self.theta0, dtype=float))
        x = np.zeros(d) if self.x0 is None else np.atleast_1d(np.asarray(self.x0, dtype=float))
        xb = np.zeros(d) if self.x_bar0 is None else np.atleast_1d(np.asarray(self.x_bar0, dtype=float))
        xt = np.zeros((d, ell)) if self.x_tilde0 is None else np.asarray(self.x_tilde0, dtype=float)
        return theta, x, xt, xb

    def validate(self) -> None:
        if self.dt <= 0:
            raise InvalidBudget(f"dt must be positive, got {self.dt}")
        if self.t_end < 100.0 * self.dt:
            raise InvalidBudget(
                f"t_end={self.t_end} is below the minimum run length 100*dt={100.0 * self.dt}"
            )
        report = validate_schedule(self.schedule)
        if not report.valid:
            raise InvalidBudget(f"schedule invalid: {report.reason}")
        theta, x, xt, xb = self.initial_arrays()
        if theta.shape != (self.model.ell,) or x.shape != (self.model.d,):
            raise InvalidBudget("initial condition shapes do not match the model dimensions")
        if xt.shape != (self.model.d, self.model.ell) or xb.shape != (self.model.d,):
            raise InvalidBudget("initial condition shapes do not match the model dimensions")


@dataclasses.dataclass
class CheckpointSeries:
    """Checkpoint records: state snapshot plus oracle-backed diagnostics."""

    t: np.ndarray
    theta: np.ndarray
    g: np.ndarray
    alpha: np.ndarray
    norm_x: np.ndarray
    norm_xtilde: np.ndarray
    norm_xbar: np.ndarray
    j_hat: np.ndarray
    grad_j_hat: np.ndarray
    grad_j_hat_norm: np.ndarray
    z1: np.ndarray
    z2: np.ndarray
    e_pi_f: np.ndarray
    grad_e_pi_f: np.ndarray
    sens: np.ndarray
    f_xbar: np.ndarray
    oracle_refreshed_at: np.ndarray


@dataclasses.dataclass
class RunLog:
    """Stride records, checkpoint records, and the terminal summary of one run."""

    seed: int
    d: int
    ell: int
    t: np.ndarray
    theta: np.ndarray
    g: np.ndarray
    alpha: np.ndarray
    norm_x: np.ndarray
    norm_xtilde: np.ndarray
    norm_xbar: np.ndarray
    checkpoints: CheckpointSeries | None
    summary: dict
    diverged: bool = False
    divergence_time: float | None = None
    noise: np.ndarray | None = None


@dataclasses.dataclass
class EnsembleResult:
    """Per-seed logs plus ensemble aggregates."""

    seeds: list
    logs: list
    aggregate: dict
    divergences: list


def gradient_estimate(state: AlgorithmState, objective: ObjectiveSpec) -> np.ndarray:
    """Stochastic gradient estimate G = 2 (f(Xbar) - beta) (f_grad(X) Xtilde)^T."""
    sens = np.einsum("...j,...jk->...k", objective.f_grad(state.x), state.x_tilde)
    fb = float(np.asarray(objective.f(state.x_bar), dtype=float))
    return 2.0 * (fb - objective.beta_target) * sens


def _gradient_batch(objective, x, xt, xb):
    sens = np.einsum("...j,...jk->...k", objective.f_grad(x), xt)
    fb = np.asarray(objective.f(xb), dtype=float)
    return 2.0 * (fb - objective.beta_target)[..., None] * sens, sens, fb


def _stride_steps(name: str, stride: float, dt: float) -> int:
    every = max(1, int(round(stride / dt)))
    return every


def _norms(x, xt, xb):
    return (
        np.linalg.norm(x, axis=-1),
        np.sqrt(np.sum(xt * xt, axis=(-2, -1))),
        np.linalg.norm(xb, axis=-1),
    )


class _Recorder:
    """Columnar record buffers shared across the batch; sliced per seed at the end."""

    def __init__(self):
        self.rows: dict[str, list] = {}

    def append(self, **cols) -> None:
        for key, val in cols.items():
            self.rows.setdefault(key, []).append(val)

    def stacked(self) -> dict[str, np.ndarray]:
        return {k: np.stack(v, axis=0) for k, v in self.rows.items()}


def _refresh_caches(config, thetas, alive, t_now, refresh_idx, seeds):
    """Batched oracle refresh for the alive subset; returns per-seed caches."""
    idx = np.flatnonzero(alive)
    seed_seqs = [
        np.random.SeedSequence([int(seeds[i]), _TAG_CKPT_ORACLE, int(refresh_idx)])
        for i in idx
    ]
    caches = frozen_values_batch(
        config.model, config.objective, thetas[idx],
        t=config.oracle_t, burn_in_frac=config.oracle_burn_in_frac,
        n_replicas=config.oracle_replicas, dt=config.dt,
        seed_seqs=seed_seqs, refreshed_at=t_now,
    )
    return idx, caches


def _run_batch(config: RunConfig, seeds: list[int]) -> list[RunLog]:
    config.validate()
    model, objective, schedule = config.model, config.objective, config.schedule
    d, ell = model.d, model.ell
    dt = float(config.dt)
    n_steps = int(round(config.t_end / dt))
    log_every = _stride_steps("log_stride", config.log_stride, dt)
    ckpt_every = _stride_steps("checkpoint_stride", config.checkpoint_stride, dt)
    refresh_every = _stride_steps("oracle_refresh_stride", config.oracle_refresh_stride, dt)

    B = len(seeds)
    theta0, x0, xt0, xb0 = config.initial_arrays()
    th = np.tile(theta0, (B, 1))
    x = np.tile(x0, (B, 1))
    xt = np.tile(xt0, (B, 1, 1))
    xb = np.tile(xb0, (B, 1))
    streams = [make_noise_streams(int(s), 1)[0] for s in seeds]

    alive = np.ones(B, dtype=bool)
    div_time = np.full(B, np.nan)
    div_state: list = [None] * B
    last_traj = np.zeros(B, dtype=int)   # number of trajectory rows per seed
    last_ckpt = np.zeros(B, dtype=int)

    traj = _Recorder()
    ckpt = _Recorder()
    noise_rows: list | None = [] if config.record_noise else None

    # oracle cache, held fixed between refreshes
    cache_e = np.full(B, np.nan)
    cache_ge = np.full((B, ell), np.nan)
    cache_t = np.full(B, np.nan)
    n_refresh = 0

    wall_start = time.perf_counter()

    def record_traj(t_now, g):
        nx, nxt, nxb = _norms(x, xt, xb)
        traj.append(t=np.full(B, t_now), theta=th.copy(), g=g.copy(),
                    alpha=np.full(B, schedule.alpha(t_now)),
                    norm_x=nx, norm_xtilde=nxt, norm_xbar=nxb)
        last_traj[alive] += 1

    def record_ckpt(t_now, g, sens, fb):
        beta = objective.beta_target
        gap = cache_e - beta
        j_hat = gap * gap
        grad_j = 2.0 * gap[:, None] * cache_ge
        z1 = gap[:, None] * (sens - cache_ge)
        z2 = (fb - cache_e)[:, None] * sens
        nx, nxt, nxb = _norms(x, xt, xb)
        ckpt.append(t=np.full(B, t_now), theta=th.copy(), g=g.copy(),
                    alpha=np.full(B, schedule.alpha(t_now)),
                    norm_x=nx, norm_xtilde=nxt, norm_xbar=nxb,
                    j_hat=j_hat.copy(), grad_j_hat=grad_j,
                    grad_j_hat_norm=np.linalg.norm(grad_j, axis=-1),
                    z1=z1, z2=z2, e_pi_f=cache_e.copy(),
                    grad_e_pi_f=cache_ge.copy(), sens=sens.copy(),
                    f_xbar=np.asarray(fb, dtype=float).copy(),
                    oracle_refreshed_at=cache_t.copy())
        last_ckpt[alive] += 1

    with np.errstate(over="ignore", invalid="ignore", under="ignore"):
        # chunked noise draw keeps per-seed streams independent of batch shape
        chunk = max(1024, int(4_000_000 // max(1, B * d)))
        dw_buf = dwb_buf = None
        buf_base = -1
        for k in range(n_steps):
            t_now = k * dt
            if k % (chunk) == 0 or dw_buf is None:
                m = min(chunk, n_steps - k)
                blocks = [s.block(m, dt, d) for s in streams]
                dw_buf = np.stack([b[0] for b in blocks], axis=0)
                dwb_buf = np.stack([b[1] for b in blocks], axis=0)
                buf_base = k
            dw = dw_buf[:, k - buf_base, :]
            dwb = dwb_buf[:, k - buf_base, :]
            if noise_rows is not None:
                noise_rows.append(np.concatenate([dw, dwb], axis=-1))

            need_log = (k % log_every == 0)
            need_ckpt = config.diagnostics and (k % ckpt_every == 0)
            if config.diagnostics and (k % refresh_every == 0) and np.any(alive):
                idx, caches = _refresh_caches(config, th, alive, t_now, n_refresh, seeds)
                for pos, c in zip(idx, caches):
                    cache_e[pos] = c.e_pi_f
                    cache_ge[pos] = c.grad_e_pi_f
                    cache_t[pos] = t_now
                n_refresh += 1

            if need_log or need_ckpt:
                g_now, sens_now, fb_now = _gradient_batch(objective, x, xt, xb)
                if need_log:
                    record_traj(t_now, g_now)
                if need_ckpt:
                    record_ckpt(t_now, g_now, sens_now, fb_now)

            alpha = float(schedule.alpha(t_now))
            prev = (th, x, xt, xb)
            th, x, xt, xb, _ = _step_coupled(model, objective, th, x, xt, xb,
                                             alpha, dt, dw, dwb)

            mag = np.maximum.reduce([
                np.max(np.abs(th), axis=-1),
                np.max(np.abs(x), axis=-1),
                np.max(np.abs(xt), axis=(-2, -1)),
                np.max(np.abs(xb), axis=-1),
            ])
            bad = alive & (~np.isfinite(mag) | (mag > DIVERGENCE_GUARD))
            if np.any(bad):
                t_next = (k + 1) * dt
                for i in np.flatnonzero(bad):
                    div_time[i] = t_next
                    div_state[i] = AlgorithmState(
                        t=t_now, theta=prev[0][i].copy(), x=prev[1][i].copy(),
                        x_tilde=prev[2][i].copy(), x_bar=prev[3][i].copy(),
                    )
                alive &= ~bad

        t_final = n_steps * dt
        if np.any(alive):
            g_now, sens_now, fb_now = _gradient_batch(objective, x, xt, xb)
            record_traj(t_final, g_now)
            if config.diagnostics:
                record_ckpt(t_final, g_now, sens_now, fb_now)

    # terminal oracle for surviving seeds
    term = {}
    if config.terminal_oracle and np.any(alive):
        idx = np.flatnonzero(alive)
        seed_seqs = [np.random.SeedSequence([int(seeds[i]), _TAG_TERMINAL_ORACLE])
                     for i in idx]
        caches = frozen_values_batch(
            config.model, config.objective, th[idx],
            t=config.oracle_t, burn_in_frac=config.oracle_burn_in_frac,
            n_replicas=config.oracle_replicas, dt=config.dt,
            seed_seqs=seed_seqs, refreshed_at=t_final,
        )
        term = dict(zip(idx.tolist(), caches))

    wall = time.perf_counter() - wall_start
    traj_cols = traj.stacked()
    ckpt_cols = ckpt.stacked() if config.diagnostics and ckpt.rows else None

    logs = []
    for i, seed in enumerate(seeds):
        n_t = int(last_traj[i])
        n_c = int(last_ckpt[i])
        cp = None
        if ckpt_cols is not None:
            cp = CheckpointSeries(**{
                key: val[:n_c, i] for key, val in ckpt_cols.items()
            })
        is_dead = not alive[i]
        beta = objective.beta_target
        summary = {
            "seed": int(seed),
            "t_end": float(div_time[i]) if is_dead else float(n_steps * dt),
            "theta_end": [float(v) for v in th[i]] if not is_dead else None,
            "diverged": bool(is_dead),
            "divergence_time": float(div_time[i]) if is_dead else None,
            "kappa": float(config.kappa),
            "wall_time_s": float(wall),
        }
        if i in term:
            cache: OracleCache = term[i]
            grad = cache.grad_j_hat(beta)
            summary.update({
                "j_hat": cache.j_hat(beta),
                "grad_j_hat_norm": float(np.linalg.norm(grad)),
                "e_pi_f": cache.e_pi_f,
                "oracle_ci": {"e_hw": cache.e_hw,
                              "grad_hw": [float(v) for v in cache.grad_hw]},
                "success": bool(np.linalg.norm(grad) < config.kappa),
            })
        else:
            summary.update({"j_hat": None, "grad_j_hat_norm": None,
                            "e_pi_f": None, "oracle_ci": None,
                            "success": False if is_dead else None})
        log = RunLog(
            seed=int(seed), d=d, ell=ell,
            t=traj_cols["t"][:n_t, i],
            theta=traj_cols["theta"][:n_t, i],
            g=traj_cols["g"][:n_t, i],
            alpha=traj_cols["alpha"][:n_t, i],
            norm_x=traj_cols["norm_x"][:n_t, i],
            norm_xtilde=traj_cols["norm_xtilde"][:n_t, i],
            norm_xbar=traj_cols["norm_xbar"][:n_t, i],
            checkpoints=cp,
            summary=summary,
            diverged=bool(is_dead),
            divergence_time=float(div_time[i]) if is_dead else None,
            noise=(np.stack([row[i] for row in noise_rows], axis=0)
                   if noise_rows else None),
        )
        if is_dead:
            log.summary["divergence_state_t"] = div_state[i].t if div_state[i] else None
        logs.append(log)
    return logs


def run_forward_prop(config: RunConfig) -> RunLog:
    """Run a single seed; raises :class:`DivergenceError` with the partial log attached."""
    log = _run_batch(config, [int(config.seed)])[0]
    if log.diverged:
        err = DivergenceError(
            f"run diverged at t={log.divergence_time}",
            t=log.divergence_time,
        )
        err.partial_log = log
        raise err
    return log


def run_ensemble(config: RunConfig, n_seeds: int, seeds=None) -> EnsembleResult:
    """Run seeds config.seed + i in lockstep; divergences are recorded, not fatal.

    The aggregate reports the median terminal |grad J_hat| over completed
    seeds and the fraction of all seeds that finished with
    |grad J_hat| < kappa.
    """
    if seeds is None:
        seeds = [int(config.seed) + i for i in range(int(n_seeds))]
    seeds = [int(s) for s in seeds]
    logs = _run_batch(config, seeds)
    divergences = [
        {"seed": log.seed, "t": log.divergence_time}
        for log in logs if log.diverged
    ]
    grads = [log.summary.get("grad_j_hat_norm") for log in logs
             if not log.diverged and log.summary.get("grad_j_hat_norm") is not None]
    n_success = sum(1 for log in logs if log.summary.get("success"))
    aggregate = {
        "n_seeds": len(seeds),
        "n_diverged": len(divergences),
        "median_terminal_grad_norm": float(np.median(grads)) if grads else None,
        "success_fraction": n_success / len(seeds) if seeds else 0.0,
        "kappa": float(config.kappa),
    }
    return EnsembleResult(seeds=seeds, logs=logs, aggregate=aggregate,
                          divergences=divergences)
