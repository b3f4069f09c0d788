"""Figure rendering for run and diagnostic outputs.

Figures are written next to the delimited outputs.  They are a convenience
view only: the reproducibility contract covers the CSV and JSON files, not
PNG bytes.
"""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

__all__ = [
    "plot_run",
    "plot_checkpoints",
    "plot_ensemble",
    "plot_moments",
    "plot_windows",
]


def _save(fig, out_dir: str, name: str) -> str:
    path = os.path.join(out_dir, name)
    fig.savefig(path, dpi=110, bbox_inches="tight")
    plt.close(fig)
    return path


def plot_run(log, out_dir: str) -> list[str]:
    """Parameter traces, gradient estimate, step size, and state norms."""
    paths = []
    fig, axes = plt.subplots(2, 1, figsize=(7, 6), sharex=True)
    for i in range(log.ell):
        axes[0].plot(log.t, log.theta[:, i], label=f"theta_{i}")
    axes[0].set_ylabel("theta")
    axes[0].legend(loc="best", fontsize=8)
    gnorm = np.linalg.norm(log.g, axis=-1)
    axes[1].plot(log.t, gnorm, label="|G|", color="tab:red")
    axes[1].plot(log.t, log.alpha, label="alpha", color="tab:gray", ls="--")
    axes[1].set_yscale("log")
    axes[1].set_xlabel("t")
    axes[1].legend(loc="best", fontsize=8)
    paths.append(_save(fig, out_dir, "trajectory.png"))

    fig, ax = plt.subplots(figsize=(7, 3.2))
    ax.plot(log.t, log.norm_x, label="|X|")
    ax.plot(log.t, log.norm_xtilde, label="|Xtilde|")
    ax.plot(log.t, log.norm_xbar, label="|Xbar|")
    ax.set_xlabel("t")
    ax.set_ylabel("state norm")
    ax.legend(loc="best", fontsize=8)
    paths.append(_save(fig, out_dir, "state_norms.png"))
    return paths


def plot_checkpoints(log, out_dir: str) -> list[str]:
    """Objective estimate and fluctuation-term norms along the checkpoints."""
    cp = log.checkpoints
    if cp is None:
        return []
    fig, axes = plt.subplots(2, 1, figsize=(7, 6), sharex=True)
    axes[0].plot(cp.t, cp.j_hat, label="J_hat", color="tab:blue")
    axes[0].plot(cp.t, cp.grad_j_hat_norm, label="|grad J_hat|", color="tab:orange")
    axes[0].set_yscale("log")
    axes[0].legend(loc="best", fontsize=8)
    axes[1].plot(cp.t, np.linalg.norm(cp.z1, axis=-1), label="|Z1|")
    axes[1].plot(cp.t, np.linalg.norm(cp.z2, axis=-1), label="|Z2|")
    axes[1].set_yscale("log")
    axes[1].set_xlabel("t")
    axes[1].legend(loc="best", fontsize=8)
    return [_save(fig, out_dir, "checkpoints.png")]


def plot_ensemble(result, out_dir: str) -> list[str]:
    """Terminal gradient norms across seeds, with the kappa threshold."""
    grads = [(log.seed, log.summary.get("grad_j_hat_norm")) for log in result.logs
             if not log.diverged and log.summary.get("grad_j_hat_norm") is not None]
    if not grads:
        return []
    seeds, values = zip(*grads)
    fig, ax = plt.subplots(figsize=(7, 3.2))
    ax.bar(range(len(values)), values, tick_label=[str(s) for s in seeds])
    kappa = result.aggregate.get("kappa")
    if kappa:
        ax.axhline(kappa, color="tab:red", ls="--", label=f"kappa = {kappa}")
        ax.legend(fontsize=8)
    ax.set_xlabel("seed")
    ax.set_ylabel("terminal |grad J_hat|")
    ax.tick_params(axis="x", labelsize=7)
    return [_save(fig, out_dir, "ensemble.png")]


def plot_moments(report, out_dir: str) -> list[str]:
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.4))
    axes[0].plot(report.times, report.m8_running)
    axes[0].set_xscale("log")
    axes[0].set_xlabel("t")
    axes[0].set_ylabel("running mean E|X|^8")
    axes[1].plot(report.times, report.sup4)
    axes[1].set_xscale("log")
    axes[1].set_yscale("log")
    axes[1].set_xlabel("t")
    axes[1].set_ylabel("E sup |X|^4")
    fig.suptitle(f"plateau ratio {report.plateau_ratio:.3f}, "
                 f"growth exponent {report.growth_exponent:.3f}", fontsize=9)
    return [_save(fig, out_dir, "moments.png")]


def plot_windows(windows, out_dir: str, name: str = "fluctuation_windows.png") -> list[str]:
    """Windowed fluctuation-integral norms against the window start times."""
    if not windows:
        return []
    fig, ax = plt.subplots(figsize=(6, 3.4))
    for label, series in windows.items():
        starts = [w.t_lo for w in series]
        norms = [w.norm for w in series]
        ax.plot(starts, norms, marker="o", label=label)
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.set_xlabel("window start")
    ax.set_ylabel("|integral of alpha * Z|")
    ax.legend(fontsize=8)
    return [_save(fig, out_dir, name)]
