"""Command-line interface.

Subcommands:
  run       forward-propagate the coupled system and write CSV/JSON outputs
  oracle    stationary-oracle estimates at a frozen parameter
  diagnose  run, then windowed fluctuation integrals and kappa-cycles
  check     model assumption checks and schedule validation
  compare   byte- and value-level comparison of two delimited outputs

Exit codes: 0 success; 1 the run diverged or compared files differ;
2 configuration or usage error; 3 a check or estimation failed.

Relative --out paths resolve under $STATFLOW_OUT when it is set.  Every
writing subcommand records a manifest.json with the sha256 of the config
bytes, updated from "running" to a final status on the way out.
"""

from __future__ import annotations

import argparse
import os
import shutil
import sys

import numpy as np

import statflow
from statflow.algorithm import RunConfig, run_ensemble, run_forward_prop
from statflow.config import ConfigError, config_text_hash, load_config
from statflow.diagnostics import (
    EstimationFailureError,
    SparseWindowError,
    detect_cycles,
    dyadic_windows,
    moment_tracker,
    windowed_fluctuation_integral,
)
from statflow.integrator import DivergenceError
from statflow.models import (
    check_dissipativity,
    check_lipschitz_and_growth,
    jacobian_consistency,
    objective_consistency,
)
from statflow.oracle import frozen_theta_values, gradient_fd
from statflow.reports import (
    compare_csv,
    write_checkpoint_csv,
    write_json,
    write_summary_json,
    write_trajectory_csv,
)
from statflow.schedule import validate_schedule

EXIT_OK = 0
EXIT_RUN_FAILED = 1
EXIT_CONFIG = 2
EXIT_CHECK = 3


def _resolve_out(out: str) -> str:
    if not os.path.isabs(out):
        root = os.environ.get("STATFLOW_OUT")
        if root:
            out = os.path.join(root, out)
    os.makedirs(out, exist_ok=True)
    return out


class _Manifest:
    def __init__(self, out_dir: str, command: str, config_path: str | None):
        self.path = os.path.join(out_dir, "manifest.json")
        self.data = {
            "command": command,
            "package_version": statflow.__version__,
            "config_path": config_path,
            "config_sha256": config_text_hash(config_path) if config_path else None,
            "status": "running",
            "outputs": [],
            "exit_code": None,
        }
        write_json(self.data, self.path)

    def add(self, *paths: str) -> None:
        self.data["outputs"].extend(os.path.basename(p) for p in paths)

    def finish(self, exit_code: int) -> None:
        self.data["status"] = "complete" if exit_code == EXIT_OK else "failed"
        self.data["exit_code"] = exit_code
        write_json(self.data, self.path)


def _copy_config(config_path: str, out_dir: str) -> str:
    dest = os.path.join(out_dir, "config.ini")
    if os.path.abspath(config_path) != os.path.abspath(dest):
        shutil.copyfile(config_path, dest)
    return dest


def _write_run_outputs(log, out_dir: str, plots: bool, manifest: _Manifest) -> None:
    traj = os.path.join(out_dir, "trajectory.csv")
    write_trajectory_csv(log, traj)
    manifest.add(traj)
    if log.checkpoints is not None:
        ckpt = os.path.join(out_dir, "checkpoints.csv")
        write_checkpoint_csv(log, ckpt)
        manifest.add(ckpt)
    summary = os.path.join(out_dir, "summary.json")
    write_summary_json(log.summary, summary)
    manifest.add(summary)
    if plots:
        from statflow import plots as _plots

        manifest.add(*_plots.plot_run(log, out_dir))
        manifest.add(*_plots.plot_checkpoints(log, out_dir))


def _cmd_run(args) -> int:
    out_dir = _resolve_out(args.out)
    config = load_config(args.config)
    if args.seed is not None:
        config.seed = args.seed
    manifest = _Manifest(out_dir, "run", args.config)
    manifest.add(_copy_config(args.config, out_dir))
    code = EXIT_OK
    try:
        if args.seeds > 1:
            result = run_ensemble(config, args.seeds)
            for log in result.logs:
                sub = os.path.join(out_dir, f"seed_{log.seed:04d}")
                os.makedirs(sub, exist_ok=True)
                sub_manifest = _Manifest(sub, "run", args.config)
                _write_run_outputs(log, sub, not args.no_plots, sub_manifest)
                sub_manifest.finish(EXIT_OK if not log.diverged else EXIT_RUN_FAILED)
            agg_path = os.path.join(out_dir, "ensemble.json")
            write_json(result.aggregate, agg_path)
            manifest.add(agg_path)
            if not args.no_plots:
                from statflow import plots as _plots

                manifest.add(*_plots.plot_ensemble(result, out_dir))
            print(f"{result.aggregate['n_seeds'] - result.aggregate['n_diverged']} of "
                  f"{result.aggregate['n_seeds']} seeds completed; "
                  f"success fraction {result.aggregate['success_fraction']:.3f}")
        else:
            try:
                log = run_forward_prop(config)
            except DivergenceError as exc:
                log = exc.partial_log
                print(f"run diverged at t = {log.divergence_time}", file=sys.stderr)
                code = EXIT_RUN_FAILED
            _write_run_outputs(log, out_dir, not args.no_plots, manifest)
            if code == EXIT_OK:
                gn = log.summary.get("grad_j_hat_norm")
                gtxt = f"{gn:.6g}" if gn is not None else "n/a"
                print(f"completed t = {log.summary['t_end']}; terminal |grad J_hat| = {gtxt}")
    finally:
        manifest.finish(code)
    return code


def _parse_theta(raw: str) -> np.ndarray:
    return np.array([float(p) for p in raw.replace(",", " ").split() if p])


def _cmd_oracle(args) -> int:
    out_dir = _resolve_out(args.out)
    config = load_config(args.config)
    theta = _parse_theta(args.theta) if args.theta else config.initial_arrays()[0]
    manifest = _Manifest(out_dir, "oracle", args.config)
    code = EXIT_OK
    try:
        cache = frozen_theta_values(
            config.model, config.objective, theta,
            t=config.oracle_t, burn_in_frac=config.oracle_burn_in_frac,
            n_replicas=config.oracle_replicas, dt=config.dt, seed=config.seed,
        )
        beta = config.objective.beta_target
        grad = cache.grad_j_hat(beta)
        payload = {
            "theta": [float(v) for v in np.atleast_1d(theta)],
            "e_pi_f": cache.e_pi_f,
            "e_pi_f_ci_half_width": cache.e_hw,
            "j_hat": cache.j_hat(beta),
            "grad_j_hat": [float(v) for v in grad],
            "grad_j_hat_norm": float(np.linalg.norm(grad)),
            "grad_e_pi_f": [float(v) for v in cache.grad_e_pi_f],
            "grad_e_pi_f_ci_half_width": [float(v) for v in cache.grad_hw],
            "t_budget": cache.t_budget,
            "n_replicas": cache.n_replicas,
        }
        if args.fd:
            fd = gradient_fd(config.model, config.objective, theta,
                             t=config.oracle_t, burn_in_frac=config.oracle_burn_in_frac,
                             n_replicas=config.oracle_replicas, dt=config.dt,
                             seed=config.seed)
            payload["grad_j_fd"] = [float(v) for v in fd.value]
            payload["grad_j_fd_ci_half_width"] = [float(v) for v in fd.ci_half_width]
            payload["fd_step"] = fd.h
        path = os.path.join(out_dir, "oracle.json")
        write_json(payload, path)
        manifest.add(path)
        print(f"E_pi f = {cache.e_pi_f:.6g} +/- {cache.e_hw:.2g}; "
              f"J_hat = {payload['j_hat']:.6g}; |grad J_hat| = {payload['grad_j_hat_norm']:.6g}")
    except DivergenceError as exc:
        print(f"oracle ensemble diverged: {exc}", file=sys.stderr)
        code = EXIT_CHECK
    finally:
        manifest.finish(code)
    return code


def _cmd_diagnose(args) -> int:
    out_dir = _resolve_out(args.out)
    config = load_config(args.config)
    config.diagnostics = True
    manifest = _Manifest(out_dir, "diagnose", args.config)
    manifest.add(_copy_config(args.config, out_dir))
    code = EXIT_OK
    try:
        try:
            log = run_forward_prop(config)
        except DivergenceError as exc:
            log = exc.partial_log
            print(f"run diverged at t = {log.divergence_time}", file=sys.stderr)
            code = EXIT_RUN_FAILED
        _write_run_outputs(log, out_dir, not args.no_plots, manifest)

        cp = log.checkpoints
        diag: dict = {"windows": {"z1": [], "z2": []}, "cycles": []}
        if cp is not None and cp.t.size >= 2:
            t_lo = max(float(cp.t[cp.t > 0][0]) if np.any(cp.t > 0) else 1.0, 1e-9)
            window_series = {"z1": [], "z2": []}
            for name, series in (("z1", cp.z1), ("z2", cp.z2)):
                for window in dyadic_windows(t_lo, float(cp.t[-1])):
                    try:
                        w = windowed_fluctuation_integral(cp.t, series,
                                                          config.schedule, window)
                    except SparseWindowError:
                        continue
                    window_series[name].append(w)
                    diag["windows"][name].append({
                        "t_lo": w.t_lo, "t_hi": w.t_hi, "norm": w.norm,
                        "value": [float(v) for v in w.value],
                        "n_samples": w.n_samples,
                    })
            cycles = detect_cycles(cp.t, cp.grad_j_hat_norm, config.schedule,
                                   config.kappa, lipschitz=args.lipschitz)
            diag["cycles"] = [{
                "t_start": c.t_start, "t_end": c.t_end,
                "grad_at_start": c.grad_at_start, "exit_reason": c.exit_reason,
                "alpha_budget": c.alpha_budget, "kappa": c.kappa, "mu": c.mu,
            } for c in cycles]
            if not args.no_plots and any(window_series.values()):
                from statflow import plots as _plots

                manifest.add(*_plots.plot_windows(window_series, out_dir))
        if args.moments:
            theta = (np.array(log.summary["theta_end"])
                     if log.summary.get("theta_end") else config.initial_arrays()[0])
            report = moment_tracker(config.model, theta, args.moments_t,
                                    dt=max(config.dt, 0.05),
                                    n_replicas=args.moment_replicas, seed=config.seed)
            diag["moments"] = {
                "plateau_ratio": report.plateau_ratio,
                "growth_exponent": report.growth_exponent,
                "growth_window": list(report.growth_window),
                "n_replicas": report.n_replicas,
            }
            if not args.no_plots:
                from statflow import plots as _plots

                manifest.add(*_plots.plot_moments(report, out_dir))
        path = os.path.join(out_dir, "diagnostics.json")
        write_json(diag, path)
        manifest.add(path)
        print(f"{sum(len(v) for v in diag['windows'].values())} window integrals, "
              f"{len(diag['cycles'])} cycles")
    except EstimationFailureError as exc:
        print(f"diagnostic estimation failed: {exc}", file=sys.stderr)
        code = EXIT_CHECK
    finally:
        manifest.finish(code)
    return code


def _cmd_check(args) -> int:
    out_dir = _resolve_out(args.out) if args.out else None
    config = load_config(args.config)
    manifest = _Manifest(out_dir, "check", args.config) if out_dir else None
    reports = [
        check_dissipativity(config.model),
        check_lipschitz_and_growth(config.model),
        jacobian_consistency(config.model),
        objective_consistency(config.objective, config.model.d),
    ]
    schedule_report = validate_schedule(config.schedule)
    all_ok = all(r.holds for r in reports) and schedule_report.valid

    for r in reports:
        flag = "PASS" if r.holds else "FAIL"
        extra = f" beta_hat={r.beta_hat:.6g}" if r.beta_hat is not None else ""
        print(f"[{flag}] {r.check}: worst_violation={r.worst_violation:.6g}{extra}")
    sflag = "PASS" if schedule_report.valid else "FAIL"
    print(f"[{sflag}] schedule: reason={schedule_report.reason} "
          f"p_witness={schedule_report.p_witness}")

    code = EXIT_OK if all_ok else EXIT_CHECK
    if manifest is not None:
        payload = {
            "checks": [{
                "check": r.check, "holds": r.holds,
                "worst_violation": r.worst_violation, "beta_hat": r.beta_hat,
                "details": r.details,
            } for r in reports],
            "schedule": {"valid": schedule_report.valid,
                         "reason": schedule_report.reason,
                         "p_witness": schedule_report.p_witness,
                         "conditions": schedule_report.conditions},
            "all_ok": all_ok,
        }
        path = os.path.join(out_dir, "check.json")
        write_json(payload, path)
        manifest.add(path)
        manifest.finish(code)
    return code


def _cmd_compare(args) -> int:
    result = compare_csv(args.a, args.b)
    if result["identical_bytes"]:
        print("identical: yes (byte-for-byte)")
        return EXIT_OK
    print("identical: no")
    print(f"same header: {result['same_header']}; same shape: {result['same_shape']}")
    if result["max_abs_diff"] is not None:
        print(f"max abs diff: {result['max_abs_diff']:.17g} "
              f"(column {result['worst_column']})")
    return EXIT_RUN_FAILED


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="statflow",
        description="Simulate and diagnose stochastic-approximation runs "
                    "driven by coupled SDE lines.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="forward-propagate and write outputs")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--out", default="run_out")
    p_run.add_argument("--seed", type=int, default=None)
    p_run.add_argument("--seeds", type=int, default=1,
                       help="run this many consecutive seeds in lockstep")
    p_run.add_argument("--no-plots", action="store_true")
    p_run.set_defaults(func=_cmd_run)

    p_oracle = sub.add_parser("oracle", help="stationary estimates at frozen theta")
    p_oracle.add_argument("--config", required=True)
    p_oracle.add_argument("--out", default="oracle_out")
    p_oracle.add_argument("--theta", default=None,
                          help="override parameter, e.g. '0.5 1.0'")
    p_oracle.add_argument("--fd", action="store_true",
                          help="add a finite-difference gradient cross-check")
    p_oracle.set_defaults(func=_cmd_oracle)

    p_diag = sub.add_parser("diagnose", help="run plus fluctuation diagnostics")
    p_diag.add_argument("--config", required=True)
    p_diag.add_argument("--out", default="diagnose_out")
    p_diag.add_argument("--lipschitz", type=float, default=1.0,
                        help="smoothness constant used for the cycle budget")
    p_diag.add_argument("--moments", action="store_true")
    p_diag.add_argument("--moments-t", type=float, default=1000.0)
    p_diag.add_argument("--moment-replicas", type=int, default=200)
    p_diag.add_argument("--no-plots", action="store_true")
    p_diag.set_defaults(func=_cmd_diagnose)

    p_check = sub.add_parser("check", help="model assumption and schedule checks")
    p_check.add_argument("--config", required=True)
    p_check.add_argument("--out", default=None)
    p_check.set_defaults(func=_cmd_check)

    p_cmp = sub.add_parser("compare", help="compare two delimited outputs")
    p_cmp.add_argument("a")
    p_cmp.add_argument("b")
    p_cmp.set_defaults(func=_cmd_compare)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
