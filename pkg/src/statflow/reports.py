"""Delimited and JSON outputs for runs.

All writers are atomic (write to a sibling temp file, then ``os.replace``) and
byte-deterministic: floats are rendered with 17 significant digits, rows end
with "\\n", and JSON keys are sorted.  Two runs with the same seed and config
therefore produce byte-identical files.
"""

from __future__ import annotations

import json
import os
import tempfile

import numpy as np

__all__ = [
    "format_float",
    "write_trajectory_csv",
    "write_checkpoint_csv",
    "write_json",
    "write_summary_json",
    "validate_summary",
    "read_csv",
    "compare_csv",
    "trajectory_header",
    "checkpoint_header",
]

SUMMARY_SCHEMA_VERSION = 1


def format_float(x: float) -> str:
    # 17 significant digits round-trip IEEE doubles exactly
    return format(float(x), ".17g")


def _atomic_write_text(path: str, text: str) -> None:
    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=".part")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def trajectory_header(ell: int) -> list[str]:
    cols = ["t"]
    cols += [f"theta_{i}" for i in range(ell)]
    cols += [f"G_{i}" for i in range(ell)]
    cols += ["alpha", "norm_x", "norm_xtilde", "norm_xbar"]
    return cols


def checkpoint_header(ell: int) -> list[str]:
    return trajectory_header(ell) + ["j_hat", "grad_j_hat_norm", "z1_norm", "z2_norm"]


def _csv_text(header: list[str], columns: list[np.ndarray]) -> str:
    n = columns[0].shape[0]
    lines = [",".join(header)]
    for i in range(n):
        lines.append(",".join(format_float(col[i]) for col in columns))
    return "\n".join(lines) + "\n"


def write_trajectory_csv(log, path: str) -> None:
    """Stride records of one run: t, theta_*, G_*, alpha, and the three state norms."""
    cols = [log.t]
    cols += [log.theta[:, i] for i in range(log.ell)]
    cols += [log.g[:, i] for i in range(log.ell)]
    cols += [log.alpha, log.norm_x, log.norm_xtilde, log.norm_xbar]
    _atomic_write_text(path, _csv_text(trajectory_header(log.ell), cols))


def write_checkpoint_csv(log, path: str) -> None:
    """Checkpoint records with the oracle-backed diagnostic columns appended."""
    cp = log.checkpoints
    if cp is None:
        raise ValueError("run log has no checkpoint series (diagnostics were disabled)")
    cols = [cp.t]
    cols += [cp.theta[:, i] for i in range(log.ell)]
    cols += [cp.g[:, i] for i in range(log.ell)]
    cols += [cp.alpha, cp.norm_x, cp.norm_xtilde, cp.norm_xbar]
    cols += [cp.j_hat, cp.grad_j_hat_norm,
             np.linalg.norm(cp.z1, axis=-1), np.linalg.norm(cp.z2, axis=-1)]
    _atomic_write_text(path, _csv_text(checkpoint_header(log.ell), cols))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    return obj


def write_json(obj: dict, path: str) -> None:
    text = json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n"
    _atomic_write_text(path, text)


def write_summary_json(summary: dict, path: str) -> None:
    out = dict(summary)
    out["schema_version"] = SUMMARY_SCHEMA_VERSION
    problems = validate_summary(out)
    if problems:
        raise ValueError("summary failed validation: " + "; ".join(problems))
    write_json(out, path)


# (key, types, nullable)
_SUMMARY_FIELDS = [
    ("schema_version", (int,), False),
    ("seed", (int,), False),
    ("t_end", (int, float), False),
    ("diverged", (bool,), False),
    ("divergence_time", (int, float), True),
    ("theta_end", (list,), True),
    ("kappa", (int, float), False),
    ("j_hat", (int, float), True),
    ("grad_j_hat_norm", (int, float), True),
    ("e_pi_f", (int, float), True),
    ("success", (bool,), True),
    ("wall_time_s", (int, float), False),
]


def validate_summary(summary: dict) -> list[str]:
    """Check the run summary against the documented schema; returns problems."""
    problems = []
    if not isinstance(summary, dict):
        return ["summary is not an object"]
    for key, types, nullable in _SUMMARY_FIELDS:
        if key not in summary:
            problems.append(f"missing key '{key}'")
            continue
        val = summary[key]
        if val is None:
            if not nullable:
                problems.append(f"'{key}' must not be null")
            continue
        if isinstance(val, bool) and bool not in types:
            problems.append(f"'{key}' has wrong type bool")
            continue
        if not isinstance(val, types):
            problems.append(f"'{key}' has wrong type {type(val).__name__}")
    theta = summary.get("theta_end")
    if isinstance(theta, list) and not all(isinstance(v, (int, float)) for v in theta):
        problems.append("'theta_end' entries must be numbers")
    if summary.get("diverged") is True and summary.get("divergence_time") is None:
        problems.append("diverged run must record 'divergence_time'")
    return problems


def read_csv(path: str) -> tuple[list[str], np.ndarray]:
    with open(path, "r", newline="") as fh:
        header = fh.readline().strip().split(",")
        data = np.loadtxt(fh, delimiter=",", ndmin=2)
    if data.size == 0:
        data = data.reshape(0, len(header))
    return header, data


def compare_csv(path_a: str, path_b: str) -> dict:
    """Byte-level and per-column comparison of two delimited outputs."""
    with open(path_a, "rb") as fh:
        raw_a = fh.read()
    with open(path_b, "rb") as fh:
        raw_b = fh.read()
    result = {"identical_bytes": raw_a == raw_b}
    header_a, data_a = read_csv(path_a)
    header_b, data_b = read_csv(path_b)
    result["same_header"] = header_a == header_b
    result["same_shape"] = data_a.shape == data_b.shape
    if result["same_header"] and result["same_shape"] and data_a.size:
        diff = np.abs(data_a - data_b)
        result["max_abs_diff"] = float(np.max(diff))
        worst = int(np.argmax(np.max(diff, axis=0)))
        result["worst_column"] = header_a[worst]
    elif result["same_header"] and result["same_shape"]:
        result["max_abs_diff"] = 0.0
        result["worst_column"] = None
    else:
        result["max_abs_diff"] = None
        result["worst_column"] = None
    return result
