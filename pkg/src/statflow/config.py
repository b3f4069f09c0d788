"""INI-file configuration for runs.

A config file has sections [model], [objective], [schedule], and optional
[run], [oracle], [diagnostics].  ``load_config`` turns one into a validated
:class:`~statflow.algorithm.RunConfig`; every rejection is a
:class:`ConfigError` naming the offending section and key.  ``config_text_hash``
fingerprints the exact bytes of the file for run manifests.

Built-in model kinds are ``ou`` and ``tanh``; ``kind = custom`` imports a
zero-argument factory given as ``factory = package.module:callable``.  The
same escape hatch exists for [objective].
"""

from __future__ import annotations

import configparser
import hashlib
import importlib

import numpy as np

from statflow.algorithm import RunConfig
from statflow.integrator import InvalidBudget
from statflow.models import (
    InvalidParameterError,
    ObjectiveSpec,
    SdeModel,
    coordinate_objective,
    make_ou_model,
    make_tanh_model,
    mean_objective,
)
from statflow.schedule import Schedule, validate_schedule

__all__ = ["ConfigError", "load_config", "config_text_hash"]


class ConfigError(ValueError):
    """A config file is missing, malformed, or fails validation."""


def config_text_hash(path) -> str:
    """sha256 hex digest of the raw config bytes, for provenance manifests."""
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def _get(parser, section, key, cast, default=None, required=False):
    if not parser.has_option(section, key):
        if required:
            raise ConfigError(f"[{section}] is missing required key '{key}'")
        return default
    raw = parser.get(section, key)
    try:
        return cast(raw)
    except ValueError as exc:
        raise ConfigError(f"[{section}] {key} = {raw!r}: {exc}") from exc


def _to_bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _to_vector(raw: str) -> np.ndarray:
    parts = [p for p in raw.replace(",", " ").split() if p]
    return np.array([float(p) for p in parts])


def _load_factory(section: str, spec: str):
    if ":" not in spec:
        raise ConfigError(
            f"[{section}] factory = {spec!r}: expected 'package.module:callable'"
        )
    mod_name, _, attr = spec.partition(":")
    try:
        mod = importlib.import_module(mod_name)
    except ImportError as exc:
        raise ConfigError(f"[{section}] factory module {mod_name!r} not importable: {exc}") from exc
    try:
        fn = getattr(mod, attr)
    except AttributeError as exc:
        raise ConfigError(f"[{section}] factory {attr!r} not found in {mod_name!r}") from exc
    return fn


def _build_model(parser) -> SdeModel:
    kind = _get(parser, "model", "kind", str, required=True).strip().lower()
    if kind == "ou":
        a = _get(parser, "model", "a", float, required=True)
        sigma = _get(parser, "model", "sigma", float, required=True)
        d = _get(parser, "model", "d", int, default=1)
        try:
            return make_ou_model(a, sigma, d=d)
        except InvalidParameterError as exc:
            raise ConfigError(f"[model] {exc}") from exc
    if kind == "tanh":
        a = _get(parser, "model", "a", float, required=True)
        c = _get(parser, "model", "c", float, required=True)
        s0 = _get(parser, "model", "s0", float, required=True)
        s1 = _get(parser, "model", "s1", float, required=True)
        d = _get(parser, "model", "d", int, default=1)
        try:
            return make_tanh_model(a, c, s0, s1, d=d)
        except InvalidParameterError as exc:
            raise ConfigError(f"[model] {exc}") from exc
    if kind == "custom":
        spec = _get(parser, "model", "factory", str, required=True)
        obj = _load_factory("model", spec)()
        if not isinstance(obj, SdeModel):
            raise ConfigError("[model] custom factory did not return an SdeModel")
        return obj
    raise ConfigError(f"[model] kind = {kind!r}: expected 'ou', 'tanh', or 'custom'")


def _build_objective(parser, d: int) -> ObjectiveSpec:
    kind = _get(parser, "objective", "kind", str, required=True).strip().lower()
    if kind == "coordinate":
        beta = _get(parser, "objective", "beta", float, required=True)
        index = _get(parser, "objective", "index", int, default=0)
        if not 0 <= index < d:
            raise ConfigError(f"[objective] index = {index} out of range for d = {d}")
        return coordinate_objective(d, beta, index=index)
    if kind == "mean":
        beta = _get(parser, "objective", "beta", float, required=True)
        return mean_objective(d, beta)
    if kind == "custom":
        spec = _get(parser, "objective", "factory", str, required=True)
        obj = _load_factory("objective", spec)()
        if not isinstance(obj, ObjectiveSpec):
            raise ConfigError("[objective] custom factory did not return an ObjectiveSpec")
        return obj
    raise ConfigError(f"[objective] kind = {kind!r}: expected 'coordinate', 'mean', or 'custom'")


def load_config(path) -> RunConfig:
    """Parse and validate an INI run configuration.

    The schedule and the model constructor constraints are enforced here, so
    an invalid step-size law or a non-dissipative built-in never reaches the
    integrator.
    """
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    read = parser.read(path)
    if not read:
        raise ConfigError(f"config file {path!r} not found or empty")
    for section in ("model", "objective", "schedule"):
        if not parser.has_section(section):
            raise ConfigError(f"missing required section [{section}]")

    model = _build_model(parser)
    objective = _build_objective(parser, model.d)

    c = _get(parser, "schedule", "c", float, required=True)
    q = _get(parser, "schedule", "q", float, required=True)
    schedule = Schedule(c=c, q=q)
    report = validate_schedule(schedule)
    if not report.valid:
        raise ConfigError(f"[schedule] c={c}, q={q} rejected: {report.reason}")

    kwargs = dict(model=model, objective=objective, schedule=schedule)
    if parser.has_section("run"):
        for key, cast in (
            ("dt", float), ("t_end", float), ("seed", int),
            ("log_stride", float), ("checkpoint_stride", float),
            ("kappa", float), ("record_noise", _to_bool),
        ):
            val = _get(parser, "run", key, cast)
            if val is not None:
                kwargs[key] = val
        for key in ("theta0", "x0", "x_bar0"):
            val = _get(parser, "run", key, _to_vector)
            if val is not None:
                kwargs[key] = val
        xt = _get(parser, "run", "x_tilde0", _to_vector)
        if xt is not None:
            kwargs["x_tilde0"] = xt.reshape(model.d, model.ell)
    if parser.has_section("oracle"):
        mapping = (("t", "oracle_t", float), ("replicas", "oracle_replicas", int),
                   ("burn_in_frac", "oracle_burn_in_frac", float),
                   ("refresh_stride", "oracle_refresh_stride", float))
        for key, attr, cast in mapping:
            val = _get(parser, "oracle", key, cast)
            if val is not None:
                kwargs[attr] = val
    if parser.has_section("diagnostics"):
        val = _get(parser, "diagnostics", "enabled", _to_bool)
        if val is not None:
            kwargs["diagnostics"] = val
        val = _get(parser, "diagnostics", "terminal_oracle", _to_bool)
        if val is not None:
            kwargs["terminal_oracle"] = val

    config = RunConfig(**kwargs)
    try:
        config.validate()
    except InvalidBudget as exc:
        raise ConfigError(f"invalid run parameters: {exc}") from exc
    return config
