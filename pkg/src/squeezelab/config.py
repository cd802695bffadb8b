"""
Run configuration: a flat ``key = value`` text file plus ``--set`` overrides.

Lines are ``key = value``; ``#`` starts a comment. Physical parameters, noise
settings and noise-budget inputs are addressed with the prefixes ``params.``,
``noise.`` and ``budget.`` (for example ``noise.detector_noise_density``).
Lists are comma separated. Unknown keys are an error.
"""

from __future__ import annotations

import dataclasses
import hashlib
import math
import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

from .calibration import DEFAULT_TEMPERATURES
from .measurement import NoiseSpec
from .noise_budget import NoiseInputs
from .phasespace import PhysicalParams

__all__ = ["ConfigError", "RunConfig", "EXPERIMENTS", "SEED_ENV", "parse_text", "load_config"]

SEED_ENV = "SQUEEZELAB_SEED"
EXPERIMENTS = ("time-sweep", "r-sweep", "calib-tof", "calib-lattice", "noise-budget", "oracle-check")


_NOT_HASHED = ("workers", "output_dir")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    experiment: str
    master_seed: int
    output_dir: str = "squeezelab-out"
    workers: int = 1
    params: PhysicalParams = field(default_factory=PhysicalParams)
    noise: NoiseSpec = field(default_factory=lambda: NoiseSpec(lattice_jitter_variance=0.21))
    budget: NoiseInputs = field(default_factory=NoiseInputs)
    # sweeps
    r: float = 0.85
    r_values: tuple[float, ...] = (0.0, 0.40, 0.58, 0.73, 0.85)
    n_half_periods: int = 0
    hold_start: float = 0.0
    hold_stop: float = 8e-6
    hold_step: float = 1e-7
    n_trials: int = 300
    n_initial: float = 0.98
    heating: bool = False
    fit_cross_term: bool = True
    fit_position_term: bool = True
    reweight: int = 3
    # oracle
    oracle_n_trials: int = 100_000
    oracle_n_holds: int = 8
    oracle_threshold: float = 0.02
    oracle_hold_offset_periods: int = 0
    # calibration
    k_true: float = 1e9
    calib_n_trials: int = 5000
    temperatures: tuple[float, ...] = DEFAULT_TEMPERATURES
    area_noise: float = 0.015
    temperature_systematic: float = 0.0
    low_n_broadening: float = 0.0
    shifts_hz: tuple[float, ...] = (0.2e6, 0.4e6, 0.6e6, 0.8e6, 1.0e6, 1.2e6, 1.4e6)
    n_traces: int = 120
    readout_noise_volts: float = 0.0
    intensity_droop: bool = False
    tau_scan_shift_hz: float = 1e6
    lattice_distance: float = 16.6e-3
    wavelength: float = 1551.38e-9
    cross_check: bool = True
    points_csv: str = ""
    # noise budget
    vn_fitted: float = 0.21

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"unknown experiment {self.experiment!r}")
        if self.master_seed < 0:
            raise ConfigError("master_seed must be non-negative")
        for name in ("workers", "n_trials", "oracle_n_trials", "oracle_n_holds", "calib_n_trials", "n_traces"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be at least 1")
        if min(self.n_half_periods, self.reweight, self.oracle_hold_offset_periods) < 0:
            raise ConfigError("n_half_periods, reweight and oracle_hold_offset_periods must be non-negative")
        if not (self.hold_step > 0 and self.hold_stop > self.hold_start >= 0):
            raise ConfigError("hold grid needs 0 <= hold_start < hold_stop and hold_step > 0")
        if self.r < 0 or any(r < 0 for r in self.r_values):
            raise ConfigError("squeezing parameters must be non-negative")
        if not 0 < self.oracle_threshold < 1:
            raise ConfigError("oracle_threshold must lie in (0, 1)")

    def echo(self) -> dict[str, Any]:
        """Flat resolved configuration, every key that can be set."""
        out: dict[str, Any] = {}
        for f in fields(self):
            val = getattr(self, f.name)
            if dataclasses.is_dataclass(val):
                for g in fields(val):
                    if g.name == "params":
                        continue
                    out[f"{f.name}.{g.name}"] = _plain(getattr(val, g.name))
            else:
                out[f.name] = _plain(val)
        return dict(sorted(out.items()))

    def config_hash(self) -> str:
        """SHA-256 of the settings that determine the results (not workers or output_dir)."""
        text = "\n".join(f"{k}={_format(v)}" for k, v in self.echo().items()
                         if k not in _NOT_HASHED)
        return hashlib.sha256(text.encode()).hexdigest()


def _plain(v):
    return list(v) if isinstance(v, tuple) else v


def _format(v) -> str:
    if isinstance(v, list):
        return ",".join(_format(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v).lower() if isinstance(v, bool) else str(v)


def parse_text(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        out[key] = value
    return out


def _convert(key: str, raw: str, default):
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("true", "yes", "on", "1"):
                return True
            if low in ("false", "no", "off", "0"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            val = float(raw)
            if not math.isfinite(val):
                raise ValueError(raw)
            return val
        if isinstance(default, tuple):
            return tuple(float(x) for x in raw.split(",") if x.strip())
        return raw
    except ValueError:
        raise ConfigError(f"invalid value for {key}: {raw!r}") from None


def _build(cls, defaults, overrides: dict[str, str], prefix: str, extra: dict | None = None):
    kwargs = dict(extra or {})
    for f in fields(cls):
        key = f"{prefix}{f.name}"
        if key in overrides:
            kwargs[f.name] = _convert(key, overrides[key], getattr(defaults, f.name))
    try:
        return dataclasses.replace(defaults, **kwargs)
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from None


def load_config(
    experiment: str,
    path: str | Path | None = None,
    overrides: list[str] | None = None,
    environ: dict[str, str] | None = None,
) -> RunConfig:
    """Resolve file values, then ``--set`` overrides, then the seed environment variable."""
    environ = os.environ if environ is None else environ
    values: dict[str, str] = {}
    if path is not None:
        try:
            values.update(parse_text(Path(path).read_text()))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override must be key=value, got {item!r}")
        k, v = (s.strip() for s in item.split("=", 1))
        values[k] = v
    if SEED_ENV in environ:
        values["master_seed"] = environ[SEED_ENV]
    if "master_seed" not in values:
        raise ConfigError(f"master_seed is required (config, --set master_seed=N or {SEED_ENV})")

    scalar = {f.name: f for f in fields(RunConfig) if f.name not in ("experiment", "params", "noise", "budget")}
    nested = ("params.", "noise.", "budget.")
    unknown = [k for k in values if k not in scalar and not (k.startswith(nested) and k.split(".", 1)[1])]
    base = RunConfig(experiment, 0) if experiment in EXPERIMENTS else None
    if base is None:
        raise ConfigError(f"unknown experiment {experiment!r}")
    known_nested = {f"params.{f.name}" for f in fields(PhysicalParams)} | \
                   {f"noise.{f.name}" for f in fields(NoiseSpec)} | \
                   {f"budget.{f.name}" for f in fields(NoiseInputs) if f.name != "params"}
    unknown += [k for k in values if k.startswith(nested) and k not in known_nested]
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(set(unknown)))}")

    params = _build(PhysicalParams, base.params, values, "params.")
    noise = _build(NoiseSpec, base.noise, values, "noise.")
    budget = _build(NoiseInputs, base.budget, values, "budget.", {"params": params})
    kwargs = {k: _convert(k, v, getattr(base, k)) for k, v in values.items() if k in scalar}
    try:
        return RunConfig(experiment=experiment, params=params, noise=noise, budget=budget, **kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
