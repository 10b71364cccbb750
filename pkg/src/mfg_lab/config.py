"""Experiment configuration: flat dotted key = value text files.

Format: one `section.key = value` assignment per line; blank lines and
lines starting with '#' are ignored.  Unknown keys are rejected with the
offending line number, as are type and choice violations.  The shipped
schema documentation lives in configs/schema.txt; this module is the
authoritative definition.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Optional

from .models import COUPLINGS, HAMILTONIANS, M0_PRESETS, builtin_quadratic

__all__ = ["ConfigError", "ExperimentConfig", "parse_config", "SCHEMA", "KINDS"]


class ConfigError(ValueError):
    pass


KINDS = (
    "solve",
    "fictitious-play",
    "stability",
    "isolation",
    "nonuniqueness",
    "convergence-study",
)

MODEL_NAMES = ("decoupled", *COUPLINGS.keys())


@dataclass(frozen=True)
class _Key:
    type: type
    default: Any
    choices: Optional[tuple] = None
    required: bool = False


SCHEMA: dict[str, _Key] = {
    "experiment.kind": _Key(str, None, KINDS, required=True),
    "model.name": _Key(str, "decoupled", MODEL_NAMES),
    "model.theta": _Key(float, 0.0),
    "model.hamiltonian": _Key(str, "quadratic", (*HAMILTONIANS.keys(), "abs")),
    "model.m0": _Key(str, "uniform", tuple(M0_PRESETS.keys())),
    "model.m0_amplitude": _Key(float, 0.5),
    "grid.dim": _Key(int, 1, (1, 2)),
    "grid.n_space": _Key(int, 32),
    "grid.n_time": _Key(int, 64),
    "grid.t0": _Key(float, 0.0),
    "grid.T": _Key(float, 1.0),
    "solver.damping": _Key(float, 0.5),
    "solver.tol": _Key(float, 1e-9),
    "solver.max_iter": _Key(int, 300),
    "fp.n_max": _Key(int, 300),
    "fp.gap_tol": _Key(float, 1e-9),
    "fp.reference": _Key(str, "picard", ("picard", "none")),
    "fp.attractor_deltas": _Key(str, ""),
    "fp.attractor_trials": _Key(int, 10),
    "fp.success_err": _Key(float, 5e-4),
    "stability.t1_fractions": _Key(str, "0.0,0.1,0.25,0.5"),
    "stability.tol": _Key(float, 1e-6),
    "stability.method": _Key(str, "auto", ("auto", "dense", "iterative")),
    "isolation.etas": _Key(str, "0.0,0.01"),
    "isolation.trials": _Key(int, 5),
    "nonuniqueness.thetas": _Key(str, "1,4,16,64"),
    "nonuniqueness.horizons": _Key(str, "0.5,1,2,4,8"),
    "nonuniqueness.steps_per_unit_time": _Key(int, 128),
    "nonuniqueness.fp_rounds": _Key(int, 150),
    "nonuniqueness.tol": _Key(float, 1e-6),
    "nonuniqueness.refine": _Key(int, 1, (0, 1)),
    "study.n_list": _Key(str, "32,64,128"),
    "study.heat_n": _Key(int, 64),
    "study.heat_k": _Key(int, 256),
    "study.heat_horizon": _Key(float, 0.25),
    "seed": _Key(int, 0),
    "output.write_fields": _Key(int, 1, (0, 1)),
}


def _convert(key: str, raw: str, line_no: int) -> Any:
    entry = SCHEMA[key]
    try:
        if entry.type is int:
            value: Any = int(raw)
        elif entry.type is float:
            value = float(raw)
        else:
            value = raw
    except ValueError as exc:
        raise ConfigError(
            f"line {line_no}: invalid {entry.type.__name__} for '{key}': {raw!r}"
        ) from exc
    if entry.choices is not None and value not in entry.choices:
        raise ConfigError(
            f"line {line_no}: '{key}' must be one of {entry.choices}, got {value!r}"
        )
    return value


@dataclass
class ExperimentConfig:
    values: dict

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    @property
    def kind(self) -> str:
        return self.values["experiment.kind"]

    def float_list(self, key: str) -> list[float]:
        raw = self.values[key].strip()
        if not raw:
            return []
        try:
            return [float(tok) for tok in raw.split(",")]
        except ValueError as exc:
            raise ConfigError(f"'{key}' is not a comma-separated float list") from exc

    def int_list(self, key: str) -> list[int]:
        return [int(round(v)) for v in self.float_list(key)]

    def make_model(self):
        name = self.values["model.name"]
        coupling = "none" if name == "decoupled" else name
        return builtin_quadratic(
            theta=self.values["model.theta"],
            coupling=coupling,
            dim=self.values["grid.dim"],
            t0=self.values["grid.t0"],
            T=self.values["grid.T"],
            m0=self.values["model.m0"],
            hamiltonian=self.values["model.hamiltonian"],
            m0_amplitude=self.values["model.m0_amplitude"],
        )

    def make_grid(self):
        from .grid import TorusGrid

        return TorusGrid(
            dim=self.values["grid.dim"],
            n_space=self.values["grid.n_space"],
            n_time=self.values["grid.n_time"],
            t0=self.values["grid.t0"],
            T=self.values["grid.T"],
        )


def parse_config(text: str, overrides: Optional[dict] = None) -> ExperimentConfig:
    """Parse and validate config text; overrides are applied after the file."""
    values: dict[str, Any] = {}
    seen: dict[str, int] = {}
    for line_no, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {line_no}: expected 'key = value', got {line!r}")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        raw = raw.strip()
        if key not in SCHEMA:
            raise ConfigError(f"line {line_no}: unknown key '{key}'")
        if key in seen:
            raise ConfigError(
                f"line {line_no}: duplicate key '{key}' (first set on line {seen[key]})"
            )
        seen[key] = line_no
        values[key] = _convert(key, raw, line_no)
    for key, entry in SCHEMA.items():
        if key not in values:
            if entry.required and not (overrides and key in overrides):
                raise ConfigError(f"missing required key '{key}'")
            values[key] = entry.default
    if overrides:
        for key, val in overrides.items():
            if key not in SCHEMA:
                raise ConfigError(f"unknown override key '{key}'")
            values[key] = val
    if values["grid.T"] <= values["grid.t0"]:
        raise ConfigError("grid.T must exceed grid.t0")
    return ExperimentConfig(values=values)


def load_config(path, overrides: Optional[dict] = None) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read(), overrides)
