"""Flat ``key = value`` run configuration and the scenario it describes.

Lines are ``section.name = value``; ``#`` starts a comment.  Every key has
a typed default and unknown keys are errors, so a configuration file fully
determines a run.  Forcing presets are written as calls::

    forcing.g = pulse(0.05, 1.0, 3.14159, 0.785398)
    forcing.f = constant(-0.5)
    forcing.g = table(loads.csv)
"""

from __future__ import annotations

import csv
import math
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

import numpy as np

from ..coupling import CouplingSettings, FluidShellData, Model
from ..errors import ConfigError
from ..geometry import SphereGeometry
from ..operators import mean_correct_values
from ..shell import ElasticParams

DEFAULTS: dict[str, Any] = {
    "geometry.radius": 1.0,
    "geometry.theta_gamma": math.pi / 6,
    "shell.lambda": 1.0,
    "shell.mu": 1.0,
    "shell.eps0": 0.1,
    "shell.grid": 120,
    "galerkin.n_modes_surface": 8,
    "galerkin.n_modes_interior": 8,
    "galerkin.dt": 1e-3,
    "galerkin.horizon": 1.0,
    "galerkin.cutoff_ratio": 0.975,
    "coupling.epsilon": 0.05,
    "coupling.relax": 0.7,
    "coupling.fp_tol": 1e-6,
    "coupling.fp_max_iters": 50,
    "coupling.margin": 0.95,
    "coupling.max_shrinks": 3,
    "run.horizon": 1.0,
    "run.restart_window": 0.25,
    "forcing.f": "none",
    "forcing.g": "pulse(0.05, 1.0, 3.141592653589793, 0.7853981633974483)",
    "initial.eta1_amplitude": 0.0,
    "output.snapshot_stride": 10,
    "tolerances.energy_slack": 1e-3,
    "tolerances.junction": 1e-6,
}

_LINE = re.compile(r"^\s*([A-Za-z_][\w]*(?:\.[A-Za-z_][\w]*)+)\s*=\s*(.*?)\s*$")
_CALL = re.compile(r"^(\w+)\s*(?:\((.*)\))?$")


def _coerce(key: str, raw: str) -> Any:
    default = DEFAULTS[key]
    try:
        if isinstance(default, bool):
            if raw.lower() not in ("true", "false"):
                raise ValueError(raw)
            return raw.lower() == "true"
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot read {raw!r} as {type(default).__name__}", key) from None
    return raw


def parse_config(text: str) -> dict[str, Any]:
    """Parse configuration text into a complete key map (defaults filled in)."""
    values = dict(DEFAULTS)
    for number, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        match = _LINE.match(stripped)
        if match is None:
            raise ConfigError(f"line {number}: expected 'section.key = value', got {line.strip()!r}")
        key, raw = match.groups()
        if key not in DEFAULTS:
            raise ConfigError(f"unknown key {key!r} on line {number}", key)
        values[key] = _coerce(key, raw)
    return values


def apply_overrides(values: dict[str, Any], overrides: list[str]) -> dict[str, Any]:
    out = dict(values)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = (s.strip() for s in item.split("=", 1))
        if key not in DEFAULTS:
            raise ConfigError(f"unknown key {key!r} in override", key)
        out[key] = _coerce(key, raw)
    return out


# ---------------------------------------------------------------------------
# forcing presets
# ---------------------------------------------------------------------------


def zonal_bump(center: float, width: float) -> Callable[[np.ndarray], np.ndarray]:
    """``exp(1 - 1/(1 - s^2))`` with ``s = (theta - center)/width``, peak one at ``center``."""

    def bump(theta: np.ndarray) -> np.ndarray:
        s = (np.asarray(theta, dtype=float) - center) / width
        inside = np.abs(s) < 1.0
        return np.where(inside, np.exp(1.0 - 1.0 / np.where(inside, 1.0 - s**2, 1.0)), 0.0)

    return bump


@dataclass(frozen=True)
class ForcingSpec:
    """A parsed forcing preset: ``none``, ``constant(a)``, ``pulse(a, freq, center, width)`` or ``table(path)``."""

    kind: str
    args: tuple[Any, ...] = ()

    @classmethod
    def parse(cls, key: str, text: str) -> "ForcingSpec":
        match = _CALL.match(text.strip())
        if match is None:
            raise ConfigError(f"{key}: cannot parse forcing {text!r}", key)
        kind, raw_args = match.groups()
        args = [a.strip() for a in raw_args.split(",")] if raw_args else []
        expected = {"none": 0, "constant": 1, "pulse": 4, "table": 1}
        if kind not in expected:
            raise ConfigError(f"{key}: unknown forcing preset {kind!r}", key)
        if len(args) != expected[kind]:
            raise ConfigError(f"{key}: {kind} takes {expected[kind]} arguments, got {len(args)}", key)
        if kind == "table":
            return cls(kind, (args[0],))
        try:
            return cls(kind, tuple(float(a) for a in args))
        except ValueError:
            raise ConfigError(f"{key}: non-numeric argument in {text!r}", key) from None

    def time_factor(self) -> Callable[[float], float]:
        amplitude, frequency = self.args[0], self.args[1]
        if frequency == 0.0:
            return lambda t: amplitude
        return lambda t: amplitude * math.sin(2.0 * math.pi * frequency * t)


def surface_load(spec: ForcingSpec, geometry: SphereGeometry, base: Path | None, key: str = "forcing.g"):
    """Surface force ``g(t, theta)`` on the shell (positive values push outwards).

    ``pulse`` with zero frequency is a steady load.  ``table`` reads a CSV
    with columns ``t, node, value`` (node indexes the shell unknowns) and
    interpolates linearly in time.
    """
    if spec.kind == "none":
        return None
    if spec.kind == "constant":
        a = spec.args[0]
        return lambda t, theta: np.full(np.shape(theta), a)
    if spec.kind == "pulse":
        center, width = spec.args[2], spec.args[3]
        if width <= 0.0 or center - width < geometry.theta_gamma or center > math.pi:
            raise ConfigError(f"{key}: bump support must lie inside the free part of the shell", key)
        factor, bump = spec.time_factor(), zonal_bump(center, width)
        return lambda t, theta: factor(t) * bump(theta)
    return _table_load(Path(spec.args[0]) if base is None else base / spec.args[0], key)


def _table_load(path: Path, key: str):
    try:
        with open(path, newline="") as handle:
            rows = [(float(r["t"]), int(r["node"]), float(r["value"])) for r in csv.DictReader(handle)]
    except (OSError, KeyError, ValueError) as exc:
        raise ConfigError(f"{key}: cannot read table {path}: {exc}", key) from None
    times = np.unique([r[0] for r in rows])
    nodes = 1 + max(r[1] for r in rows)
    table = np.zeros((len(times), nodes))
    for t, node, value in rows:
        table[np.searchsorted(times, t), node] = value

    def load(t: float, theta: np.ndarray) -> np.ndarray:
        if len(theta) != nodes:
            raise ConfigError(f"{key}: table has {nodes} nodes, shell has {len(theta)}", key)
        return np.array([np.interp(t, times, table[:, j]) for j in range(nodes)])

    return load


def body_force(spec: ForcingSpec, key: str = "forcing.f"):
    """Axial body force ``f = a(t) bump(theta) e_z`` in meridian components."""
    if spec.kind == "none":
        return None
    if spec.kind == "table":
        raise ConfigError(f"{key}: tabulated forcing is only supported for the surface load", key)
    if spec.kind == "constant":
        factor, bump = (lambda t: spec.args[0]), (lambda theta: np.ones(np.shape(theta)))
    else:
        factor, bump = spec.time_factor(), zonal_bump(spec.args[2], spec.args[3])

    def force(t: float, rho: np.ndarray, theta: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        size = factor(t) * bump(theta)
        return size * np.cos(theta), -size * np.sin(theta)

    return force


# ---------------------------------------------------------------------------
# run configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RunConfig:
    values: dict[str, Any]
    base: Path | None = None

    @classmethod
    def load(cls, path: str | Path, overrides: list[str] | None = None) -> "RunConfig":
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        values = apply_overrides(parse_config(text), overrides or [])
        config = cls(values, path.parent)
        config.validate()
        return config

    @classmethod
    def from_text(cls, text: str, overrides: list[str] | None = None) -> "RunConfig":
        config = cls(apply_overrides(parse_config(text), overrides or []))
        config.validate()
        return config

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    def validate(self) -> None:
        v = self.values
        positive = [
            "geometry.radius",
            "galerkin.dt",
            "galerkin.horizon",
            "coupling.epsilon",
            "coupling.fp_tol",
            "run.horizon",
            "run.restart_window",
        ]
        for key in positive:
            if not v[key] > 0:
                raise ConfigError(f"{key} must be positive", key)
        for key in ("galerkin.n_modes_surface", "galerkin.n_modes_interior", "coupling.fp_max_iters", "output.snapshot_stride"):
            if v[key] < 1:
                raise ConfigError(f"{key} must be at least 1", key)
        if v["shell.grid"] < 8:
            raise ConfigError("shell.grid must be at least 8", "shell.grid")
        if not 0 < v["coupling.relax"] <= 1:
            raise ConfigError("coupling.relax must lie in (0, 1]", "coupling.relax")
        if not 0 < v["coupling.margin"] < 1:
            raise ConfigError("coupling.margin must lie in (0, 1)", "coupling.margin")
        if not 0 < v["galerkin.cutoff_ratio"] < 1:
            raise ConfigError("galerkin.cutoff_ratio must lie in (0, 1)", "galerkin.cutoff_ratio")
        if not 0 < v["geometry.theta_gamma"] < math.pi:
            raise ConfigError("geometry.theta_gamma must lie in (0, pi)", "geometry.theta_gamma")
        surface_load(self.forcing("forcing.g"), self.geometry(), self.base)
        body_force(self.forcing("forcing.f"))
        try:
            ElasticParams(v["shell.lambda"], v["shell.mu"], v["shell.eps0"])
        except ValueError as exc:
            raise ConfigError(f"shell parameters: {exc}", "shell.mu") from None

    def forcing(self, key: str) -> ForcingSpec:
        return ForcingSpec.parse(key, self.values[key])

    @property
    def horizon(self) -> float:
        """The run stops at the smaller of the run and Galerkin horizons."""
        return min(self.values["run.horizon"], self.values["galerkin.horizon"])

    def geometry(self) -> SphereGeometry:
        return SphereGeometry(self.values["geometry.radius"], self.values["geometry.theta_gamma"])

    def settings(self, epsilon: float | None = None) -> CouplingSettings:
        v = self.values
        return CouplingSettings(
            eps=v["coupling.epsilon"] if epsilon is None else epsilon,
            dt=v["galerkin.dt"],
            relax=v["coupling.relax"],
            tol=v["coupling.fp_tol"],
            max_iter=v["coupling.fp_max_iters"],
            margin=v["coupling.margin"],
            window=v["run.restart_window"],
            max_shrinks=v["coupling.max_shrinks"],
        )

    def model(self) -> Model:
        v = self.values
        return Model(
            self.geometry(),
            ElasticParams(v["shell.lambda"], v["shell.mu"], v["shell.eps0"]),
            n_grid=v["shell.grid"],
            n_interior=v["galerkin.n_modes_interior"],
            n_boundary=v["galerkin.n_modes_surface"],
            cutoff_ratio=v["galerkin.cutoff_ratio"],
        )

    def data(self, model: Model) -> FluidShellData:
        geometry = model.geometry
        g = surface_load(self.forcing("forcing.g"), geometry, self.base)
        f = body_force(self.forcing("forcing.f"))
        zero = np.zeros(model.n_unknowns)
        eta1 = self.values["initial.eta1_amplitude"] * compatible_rate_profile(model, zero)
        return FluidShellData(zero, eta1, None, f, g)


def compatible_rate_profile(model: Model, eta0: np.ndarray) -> np.ndarray:
    """Unit-size clamped shell rate with zero ``gamma(eta0)``-weighted mean."""
    theta = model.grid.unknown_theta
    raw = (np.cos(theta) - math.cos(model.geometry.theta_gamma)) ** 2
    bump = zonal_bump(math.pi, math.pi / 4)(theta)
    weights = model.grid.quadrature_weights[1:]
    corrected = mean_correct_values(raw, eta0, bump, weights, model.geometry.radius)
    return corrected / np.max(np.abs(corrected))
