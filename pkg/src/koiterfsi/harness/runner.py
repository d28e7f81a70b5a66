"""Run driver: configuration in, trajectory, ledger and artifact files out."""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np

from ..coupling import CoupledTrajectory, CouplingSolver, FluidShellData, Model, StopReason, forcing_power
from ..errors import Diverged, InequalityViolated
from .config import RunConfig
from .diagnostics import StructureMonitor
from .ledger import COLUMNS, EnergyLedger, energy_ledger, gronwall_check

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_DIVERGED = 2


def _fmt(x: float) -> str:
    return format(float(x), ".12g")


def write_energy_csv(ledger: EnergyLedger, path: Path) -> None:
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(COLUMNS)
        for row in ledger.rows():
            writer.writerow([_fmt(x) for x in row])


def write_snapshots_csv(model: Model, trajectory: CoupledTrajectory, stride: int, path: Path) -> None:
    """Long-format ``t, theta, eta, eta_t`` on the full colatitude grid every ``stride`` steps."""
    theta = model.grid.theta
    steps = list(range(0, len(trajectory.times), stride))
    if steps[-1] != len(trajectory.times) - 1:
        steps.append(len(trajectory.times) - 1)
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(("t", "theta", "eta", "eta_t"))
        for i in steps:
            eta = model.grid.full(trajectory.displacement[i])
            rate = model.grid.full(trajectory.rate[i])
            t = _fmt(trajectory.times[i])
            for th, e, r in zip(theta, eta, rate):
                writer.writerow((t, _fmt(th), _fmt(e), _fmt(r)))


def _checksum(*paths: Path) -> str:
    digest = hashlib.sha256()
    for path in paths:
        digest.update(path.read_bytes())
    return digest.hexdigest()


@dataclass
class RunOutcome:
    trajectory: CoupledTrajectory | None
    ledger: EnergyLedger | None
    summary: dict[str, Any]
    exit_code: int


def summarize(
    model: Model, data: FluidShellData, trajectory: CoupledTrajectory, ledger: EnergyLedger, slack_rel: float
) -> dict[str, Any]:
    power = forcing_power(model, data, trajectory.times)
    try:
        report = gronwall_check(ledger, power, slack_rel=slack_rel)
        gronwall = {
            "holds": True,
            "worst_time": report.worst_time,
            "min_margin": float(np.min(report.margin)),
            "max_bound_ratio": float(np.max(report.bound_ratio)),
        }
    except InequalityViolated as exc:
        gronwall = {"holds": False, "worst_time": exc.worst_time, "min_margin": exc.slack, "max_bound_ratio": None}
    jumps = trajectory.junctions
    return {
        "stop_reason": trajectory.stop_reason.value,
        "t_star": float(trajectory.t_star),
        "steps": int(len(trajectory.times) - 1),
        "windows": len(trajectory.iteration_logs),
        "fp_iterations": [len(log) for log in trajectory.iteration_logs],
        "fp_final_residuals": [log[-1] for log in trajectory.iteration_logs],
        "max_balance_residual": float(np.max(np.abs(ledger.residuals))),
        "max_relative_step_residual": ledger.max_relative_step_residual(),
        "max_junction_jump": max((max(j["displacement"], j["rate"], j["velocity"]) for j in jumps), default=0.0),
        "max_displacement": float(np.max(np.abs(trajectory.displacement))),
        "min_area_factor": trajectory.min_area_factor(model.geometry),
        "gronwall": gronwall,
    }


def execute(config: RunConfig, out_dir: str | Path) -> RunOutcome:
    """Run one trajectory and write ``energy.csv``, ``shell_snapshots.csv`` and ``summary.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    model = config.model()
    data = config.data(model)
    monitor = StructureMonitor()
    solver = CouplingSolver(model, data, config.settings(), monitor=monitor)
    message = None
    try:
        trajectory = solver.advance_until_collision(config.horizon)
        exit_code = EXIT_OK
    except Diverged as exc:
        trajectory, exit_code, message = exc.trajectory, EXIT_DIVERGED, str(exc)

    if trajectory is None:
        summary: dict[str, Any] = {"stop_reason": StopReason.DIVERGED.value, "t_star": 0.0, "message": message}
        ledger = None
    else:
        ledger = energy_ledger(trajectory)
        summary = summarize(model, data, trajectory, ledger, config["tolerances.energy_slack"])
        summary["junctions_continuous"] = summary["max_junction_jump"] < config["tolerances.junction"]
        if message:
            summary["message"] = message
        energy_path, snap_path = out / "energy.csv", out / "shell_snapshots.csv"
        write_energy_csv(ledger, energy_path)
        write_snapshots_csv(model, trajectory, config["output.snapshot_stride"], snap_path)
        summary["checksum"] = _checksum(energy_path, snap_path)
    summary["structure"] = monitor.summary()
    summary["config"] = dict(sorted(config.values.items()))
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return RunOutcome(trajectory, ledger, summary, exit_code)


# ---------------------------------------------------------------------------
# epsilon study
# ---------------------------------------------------------------------------


@dataclass
class EpsilonStudy:
    """Distances ``|eta_{eps/2} - eta_eps|`` in ``L2(I x M)`` for each requested ``eps``."""

    values: list[float]
    distances: list[float]
    horizons: list[float]

    @property
    def strictly_decreasing(self) -> bool:
        return all(b < a for a, b in zip(self.distances, self.distances[1:]))


def l2_time_space(model: Model, times: np.ndarray, a: np.ndarray, b: np.ndarray) -> float:
    """``L2(I x M)`` norm of ``a - b`` with the Simpson area weights and the trapezoid rule in time."""
    weights = model.grid.quadrature_weights[1:]
    density = np.sum(weights * (a - b) ** 2, axis=1)
    return float(np.sqrt(np.trapezoid(density, times)))


def study_epsilon(config: RunConfig, values: list[float]) -> EpsilonStudy:
    """Run the configured scenario at every ``eps`` and ``eps/2`` and compare displacements.

    Each pair is compared on the common time span, which is the full
    horizon unless one of the runs stopped early.
    """
    model = config.model()
    data = config.data(model)
    cache: dict[float, CoupledTrajectory] = {}

    def run(eps: float) -> CoupledTrajectory:
        if eps not in cache:
            cache[eps] = CouplingSolver(model, data, config.settings(eps)).advance_until_collision(config.horizon)
        return cache[eps]

    distances, horizons = [], []
    for eps in values:
        coarse, fine = run(eps), run(0.5 * eps)
        n = min(len(coarse.times), len(fine.times))
        distances.append(l2_time_space(model, coarse.times[:n], coarse.displacement[:n], fine.displacement[:n]))
        horizons.append(float(coarse.times[n - 1]))
    return EpsilonStudy(list(values), distances, horizons)
