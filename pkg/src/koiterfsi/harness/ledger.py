"""Energy bookkeeping of coupled trajectories and the a-priori energy inequality."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Protocol

import numpy as np

from ..errors import InequalityViolated

COLUMNS = ("t", "E_fluid_kin", "E_shell_kin", "E_elastic", "D_visc_cum", "W_ext_cum", "balance_residual")


class EnergyTrajectory(Protocol):
    times: np.ndarray
    fluid_kinetic: np.ndarray
    shell_kinetic: np.ndarray
    elastic: np.ndarray
    dissipation: np.ndarray
    work: np.ndarray


@dataclass(frozen=True)
class EnergyRecord:
    t: float
    E_fluid_kin: float
    E_shell_kin: float
    E_elastic: float
    D_visc_cum: float
    W_ext_cum: float
    balance_residual: float

    @property
    def total(self) -> float:
        return self.E_fluid_kin + self.E_shell_kin + self.E_elastic


class EnergyLedger:
    """Append-only table of energy records.

    The balance residual of a record is ``E(t) + D(t) - E(0) - W(t)``, the
    defect of the time-integrated energy identity.  Appending checks that
    time increases, dissipation does not decrease and every entry is finite.
    """

    def __init__(self) -> None:
        self._records: list[EnergyRecord] = []

    def __len__(self) -> int:
        return len(self._records)

    def __iter__(self):
        return iter(self._records)

    def __getitem__(self, i: int) -> EnergyRecord:
        return self._records[i]

    def append(self, t: float, fluid: float, shell: float, elastic: float, dissipation: float, work: float) -> EnergyRecord:
        values = (t, fluid, shell, elastic, dissipation, work)
        if not all(math.isfinite(v) for v in values):
            raise ValueError(f"non-finite energy record at t = {t}")
        if self._records:
            last = self._records[-1]
            if t <= last.t:
                raise ValueError("ledger times must increase")
            if dissipation < last.D_visc_cum:
                raise ValueError(f"cumulative dissipation decreased at t = {t}")
            start = self._records[0].total
        else:
            start = fluid + shell + elastic
        residual = fluid + shell + elastic + dissipation - start - work
        record = EnergyRecord(t, fluid, shell, elastic, dissipation, work, residual)
        self._records.append(record)
        return record

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self._records])

    @property
    def times(self) -> np.ndarray:
        return self.column("t")

    @property
    def total(self) -> np.ndarray:
        return np.array([r.total for r in self._records])

    @property
    def residuals(self) -> np.ndarray:
        return self.column("balance_residual")

    def scale(self) -> float:
        """Reference size for relative residuals: the largest energy or work magnitude seen."""
        return max(
            float(np.max(np.abs(self.total))),
            float(np.max(np.abs(self.column("W_ext_cum")))),
            float(np.max(self.column("D_visc_cum"))),
        )

    def step_residuals(self) -> np.ndarray:
        """Change of the balance residual over each step."""
        return np.diff(self.residuals)

    def max_relative_step_residual(self) -> float:
        scale = self.scale()
        if scale == 0.0 or len(self) < 2:
            return 0.0
        return float(np.max(np.abs(self.step_residuals()))) / scale

    def rows(self) -> list[tuple[float, ...]]:
        return [tuple(getattr(r, c) for c in COLUMNS) for r in self._records]


def energy_ledger(trajectory: EnergyTrajectory) -> EnergyLedger:
    """Ledger of a coupled run: energies at the time levels, dissipation and work accumulated per step."""
    ledger = EnergyLedger()
    dissipation = np.concatenate([[0.0], np.cumsum(trajectory.dissipation)])
    work = np.concatenate([[0.0], np.cumsum(trajectory.work)])
    for i, t in enumerate(trajectory.times):
        ledger.append(
            float(t),
            float(trajectory.fluid_kinetic[i]),
            float(trajectory.shell_kinetic[i]),
            float(trajectory.elastic[i]),
            float(dissipation[i]),
            float(work[i]),
        )
    return ledger


@dataclass(frozen=True)
class GronwallReport:
    """Outcome of :func:`gronwall_check`.

    ``margin[i] = E(0) + W(t_i) + slack - E(t_i) - D(t_i)`` is non-negative
    when the inequality holds.  ``bound_ratio`` compares ``E(t) + D(t)``
    with ``e^t (E(0) + 1/2 int_0^t |f|^2 + |g|^2)``; it stays below one for
    exact solutions.
    """

    times: np.ndarray
    margin: np.ndarray
    slack: float
    worst_time: float
    bound_ratio: np.ndarray

    @property
    def holds(self) -> bool:
        return bool(np.all(self.margin >= 0.0))


def gronwall_check(
    ledger: EnergyLedger,
    forcing_power: np.ndarray | None = None,
    horizon: float | None = None,
    *,
    slack_rel: float = 1e-3,
) -> GronwallReport:
    """Check ``E(t) + D(t) <= E(0) + W(t) + slack`` at every ledger time up to ``horizon``.

    Parameters
    ----------
    ledger
        Complete energy ledger.
    forcing_power
        Values of ``1/2 (|f|^2 + |g|^2)`` at the ledger times, used only for
        the informational ``bound_ratio``.  Zero forcing if omitted.
    slack_rel
        Slack relative to ``max(E(0), max |W|)``.

    Raises
    ------
    InequalityViolated
        With the worst time and the (negative) margin there.
    """
    times = ledger.times
    keep = times <= horizon + 1e-12 if horizon is not None else np.ones(len(times), dtype=bool)
    times = times[keep]
    total = ledger.total[keep]
    dissipation = ledger.column("D_visc_cum")[keep]
    work = ledger.column("W_ext_cum")[keep]
    e0 = float(total[0])
    slack = slack_rel * max(e0, float(np.max(np.abs(work))))
    margin = e0 + work + slack - total - dissipation
    worst = int(np.argmin(margin))

    power = np.zeros(len(times)) if forcing_power is None else np.asarray(forcing_power, dtype=float)[keep]
    forcing = np.concatenate([[0.0], np.cumsum(0.5 * (power[1:] + power[:-1]) * np.diff(times))])
    bound = np.exp(times - times[0]) * (e0 + forcing)
    lhs = total + dissipation
    ratio = np.divide(lhs, bound, out=np.zeros_like(lhs), where=bound > 0)

    report = GronwallReport(times, margin, slack, float(times[worst]), ratio)
    if not report.holds:
        raise InequalityViolated(
            f"energy inequality fails by {-margin[worst]:.3e} at t = {times[worst]:.6f}",
            float(times[worst]),
            float(margin[worst]),
        )
    return report
