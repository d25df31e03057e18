"""Pull-back approximations of the random periodic solution and periodicity checks."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .integrator import SolverConfig, SolverError, integrate
from .model import SdeModel
from .noise import GridError, GridSpec, as_integer, sample_path, shift

__all__ = [
    "CauchyDiagnostic",
    "PeriodicityGap",
    "PullbackRun",
    "cauchy_diagnostic",
    "periodicity_gap",
    "pullback_values",
]

SATURATION_FLOOR = 1e-14


def _steps_per_period(model: SdeModel, h: float) -> int:
    return as_integer(model.tau / h, f"tau/h (tau={model.tau}, h={h})")


@dataclass(frozen=True, eq=False)
class PullbackRun:
    model: SdeModel
    h: float
    xi: np.ndarray
    anchor_t: float
    k_list: tuple[int, ...]
    values: np.ndarray
    seed: int
    stream_id: int = 0


def pullback_values(model: SdeModel, h: float, xi, anchor_t: float, k_list, seed: int,
                    stream_id: int = 0, cfg: SolverConfig = SolverConfig()) -> PullbackRun:
    """Integrate from ``-k*tau`` to ``anchor_t`` for each ``k``, all under one noise realisation.

    Noise is keyed to absolute cell indices, so a run started further back
    reuses every increment of the shorter runs.
    """
    _steps_per_period(model, h)
    k_list = tuple(int(k) for k in k_list)
    if any(b <= a for a, b in zip(k_list, k_list[1:])):
        raise ValueError("k_list must be strictly increasing")
    as_integer(anchor_t / h, f"anchor_t/h (anchor_t={anchor_t})")
    xi = np.asarray(xi, dtype=float).reshape(-1)
    values = []
    for k in k_list:
        if -k * model.tau > anchor_t:
            raise GridError(f"start -{k}*tau lies after anchor_t={anchor_t}")
        if -k * model.tau == anchor_t:
            values.append(xi.copy())
            continue
        grid = GridSpec.spanning(-k * model.tau, anchor_t, h)
        path = sample_path(grid, seed, stream_id, model.dimension, grid.key_index())
        try:
            traj = integrate(model, grid, path, xi, cfg)
        except SolverError as exc:
            raise SolverError(f"pull-back from k={k}: {exc}", exc.best, exc.residual, exc.step) from exc
        values.append(traj.states[-1])
    return PullbackRun(model, h, xi, anchor_t, k_list, np.array(values), seed, stream_id)


@dataclass(frozen=True)
class CauchyDiagnostic:
    ks: tuple[int, ...]
    diff_sq: tuple[float, ...]
    slope: float | None
    saturated: bool

    def to_csv(self, fh, run: PullbackRun) -> None:
        """Rows ``k, value..., diff_sq`` with ``diff_sq`` measured against ``k + 1``."""
        w = csv.writer(fh, lineterminator="\n")
        d = run.values.shape[1]
        w.writerow(["k"] + [f"value_{i + 1}" for i in range(d)] + ["diff_sq"])
        by_k = dict(zip(self.ks, self.diff_sq))
        for k, v in zip(run.k_list, run.values):
            dsq = repr(by_k[k]) if k in by_k else ""
            w.writerow([k] + [repr(float(c)) for c in v] + [dsq])


def cauchy_diagnostic(run: PullbackRun) -> CauchyDiagnostic:
    """Squared differences of consecutive pull-back values and their log-slope in ``k``.

    Differences below the saturation floor (in norm) are excluded from the
    slope fit; the slope is ``None`` when fewer than two remain.
    """
    if len(run.k_list) < 3:
        raise ValueError("need at least three values of k")
    ks, diffs = [], []
    for i in range(len(run.k_list) - 1):
        if run.k_list[i + 1] != run.k_list[i] + 1:
            continue
        ks.append(run.k_list[i])
        diffs.append(float(np.sum((run.values[i + 1] - run.values[i]) ** 2)))
    if len(ks) < 2:
        raise ValueError("need at least three consecutive values of k")
    floor = SATURATION_FLOOR**2
    use = [(k, d) for k, d in zip(ks, diffs) if d > floor]
    saturated = len(use) < len(ks)
    slope = None
    if len(use) >= 2:
        kk = np.array([k for k, _ in use], dtype=float)
        ll = np.log([d for _, d in use])
        slope = float(np.polyfit(kk, ll, 1)[0])
    return CauchyDiagnostic(tuple(ks), tuple(diffs), slope, saturated)


@dataclass(frozen=True, eq=False)
class PeriodicityGap:
    """Sup-distance between ``X(s; omega)`` and ``X(s + m*tau; theta_{-m tau} omega)``.

    ``window`` is given in the time of the first (unshifted) trajectory.
    """

    window: tuple[float, float]
    shift_periods: int
    gap: float
    times: np.ndarray
    x_lagged: np.ndarray
    x_shifted: np.ndarray

    @property
    def series(self) -> np.ndarray:
        return np.linalg.norm(self.x_lagged - self.x_shifted, axis=-1)

    def to_csv(self, fh) -> None:
        w = csv.writer(fh, lineterminator="\n")
        d = self.x_lagged.shape[1]
        if d == 1:
            head = ["t", "x_lagged", "x_shifted", "gap"]
        else:
            head = (["t"] + [f"x_lagged_{i + 1}" for i in range(d)]
                    + [f"x_shifted_{i + 1}" for i in range(d)] + ["gap"])
        w.writerow(head)
        for t, a, b, g in zip(self.times, self.x_lagged, self.x_shifted, self.series):
            w.writerow([repr(float(t))] + [repr(float(v)) for v in a]
                       + [repr(float(v)) for v in b] + [repr(float(g))])


def periodicity_gap(model: SdeModel, h: float, start_t: float, xi, shift_periods: int,
                    window: tuple[float, float], seed: int, stream_id: int = 0,
                    cfg: SolverConfig = SolverConfig()) -> PeriodicityGap:
    """Compare the trajectory under ``omega`` with the one under the shifted noise.

    Both start at ``start_t`` from ``xi``.  For times ``s`` in ``window`` the
    first trajectory at ``s`` is compared with the second at ``s + m*tau``;
    for a random periodic solution the two coincide.
    """
    per = _steps_per_period(model, h)
    m = int(shift_periods)
    lo, hi = float(window[0]), float(window[1])
    if hi < lo or lo < start_t:
        raise GridError(f"window {window} must start at or after {start_t}")
    lag = m * model.tau
    end = max(hi, hi + lag)
    grid = GridSpec.spanning(start_t, end, h)
    j_lo, j_hi = grid.index_of(lo), grid.index_of(hi)
    if lo + lag < start_t:
        raise GridError("shifted window precedes the start time")
    path = sample_path(grid, seed, stream_id, model.dimension, grid.key_index())
    first = integrate(model, grid, path, xi, cfg)
    second = integrate(model, grid, shift(path, -m * per), xi, cfg)
    sl = slice(j_lo, j_hi + 1)
    sl2 = slice(j_lo + m * per, j_hi + m * per + 1)
    a, b = first.states[sl], second.states[sl2]
    gap = float(np.max(np.linalg.norm(a - b, axis=-1)))
    return PeriodicityGap((lo, hi), m, gap, grid.times[sl], a, b)
