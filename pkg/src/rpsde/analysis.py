"""Monte Carlo verification harness: strong error, rate fits, moment bounds, Hölder scaling.

Samples are processed in fixed-size batches; every sample's numbers depend
only on its stream id, and all reductions over samples use exactly rounded
summation (:func:`math.fsum`).  Reported values therefore do not depend on
batch size, worker count or evaluation order.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np

from .integrator import SolverConfig, SolverError, Stepper, integrate_batch
from .model import SdeModel
from .noise import GridError, GridSpec, as_integer, coarsen_increments, keyed_normals

__all__ = [
    "ErrorRow",
    "ErrorTable",
    "HolderReport",
    "MomentBoundReport",
    "RateReport",
    "fit_rate",
    "holder_check",
    "moment_bound",
    "moment_bound_check",
    "ms_error_table",
]

DEFAULT_BATCH = 500


def _batches(n_samples: int, batch: int) -> list[np.ndarray]:
    return [np.arange(s, min(s + batch, n_samples)) for s in range(0, n_samples, batch)]


def _map(fn, jobs: list[tuple], workers: int) -> list:
    if workers <= 1 or len(jobs) <= 1:
        return [fn(*job) for job in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, *zip(*jobs)))


def _mean_and_stderr(values: np.ndarray) -> tuple[float, float]:
    n = values.size
    mean = math.fsum(values.tolist()) / n
    if n < 2:
        return mean, math.nan
    var = math.fsum(((values - mean) ** 2).tolist()) / (n - 1)
    return mean, math.sqrt(var / n)


# --- strong error ---------------------------------------------------------------


@dataclass(frozen=True)
class ErrorRow:
    h: float
    d_terminal: float
    d_sup: float
    stderr: float


@dataclass(frozen=True)
class ErrorTable:
    """Mean-square differences between each step size and the reference step.

    ``d_sup`` is the largest mean-square difference over the points of the
    coarsest grid, which all levels share.
    """

    t0: float
    T: float
    h_ref: float
    rows: tuple[ErrorRow, ...]
    n_samples: int
    seed: int
    x0: tuple[float, ...]

    def pairs(self) -> list[tuple[float, float]]:
        return [(r.h, r.d_terminal) for r in self.rows]

    def to_csv(self, fh) -> None:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["h", "D_h_terminal", "D_h_sup", "stderr"])
        for r in self.rows:
            w.writerow([repr(r.h), repr(r.d_terminal), repr(r.d_sup), repr(r.stderr)])


def _error_batch(model, t0, h_ref, n_ref, factors, streams, seed, x0, cfg):
    """Squared level-vs-reference differences on the coarsest grid, per sample."""
    d = model.dimension
    n = streams.size
    f_max = max(factors)
    n_common = n_ref // f_max
    block = f_max * max(1, 2048 // f_max)
    while n_ref % block:
        block //= 2
    levels = [1] + list(factors)
    steppers = [Stepper(model, h_ref * f, cfg) for f in levels]
    phases = [GridSpec(t0, h_ref * f, n_ref // f).phases(model.tau) for f in levels]
    states = [np.broadcast_to(x0, (n, d)).copy() for _ in levels]
    out = np.empty((n, len(factors), n_common + 1))
    out[:, :, 0] = 0.0
    for b0 in range(0, n_ref, block):
        base = math.sqrt(h_ref) * keyed_normals(seed, streams, np.arange(b0, b0 + block), d)
        incs = [base if f == 1 else coarsen_increments(base, f) for f in levels]
        for c0 in range(0, block, f_max):
            for li, f in enumerate(levels):
                k0 = (b0 + c0) // f
                for k in range(f_max // f):
                    j = k0 + k
                    try:
                        states[li], _, _ = steppers[li].step(
                            states[li], incs[li][:, c0 // f + k], phases[li][j], phases[li][j + 1])
                    except SolverError as exc:
                        sample = None if exc.row is None else int(streams[exc.row])
                        raise SolverError(f"sample {sample}, h={h_ref * f}: {exc}",
                                          exc.best, exc.residual, j + 1, sample) from exc
            p = (b0 + c0) // f_max + 1
            ref = states[0]
            for li in range(1, len(levels)):
                out[:, li - 1, p] = np.sum((states[li] - ref) ** 2, axis=-1)
    return out


def ms_error_table(model: SdeModel, t0: float, T: float, i_list, i_ref: int, n_samples: int,
                   seed: int, x0=0.0, cfg: SolverConfig = SolverConfig(), workers: int = 1,
                   batch: int = DEFAULT_BATCH) -> ErrorTable:
    """Estimate ``E|X_T^h - X_T^{h_ref}|^2`` for ``h = (T - t0) 2^-i``.

    Every sample draws one Brownian path at the reference step and coarsens
    it to each level, so all step sizes see the same noise.
    """
    i_list = sorted(int(i) for i in i_list)
    if not T > t0:
        raise GridError("need T > t0")
    if not i_list or i_ref <= i_list[-1]:
        raise GridError("i_ref must exceed every i in i_list")
    if n_samples < 2:
        raise ValueError("need at least two samples")
    span = T - t0
    h_ref = span * 2.0**-i_ref
    n_ref = 2**i_ref
    factors = [2 ** (i_ref - i) for i in i_list]
    for f in factors:
        if not 0 < h_ref * f < 1:
            raise GridError(f"step {h_ref * f} outside (0, 1)")
    model.check_dissipative()
    x0 = np.asarray(x0, dtype=float).reshape(-1)
    if x0.size == 1:
        x0 = np.full(model.dimension, x0[0])

    jobs = [(model, t0, h_ref, n_ref, factors, s, seed, x0, cfg) for s in _batches(n_samples, batch)]
    sq = np.concatenate(_map(_error_batch, jobs, workers), axis=0)
    rows = []
    for li, f in enumerate(factors):
        d_term, err = _mean_and_stderr(sq[:, li, -1])
        d_sup = max(math.fsum(sq[:, li, p].tolist()) for p in range(sq.shape[2])) / n_samples
        rows.append(ErrorRow(h_ref * f, d_term, d_sup, err))
    rows.sort(key=lambda r: -r.h)
    return ErrorTable(t0, T, h_ref, tuple(rows), n_samples, seed, tuple(x0.tolist()))


# --- rate fit --------------------------------------------------------------------


@dataclass(frozen=True)
class RateReport:
    """Least-squares fit of ``log D = log C + kappa_ms log h``.

    ``kappa_rms = kappa_ms / 2`` is the exponent of the root-mean-square error.
    ``residual`` is the 2-norm of the natural-log residuals.
    """

    kappa_ms: float
    kappa_rms: float
    log_c: float
    residual: float

    def to_dict(self) -> dict:
        return asdict(self)


def fit_rate(rows) -> RateReport:
    rows = list(rows)
    if len(rows) < 2:
        raise ValueError("need at least two (h, D_h) pairs")
    h = np.array([r[0] for r in rows], dtype=float)
    D = np.array([r[1] for r in rows], dtype=float)
    if np.any(h <= 0) or np.any(D <= 0):
        raise ValueError("step sizes and errors must be positive")
    A = np.column_stack([np.ones_like(h), np.log(h)])
    (log_c, kappa), *_ = np.linalg.lstsq(A, np.log(D), rcond=None)
    resid = float(np.linalg.norm(np.log(D) - A @ np.array([log_c, kappa])))
    return RateReport(float(kappa), float(kappa) / 2.0, float(log_c), resid)


# --- moment bound ----------------------------------------------------------------


def moment_bound(model: SdeModel, p: int, xi=0.0) -> float:
    """Time-uniform bound on ``E[(1 + |X_t|^2)^p]`` for a deterministic start ``xi``.

    ``(1 + |xi|^2)^p + ((2p - 1) c_g^2 + 2 lambda_1)^p / ((p + 1)(lambda_1 - c_f)^p)``
    """
    model.check_dissipative()
    lam, c_f, c_g = model.lambda_1, model.c_f, model.c_g
    xi2 = float(np.sum(np.asarray(xi, dtype=float) ** 2))
    return (1.0 + xi2) ** p + ((2 * p - 1) * c_g**2 + 2 * lam) ** p / ((p + 1) * (lam - c_f) ** p)


@dataclass(frozen=True)
class MomentBoundReport:
    p: int
    empirical: float
    stderr: float
    upper: float
    running_max: float
    theoretical: float
    passed: bool
    n_samples: int
    h: float
    horizon: float

    def to_dict(self) -> dict:
        out = asdict(self)
        out["pass"] = out.pop("passed")
        return out


def _moment_batch(model, grid, keep, streams, seed, x0, p, cfg):
    inc = math.sqrt(grid.h) * keyed_normals(seed, streams, np.arange(grid.n_cells), model.dimension)
    states, _, _ = integrate_batch(model, grid, inc, x0, cfg, keep=keep)
    return (1.0 + np.sum(states**2, axis=-1)) ** p


def moment_bound_check(model: SdeModel, p: int, h: float, horizon_T: float, n_samples: int,
                       seed: int, xi=0.0, t0: float = 0.0, cfg: SolverConfig = SolverConfig(),
                       workers: int = 1, batch: int = DEFAULT_BATCH,
                       n_monitor: int = 200) -> MomentBoundReport:
    """Compare the Monte Carlo moment at ``t0 + horizon_T`` with :func:`moment_bound`.

    ``running_max`` is the largest sample mean over ``n_monitor`` equally
    spaced monitoring times.  Passes when mean + 3 standard errors at the
    final time stays below the bound.
    """
    if p < 1:
        raise ValueError("p must be >= 1")
    theory = moment_bound(model, p, xi)
    grid = GridSpec.spanning(t0, t0 + horizon_T, h)
    keep = np.unique(np.linspace(0, grid.n_cells, min(n_monitor, grid.n_cells) + 1).round().astype(int))
    x0 = np.broadcast_to(np.asarray(xi, dtype=float), (model.dimension,)).copy()
    jobs = [(model, grid, keep, s, seed, x0, p, cfg) for s in _batches(n_samples, batch)]
    vals = np.concatenate(_map(_moment_batch, jobs, workers), axis=0)
    emp, err = _mean_and_stderr(vals[:, -1])
    running = max(math.fsum(vals[:, i].tolist()) / n_samples for i in range(vals.shape[1]))
    upper = emp + 3.0 * (0.0 if math.isnan(err) else err)
    return MomentBoundReport(p, emp, err, upper, running, theory, upper <= theory,
                             n_samples, h, horizon_T)


# --- Hölder scaling --------------------------------------------------------------


@dataclass(frozen=True)
class HolderReport:
    deltas: tuple[float, ...]
    l2_norms: tuple[float, ...]
    exponent: float


def _holder_batch(model, grid, keep, streams, seed, x0, cfg):
    inc = math.sqrt(grid.h) * keyed_normals(seed, streams, np.arange(grid.n_cells), model.dimension)
    states, _, _ = integrate_batch(model, grid, inc, x0, cfg, keep=keep)
    return np.sum((states[:, 1:] - states[:, :1]) ** 2, axis=-1)


def holder_check(model: SdeModel, t_anchor: float, delta_list, n_samples: int, h: float,
                 seed: int, t0: float | None = None, xi=0.0, cfg: SolverConfig = SolverConfig(),
                 workers: int = 1, batch: int = DEFAULT_BATCH) -> HolderReport:
    """L2 norms of ``X(t_anchor + delta) - X(t_anchor)`` and their log-log slope in ``delta``.

    Each ``delta`` must be a multiple of ``h``.  The path starts at ``t0``
    (default ``t_anchor - 5``) so the initial transient has decayed.
    """
    deltas = sorted(float(v) for v in delta_list)
    t0 = t_anchor - 5.0 if t0 is None else t0
    grid = GridSpec.spanning(t0, t_anchor + deltas[-1], h)
    j0 = grid.index_of(t_anchor)
    keep = np.array([j0] + [j0 + as_integer(dl / h, f"delta/h for delta={dl}") for dl in deltas])
    x0 = np.broadcast_to(np.asarray(xi, dtype=float), (model.dimension,)).copy()
    jobs = [(model, grid, keep, s, seed, x0, cfg) for s in _batches(n_samples, batch)]
    sq = np.concatenate(_map(_holder_batch, jobs, workers), axis=0)
    norms = [math.sqrt(math.fsum(sq[:, i].tolist()) / n_samples) for i in range(len(deltas))]
    slope = float(np.polyfit(np.log(deltas), np.log(norms), 1)[0])
    return HolderReport(tuple(deltas), tuple(norms), slope)
