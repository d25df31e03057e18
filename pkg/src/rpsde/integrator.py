"""Drift-implicit (backward) Euler for semilinear SDEs with additive noise.

One step solves

    (I + h Lambda) x - h f(t_next, x) = x_prev + g(t_prev) dW

for ``x``.  With ``c_f < lambda_1`` the left-hand side is strongly monotone in
``x``, so the root is unique.  All routines work on batches of shape ``(n, d)``
and treat every row independently: a row's result does not depend on which
other rows share the batch.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .model import ModelEvaluationError, SdeModel
from .noise import GridError, GridSpec, WienerPath

__all__ = [
    "SolverConfig",
    "SolverError",
    "Stepper",
    "Trajectory",
    "drift_jacobian",
    "implicit_step",
    "integrate",
    "integrate_batch",
]


@dataclass(frozen=True)
class SolverConfig:
    residual_tol: float = 1e-12
    max_newton_iters: int = 50
    max_halvings: int = 30
    fd_step: float = 1e-7
    allow_fd: bool = True

    def __post_init__(self):
        if not self.residual_tol > 0:
            raise ValueError("residual_tol must be positive")
        if self.max_newton_iters < 1:
            raise ValueError("max_newton_iters must be >= 1")


class SolverError(RuntimeError):
    """The implicit equation could not be solved to tolerance."""

    def __init__(self, message, best=None, residual=None, step=None, row=None):
        super().__init__(message)
        self.best = best
        self.residual = residual
        self.step = step
        self.row = row


def drift_jacobian(model: SdeModel, t: float, x, cfg: SolverConfig = SolverConfig()) -> np.ndarray:
    """``df/dx`` at ``(t, x)``, analytic if the model has one, else central differences."""
    x = np.asarray(x, dtype=float)
    if model.drift_jac is not None:
        return np.asarray(model.drift_jac(t, x), dtype=float)
    if not cfg.allow_fd:
        raise SolverError("model has no analytic Jacobian and finite differences are disabled")
    d = x.shape[-1]
    eps = cfg.fd_step * (1.0 + np.linalg.norm(x, axis=-1))[..., None]
    cols = []
    for j in range(d):
        e = np.zeros(d)
        e[j] = 1.0
        cols.append((model.drift_f(t, x + eps * e) - model.drift_f(t, x - eps * e)) / (2.0 * eps))
    return np.stack(cols, axis=-1)


class Stepper:
    """Batched implicit solver for one model and step size."""

    def __init__(self, model: SdeModel, h: float, cfg: SolverConfig = SolverConfig()):
        self.model = model
        self.h = h
        self.cfg = cfg
        self.a = 1.0 + h * model.lambda_eigs
        self.dim = model.dimension

    def residual(self, phase, x, rhs):
        return self.a * x - self.h * self.model.drift_f(phase, x) - rhs

    def _direction(self, phase, x, F):
        J = drift_jacobian(self.model, phase, x, self.cfg)
        if self.dim == 1:
            return F / (self.a - self.h * J[..., 0])
        M = np.diag(self.a) - self.h * J
        return np.linalg.solve(M, F[..., None])[..., 0]

    def solve(self, phase: float, rhs: np.ndarray, x_prev: np.ndarray | None = None):
        """Solve the step equation for every row of ``rhs``.

        Returns ``(x, iters, residual)``.  The starting guess depends on
        ``rhs`` only, so equal right-hand sides give bit-equal solutions.
        After the residual drops below tolerance one more Newton update is
        taken, which brings the iterate to round-off accuracy.
        """
        cfg = self.cfg
        tol = cfg.residual_tol
        n = rhs.shape[0]
        x = rhs / self.a
        F = self.residual(phase, x, rhs)
        if not np.all(np.isfinite(F)):
            bad = int(np.flatnonzero(~np.all(np.isfinite(F), axis=-1))[0])
            raise ModelEvaluationError(phase, x[bad])
        r = np.linalg.norm(F, axis=-1)
        iters = np.zeros(n, dtype=np.int64)
        idx = np.arange(n)
        stalled = []

        for it in range(cfg.max_newton_iters + 1):
            if idx.size == 0:
                break
            xa, Fa, ra = x[idx], F[idx], r[idx]
            dx = self._direction(phase, xa, Fa)
            done = ra <= tol
            if done.any():
                di = idx[done]
                xp = xa[done] - dx[done]
                Fp = self.residual(phase, xp, rhs[di])
                rp = np.linalg.norm(Fp, axis=-1)
                ok = rp <= tol
                x[di[ok]] = xp[ok]
                F[di[ok]] = Fp[ok]
                r[di[ok]] = rp[ok]
                iters[di] += 1
            if it == cfg.max_newton_iters:
                break
            live = ~done
            ni = idx[live]
            if ni.size == 0:
                idx = ni
                break
            x0, step, r0, b = xa[live], dx[live], ra[live], rhs[ni]
            x_try = x0 - step
            F_try = self.residual(phase, x_try, b)
            r_try = np.linalg.norm(F_try, axis=-1)
            bad = ~(r_try < r0)
            s = np.ones(ni.size)
            for _ in range(cfg.max_halvings):
                if not bad.any():
                    break
                s[bad] *= 0.5
                x_try[bad] = x0[bad] - s[bad, None] * step[bad]
                F_try[bad] = self.residual(phase, x_try[bad], b[bad])
                r_try[bad] = np.linalg.norm(F_try[bad], axis=-1)
                bad = ~(r_try < r0)
            good = ~bad
            x[ni[good]] = x_try[good]
            F[ni[good]] = F_try[good]
            r[ni[good]] = r_try[good]
            iters[ni] += 1
            stalled.extend(ni[bad].tolist())
            idx = ni[good]

        failed = sorted(set(stalled) | set(np.flatnonzero(~(r <= tol)).tolist()))
        for i in failed:
            try:
                xi, ri, k = self._fallback(phase, rhs[i], x[i] if x_prev is None else x_prev[i])
            except SolverError as exc:
                exc.row = i
                raise
            x[i], r[i] = xi, ri
            iters[i] += k
        return x, iters, r

    def _fallback(self, phase, rhs, x_prev):
        tol = self.cfg.residual_tol
        if self.dim == 1:
            xi, k = self._bisect(phase, float(rhs[0]))
            x = np.array([xi])
        else:
            best, best_r, k = None, math.inf, 0
            for start in (x_prev, rhs / (1.0 + self.h * self.model.lambda_1)):
                x, kk = self._damped_newton(phase, rhs, np.array(start, dtype=float))
                k += kk
                rr = float(np.linalg.norm(self.residual(phase, x, rhs)))
                if rr < best_r:
                    best, best_r = x, rr
                if rr <= tol:
                    break
            x = best
        res = float(np.linalg.norm(self.residual(phase, x[None, :], rhs[None, :])))
        if not res <= tol:
            raise SolverError(f"implicit solve failed (residual {res:.3e})", best=x, residual=res)
        return x, res, k

    def _bisect(self, phase, rhs):
        def phi(v):
            return float(self.residual(phase, np.array([[v]]), np.array([[rhs]]))[0, 0])

        x0 = rhs / float(self.a[0])
        width = 1.0 + abs(x0)
        lo, hi = x0 - width, x0 + width
        k = 0
        while phi(lo) > 0 and k < 200:
            lo -= width
            width *= 2.0
            k += 1
        width = 1.0 + abs(x0)
        while phi(hi) < 0 and k < 400:
            hi += width
            width *= 2.0
            k += 1
        for _ in range(2000):
            mid = 0.5 * (lo + hi)
            if not lo < mid < hi:
                break
            pm = phi(mid)
            k += 1
            if pm == 0.0:
                return mid, k
            if pm < 0:
                lo = mid
            else:
                hi = mid
        return (lo if abs(phi(lo)) <= abs(phi(hi)) else hi), k

    def _damped_newton(self, phase, rhs, x):
        cfg = self.cfg
        b = rhs[None, :]
        x = x[None, :]
        F = self.residual(phase, x, b)
        r = float(np.linalg.norm(F))
        k = 0
        for k in range(1, max(4 * cfg.max_newton_iters, 200) + 1):
            if r <= cfg.residual_tol:
                break
            dx = self._direction(phase, x, F)
            s = 1.0
            for _ in range(2 * cfg.max_halvings):
                xt = x - s * dx
                Ft = self.residual(phase, xt, b)
                rt = float(np.linalg.norm(Ft))
                if rt < r:
                    break
                s *= 0.5
            else:
                break
            x, F, r = xt, Ft, rt
        return x[0], k

    def step(self, x, dW, phase_prev, phase_next):
        """Advance a batch one step; ``dW`` has the same shape as ``x``."""
        g = np.asarray(self.model.diffusion_g(phase_prev), dtype=float)
        rhs = x + g * dW
        return self.solve(phase_next, rhs, x_prev=x)


def implicit_step(model: SdeModel, t_next: float, x_prev, noise_term, h: float,
                  cfg: SolverConfig = SolverConfig()) -> np.ndarray:
    """Solve one backward Euler step for a single state vector."""
    x_prev = np.asarray(x_prev, dtype=float).reshape(1, -1)
    rhs = x_prev + np.asarray(noise_term, dtype=float).reshape(1, -1)
    x, _, _ = Stepper(model, h, cfg).solve(t_next % model.tau, rhs, x_prev)
    return x[0]


def _check_step(model: SdeModel, grid: GridSpec) -> None:
    if not 0 < grid.h < 1:
        raise GridError(f"step must lie in (0, 1), got {grid.h}")
    model.check_dissipative()


def integrate_batch(model: SdeModel, grid: GridSpec, increments: np.ndarray, x0,
                    cfg: SolverConfig = SolverConfig(), keep: np.ndarray | None = None):
    """Integrate ``n`` samples at once.

    ``increments`` has shape ``(n, n_cells, d)``.  Returns the states at grid
    indices ``keep`` (all points by default) as ``(n, len(keep), d)``, plus
    per-step iteration counts and residuals of shape ``(n, n_cells)``.
    """
    _check_step(model, grid)
    n, cells, d = increments.shape
    if cells != grid.n_cells or d != model.dimension:
        raise GridError("increment array does not match grid and model dimension")
    keep = np.arange(cells + 1) if keep is None else np.asarray(keep)
    want = np.zeros(cells + 1, dtype=bool)
    want[keep] = True
    slot = np.cumsum(want) - 1
    out = np.empty((n, keep.size, d))
    x = np.broadcast_to(np.asarray(x0, dtype=float), (n, d)).copy()
    if want[0]:
        out[:, slot[0]] = x
    iters = np.zeros((n, cells), dtype=np.int64)
    res = np.zeros((n, cells))
    phases = grid.phases(model.tau)
    stepper = Stepper(model, grid.h, cfg)
    for j in range(1, cells + 1):
        try:
            x, iters[:, j - 1], res[:, j - 1] = stepper.step(x, increments[:, j - 1], phases[j - 1], phases[j])
        except SolverError as exc:
            exc.step = j
            raise
        if want[j]:
            out[:, slot[j]] = x
    return out, iters, res


@dataclass(frozen=True, eq=False)
class Trajectory:
    grid: GridSpec
    states: np.ndarray
    newton_iters: np.ndarray
    residuals: np.ndarray

    @property
    def times(self) -> np.ndarray:
        return self.grid.times

    def at(self, t: float) -> np.ndarray:
        return self.states[self.grid.index_of(t)]

    def to_csv(self, fh) -> None:
        d = self.states.shape[1]
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t"] + [f"x_{i + 1}" for i in range(d)] + ["newton_iters", "residual"])
        iters = np.concatenate([[0], self.newton_iters])
        res = np.concatenate([[0.0], self.residuals])
        for t, row, k, r in zip(self.times, self.states, iters, res):
            w.writerow([repr(float(t))] + [repr(float(v)) for v in row] + [int(k), repr(float(r))])


def integrate(model: SdeModel, grid: GridSpec, path: WienerPath, x0,
              cfg: SolverConfig = SolverConfig()) -> Trajectory:
    """Run the scheme on one noise path, recording every state."""
    if path.grid != grid:
        raise GridError("path grid differs from integration grid")
    x0 = np.asarray(x0, dtype=float).reshape(-1)
    if not np.all(np.isfinite(x0)):
        raise ValueError("initial value must be finite")
    states, iters, res = integrate_batch(model, grid, path.increments[None], x0, cfg)
    return Trajectory(grid, states[0], iters[0], res[0])
