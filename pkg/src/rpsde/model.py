"""Semilinear SDE models ``dX = (-Lambda X + f(t, X)) dt + g(t) dW``.

``Lambda`` is given by its eigenvalues and acts diagonally: the computational
basis is the eigenbasis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.stats import qmc

from .expr import compile_diffusion, compile_drift

__all__ = [
    "AssumptionReport",
    "ModelError",
    "ModelEvaluationError",
    "ProbeConfig",
    "SdeModel",
    "builtin_example",
    "eval_drift",
    "model_from_dict",
    "validate_assumptions",
]

BUILTIN_NAMES = ("example1", "example2")


class ModelError(ValueError):
    """Invalid model definition."""


class ModelEvaluationError(FloatingPointError):
    def __init__(self, t, x, what="drift"):
        super().__init__(f"non-finite {what} at t={t!r}, x={np.asarray(x).tolist()!r}")
        self.t = t
        self.x = x


@dataclass(frozen=True, eq=False)
class SdeModel:
    """Problem data plus the declared structural constants.

    ``drift_f(t, x)`` and ``drift_jac(t, x)`` accept ``x`` with shape
    ``(..., d)`` and return shapes ``(..., d)`` and ``(..., d, d)``.
    ``diffusion_g(t)`` returns a scalar or a length-``d`` vector of
    per-component intensities.  ``source`` is the dict recipe the model was
    built from; it is what gets pickled when models are sent to worker
    processes.
    """

    lambda_eigs: np.ndarray
    drift_f: Callable
    diffusion_g: Callable
    tau: float
    c_f: float
    c_g: float
    gamma: float = 1.0
    drift_jac: Callable | None = None
    name: str = "custom"
    source: dict | None = field(default=None, repr=False)

    def __post_init__(self):
        eigs = np.array(self.lambda_eigs, dtype=float).reshape(-1)
        if eigs.size == 0 or not np.all(eigs > 0):
            raise ModelError(f"eigenvalues must be positive, got {eigs.tolist()}")
        if np.any(np.diff(eigs) < 0):
            raise ModelError("eigenvalues must be sorted ascending")
        if not self.tau > 0:
            raise ModelError(f"period must be positive, got {self.tau!r}")
        if self.gamma < 1:
            raise ModelError(f"growth exponent must be >= 1, got {self.gamma!r}")
        eigs.setflags(write=False)
        object.__setattr__(self, "lambda_eigs", eigs)

    @property
    def dimension(self) -> int:
        return self.lambda_eigs.size

    @property
    def lambda_1(self) -> float:
        return float(self.lambda_eigs[0])

    @property
    def dissipativity(self) -> float:
        """``lambda_1 - c_f``; the scheme contracts when this is positive."""
        return self.lambda_1 - self.c_f

    def check_dissipative(self) -> None:
        if not 0 < self.c_f < self.lambda_1:
            raise ModelError(
                f"need 0 < c_f < lambda_1, got c_f={self.c_f}, lambda_1={self.lambda_1}"
            )

    def __reduce__(self):
        if self.source is None:
            raise TypeError("model has no source recipe and cannot be pickled")
        return model_from_dict, (self.source,)


def eval_drift(model: SdeModel, t: float, x) -> np.ndarray:
    """Full drift ``-Lambda x + f(t, x)``."""
    x = np.asarray(x, dtype=float)
    out = -model.lambda_eigs * x + model.drift_f(t, x)
    if not np.all(np.isfinite(out)):
        raise ModelEvaluationError(t, x)
    return out


def _example1_f(t, x):
    return np.full(np.shape(x), math.sin(2.0 * math.pi * (t % 1.0)))


def _example2_f(t, x):
    x = np.asarray(x, dtype=float)
    return x - x * x * x + math.cos(math.pi * (t % 2.0))


def _example2_jac(t, x):
    x = np.asarray(x, dtype=float)
    return (1.0 - 3.0 * x * x)[..., None]


def _zero_jac(t, x):
    x = np.asarray(x, dtype=float)
    return np.zeros(x.shape + (x.shape[-1],))


def _unit_g(t):
    return 1.0


def builtin_example(name: str) -> SdeModel:
    """The two scalar test problems: linear forcing and cubic drift."""
    if name == "example1":
        return SdeModel(np.array([math.pi]), _example1_f, _unit_g, tau=1.0, c_f=1.0, c_g=1.0,
                        gamma=1.0, drift_jac=_zero_jac, name=name, source={"model": name})
    if name == "example2":
        return SdeModel(np.array([2.0 * math.pi]), _example2_f, _unit_g, tau=2.0, c_f=1.0,
                        c_g=1.0, gamma=3.0, drift_jac=_example2_jac, name=name,
                        source={"model": name})
    raise ModelError(f"unknown built-in model {name!r}; choose from {', '.join(BUILTIN_NAMES)}")


def model_from_dict(spec: dict) -> SdeModel:
    """Build a model from a config mapping.

    Either ``{"model": "example1"}`` or an inline definition::

        dimension: 1
        eigenvalues: [3.14]
        drift: ["sin(2*pi*t)"]
        diffusion: 1
        tau: 1
        c_f: 1
        c_g: 1
        gamma: 1          # optional
    """
    if "model" in spec and spec["model"] is not None:
        return builtin_example(spec["model"])
    try:
        dim = int(spec["dimension"])
        eigs = [float(v) for v in spec["eigenvalues"]]
        drift = spec["drift"]
        tau = float(spec["tau"])
        c_f = float(spec["c_f"])
        c_g = float(spec["c_g"])
    except KeyError as exc:
        raise ModelError(f"model definition missing key {exc.args[0]!r}") from None
    if isinstance(drift, str):
        drift = [drift]
    if len(eigs) != dim:
        raise ModelError(f"expected {dim} eigenvalues, got {len(eigs)}")
    f, jac = compile_drift(list(drift), dim, tau)
    g = compile_diffusion(spec.get("diffusion", 1), tau)
    clean = {
        "dimension": dim, "eigenvalues": eigs, "drift": list(drift),
        "diffusion": spec.get("diffusion", 1), "tau": tau, "c_f": c_f, "c_g": c_g,
        "gamma": float(spec.get("gamma", 1.0)), "name": spec.get("name", "custom"),
    }
    return SdeModel(np.array(eigs), f, g, tau, c_f, c_g, clean["gamma"], jac,
                    name=clean["name"], source=clean)


@dataclass(frozen=True)
class ProbeConfig:
    n_points: int = 2000
    box_radius: float = 5.0
    t_samples: int = 16
    tol: float = 1e-6

    def __post_init__(self):
        if self.n_points < 1 or self.t_samples < 1:
            raise ValueError("probe counts must be >= 1")


@dataclass(frozen=True)
class AssumptionReport:
    probed_c_f: float
    probed_growth: float
    probed_g_bound: float
    probed_g_lipschitz: float
    periodicity_defect: float
    passed: bool
    failures: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {
            "probed_c_f": self.probed_c_f,
            "probed_growth": self.probed_growth,
            "probed_g_bound": self.probed_g_bound,
            "probed_g_lipschitz": self.probed_g_lipschitz,
            "periodicity_defect": self.periodicity_defect,
            "pass": self.passed,
            "failures": list(self.failures),
        }


def validate_assumptions(model: SdeModel, probe: ProbeConfig = ProbeConfig(),
                         seed: int = 0) -> AssumptionReport:
    """Probe the structural assumptions by sampling.

    Sampling can only falsify: a passing report means no counterexample was
    found among the probed points, not that the bounds hold everywhere.
    Pairs are drawn uniformly from the box plus a Sobol set packed around the
    origin, where ratios like the one for ``x - x**3`` peak.
    """
    d = model.dimension
    rng = np.random.default_rng(seed)
    r = probe.box_radius
    x = rng.uniform(-r, r, size=(probe.n_points, d))
    y = rng.uniform(-r, r, size=(probe.n_points, d))
    m = max(1, math.ceil(math.log2(probe.n_points)))
    near = qmc.Sobol(2 * d, scramble=False).random_base2(m)
    near = (2.0 * near - 1.0) * (r * 1e-4)
    x = np.concatenate([x, near[:, :d]])
    y = np.concatenate([y, near[:, d:]])
    dist2 = np.sum((x - y) ** 2, axis=-1)
    keep = dist2 > 1e-300
    x, y, dist2 = x[keep], y[keep], dist2[keep]

    # dyadic fractions of the period, so t + tau is exact for tau = 1, 2, ...
    ts = model.tau * np.arange(probe.t_samples) / 2.0 ** math.ceil(math.log2(probe.t_samples))
    c_f = growth = defect = -math.inf
    for t in ts:
        fx = model.drift_f(t, x)
        fy = model.drift_f(t, y)
        c_f = max(c_f, float(np.max(np.sum((x - y) * (fx - fy), axis=-1) / dist2)))
        growth = max(growth, float(np.max(np.sum(x * fx, axis=-1) / (1.0 + np.sum(x * x, axis=-1)))))
        defect = max(defect, float(np.max(np.abs(model.drift_f(t + model.tau, x) - fx))))

    tg = np.linspace(0.0, model.tau, 8 * probe.t_samples + 1)
    gv = np.array([np.broadcast_to(model.diffusion_g(t), (d,)) for t in tg], dtype=float)
    g_bound = float(np.max(np.linalg.norm(gv, axis=-1)))
    g_lip = float(np.max(np.linalg.norm(np.diff(gv, axis=0), axis=-1) / np.diff(tg)))
    for t in ts:
        defect = max(defect, float(np.max(np.abs(
            np.asarray(model.diffusion_g(t + model.tau)) - np.asarray(model.diffusion_g(t))))))

    tol = probe.tol
    failures = []
    if not 0 < model.c_f < model.lambda_1:
        failures.append("declared c_f not in (0, lambda_1)")
    if not c_f < model.lambda_1:
        failures.append("probed one-sided Lipschitz constant >= lambda_1")
    if c_f > model.c_f + tol:
        failures.append("probed one-sided Lipschitz constant exceeds c_f")
    if growth > model.c_f + tol:
        failures.append("probed growth bound exceeds c_f")
    if g_bound > model.c_g + tol:
        failures.append("probed |g| exceeds c_g")
    if g_lip > model.c_g + tol:
        failures.append("probed Lipschitz constant of g exceeds c_g")
    if defect > tol:
        failures.append("coefficients not periodic with period tau")
    return AssumptionReport(c_f, growth, g_bound, g_lip, defect, not failures, tuple(failures))
