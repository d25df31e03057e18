"""Command-line experiments.

    rpsde validate    --model example2
    rpsde simulate    --model example1 --h 0.0390625 --out runs/sim
    rpsde periodicity --model example1 --out runs/per
    rpsde pullback    --model example2 --h 0.01 --k-list 0 1 2 3 4 5 6
    rpsde converge    --model example1 --samples 5000 --workers 4
    rpsde moments     --model example2 --p 2 --h 0.001 --samples 10000

Parameters can also come from a YAML config (``--config``); flags win.
Exit status: 0 success or check passed, 1 check failed, 2 bad
configuration, 3 solver failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import yaml

from . import analysis, integrator, pullback
from .model import ModelError, ProbeConfig, SdeModel, model_from_dict, validate_assumptions
from .noise import GridError, GridSpec, as_integer, sample_path

log = logging.getLogger("rpsde")

COMMANDS = ("validate", "simulate", "periodicity", "pullback", "converge", "moments")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_SOLVER = 0, 1, 2, 3

# experiment layouts used for the two built-in problems
PRESETS = {
    "example1": dict(t0=-5.0, T=15.0, xi=[0.3], start=-5.0, window=[10.0, 13.0],
                     early_window=[-5.0, -2.0]),
    "example2": dict(t0=-6.0, T=14.0, xi=[0.5], start=-6.0, window=[12.0, 16.0],
                     early_window=[-6.0, -2.0]),
}


@dataclass
class ExperimentConfig:
    command: str = "simulate"
    model: str | None = "example1"
    model_def: dict | None = None
    seed: int = 0
    samples: int = 1000
    workers: int = 1
    out: str = "."
    t0: float | None = None
    T: float | None = None
    h: float | None = None
    xi: list[float] | None = None
    i_list: list[int] = field(default_factory=lambda: [7, 8, 9, 10, 11, 12])
    i_ref: int = 15
    k_list: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4, 5, 6])
    anchor: float = 0.0
    start: float | None = None
    window: list[float] | None = None
    early_window: list[float] | None = None
    m: int = 1
    p: int = 1
    horizon: float = 5.0
    probe_points: int = 2000
    probe_radius: float = 5.0
    probe_times: int = 16
    probe_tol: float = 1e-6

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(sorted(unknown))}")
        return cls(**data)

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)

    @classmethod
    def load(cls, text: str) -> "ExperimentConfig":
        return cls.from_dict(yaml.safe_load(text) or {})

    def build_model(self) -> SdeModel:
        if self.model_def:
            return model_from_dict(self.model_def)
        if not self.model:
            raise ModelError("no model selected")
        return model_from_dict({"model": self.model})

    def with_presets(self) -> "ExperimentConfig":
        """Fill unset parameters from the preset of a built-in model."""
        data = self.to_dict()
        for key, value in PRESETS.get(self.model if not self.model_def else "", {}).items():
            if data.get(key) is None:
                data[key] = value
        defaults = dict(t0=0.0, T=1.0, xi=[0.0], start=data.get("t0") or 0.0)
        for key, value in defaults.items():
            if data.get(key) is None:
                data[key] = value
        return ExperimentConfig.from_dict(data)


def _xi(cfg: ExperimentConfig, model: SdeModel) -> np.ndarray:
    xi = np.asarray(cfg.xi, dtype=float).reshape(-1)
    if xi.size == 1:
        xi = np.full(model.dimension, xi[0])
    if xi.size != model.dimension:
        raise ModelError(f"initial value has {xi.size} components, model has {model.dimension}")
    return xi


def _require_h(cfg: ExperimentConfig, default: float) -> float:
    return float(cfg.h) if cfg.h is not None else default


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _open_csv(path: Path):
    return path.open("w", newline="")


def _preflight(cfg: ExperimentConfig, model: SdeModel) -> None:
    """Grid divisibility and structural checks, done before any compute."""
    if cfg.command == "validate":
        return
    model.check_dissipative()
    if cfg.command == "simulate":
        GridSpec.spanning(cfg.t0, cfg.T, _require_h(cfg, (cfg.T - cfg.t0) / 512))
    elif cfg.command in ("periodicity", "pullback"):
        if cfg.command == "periodicity" and cfg.window is None:
            raise ValueError("periodicity needs --window")
        h = _require_h(cfg, 1.0 / 64 if cfg.command == "periodicity" else 0.01)
        as_integer(model.tau / h, f"tau/h (tau={model.tau}, h={h})")
    elif cfg.command == "converge":
        if cfg.i_ref <= max(cfg.i_list):
            raise GridError("i_ref must exceed every i in i_list")
        GridSpec.spanning(cfg.t0, cfg.T, (cfg.T - cfg.t0) * 2.0**-cfg.i_ref)
    elif cfg.command == "moments":
        GridSpec.spanning(0.0, cfg.horizon, _require_h(cfg, 1e-3))


def cmd_validate(cfg: ExperimentConfig, model: SdeModel, out: Path) -> int:
    probe = ProbeConfig(cfg.probe_points, cfg.probe_radius, cfg.probe_times, cfg.probe_tol)
    report = validate_assumptions(model, probe, seed=cfg.seed)
    _write_json(out / "assumptions.json", report.to_dict())
    for msg in report.failures:
        log.warning("assumption check: %s", msg)
    return EXIT_OK if report.passed else EXIT_FAIL


def cmd_simulate(cfg: ExperimentConfig, model: SdeModel, out: Path) -> int:
    h = _require_h(cfg, (cfg.T - cfg.t0) / 512)
    grid = GridSpec.spanning(cfg.t0, cfg.T, h)
    try:
        key = grid.key_index()
    except GridError:
        key = 0
    path = sample_path(grid, cfg.seed, 0, model.dimension, key)
    traj = integrator.integrate(model, grid, path, _xi(cfg, model))
    with _open_csv(out / "trajectory.csv") as fh:
        traj.to_csv(fh)
    return EXIT_OK


def cmd_periodicity(cfg: ExperimentConfig, model: SdeModel, out: Path) -> int:
    h = _require_h(cfg, 1.0 / 64)
    xi = _xi(cfg, model)
    late = pullback.periodicity_gap(model, h, cfg.start, xi, cfg.m, tuple(cfg.window), cfg.seed)
    with _open_csv(out / "periodicity.csv") as fh:
        late.to_csv(fh)
    summary = {"window": list(late.window), "m": cfg.m, "gap": late.gap, "h": h}
    code = EXIT_OK
    if cfg.early_window is not None:
        early = pullback.periodicity_gap(model, h, cfg.start, xi, cfg.m,
                                         tuple(cfg.early_window), cfg.seed)
        with _open_csv(out / "periodicity_early.csv") as fh:
            early.to_csv(fh)
        threshold = max(1e-2, early.gap / 100.0)
        passed = late.gap <= threshold
        summary.update(early_window=list(early.window), early_gap=early.gap,
                       threshold=threshold, **{"pass": passed})
        code = EXIT_OK if passed else EXIT_FAIL
    _write_json(out / "periodicity.json", summary)
    return code


def cmd_pullback(cfg: ExperimentConfig, model: SdeModel, out: Path) -> int:
    h = _require_h(cfg, 0.01)
    run = pullback.pullback_values(model, h, _xi(cfg, model), cfg.anchor, cfg.k_list, cfg.seed)
    diag = pullback.cauchy_diagnostic(run)
    with _open_csv(out / "pullback.csv") as fh:
        diag.to_csv(fh, run)
    _write_json(out / "pullback.json", {
        "k": list(diag.ks), "diff_sq": list(diag.diff_sq), "slope": diag.slope,
        "saturated": diag.saturated, "h": h, "anchor": cfg.anchor, "seed": cfg.seed,
    })
    return EXIT_OK


def cmd_converge(cfg: ExperimentConfig, model: SdeModel, out: Path) -> int:
    table = analysis.ms_error_table(model, cfg.t0, cfg.T, cfg.i_list, cfg.i_ref, cfg.samples,
                                    cfg.seed, x0=_xi(cfg, model), workers=cfg.workers)
    rate = analysis.fit_rate(table.pairs())
    with _open_csv(out / "error_table.csv") as fh:
        table.to_csv(fh)
    summary = rate.to_dict()
    summary.update(n_samples=table.n_samples, seed=table.seed, h_ref=table.h_ref,
                   i_list=list(cfg.i_list), i_ref=cfg.i_ref, t0=cfg.t0, T=cfg.T)
    _write_json(out / "rate.json", summary)
    log.info("kappa_rms=%.4f residual=%.4f", rate.kappa_rms, rate.residual)
    return EXIT_OK


def cmd_moments(cfg: ExperimentConfig, model: SdeModel, out: Path) -> int:
    h = _require_h(cfg, 1e-3)
    report = analysis.moment_bound_check(model, cfg.p, h, cfg.horizon, cfg.samples, cfg.seed,
                                         xi=_xi(cfg, model), workers=cfg.workers)
    _write_json(out / "moments.json", report.to_dict())
    return EXIT_OK if report.passed else EXIT_FAIL


HANDLERS = {
    "validate": cmd_validate,
    "simulate": cmd_simulate,
    "periodicity": cmd_periodicity,
    "pullback": cmd_pullback,
    "converge": cmd_converge,
    "moments": cmd_moments,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rpsde", description=__doc__.split("\n\n")[0])
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--model", help="built-in model name (example1, example2)")
    parser.add_argument("--config", type=Path, help="YAML experiment config")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--samples", type=int)
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--workers", type=int)
    parser.add_argument("--t0", type=float)
    parser.add_argument("--T", type=float)
    parser.add_argument("--h", type=float)
    parser.add_argument("--xi", type=float, nargs="+")
    parser.add_argument("--i-list", dest="i_list", type=int, nargs="+")
    parser.add_argument("--i-ref", dest="i_ref", type=int)
    parser.add_argument("--k-list", dest="k_list", type=int, nargs="+")
    parser.add_argument("--anchor", type=float)
    parser.add_argument("--start", type=float)
    parser.add_argument("--window", type=float, nargs=2)
    parser.add_argument("--early-window", dest="early_window", type=float, nargs=2)
    parser.add_argument("--m", type=int)
    parser.add_argument("--p", type=int)
    parser.add_argument("--horizon", type=float)
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    data = {}
    if args.config is not None:
        data = ExperimentConfig.load(args.config.read_text()).to_dict()
    for f in fields(ExperimentConfig):
        value = getattr(args, f.name, None)
        if value is not None:
            data[f.name] = value
    if args.model is not None:
        data["model_def"] = None
    data["command"] = args.command
    return ExperimentConfig.from_dict(data).with_presets()


def run(cfg: ExperimentConfig) -> int:
    out = Path(cfg.out)
    model = cfg.build_model()
    _preflight(cfg, model)
    out.mkdir(parents=True, exist_ok=True)
    record = {k: v for k, v in cfg.to_dict().items() if k not in ("workers", "out")}
    (out / "config.yaml").write_text(yaml.safe_dump(record, sort_keys=True))
    return HANDLERS[cfg.command](cfg, model, out)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        return run(cfg)
    except integrator.SolverError as exc:
        log.error("solver failure: %s", exc)
        return EXIT_SOLVER
    except (ModelError, GridError, ValueError, OSError) as exc:
        log.error("%s", exc)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
