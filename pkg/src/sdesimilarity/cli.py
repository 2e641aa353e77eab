"""Configuration-driven entry point.

A run is described by one sectioned key-value (TOML) file: the two
systems, initial values, grid, ensemble size and seed, and a [task]
section naming what to do.  Flags only override (--seed, --paths, --task,
--out); results land in a versioned result.json plus plot-ready CSV
curves, and identical (config, seed) pairs produce byte-identical output
apart from wall time.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import sys
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import __version__
from . import conditions as cond
from . import functional as fn
from . import linearize as lin
from . import mapping as mp
from . import optimize as opt
from . import sde
from .errors import (
    ConfigError,
    ExtrapolationWarning,
    ParseError,
    SdesimError,
    ValidationError,
)

TASKS = (
    "estimate",
    "optimize",
    "dissipation",
    "spectrum",
    "slln",
    "kstar-1d",
    "hartman-grobman",
    "probe",
    "maxprinciple",
)

SCHEMA_VERSION = 1


# ---------------------------------------------------------------------------
# Config model
# ---------------------------------------------------------------------------


@dataclass
class RunConfig:
    """Plain-data mirror of the config file; builders make domain objects."""

    systems: dict
    initial: dict
    grid: dict
    ensemble: dict
    task: dict
    map: dict = field(default_factory=dict)
    output: dict = field(default_factory=dict)

    # -- builders -----------------------------------------------------------

    def build_system(self, which: str) -> sde.SdeSystem:
        spec = self.systems[which]
        dim = int(spec["dim"])
        noise_dim = int(spec["noise_dim"])
        drift = _build_drift(spec["drift"])
        diffusion = _build_diffusion(spec["diffusion"])
        return sde.SdeSystem(dim, noise_dim, drift, diffusion)

    def build_grid(self) -> sde.TimeGrid:
        return sde.TimeGrid(float(self.grid["horizon"]), int(self.grid["n_steps"]))

    def build_map(self):
        if not self.map:
            return None
        return mp.mapping_from_dict(self.map)

    def resolved_y0(self) -> np.ndarray:
        y0 = self.initial["y0"]
        if isinstance(y0, str):
            if y0.replace(" ", "") != "K(x0)":
                raise ValidationError([f"initial.y0: unknown directive {y0!r}"])
            k_map = self.build_map()
            if k_map is None:
                raise ValidationError(["initial.y0 = \"K(x0)\" needs a [map] section"])
            return np.asarray(
                mp.apply(k_map, np.asarray(self.initial["x0"], float)), float
            )
        return np.asarray(y0, float)

    def ensemble_config(self) -> sde.EnsembleConfig:
        return sde.EnsembleConfig(
            self.build_system("x"),
            self.build_system("y"),
            np.asarray(self.initial["x0"], float),
            self.resolved_y0(),
            self.build_grid(),
            int(self.ensemble["n_paths"]),
            int(self.ensemble["master_seed"]),
        )


def _build_poly(coord_terms) -> sde.Polynomial:
    coefs = [float(t[0]) for t in coord_terms]
    expts = [[int(e) for e in t[1]] for t in coord_terms]
    return sde.Polynomial(coefs, expts)


def _build_drift(spec: dict):
    kind = spec.get("kind")
    if kind == "linear":
        return sde.LinearDrift(spec["matrix"])
    if kind == "affine":
        return sde.AffineDrift(spec["matrix"], spec["offset"])
    if kind == "output":
        return sde.OutputLinearDrift(spec["matrix"])
    if kind == "polynomial":
        return sde.PolynomialDrift([_build_poly(c) for c in spec["coords"]])
    raise ValidationError([f"drift kind {kind!r} is not one of linear/affine/output/polynomial"])


def _build_diffusion(spec: dict):
    kind = spec.get("kind")
    if kind == "constant":
        return sde.ConstantDiffusion(spec["matrix"])
    if kind == "linear_in_state":
        return sde.LinearStateDiffusion(spec["matrices"])
    if kind == "polynomial":
        return sde.PolynomialDiffusion(
            [[_build_poly(p) for p in row] for row in spec["rows"]]
        )
    raise ValidationError([f"diffusion kind {kind!r} is not one of constant/linear_in_state/polynomial"])


# ---------------------------------------------------------------------------
# Parse / validate / emit
# ---------------------------------------------------------------------------


def parse_config(text: str) -> RunConfig:
    """Parse and validate; reports every validation problem, not the first."""
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ParseError(str(exc)) from exc
    problems = []
    for section in ("systems", "initial", "grid", "ensemble", "task"):
        if section not in raw:
            problems.append(f"missing section [{section}]")
    if problems:
        raise ValidationError(problems)
    config = RunConfig(
        systems=raw["systems"],
        initial=raw["initial"],
        grid=raw["grid"],
        ensemble=raw["ensemble"],
        task=raw["task"],
        map=raw.get("map", {}),
        output=raw.get("output", {}),
    )
    validate_config(config)
    return config


def validate_config(config: RunConfig):
    problems = []
    task_name = config.task.get("name")
    if task_name not in TASKS:
        problems.append(f"task.name must be one of {TASKS}, got {task_name!r}")

    y_optional = task_name == "hartman-grobman"
    for which in ("x", "y"):
        if which not in config.systems:
            if which == "y" and y_optional:
                continue
            problems.append(f"missing [systems.{which}]")
            continue
        spec = config.systems[which]
        for key in ("dim", "noise_dim", "drift", "diffusion"):
            if key not in spec:
                problems.append(f"systems.{which}.{key} is missing")
        if spec.get("dim", 1) < 1:
            problems.append(f"systems.{which}.dim must be >= 1")
        if spec.get("noise_dim", 1) < 1:
            problems.append(f"systems.{which}.noise_dim must be >= 1")

    n_steps = config.grid.get("n_steps")
    if not isinstance(n_steps, int) or n_steps < 1:
        problems.append("grid.n_steps must be a positive integer")
    horizon = config.grid.get("horizon")
    if not isinstance(horizon, (int, float)) or not horizon > 0:
        problems.append("grid.horizon must be positive")

    n_paths = config.ensemble.get("n_paths")
    if not isinstance(n_paths, int) or n_paths < 1:
        problems.append("ensemble.n_paths must be a positive integer")
    seed = config.ensemble.get("master_seed")
    if not isinstance(seed, int) or seed < 0:
        problems.append("ensemble.master_seed must be a non-negative integer")

    if "x0" not in config.initial:
        problems.append("initial.x0 is missing")
    if "y0" not in config.initial and not y_optional:
        problems.append("initial.y0 is missing")
    y0 = config.initial.get("y0")
    if isinstance(y0, str) and y0.replace(" ", "") != "K(x0)":
        problems.append(f'initial.y0 string form must be "K(x0)", got {y0!r}')
    if isinstance(y0, str) and not config.map:
        problems.append('initial.y0 = "K(x0)" needs a [map] section')

    if config.map and config.map.get("kind") not in (
        "linear",
        "affine",
        "tabulated1d",
    ):
        problems.append("map.kind must be linear, affine, or tabulated1d")

    if problems:
        raise ValidationError(problems)


def _toml_scalar(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, int):
        return str(v)
    if isinstance(v, float):
        if not math.isfinite(v):
            raise ValueError("cannot emit non-finite float")
        out = repr(v)
        return out
    if isinstance(v, str):
        escaped = v.replace("\\", "\\\\").replace('"', '\\"')
        return f'"{escaped}"'
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_scalar(u) for u in v) + "]"
    if isinstance(v, dict):
        inner = ", ".join(f"{k} = {_toml_scalar(u)}" for k, u in sorted(v.items()))
        return "{" + inner + "}"
    raise TypeError(f"cannot emit {type(v)!r}")


def emit_config(config: RunConfig) -> str:
    """Canonical text form; parse(emit(c)) == c and the hash is stable."""
    lines = []

    def emit_table(name, table):
        lines.append(f"[{name}]")
        for key in sorted(table):
            lines.append(f"{key} = {_toml_scalar(table[key])}")
        lines.append("")

    for which in sorted(config.systems):
        emit_table(f"systems.{which}", config.systems[which])
    emit_table("initial", config.initial)
    if config.map:
        emit_table("map", config.map)
    emit_table("grid", config.grid)
    emit_table("ensemble", config.ensemble)
    emit_table("task", config.task)
    if config.output:
        emit_table("output", config.output)
    return "\n".join(lines)


def config_hash(config: RunConfig) -> str:
    return hashlib.sha256(emit_config(config).encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# Tasks
# ---------------------------------------------------------------------------


def _curve_csv(path: Path, rows: np.ndarray, header="t,value,std_error"):
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savetxt(path, rows, delimiter=",", header=header, comments="", fmt="%.17g")


def _estimate_lipschitz(config: RunConfig, ensemble) -> float:
    radius = float(
        max(1.0, np.sqrt(np.sum(ensemble.x**2, axis=-1)).max())
    )
    probe = cond.assumption_probe(
        ensemble.config.sys_x, n_samples=2000, radius=radius, seed=0
    )
    return probe.l_hat


def _task_estimate(config: RunConfig, out_dir: Path) -> dict:
    k_map = config.build_map()
    if k_map is None:
        raise ValidationError(["estimate task needs a [map] section"])
    ensemble = sde.simulate_ensemble(config.ensemble_config())
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ExtrapolationWarning)
        curve = fn.defect_curve(ensemble, k_map)
        slln = fn.slln_curve(ensemble, k_map)
        cost = fn.cost_J(ensemble, k_map)
        thresholds = fn.make_thresholds(
            curve, ensemble.grid.dt, _estimate_lipschitz(config, ensemble)
        )
        verdict = fn.classify_similarity(curve, slln, thresholds)
    rho = fn.similarity_degree(cost.value)
    _curve_csv(out_dir / "curves" / "defect.csv", curve.to_rows(), "t,defect,std_error")
    _curve_csv(
        out_dir / "curves" / "slln.csv",
        np.column_stack([slln.times, slln.running_average, np.zeros_like(slln.times)]),
    )
    return {
        "results": {
            "J": cost.value,
            "rho": rho,
            "verdict": verdict.classification.value,
            "final_defect": verdict.evidence["final_defect"],
            "max_defect": verdict.evidence["max_defect"],
            "tail_decay_rate": verdict.evidence["tail_decay_rate"],
            "eps_complete": thresholds.eps_complete,
        },
        "std_errors": {"J": cost.std_error},
    }


def _task_optimize(config: RunConfig, out_dir: Path) -> dict:
    family = config.task.get("family", "linear")
    restarts = int(config.task.get("restarts", 5))
    ensemble = sde.simulate_ensemble(config.ensemble_config())
    n = ensemble.config.sys_x.dim
    start = config.build_map()
    if start is None or start.kind != family:
        if family == "linear":
            start = mp.identity_map(n)
        elif family == "affine":
            start = mp.AffineMap(np.eye(n), np.zeros(n))
        else:
            hull = np.sqrt(np.sum(ensemble.x**2, axis=-1)).max()
            knots = np.linspace(-hull, hull, 9)
            start = mp.Tabulated1d(knots, knots)
    options = opt.OptimizeOptions(
        max_iter=int(config.task.get("max_iter", 400)),
        restarts=restarts,
        seed=int(config.task.get("opt_seed", 0)),
    )
    result = opt.optimize_K(start, ensemble, options)
    return {
        "results": {
            "J_best": result.J_best.value,
            "k_params": opt.params_of(result.best_K).tolist(),
            "converged": result.converged,
            "n_evaluations": result.n_evaluations,
            "min_jacobian_sv": result.homeo.min_jacobian_singular_value,
        },
        "std_errors": {"J_best": result.J_best.std_error},
        "trace": [[int(i), float(v)] for i, v in result.trace],
    }


def _task_dissipation(config: RunConfig, out_dir: Path) -> dict:
    k_map = config.build_map() or mp.identity_map(int(config.systems["x"]["dim"]))
    ensemble = sde.simulate_ensemble(config.ensemble_config())
    report = cond.dissipation_report(ensemble, k_map)
    decay = cond.decay_rate_check(ensemble, k_map, report.alpha1_hat)
    return {
        "results": {
            "alpha1_hat": report.alpha1_hat,
            "regression_r2": report.regression_r2,
            "fraction_violating": report.fraction_violating,
            "samples_used": report.samples_used,
            "decay_slope": decay.slope,
            "decay_status": decay.status.value,
            "consistent_with_dissipation": bool(decay.consistent_with_dissipation),
        },
        "std_errors": {},
    }


def _task_spectrum(config: RunConfig, out_dir: Path) -> dict:
    horizon = float(config.task.get("horizon", 200.0))
    dt = float(config.task.get("dt", 0.01))
    n_seeds = int(config.task.get("n_seeds", 8))
    seed = int(config.ensemble["master_seed"])
    spec_x = cond.lyapunov_spectrum(
        config.build_system("x"), horizon, seed, dt=dt, n_seeds=n_seeds
    )
    spec_y = cond.lyapunov_spectrum(
        config.build_system("y"), horizon, seed + 1, dt=dt, n_seeds=n_seeds
    )
    prediction = cond.asymptotic_similarity_prediction(spec_x, spec_y)
    return {
        "results": {
            "exponents_x": spec_x.exponents.tolist(),
            "multiplicities_x": spec_x.multiplicities.tolist(),
            "ci_halfwidth_x": spec_x.ci_halfwidth,
            "exponents_y": spec_y.exponents.tolist(),
            "multiplicities_y": spec_y.multiplicities.tolist(),
            "ci_halfwidth_y": spec_y.ci_halfwidth,
            "prediction": prediction.value,
        },
        "std_errors": {},
    }


def _task_slln(config: RunConfig, out_dir: Path) -> dict:
    k_map = config.build_map() or mp.identity_map(int(config.systems["x"]["dim"]))
    ensemble = sde.simulate_ensemble(config.ensemble_config())
    slln = fn.slln_curve(ensemble, k_map)
    half_idx = len(slln.times) // 2
    final = float(slln.running_average[-1])
    half = float(slln.running_average[half_idx])
    rel = abs(final - half) / max(abs(final), 1e-300)
    _curve_csv(
        out_dir / "curves" / "slln.csv",
        np.column_stack([slln.times, slln.running_average, np.zeros_like(slln.times)]),
    )
    return {
        "results": {
            "final_average": final,
            "half_horizon_average": half,
            "relative_change": rel,
        },
        "std_errors": {},
    }


def _task_probe(config: RunConfig, out_dir: Path) -> dict:
    n_samples = int(config.task.get("n_samples", 4000))
    radius = float(config.task.get("radius", 1.0))
    seed = int(config.task.get("probe_seed", 0))
    out = {}
    for which in ("x", "y"):
        probe = cond.assumption_probe(
            config.build_system(which), n_samples, radius, seed
        )
        out.update(
            {
                f"c1_hat_{which}": probe.c1_hat,
                f"c2_hat_{which}": probe.c2_hat,
                f"m1_hat_{which}": probe.m1_hat,
                f"l_hat_{which}": probe.l_hat,
            }
        )
    return {"results": out, "std_errors": {}}


def _task_kstar_1d(config: RunConfig, out_dir: Path) -> dict:
    x0 = float(np.asarray(config.initial["x0"], float).ravel()[0])
    y0_raw = config.initial["y0"]
    if isinstance(y0_raw, str):
        raise ValidationError(["kstar-1d needs a numeric initial.y0 anchor"])
    y0 = float(np.asarray(y0_raw, float).ravel()[0])
    x_range = config.task.get("x_range")
    if x_range is None:
        raise ValidationError(["task.x_range = [lo, hi] is required for kstar-1d"])
    problem = lin.KstarOdeProblem(
        config.build_system("x"),
        config.build_system("y"),
        (x0, y0),
        (float(x_range[0]), float(x_range[1])),
        int(config.task.get("ode_steps", 2000)),
    )
    solution = lin.solve_kstar_ode_1d(problem)
    out_dir.mkdir(parents=True, exist_ok=True)
    mp.tabulated_to_csv(solution.mapping, out_dir / "kstar_knots.csv")
    results = {"monotone": solution.monotone}
    if solution.monotone and bool(config.task.get("run_estimate", True)):
        grid = config.build_grid()
        cfg = sde.EnsembleConfig(
            config.build_system("x"),
            config.build_system("y"),
            [x0],
            [y0],
            grid,
            int(config.ensemble["n_paths"]),
            int(config.ensemble["master_seed"]),
        )
        ensemble = sde.simulate_ensemble(cfg)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", ExtrapolationWarning)
            cost = fn.cost_J(ensemble, solution.mapping)
            curve = fn.defect_curve(ensemble, solution.mapping)
            slln = fn.slln_curve(ensemble, solution.mapping)
            thresholds = fn.make_thresholds(
                curve, grid.dt, _estimate_lipschitz(config, ensemble)
            )
            verdict = fn.classify_similarity(curve, slln, thresholds)
        results.update(
            {
                "J": cost.value,
                "J_std_error": cost.std_error,
                "rho": fn.similarity_degree(cost.value),
                "verdict": verdict.classification.value,
            }
        )
    return {"results": results, "std_errors": {}}


def _task_hartman_grobman(config: RunConfig, out_dir: Path) -> dict:
    system = config.build_system("x")
    pair = lin.linearize_at_fixed_point(system)
    lin_system = sde.SdeSystem(
        pair.dim,
        1,
        sde.LinearDrift(pair.a0),
        sde.ConstantDiffusion(np.zeros((pair.dim, 1))),
    )
    spectrum = cond.lyapunov_spectrum(
        lin_system, float(config.task.get("spectrum_horizon", 50.0)), 0
    )
    epsilon = float(config.task.get("epsilon", 0.1))
    kernel = lin.build_green_kernel(pair, spectrum, epsilon)
    delta = float(config.task.get("delta", 0.0)) or lin.paper_delta(pair, kernel)
    sol = lin.solve_kappa_fixed_point(
        pair,
        kernel,
        delta,
        grid_size=int(config.task.get("grid_size", 201)),
        tol=float(config.task.get("tol", 1e-10)),
    )
    # Verification ensemble: nonlinear X against its linearization Y,
    # started at y0 = H(x0).
    h_map = lin.HartmanGrobmanMap(sol)
    x0 = np.asarray(config.initial["x0"], float)
    y0 = np.asarray(h_map(x0), float)
    cfg = sde.EnsembleConfig(
        system,
        lin_system,
        x0,
        y0,
        config.build_grid(),
        int(config.ensemble["n_paths"]),
        int(config.ensemble["master_seed"]),
    )
    ensemble = sde.simulate_ensemble(cfg)
    defect = lin.verify_conjugacy_defect(pair, sol, ensemble)
    flow_defect = lin.flow_commutation_defect(pair, sol, np.linspace(0.0, 1.0, 11))
    out_dir.mkdir(parents=True, exist_ok=True)
    if pair.dim == 1:
        axis = sol.axes[0]
        np.savetxt(
            out_dir / "kappa.csv",
            np.column_stack([axis, sol.values[:, 0]]),
            delimiter=",",
            header="x,y",
            comments="",
            fmt="%.17g",
        )
        h_vals = h_map(axis.reshape(-1, 1))[:, 0]
        np.savetxt(
            out_dir / "kstar.csv",
            np.column_stack([axis, h_vals]),
            delimiter=",",
            header="x,y",
            comments="",
            fmt="%.17g",
        )
    return {
        "results": {
            "delta": sol.delta,
            "m_eps": kernel.m_eps,
            "lambda1": kernel.lam1,
            "iterations": sol.iterations_used,
            "final_residual": sol.final_residual,
            "contraction_observed": sol.contraction_factor_observed,
            "kappa_sup": sol.sup_norm(),
            "kappa_sup_bound": sol.sup_bound,
            "pre_exit_defect": defect.value,
            "flow_commutation_defect": flow_defect,
        },
        "std_errors": {"pre_exit_defect": defect.std_error},
    }


def _task_maxprinciple(config: RunConfig, out_dir: Path) -> dict:
    ensemble = sde.simulate_ensemble(config.ensemble_config())
    family = config.task.get("family", "linear")
    n = ensemble.config.sys_x.dim
    start = mp.identity_map(n) if family == "linear" else mp.AffineMap(
        np.eye(n), np.zeros(n)
    )
    options = opt.OptimizeOptions(
        restarts=int(config.task.get("restarts", 5)),
        seed=int(config.task.get("opt_seed", 0)),
    )
    result = opt.optimize_K(start, ensemble, options)
    cost = opt.SimilarityCost(ensemble.grid.horizon)
    adjoint = opt.solve_adjoint_lsmc(ensemble, result.best_K, cost)
    report = opt.maximum_principle_check(
        ensemble,
        result,
        cost,
        n_probes=int(config.task.get("n_directions", 20)),
        adjoint=adjoint,
        seed=int(config.task.get("probe_seed", 0)),
    )
    eps = float(config.task.get("fd_eps", 1e-3))
    directions = opt.random_directions(result.best_K, report.n_directions, 0)
    derivs = [
        opt.directional_derivative(ensemble, result.best_K, d, eps) for d in directions
    ]
    min_deriv = min(d.value + 10.0 * d.std_error for d in derivs)
    return {
        "results": {
            "J_best": result.J_best.value,
            "k_params": opt.params_of(result.best_K).tolist(),
            "principle_passed": report.passed,
            "min_hk_estimate": min(v for v, _ in report.estimates),
            "min_directional_margin": min_deriv,
            "terminal_p_error": float(
                np.abs(
                    adjoint.p[:, -1]
                    - cost.terminal_grad_x(
                        ensemble.x[:, -1], ensemble.y[:, -1], result.best_K
                    )
                ).max()
            ),
        },
        "std_errors": {"J_best": result.J_best.std_error},
    }


_TASK_RUNNERS = {
    "estimate": _task_estimate,
    "optimize": _task_optimize,
    "dissipation": _task_dissipation,
    "spectrum": _task_spectrum,
    "slln": _task_slln,
    "probe": _task_probe,
    "kstar-1d": _task_kstar_1d,
    "hartman-grobman": _task_hartman_grobman,
    "maxprinciple": _task_maxprinciple,
}


def _assert_finite(obj, path="results"):
    if isinstance(obj, dict):
        for k, v in obj.items():
            _assert_finite(v, f"{path}.{k}")
    elif isinstance(obj, (list, tuple)):
        for i, v in enumerate(obj):
            _assert_finite(v, f"{path}[{i}]")
    elif isinstance(obj, float) and not math.isfinite(obj):
        raise SdesimError(f"non-finite value in {path}")


def run(config: RunConfig, out_dir=None) -> dict:
    """Execute the configured task; returns and writes the result record."""
    validate_config(config)
    out = Path(out_dir if out_dir is not None else config.output.get("dir", "out"))
    started = time.perf_counter()
    body = _TASK_RUNNERS[config.task["name"]](config, out)
    record = {
        "schema_version": SCHEMA_VERSION,
        "version": __version__,
        "config_hash": config_hash(config),
        "task": config.task["name"],
        "results": body["results"],
        "std_errors": body["std_errors"],
        "wall_time_s": time.perf_counter() - started,
    }
    if "trace" in body:
        record["trace"] = body["trace"]
    _assert_finite(record["results"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "result.json").write_text(json.dumps(record, sort_keys=True, indent=2))
    (out / "config.toml").write_text(emit_config(config))
    return record


# ---------------------------------------------------------------------------
# Builtin examples
# ---------------------------------------------------------------------------


def builtin_examples() -> dict:
    """Named example configurations mirroring the worked systems."""
    ex51 = RunConfig(
        systems={
            "x": {
                "dim": 1,
                "noise_dim": 1,
                "drift": {"kind": "linear", "matrix": [[2.0]]},
                "diffusion": {"kind": "constant", "matrix": [[1.0]]},
            },
            "y": {
                "dim": 1,
                "noise_dim": 1,
                # D = C A^{-1} B = 0.5 exactly
                "drift": {"kind": "output", "matrix": [[1.0]]},
                "diffusion": {"kind": "constant", "matrix": [[0.5]]},
            },
        },
        initial={"x0": [4.0], "y0": "K(x0)"},
        map={"kind": "linear", "matrix": [[0.5]]},
        grid={"horizon": 2.0, "n_steps": 2000},
        ensemble={"n_paths": 2000, "master_seed": 20240501},
        task={"name": "estimate"},
    )
    ex52_equal = RunConfig(
        systems={
            "x": {
                "dim": 1,
                "noise_dim": 1,
                "drift": {"kind": "linear", "matrix": [[-1.0]]},
                "diffusion": {"kind": "linear_in_state", "matrices": [[[1.0]]]},
            },
            "y": {
                "dim": 1,
                "noise_dim": 1,
                "drift": {"kind": "linear", "matrix": [[-1.0]]},
                "diffusion": {"kind": "linear_in_state", "matrices": [[[1.0]]]},
            },
        },
        initial={"x0": [1.0], "y0": [1.0]},
        grid={"horizon": 10.0, "n_steps": 1000},
        ensemble={"n_paths": 100, "master_seed": 20240502},
        task={"name": "spectrum", "horizon": 200.0, "dt": 0.01},
    )
    ex52_mismatch = RunConfig(
        systems={
            "x": {
                "dim": 1,
                "noise_dim": 1,
                "drift": {"kind": "linear", "matrix": [[0.5]]},
                "diffusion": {"kind": "constant", "matrix": [[0.0]]},
            },
            "y": {
                "dim": 1,
                "noise_dim": 1,
                "drift": {"kind": "linear", "matrix": [[-0.5]]},
                "diffusion": {"kind": "constant", "matrix": [[0.0]]},
            },
        },
        initial={"x0": [1.0], "y0": [1.0]},
        grid={"horizon": 10.0, "n_steps": 1000},
        ensemble={"n_paths": 100, "master_seed": 20240503},
        task={"name": "spectrum", "horizon": 100.0, "dt": 0.01},
    )
    ex53 = RunConfig(
        systems={
            "x": {
                "dim": 1,
                "noise_dim": 1,
                "drift": {
                    "kind": "polynomial",
                    "coords": [[[-1.0, [1]], [0.1, [3]]]],
                },
                "diffusion": {"kind": "constant", "matrix": [[0.0]]},
            },
        },
        initial={"x0": [0.3]},
        grid={"horizon": 5.0, "n_steps": 1000},
        ensemble={"n_paths": 100, "master_seed": 20240504},
        task={"name": "hartman-grobman", "epsilon": 0.1, "grid_size": 201},
    )
    ou_pair = RunConfig(
        systems={
            "x": {
                "dim": 1,
                "noise_dim": 1,
                "drift": {"kind": "linear", "matrix": [[-1.0]]},
                "diffusion": {"kind": "constant", "matrix": [[1.0]]},
            },
            "y": {
                "dim": 1,
                "noise_dim": 1,
                "drift": {"kind": "linear", "matrix": [[-1.0]]},
                "diffusion": {"kind": "constant", "matrix": [[2.0]]},
            },
        },
        initial={"x0": [0.0], "y0": [0.0]},
        map={"kind": "linear", "matrix": [[1.0]]},
        grid={"horizon": 50.0, "n_steps": 5000},
        ensemble={"n_paths": 1000, "master_seed": 20240505},
        task={"name": "slln"},
    )
    return {
        "ex51-output-system": ex51,
        "ex52-two-linear": ex52_equal,
        "ex52-two-linear-mismatch": ex52_mismatch,
        "ex53-hartman-grobman": ex53,
        "ou-pair": ou_pair,
    }


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="sdesim",
        description="Similarity analysis between two stochastic differential systems.",
    )
    parser.add_argument("--config", help="config file path or builtin example name")
    parser.add_argument("--seed", type=int, help="override ensemble.master_seed")
    parser.add_argument("--paths", type=int, help="override ensemble.n_paths")
    parser.add_argument("--task", help="override task.name")
    parser.add_argument("--out", help="output directory (default: out)")
    parser.add_argument(
        "--list-examples", action="store_true", help="list builtin example names"
    )
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    if args.list_examples:
        for name in builtin_examples():
            print(name)
        return 0
    if not args.config:
        parser.print_usage(sys.stderr)
        _error_json("ConfigError", "--config is required")
        return 1
    try:
        builtins = builtin_examples()
        if args.config in builtins:
            config = builtins[args.config]
        else:
            config = parse_config(Path(args.config).read_text())
        if args.seed is not None:
            config.ensemble["master_seed"] = args.seed
        if args.paths is not None:
            config.ensemble["n_paths"] = args.paths
        if args.task is not None:
            config.task["name"] = args.task
        record = run(config, args.out)
    except ConfigError as exc:
        _error_json(type(exc).__name__, str(exc))
        return 1
    except SdesimError as exc:
        _error_json(type(exc).__name__, str(exc))
        return 2
    print(json.dumps(record["results"], sort_keys=True, indent=2))
    return 0


def _error_json(kind: str, message: str):
    sys.stderr.write(json.dumps({"error": kind, "message": message}) + "\n")


if __name__ == "__main__":
    sys.exit(main())
