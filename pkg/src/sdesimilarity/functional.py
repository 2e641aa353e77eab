"""Cost functionals, similarity degrees, and similarity classification.

The time-and-sample norm is realized as a per-path trapezoidal time
integral averaged over paths, which matches the defining expectation of
the cost functional after Fubini.  All estimates carry a Monte Carlo
standard error computed across paths.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np

from . import mapping as mp
from .errors import GridMiss
from .sde import Ensemble


class CostKind(Enum):
    DEFECT_AT_T = "defect_at_t"
    TIME_AVERAGE_J = "time_average_J"
    SEMI_J = "semi_J"
    TERMINAL_JTILDE = "terminal_Jtilde"


@dataclass(frozen=True)
class CostEstimate:
    value: float
    std_error: float
    n_paths: int
    dt: float
    kind: CostKind


def _squared_defect(ensemble: Ensemble, k_map, r_map=None) -> np.ndarray:
    """||R(X_t) - Y_t||^2 per (path, time); R defaults to K."""
    m = r_map if r_map is not None else k_map
    images = mp.apply(m, ensemble.x)
    diff = images - ensemble.y
    return np.sum(diff * diff, axis=-1)


def _mc(values: np.ndarray):
    mean = float(values.mean())
    if values.size > 1:
        se = float(values.std(ddof=1) / math.sqrt(values.size))
    else:
        se = 0.0
    return mean, se


def conjugacy_defect(ensemble: Ensemble, k_map, t: float) -> CostEstimate:
    """Monte Carlo estimate of E ||K(X_t) - Y_t||^2 at a grid time."""
    k = ensemble.grid.index_of(t)
    if k is None:
        raise GridMiss(f"t={t} is not a grid point (dt={ensemble.grid.dt})")
    d = _squared_defect(ensemble, k_map)[:, k]
    value, se = _mc(d)
    return CostEstimate(value, se, ensemble.n_paths, ensemble.grid.dt, CostKind.DEFECT_AT_T)


def cost_J_per_path(ensemble: Ensemble, k_map) -> np.ndarray:
    """Per-path time averages (1/T) int ||K(X)-Y||^2 dt; mean is J[K]."""
    d = _squared_defect(ensemble, k_map)
    return np.trapezoid(d, dx=ensemble.grid.dt, axis=1) / ensemble.grid.horizon


def cost_J(ensemble: Ensemble, k_map) -> CostEstimate:
    """J[K] = E[(1/T) int_0^T ||K(X_t) - Y_t||^2 dt]."""
    per_path = cost_J_per_path(ensemble, k_map)
    value, se = _mc(per_path)
    return CostEstimate(value, se, ensemble.n_paths, ensemble.grid.dt, CostKind.TIME_AVERAGE_J)


def cost_J_semi(ensemble: Ensemble, k_map, r_map) -> CostEstimate:
    """J[K, R]: R sits inside the norm, K only fixes the initial matching."""
    d = _squared_defect(ensemble, k_map, r_map)
    per_path = np.trapezoid(d, dx=ensemble.grid.dt, axis=1) / ensemble.grid.horizon
    value, se = _mc(per_path)
    return CostEstimate(value, se, ensemble.n_paths, ensemble.grid.dt, CostKind.SEMI_J)


def terminal_cost_Jtilde(ensemble: Ensemble, k_map) -> CostEstimate:
    """Running cost plus the first-moment terminal defect ||K(X_T) - Y_T||."""
    d = _squared_defect(ensemble, k_map)
    running = np.trapezoid(d, dx=ensemble.grid.dt, axis=1) / ensemble.grid.horizon
    terminal = np.sqrt(d[:, -1])
    value, se = _mc(running + terminal)
    return CostEstimate(value, se, ensemble.n_paths, ensemble.grid.dt, CostKind.TERMINAL_JTILDE)


# ---------------------------------------------------------------------------
# Similarity degree functions
# ---------------------------------------------------------------------------

_PROBES = (0.0, 1.0, 1e3, 1e9)


class LogRatioDegree:
    """rho(x) = log(1 + x) / x, with the removable singularity rho(0) = 1."""

    def __call__(self, x: float) -> float:
        if x <= 0.0:
            return 1.0
        return math.log1p(x) / x


class TabulatedDegree:
    """User-supplied decreasing degree function, linearly interpolated.

    Construction verifies the defining properties at the probe points
    0, 1, 1e3, 1e9: value 1 at 0, monotone decreasing, and decay to 0.
    """

    def __init__(self, xs, ys):
        self.xs = np.asarray(xs, float)
        self.ys = np.asarray(ys, float)
        if self.xs.ndim != 1 or self.xs.shape != self.ys.shape:
            raise ValueError("xs and ys must be equal-length vectors")
        if not (np.diff(self.xs) > 0).all():
            raise ValueError("xs must be strictly increasing")
        probes = [self(p) for p in _PROBES]
        if abs(probes[0] - 1.0) > 1e-9:
            raise ValueError("a similarity degree function must have rho(0) = 1")
        if not all(a > b for a, b in zip(probes[:-1], probes[1:])):
            raise ValueError("a similarity degree function must decrease")
        if probes[-1] > 1e-2:
            raise ValueError("a similarity degree function must decay to 0")

    def __call__(self, x: float) -> float:
        return float(np.interp(x, self.xs, self.ys))


def similarity_degree(j: float, rho=None) -> float:
    """Map a cost value to [0, 1]; small negative MC noise is clamped to 0."""
    rho = rho if rho is not None else LogRatioDegree()
    return rho(max(float(j), 0.0))


# ---------------------------------------------------------------------------
# Curves and classification
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DefectCurve:
    times: np.ndarray
    values: np.ndarray       # MC mean of ||K(X_t) - Y_t||^2 per grid point
    std_errors: np.ndarray

    def to_rows(self):
        return np.column_stack([self.times, self.values, self.std_errors])


@dataclass(frozen=True)
class SllnCurve:
    times: np.ndarray
    running_average: np.ndarray


def defect_curve(ensemble: Ensemble, k_map) -> DefectCurve:
    d = _squared_defect(ensemble, k_map)
    values = d.mean(axis=0)
    if ensemble.n_paths > 1:
        ses = d.std(axis=0, ddof=1) / math.sqrt(ensemble.n_paths)
    else:
        ses = np.zeros_like(values)
    return DefectCurve(ensemble.times, values, ses)


def slln_curve(ensemble: Ensemble, k_map) -> SllnCurve:
    """Running time average (1/t) int_0^t E||K(X_s) - Y_s||^2 ds."""
    curve = defect_curve(ensemble, k_map)
    phi = curve.values
    t = curve.times
    dt = ensemble.grid.dt
    integral = np.concatenate(
        [[0.0], np.cumsum(0.5 * (phi[1:] + phi[:-1]) * dt)]
    )
    avg = np.empty_like(phi)
    avg[0] = phi[0]
    avg[1:] = integral[1:] / t[1:]
    return SllnCurve(t, avg)


class SimilarityClass(Enum):
    COMPLETE = "complete"
    ASYMPTOTIC = "asymptotic"
    WEAK = "weak"
    UNDETERMINED = "undetermined"


@dataclass(frozen=True)
class Thresholds:
    eps_complete: float
    eps_asymptotic: float
    eps_weak: float


def make_thresholds(curve: DefectCurve, dt: float, lipschitz_hat: float) -> Thresholds:
    """Calibrated tolerance bands around the paper's exact zeros.

    eps = 10 * (3 * max std_error + 2 * dt * L_hat): three-sigma Monte
    Carlo noise plus the O(dt) weak discretization bias of the integrator,
    with a conservative factor 10.
    """
    eps = 10.0 * (3.0 * float(curve.std_errors.max()) + 2.0 * dt * lipschitz_hat)
    return Thresholds(eps, eps, eps)


@dataclass(frozen=True)
class SimilarityVerdict:
    classification: SimilarityClass
    evidence: dict


def _tail_decay_rate(times: np.ndarray, values: np.ndarray) -> float:
    """Least-squares slope of log defect over the last third of the horizon."""
    k0 = (2 * len(times)) // 3
    t = times[k0:]
    v = np.log(np.maximum(values[k0:], 1e-300))
    if len(t) < 2:
        return 0.0
    coeffs = np.polyfit(t, v, 1)
    return float(coeffs[0])


def classify_similarity(
    curve: DefectCurve, slln: SllnCurve, thresholds: Thresholds
) -> SimilarityVerdict:
    """Decide Complete / Asymptotic / Weak / Undetermined from finite data.

    The decision order mirrors the implication chain: complete similarity
    implies asymptotic similarity implies weak similarity, so the verdict
    can never contradict it.
    """
    if not np.array_equal(curve.times, slln.times):
        raise GridMiss("defect and running-average curves live on different grids")
    decay = _tail_decay_rate(curve.times, curve.values)
    evidence = {
        "max_defect": float(curve.values.max()),
        "final_defect": float(curve.values[-1]),
        "mean_defect": float(curve.values.mean()),
        "tail_decay_rate": decay,
        "final_running_average": float(slln.running_average[-1]),
        "eps_complete": thresholds.eps_complete,
        "eps_asymptotic": thresholds.eps_asymptotic,
        "eps_weak": thresholds.eps_weak,
    }
    if (curve.values <= thresholds.eps_complete).all():
        cls = SimilarityClass.COMPLETE
    elif decay < 0.0 and curve.values[-1] <= thresholds.eps_asymptotic:
        cls = SimilarityClass.ASYMPTOTIC
    elif slln.running_average[-1] <= thresholds.eps_weak:
        cls = SimilarityClass.WEAK
    else:
        cls = SimilarityClass.UNDETERMINED
    return SimilarityVerdict(cls, evidence)
