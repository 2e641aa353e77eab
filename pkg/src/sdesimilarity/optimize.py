"""Search for the minimizing map and verify the stationarity conditions.

Optimization is derivative-free Nelder-Mead over the parameters of a map
family, always evaluated on one fixed ensemble: common random numbers make
cost differences between nearby maps smooth in the parameters, so central
differences and stationarity checks are meaningful despite the Monte
Carlo noise in absolute values.
"""

from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import minimize

from . import functional as fn
from . import mapping as mp
from .errors import (
    AllRestartsNonInvertible,
    DimensionMismatch,
    ExtrapolationWarning,
    IllConditionedRegression,
    SingularMap,
    StepTooLarge,
)
from .sde import Ensemble, _path_rng

PENALTY = 1e6


# ---------------------------------------------------------------------------
# Cost specification with analytic partials
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SimilarityCost:
    """Running cost (1/T)||Kx - y||^2 and terminal cost ||K(x_T) - y_T||."""

    horizon: float
    terminal_guard: float = 1e-12

    def running(self, x, y, k_map):
        psi = mp.apply(k_map, x) - y
        return np.sum(psi * psi, axis=-1) / self.horizon

    def running_grad_x(self, x, y, k_map):
        psi = mp.apply(k_map, x) - y
        jk = mp.jacobian(k_map, x)
        return (2.0 / self.horizon) * np.einsum("...ji,...j->...i", jk, psi)

    def running_grad_y(self, x, y, k_map):
        psi = mp.apply(k_map, x) - y
        return (-2.0 / self.horizon) * psi

    def running_dot_k(self, x, y, k_map, direction):
        """<L_K, direction> where L_K is the gradient in the map parameters."""
        psi = mp.apply(k_map, x) - y
        dkx = _direction_image(direction, x)
        return (2.0 / self.horizon) * np.sum(psi * dkx, axis=-1)

    def terminal(self, x, y, k_map):
        psi = mp.apply(k_map, x) - y
        return np.sqrt(np.sum(psi * psi, axis=-1))

    def terminal_grad_x(self, x, y, k_map):
        psi = mp.apply(k_map, x) - y
        nrm = np.maximum(
            np.sqrt(np.sum(psi * psi, axis=-1, keepdims=True)), self.terminal_guard
        )
        jk = mp.jacobian(k_map, x)
        return np.einsum("...ji,...j->...i", jk, psi / nrm)

    def terminal_grad_y(self, x, y, k_map):
        psi = mp.apply(k_map, x) - y
        nrm = np.maximum(
            np.sqrt(np.sum(psi * psi, axis=-1, keepdims=True)), self.terminal_guard
        )
        return -psi / nrm


def _direction_image(direction, x):
    """The linearization of K in the family direction, evaluated at x.

    For linear and affine directions this is direction.matrix @ x (+ offset);
    for tabulated directions it is the interpolant through the direction
    values, i.e. the Gateaux derivative of the knot-value parametrization.
    """
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ExtrapolationWarning)
        return mp.apply(direction, x)


# ---------------------------------------------------------------------------
# Map family parametrization
# ---------------------------------------------------------------------------


def params_of(mapping) -> np.ndarray:
    if mapping.kind == "linear":
        return mapping.matrix.ravel().copy()
    if mapping.kind == "affine":
        return np.concatenate([mapping.matrix.ravel(), mapping.offset])
    if mapping.kind == "tabulated1d":
        return mapping.values.copy()
    raise DimensionMismatch(f"unknown map kind {mapping.kind!r}")


def map_from_params(template, params: np.ndarray):
    params = np.asarray(params, float)
    if template.kind == "linear":
        n = template.dim
        return mp.LinearMap(params.reshape(n, n))
    if template.kind == "affine":
        n = template.dim
        return mp.AffineMap(params[: n * n].reshape(n, n), params[n * n :])
    if template.kind == "tabulated1d":
        return mp.Tabulated1d(template.knots, params)
    raise DimensionMismatch(f"unknown map kind {template.kind!r}")


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class OptimizeOptions:
    max_iter: int = 400
    step: float = 0.5
    restarts: int = 5
    xatol: float = 1e-6
    seed: int = 0


@dataclass
class OptResult:
    best_K: object
    J_best: fn.CostEstimate
    trace: list
    converged: bool
    homeo: mp.HomeoReport
    n_evaluations: int


def _penalized_objective(ensemble, template):
    counter = itertools.count()

    def objective(params):
        next(counter)
        try:
            candidate = map_from_params(template, params)
        except (SingularMap, ValueError):
            return PENALTY * (1.0 + float(np.sum(params * params)))
        cond = candidate.condition_number()
        if not np.isfinite(cond) or cond > mp.CONDITION_BOUND:
            return PENALTY * (1.0 + math.log10(max(cond, 10.0)))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", ExtrapolationWarning)
            return float(fn.cost_J_per_path(ensemble, candidate).mean())

    return objective, counter


def optimize_K(
    template,
    ensemble: Ensemble,
    options: OptimizeOptions = OptimizeOptions(),
) -> OptResult:
    """Minimize J over the template's family by multi-restart Nelder-Mead.

    Non-invertible candidates (condition number beyond the bound, or
    non-monotone knot values) cost an additive 1e6 penalty rather than a
    hard constraint.  All evaluations reuse the one supplied ensemble.
    """
    p0 = params_of(template)
    if p0.size > 64:
        raise DimensionMismatch("family has more than 64 parameters")
    objective, counter = _penalized_objective(ensemble, template)
    rng = _path_rng(options.seed, 0)

    best = None
    trace: list = []
    any_converged = False
    for restart in range(max(1, options.restarts)):
        if restart == 0:
            start = p0.copy()
        else:
            scale = options.step * max(1.0, float(np.linalg.norm(p0)))
            start = p0 + scale * rng.standard_normal(p0.size)
        local_trace = []
        iteration = itertools.count()

        def record(xk):
            local_trace.append((next(iteration), float(objective(xk))))

        res = minimize(
            objective,
            start,
            method="Nelder-Mead",
            callback=record,
            options={
                "maxiter": options.max_iter,
                "xatol": options.xatol,
                "fatol": 1e-10,
            },
        )
        if best is None or res.fun < best.fun:
            best = res
            trace = local_trace
        any_converged = any_converged or bool(res.success)

    if best.fun >= PENALTY:
        raise AllRestartsNonInvertible(
            "every restart terminated on the invertibility penalty"
        )
    best_map = map_from_params(template, best.x)
    j_best = fn.cost_J(ensemble, best_map)
    homeo = mp.check_homeomorphism(best_map, ensemble)
    return OptResult(
        best_K=best_map,
        J_best=j_best,
        trace=trace,
        converged=any_converged,
        homeo=homeo,
        n_evaluations=next(counter),
    )


@dataclass(frozen=True)
class DirectionalDerivative:
    value: float
    std_error: float
    eps: float


def directional_derivative(
    ensemble: Ensemble, k_map, direction, eps: float
) -> DirectionalDerivative:
    """Central difference of J along a family direction, on the same paths.

    The per-path differences pair up through the common random numbers, so
    the Monte Carlo variance of the derivative estimate cancels almost
    entirely.
    """
    try:
        plus = mp.perturbed(k_map, direction, eps)
        minus = mp.perturbed(k_map, direction, -eps)
    except (SingularMap, ValueError) as exc:
        raise StepTooLarge(f"perturbed map is not admissible: {exc}") from exc
    for candidate in (plus, minus):
        cond = candidate.condition_number()
        if not np.isfinite(cond) or cond > mp.CONDITION_BOUND:
            raise StepTooLarge("perturbed map violates the invertibility bound")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ExtrapolationWarning)
        j_plus = fn.cost_J_per_path(ensemble, plus)
        j_minus = fn.cost_J_per_path(ensemble, minus)
    per_path = (j_plus - j_minus) / (2.0 * eps)
    value = float(per_path.mean())
    se = (
        float(per_path.std(ddof=1) / math.sqrt(per_path.size))
        if per_path.size > 1
        else 0.0
    )
    return DirectionalDerivative(value, se, eps)


# ---------------------------------------------------------------------------
# Variational equations
# ---------------------------------------------------------------------------


def solve_variational_equations(
    ensemble: Ensemble, xhat0=None, yhat0=None
):
    """Integrate the linearized dynamics along every stored path.

    d xhat = f_X(X_t) xhat dt + sigma_X(X_t) xhat dW (same for y with g, vsigma).
    The zero initial condition gives the identically-zero solution; tests
    inject a nonzero initial perturbation and compare against finite
    differences of the nonlinear flow.
    """
    cfg = ensemble.config
    if cfg is None or ensemble.dw is None:
        raise ValueError("variational equations need the generating ensemble config")
    xhat = _linearized_flow(cfg.sys_x, ensemble.x, ensemble.dw, ensemble.grid, xhat0)
    yhat = _linearized_flow(cfg.sys_y, ensemble.y, ensemble.dw, ensemble.grid, yhat0)
    return xhat, yhat


def _linearized_flow(system, states, dw, grid, v0):
    m, steps_plus, n = states.shape
    out = np.zeros((m, steps_plus, n))
    if v0 is None:
        return out
    v = np.broadcast_to(np.asarray(v0, float), (m, n)).copy()
    out[:, 0] = v
    dt = grid.dt
    for k in range(grid.n_steps):
        t = k * dt
        xk = states[:, k]
        fj = system.drift_jacobian(t, xk)
        sj = system.diffusion_jacobian(t, xk)  # (m, n, d, n)
        drift = np.einsum("...ij,...j->...i", fj, v)
        noise = np.einsum(
            "...idj,...j,...d->...i", sj, v, dw[:, k]
        )
        v = v + drift * dt + noise
        out[:, k + 1] = v
    return out


# ---------------------------------------------------------------------------
# Adjoint equations by least-squares Monte Carlo
# ---------------------------------------------------------------------------


@dataclass
class AdjointSolution:
    times: np.ndarray
    p: np.ndarray  # (m, steps + 1, n)
    q: np.ndarray  # (m, steps + 1, n, d)
    r: np.ndarray
    s: np.ndarray


def _poly_design(x, y, degree):
    """Monomials of (x, y) up to the given total degree, shape (m, B)."""
    feats = np.hstack([x, y])
    m, nf = feats.shape
    cols = [np.ones(m)]
    if degree >= 1:
        cols.extend(feats[:, j] for j in range(nf))
    if degree >= 2:
        for i in range(nf):
            for j in range(i, nf):
                cols.append(feats[:, i] * feats[:, j])
    return np.column_stack(cols)


def _regress(design, targets):
    """Conditional expectations by least squares, with collinearity pruning.

    Columns are scaled to unit RMS first (a reparametrization that leaves
    the fitted values untouched), so conditioning measures genuine
    degeneracy rather than units.  Exactly collinear coordinates (for
    example an output system that is a deterministic function of its
    partner) are then dropped by pivoted QR; only a reduced system that is
    still ill-conditioned raises.
    """
    scale = np.sqrt(np.mean(design * design, axis=0))
    scaled = design / np.maximum(scale, 1e-300)
    sv = np.linalg.svd(scaled, compute_uv=False)
    if sv[-1] <= 0 or (sv[0] / sv[-1]) ** 2 > 1e10:
        from scipy.linalg import qr as scipy_qr

        _, rmat, piv = scipy_qr(scaled, mode="economic", pivoting=True)
        diag = np.abs(np.diag(rmat))
        keep = piv[diag > 1e-9 * diag[0]]
        scaled = scaled[:, keep]
        sv = np.linalg.svd(scaled, compute_uv=False)
        if sv[-1] <= 0 or (sv[0] / sv[-1]) ** 2 > 1e10:
            raise IllConditionedRegression(
                f"basis Gram condition {(sv[0] / max(sv[-1], 1e-300)) ** 2:.3g}"
            )
    coef, *_ = np.linalg.lstsq(scaled, targets, rcond=None)
    return scaled @ coef


def solve_adjoint_lsmc(
    ensemble: Ensemble, k_map, cost: SimilarityCost, basis_degree: int = 2
) -> AdjointSolution:
    """Backward induction for the two adjoint processes.

    Terminal values are set exactly from the terminal-cost gradients; at
    each earlier step the martingale component q comes from regressing
    p_{t+1} dW / dt on the state basis and p from the conditional
    expectation of p_{t+1} plus the generator increment.
    """
    cfg = ensemble.config
    if cfg is None or ensemble.dw is None:
        raise ValueError("adjoint solver needs the generating ensemble config")
    n = cfg.sys_x.dim
    if n > 3:
        raise DimensionMismatch("regression basis is only tractable for n <= 3")
    d = cfg.sys_x.noise_dim
    m = ensemble.n_paths
    steps = ensemble.grid.n_steps
    dt = ensemble.grid.dt
    times = ensemble.times

    p = np.zeros((m, steps + 1, n))
    q = np.zeros((m, steps + 1, n, d))
    r = np.zeros((m, steps + 1, n))
    s = np.zeros((m, steps + 1, n, d))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ExtrapolationWarning)
        p[:, steps] = cost.terminal_grad_x(ensemble.x[:, -1], ensemble.y[:, -1], k_map)
        r[:, steps] = cost.terminal_grad_y(ensemble.x[:, -1], ensemble.y[:, -1], k_map)

        for k in range(steps - 1, -1, -1):
            xk, yk = ensemble.x[:, k], ensemble.y[:, k]
            dwk = ensemble.dw[:, k]
            design = _poly_design(xk, yk, basis_degree)

            # X-side adjoint (p, q).
            q_targets = (
                p[:, k + 1][:, :, None] * dwk[:, None, :] / dt
            ).reshape(m, n * d)
            fitted = _regress(design, np.hstack([p[:, k + 1], q_targets]))
            p_ce = fitted[:, :n]
            q[:, k] = fitted[:, n:].reshape(m, n, d)
            fj = cfg.sys_x.drift_jacobian(times[k], xk)
            sj = cfg.sys_x.diffusion_jacobian(times[k], xk)
            gen = (
                np.einsum("...ji,...j->...i", fj, p_ce)
                + np.einsum("...jdi,...jd->...i", sj, q[:, k])
                + cost.running_grad_x(xk, yk, k_map)
            )
            p[:, k] = p_ce + dt * gen

            # Y-side adjoint (r, s).
            s_targets = (
                r[:, k + 1][:, :, None] * dwk[:, None, :] / dt
            ).reshape(m, n * d)
            fitted = _regress(design, np.hstack([r[:, k + 1], s_targets]))
            r_ce = fitted[:, :n]
            s[:, k] = fitted[:, n:].reshape(m, n, d)
            gj = cfg.sys_y.drift_jacobian(times[k], yk)
            vj = cfg.sys_y.diffusion_jacobian(times[k], yk)
            gen = (
                np.einsum("...ji,...j->...i", gj, r_ce)
                + np.einsum("...jdi,...jd->...i", vj, s[:, k])
                + cost.running_grad_y(xk, yk, k_map)
            )
            r[:, k] = r_ce + dt * gen

    return AdjointSolution(times, p, q, r, s)


# ---------------------------------------------------------------------------
# Hamiltonian and the stationarity check
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class HamiltonianEval:
    value: float
    k_dots: tuple


def hamiltonian(
    t, x, y, k_map, p, q, r, s, sys_x, sys_y, cost: SimilarityCost, probes=()
) -> HamiltonianEval:
    """H = <p,f> + <q,sigma> + <r,g> + <s,vsigma> + L at one point.

    The coefficients do not take the map as an argument, so the derivative
    of H in the map reduces to the running-cost derivative; k_dots holds
    <H_K, direction> for each probe direction.
    """
    x = np.atleast_1d(np.asarray(x, float))
    y = np.atleast_1d(np.asarray(y, float))
    f = sys_x.drift_at(t, x, partner=y)
    sig = sys_x.diffusion_at(t, x)
    g = sys_y.drift_at(t, y, partner=x)
    vsig = sys_y.diffusion_at(t, y)
    value = (
        float(np.sum(np.asarray(p) * f))
        + float(np.sum(np.asarray(q) * sig))
        + float(np.sum(np.asarray(r) * g))
        + float(np.sum(np.asarray(s) * vsig))
        + float(cost.running(x, y, k_map))
    )
    k_dots = tuple(
        float(cost.running_dot_k(x, y, k_map, direction)) for direction in probes
    )
    return HamiltonianEval(value, k_dots)


@dataclass(frozen=True)
class PrincipleReport:
    estimates: tuple      # (value, std_error) per probe direction
    passed: bool
    n_directions: int


def principle_check(
    ensemble: Ensemble, k_map, directions: Sequence, cost: SimilarityCost
) -> PrincipleReport:
    """Time-integrated <H_K, direction> for each direction.

    PASS when every estimate is above -3 standard errors minus a
    machine-scale floor.  The floor is 1e-9 of the direction's curvature
    scale (the derivative a unit parameter displacement would produce), so
    on exactly-conjugate instances, where both the estimate and its
    standard error collapse together, a sub-nano displacement of the
    optimizer still counts as stationary.
    """
    dt = ensemble.grid.dt
    horizon = ensemble.grid.horizon
    results = []
    passed = True
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ExtrapolationWarning)
        for direction in directions:
            integrand = cost.running_dot_k(ensemble.x, ensemble.y, k_map, direction)
            per_path = np.trapezoid(integrand, dx=dt, axis=1)
            val = float(per_path.mean())
            se = (
                float(per_path.std(ddof=1) / math.sqrt(per_path.size))
                if per_path.size > 1
                else 0.0
            )
            dkx = _direction_image(direction, ensemble.x)
            curvature = (2.0 / horizon) * float(
                np.trapezoid(np.sum(dkx * dkx, axis=-1), dx=dt, axis=1).mean()
            )
            results.append((val, se))
            if val < -(3.0 * se + 1e-9 * curvature):
                passed = False
    return PrincipleReport(tuple(results), passed, len(directions))


def random_directions(template, count: int, seed: int = 0):
    """Unit-norm probe directions in the template's parametric family."""
    rng = _path_rng(seed, 1)
    out = []
    for _ in range(count):
        p = rng.standard_normal(params_of(template).size)
        p /= max(float(np.linalg.norm(p)), 1e-300)
        if template.kind == "linear":
            n = template.dim
            out.append(mp.LinearMap(p.reshape(n, n)))
        elif template.kind == "affine":
            n = template.dim
            out.append(mp.AffineMap(p[: n * n].reshape(n, n), p[n * n :]))
        else:
            raise DimensionMismatch(
                "random probe directions are defined for linear and affine families"
            )
    return out


def maximum_principle_check(
    ensemble: Ensemble,
    opt: OptResult,
    cost: SimilarityCost,
    n_probes: int = 20,
    adjoint: Optional[AdjointSolution] = None,
    seed: int = 0,
) -> PrincipleReport:
    """Stationarity of the optimizer output along random probe directions.

    The adjoint solution is accepted for completeness of the optimal
    triple; the derivative of the Hamiltonian in the map does not involve
    it, so the check itself only integrates the running-cost derivative.
    """
    if not opt.converged:
        raise ValueError("optimizer did not converge; stationarity check is moot")
    directions = random_directions(opt.best_K, n_probes, seed)
    return principle_check(ensemble, opt.best_K, directions, cost)
