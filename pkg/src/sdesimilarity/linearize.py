"""Explicit constructions of the minimizing map.

Three routes: the scalar ODE for the minimizer of the similarity cost,
the matrix equation its gradient satisfies in higher dimension, and the
linearization conjugacy near a hyperbolic fixed point obtained as the
fixed point of a strict contraction with factor 1/2.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.interpolate import CubicSpline, RegularGridInterpolator
from scipy.linalg import expm

from . import conditions as cond
from . import mapping as mp
from .errors import (
    AllPathsExitImmediately,
    ContractionViolated,
    DimensionMismatch,
    NotAFixedPoint,
    SingularDenominator,
    SingularDiffusion,
    UnsupportedDichotomy,
)
from .sde import Ensemble, SdeSystem

RIDGE = 1e-10
DENOMINATOR_FLOOR = 1e-8


# ---------------------------------------------------------------------------
# Scalar minimizer ODE
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class KstarOdeProblem:
    """Scalar minimizer ODE data: coefficient pair, anchor, x-range."""

    sys_x: SdeSystem
    sys_y: SdeSystem
    anchor: tuple  # (x0, y0) with K*(x0) = y0
    x_range: tuple  # (lo, hi) containing x0
    ode_steps: int = 2000

    def __post_init__(self):
        if self.sys_x.dim != 1 or self.sys_y.dim != 1:
            raise DimensionMismatch("the minimizer ODE is one-dimensional")
        lo, hi = self.x_range
        if not (lo < hi and lo <= self.anchor[0] <= hi):
            raise ValueError("x_range must contain the anchor abscissa")

    def f(self, x):
        return self.sys_x.drift_at(0.0, np.asarray(x, float).reshape(-1, 1))[..., 0]

    def sigma(self, x):
        return self.sys_x.diffusion_at(0.0, np.asarray(x, float).reshape(-1, 1))[
            ..., 0, 0
        ]

    def g(self, y):
        return self.sys_y.drift_at(0.0, np.asarray(y, float).reshape(-1, 1))[..., 0]

    def varsigma(self, y):
        return self.sys_y.diffusion_at(0.0, np.asarray(y, float).reshape(-1, 1))[
            ..., 0, 0
        ]


@dataclass(frozen=True)
class KstarOdeSolution:
    mapping: mp.Tabulated1d
    monotone: bool


def solve_kstar_ode_1d(problem: KstarOdeProblem) -> KstarOdeSolution:
    """Integrate dK/dx = (-f(x) vsigma(K) + 2 sigma(x) g(K)) / (f(x) sigma(x)).

    Classical RK4 from the anchor out to both ends of the range.  The
    denominator is probed at a thousand points first; the output is
    tabulated on the integration knots and flagged when it fails to be
    monotone (not every solution is a homeomorphism).
    """
    lo, hi = problem.x_range
    probes = np.linspace(lo, hi, 1000)
    den = problem.f(probes) * problem.sigma(probes)
    bad = np.abs(den) < DENOMINATOR_FLOOR
    if bad.any():
        raise SingularDenominator(float(probes[np.argmax(bad)]))

    def rhs(x, k):
        fx = float(problem.f(x))
        sx = float(problem.sigma(x))
        d = fx * sx
        if abs(d) < DENOMINATOR_FLOOR:
            raise SingularDenominator(float(x))
        return (-fx * float(problem.varsigma(k)) + 2.0 * sx * float(problem.g(k))) / d

    x0, y0 = problem.anchor
    span = hi - lo
    n_right = max(1, int(round(problem.ode_steps * (hi - x0) / span))) if hi > x0 else 0
    n_left = max(1, int(round(problem.ode_steps * (x0 - lo) / span))) if x0 > lo else 0

    def rk4_march(x_start, k_start, x_stop, n):
        xs = [x_start]
        ks = [k_start]
        h = (x_stop - x_start) / n
        x, k = x_start, k_start
        for _ in range(n):
            k1 = rhs(x, k)
            k2 = rhs(x + 0.5 * h, k + 0.5 * h * k1)
            k3 = rhs(x + 0.5 * h, k + 0.5 * h * k2)
            k4 = rhs(x + h, k + h * k3)
            k = k + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            x = x + h
            xs.append(x)
            ks.append(k)
        return xs, ks

    knots = [x0]
    values = [y0]
    if n_right:
        xs, ks = rk4_march(x0, y0, hi, n_right)
        knots.extend(xs[1:])
        values.extend(ks[1:])
    if n_left:
        xs, ks = rk4_march(x0, y0, lo, n_left)
        knots = xs[1:][::-1] + knots
        values = ks[1:][::-1] + values
    tab = mp.Tabulated1d(np.asarray(knots), np.asarray(values), require_monotone=False)
    return KstarOdeSolution(tab, tab.strictly_monotone)


# ---------------------------------------------------------------------------
# Matrix form of the minimizer gradient
# ---------------------------------------------------------------------------


def kstar_matrix_rhs(sys_x: SdeSystem, sys_y: SdeSystem, x, y, kx, ridge: float = RIDGE):
    """The gradient dK*/dX^T = [vsigma sigma^T - f (K*x - y)^T][sigma sigma^T]^{-1}.

    On the conjugacy manifold (K*x = y) with matching diffusions this is
    the identity.  The diffusion Gram matrix gets a ridge before inversion
    and the call fails when it stays numerically singular anyway.
    """
    x = np.atleast_1d(np.asarray(x, float))
    y = np.atleast_1d(np.asarray(y, float))
    kx = np.atleast_1d(np.asarray(kx, float))
    f = sys_x.drift_at(0.0, x, partner=y)
    sig = sys_x.diffusion_at(0.0, x)
    vsig = sys_y.diffusion_at(0.0, y)
    raw = sig @ sig.T
    sv_raw = np.linalg.svd(raw, compute_uv=False)
    if sv_raw[-1] <= 1e-14 * max(1.0, sv_raw[0]):
        raise SingularDiffusion("sigma sigma^T is singular; the ridge cannot help")
    gram = raw + ridge * np.eye(sys_x.dim)
    sv = np.linalg.svd(gram, compute_uv=False)
    if sv[0] / sv[-1] > 1e12:
        raise SingularDiffusion("sigma sigma^T is numerically singular after ridge")
    psi = kx - y
    numer = vsig @ sig.T - np.outer(f, psi)
    return numer @ np.linalg.inv(gram)


# ---------------------------------------------------------------------------
# Linearization at a fixed point
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LinearizationPair:
    system: SdeSystem
    a0: np.ndarray
    a_noise: tuple  # d matrices, n x n

    @property
    def dim(self) -> int:
        return self.a0.shape[0]

    def remainder(self, x):
        """gamma(x) = f0(x) - A0 x, the Taylor remainder of the drift."""
        lin = np.zeros(x.shape[:-1] + (self.dim,))
        for j in range(self.dim):
            lin += self.a0[:, j] * x[..., j : j + 1]
        return self.system.drift_at(0.0, x, partner=x) - lin


def linearize_at_fixed_point(system: SdeSystem) -> LinearizationPair:
    """Analytic linear parts A_0 = Df_0(0) and A_l = Df_l(0).

    The origin must actually be a fixed point of every coefficient field.
    """
    zero = np.zeros(system.dim)
    f0 = system.drift_at(0.0, zero, partner=zero)
    if np.abs(f0).max() > 1e-12:
        raise NotAFixedPoint(f"drift at 0 is {f0}, expected 0")
    s0 = system.diffusion_at(0.0, zero)
    if np.abs(s0).max() > 1e-12:
        raise NotAFixedPoint(f"diffusion at 0 is nonzero: {s0}")
    a0 = np.array(system.drift_jacobian(0.0, zero))
    sj = np.array(system.diffusion_jacobian(0.0, zero))  # (n, d, n)
    a_noise = tuple(sj[:, l, :].copy() for l in range(system.noise_dim))
    return LinearizationPair(system, a0, a_noise)


# ---------------------------------------------------------------------------
# Green kernel of the dichotomy
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GreenKernel:
    a0: np.ndarray
    lam1: float
    epsilon: float
    m_eps: float

    def __call__(self, t: float) -> np.ndarray:
        # All exponents negative: the projection on the decaying part is
        # the identity and the kernel vanishes for t < 0.
        if t < 0:
            return np.zeros_like(self.a0)
        return expm(self.a0 * t)

    def envelope(self, t: float) -> float:
        return self.m_eps * math.exp((self.lam1 + self.epsilon) * abs(t))


def build_green_kernel(
    pair: LinearizationPair,
    spectrum: cond.LyapunovSpectrum,
    epsilon: float,
    envelope_horizon: float = 50.0,
    seed: int = 0,
) -> GreenKernel:
    """Kernel of the linear part, with a measured growth envelope.

    Only the fully stable case is supported; a non-negative exponent means
    the dichotomy splits, which is out of scope here.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    lam1 = float(spectrum.exponents[0])
    if lam1 + epsilon >= 0:
        raise UnsupportedDichotomy(
            f"largest exponent {lam1} + epsilon {epsilon} is not negative"
        )
    if (spectrum.exponents >= 0).any():
        raise UnsupportedDichotomy("a non-negative exponent requires a split projection")
    from .sde import ConstantDiffusion, LinearDrift

    linear_system = SdeSystem(
        pair.dim,
        1,
        LinearDrift(pair.a0),
        ConstantDiffusion(np.zeros((pair.dim, 1))),
    )
    m_eps = cond.tempered_envelope(
        linear_system, lam1, epsilon, envelope_horizon, seed
    )
    return GreenKernel(pair.a0.copy(), lam1, epsilon, m_eps)


# ---------------------------------------------------------------------------
# The kappa fixed point
# ---------------------------------------------------------------------------


@dataclass
class KappaSolution:
    axes: tuple            # per-dimension grid axes of the tabulation box
    values: np.ndarray     # (*grid shape, n)
    delta: float
    iterations_used: int
    final_residual: float
    contraction_factor_observed: float
    update_history: list
    sup_bound: float       # theoretical bound 2 M_eps sup|gamma| / -(lam1+eps)

    @property
    def dim(self) -> int:
        return len(self.axes)

    def interpolator(self):
        return _kappa_interpolator(self.axes, self.values)

    def sup_norm(self) -> float:
        return float(np.abs(self.values).max())


def _kappa_interpolator(axes, values):
    n = len(axes)
    if n == 1:
        splines = [CubicSpline(axes[0], values[..., j]) for j in range(values.shape[-1])]
        lo, hi = axes[0][0], axes[0][-1]

        def evaluate(pts):
            u = np.clip(np.asarray(pts, float)[..., 0], lo, hi)
            return np.stack([sp(u) for sp in splines], axis=-1)

        return evaluate
    interps = [
        RegularGridInterpolator(axes, values[..., j], bounds_error=False, fill_value=None)
        for j in range(values.shape[-1])
    ]
    los = np.array([ax[0] for ax in axes])
    his = np.array([ax[-1] for ax in axes])

    def evaluate(pts):
        u = np.clip(np.asarray(pts, float), los, his)
        return np.stack([f(u) for f in interps], axis=-1)

    return evaluate


def _retract_to_ball(x, delta):
    nrm = np.sqrt(np.sum(x * x, axis=-1, keepdims=True))
    scale = np.minimum(1.0, delta / np.maximum(nrm, 1e-300))
    return x * scale


def drift_hessian_sup(pair: LinearizationPair, radius: float, probes: int = 512) -> float:
    """sup over the ball of the drift's second derivative norm, by sampling.

    Central finite differences of the analytic Jacobian; the consumers
    only need the constant to one or two digits.
    """
    n = pair.dim
    rng = np.random.default_rng(12345)
    if n == 1:
        pts = np.linspace(-radius, radius, probes).reshape(-1, 1)
    else:
        pts = rng.standard_normal((probes, n))
        pts *= radius * rng.random((probes, 1)) ** (1.0 / n) / np.maximum(
            np.linalg.norm(pts, axis=1, keepdims=True), 1e-300
        )
    h = 1e-5 * max(radius, 1e-6)
    best = 0.0
    for j in range(n):
        e = np.zeros(n)
        e[j] = h
        jp = pair.system.drift_jacobian(0.0, pts + e)
        jm = pair.system.drift_jacobian(0.0, pts - e)
        second = (jp - jm) / (2.0 * h)  # (probes, n, n)
        norms = np.linalg.norm(second.reshape(len(pts), -1), axis=1)
        best = max(best, float(norms.max()))
    return best


def paper_delta(pair: LinearizationPair, kernel: GreenKernel) -> float:
    """Ball radius delta = -(lam1+eps) / (4 c M_eps) with c = sup ||f0''||.

    The curvature constant is measured on the ball itself, so the radius
    solves a scalar fixed point; bisection on delta |-> c(delta) delta.
    """
    target = -(kernel.lam1 + kernel.epsilon) / (4.0 * kernel.m_eps)
    lo, hi = 1e-8, 1e4

    def value(delta):
        return drift_hessian_sup(pair, delta) * delta

    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if value(mid) < target:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-12 * max(1.0, hi):
            break
    return 0.5 * (lo + hi)


def solve_kappa_fixed_point(
    pair: LinearizationPair,
    kernel: GreenKernel,
    delta: float,
    grid_size: int = 201,
    tol: float = 1e-10,
    max_iter: int = 80,
    quad_nodes: int = 400,
    grid_margin: float = 1.15,
) -> KappaSolution:
    """Picard iteration for the correction kappa with (K*)^{-1} = I + kappa.

    kappa(y) = int_0^S G(s) gamma_cut(Phi(-s) y + kappa(Phi(-s) y)) ds,
    with gamma the drift's Taylor remainder radially cut off at the ball
    radius, the integral truncated where the kernel envelope reaches
    1e-8 * delta, and composite Simpson quadrature in between.
    """
    if any(np.any(m != 0.0) for m in pair.a_noise):
        raise DimensionMismatch(
            "the tabulated construction supports deterministic coefficients only"
        )
    lam_eff = kernel.lam1 + kernel.epsilon
    frak_c = drift_hessian_sup(pair, delta)
    c1 = frak_c * delta
    contraction_bound = 2.0 * kernel.m_eps * c1 / (-lam_eff)
    if contraction_bound > 0.9:
        raise ValueError(
            f"contraction condition fails: 2 M c1 / -(lam1+eps) = {contraction_bound:.3f} > 0.9;"
            " shrink delta"
        )
    n = pair.dim
    # Truncation point: kernel envelope below 1e-8 * delta.
    s_max = math.log(1e-8 * delta / kernel.m_eps) / lam_eff
    if quad_nodes % 2 == 0:
        quad_nodes += 1  # Simpson needs an even interval count
    s_nodes = np.linspace(0.0, s_max, quad_nodes)
    hs = s_nodes[1] - s_nodes[0]
    weights = np.ones(quad_nodes)
    weights[1:-1:2] = 4.0
    weights[2:-1:2] = 2.0
    weights *= hs / 3.0

    # Precompute the flow matrices along the quadrature nodes.
    kernels = [kernel(s) for s in s_nodes]
    back_flows = [expm(-pair.a0 * s) for s in s_nodes]

    half = grid_margin * delta
    axes = tuple(np.linspace(-half, half, grid_size) for _ in range(n))
    mesh = np.meshgrid(*axes, indexing="ij")
    grid_pts = np.stack(mesh, axis=-1)  # (*shape, n)
    flat = grid_pts.reshape(-1, n)

    # gamma saturated outside the ball keeps the global Lipschitz constant.
    def gamma_cut(w):
        return pair.remainder(_retract_to_ball(w, delta))

    sup_gamma = float(
        np.abs(pair.remainder(_retract_to_ball(flat, delta))).max()
    )
    sup_bound = 2.0 * kernel.m_eps * max(sup_gamma, 1e-300) / (-lam_eff)

    values = np.zeros(flat.shape)
    updates = []
    ratios = []
    consecutive_bad = 0
    iterations = 0
    for it in range(max_iter):
        interp = _kappa_interpolator(axes, values.reshape(grid_pts.shape))
        new = np.zeros_like(values)
        for w8, gmat, bmat in zip(weights, kernels, back_flows):
            z = flat @ bmat.T
            arg = z + interp(z)
            new += w8 * (gamma_cut(arg) @ gmat.T)
        update = float(np.abs(new - values).max())
        updates.append(update)
        if len(updates) >= 2 and updates[-2] > 0:
            ratio = updates[-1] / updates[-2]
            ratios.append(ratio)
            if ratio > 1.0:
                consecutive_bad += 1
                if consecutive_bad >= 3:
                    raise ContractionViolated(
                        f"update ratio above 1 for 3 iterations: {ratios[-3:]}"
                    )
            else:
                consecutive_bad = 0
        values = new
        iterations = it + 1
        if update <= tol:
            break

    usable = [
        r
        for r, u in zip(ratios, updates[:-1])
        if u > 50.0 * tol
    ]
    observed = max(usable) if usable else 0.0
    return KappaSolution(
        axes=axes,
        values=values.reshape(grid_pts.shape),
        delta=delta,
        iterations_used=iterations,
        final_residual=updates[-1] if updates else 0.0,
        contraction_factor_observed=float(observed),
        update_history=updates,
        sup_bound=sup_bound,
    )


def kappa_residual(pair: LinearizationPair, kernel: GreenKernel, sol: KappaSolution,
                   probe_pts, quad_nodes: int = 400) -> float:
    """sup |T[kappa](y) - kappa(y)| over probe points (off-grid included)."""
    lam_eff = kernel.lam1 + kernel.epsilon
    s_max = math.log(1e-8 * sol.delta / kernel.m_eps) / lam_eff
    if quad_nodes % 2 == 0:
        quad_nodes += 1
    s_nodes = np.linspace(0.0, s_max, quad_nodes)
    hs = s_nodes[1] - s_nodes[0]
    weights = np.ones(quad_nodes)
    weights[1:-1:2] = 4.0
    weights[2:-1:2] = 2.0
    weights *= hs / 3.0
    interp = sol.interpolator()
    pts = np.atleast_2d(np.asarray(probe_pts, float))
    acc = np.zeros_like(pts)
    for s, w8 in zip(s_nodes, weights):
        gmat = kernel(s)
        bmat = expm(-pair.a0 * s)
        z = pts @ bmat.T
        arg = z + interp(z)
        acc += w8 * (pair.remainder(_retract_to_ball(arg, sol.delta)) @ gmat.T)
    return float(np.abs(acc - interp(pts)).max())


# ---------------------------------------------------------------------------
# The conjugacy H = (I + kappa)^{-1} and its verification
# ---------------------------------------------------------------------------


class HartmanGrobmanMap:
    """H with H(x) = y solving y + kappa(y) = x; inverse is y + kappa(y).

    H conjugates the nonlinear flow to its linearization near the fixed
    point; it plugs into the cost functionals like any other map.
    """

    kind = "hartman_grobman"

    def __init__(self, sol: KappaSolution):
        self.sol = sol
        self.dim = sol.dim
        self._interp = sol.interpolator()

    def __call__(self, x):
        x = np.asarray(x, float)
        single = x.ndim == 1
        pts = np.atleast_2d(x)
        y = pts.copy()
        # kappa is a contraction, so y <- x - kappa(y) converges geometrically.
        for _ in range(100):
            y_next = pts - self._interp(y)
            if np.abs(y_next - y).max() < 1e-14:
                y = y_next
                break
            y = y_next
        return y[0] if single else y.reshape(x.shape)

    def inverse(self, y):
        y = np.asarray(y, float)
        single = y.ndim == 1
        pts = np.atleast_2d(y)
        out = pts + self._interp(pts)
        return out[0] if single else out.reshape(y.shape)


def verify_conjugacy_defect(
    pair: LinearizationPair, sol: KappaSolution, ensemble: Ensemble
) -> "fn.CostEstimate":
    """Squared defect ||H(X_t) - Y_t||^2 averaged over pre-exit segments.

    Each path contributes until its first exit from the ball of radius
    delta; the conjugacy statement only holds up to that random time.
    """
    from . import functional as fn

    h = HartmanGrobmanMap(sol)
    norms = np.sqrt(np.sum(ensemble.x * ensemble.x, axis=-1))
    inside = norms <= sol.delta
    exit_idx = np.where(
        inside.all(axis=1), ensemble.grid.n_steps + 1, inside.argmin(axis=1)
    )
    if (exit_idx == 0).all():
        raise AllPathsExitImmediately("every path starts outside the ball")
    hx = h(ensemble.x.reshape(-1, pair.dim)).reshape(ensemble.x.shape)
    sq = np.sum((hx - ensemble.y) ** 2, axis=-1)
    per_path = []
    for i in range(ensemble.n_paths):
        k = int(exit_idx[i])
        if k == 0:
            continue
        per_path.append(sq[i, :k].mean())
    per_path = np.asarray(per_path)
    value = float(per_path.mean())
    se = (
        float(per_path.std(ddof=1) / math.sqrt(per_path.size))
        if per_path.size > 1
        else 0.0
    )
    return fn.CostEstimate(
        value, se, len(per_path), ensemble.grid.dt, fn.CostKind.DEFECT_AT_T
    )


def flow_commutation_defect(
    pair: LinearizationPair,
    sol: KappaSolution,
    t_grid,
    probe_radius: Optional[float] = None,
    n_probes: int = 64,
) -> float:
    """sup over probes and times of ||H(phi_t(x)) - e^{A0 t} H(x)||.

    phi_t is the true nonlinear drift flow integrated by RK4 with a fine
    step; this is the brute-force realization of the conjugation relation.
    """
    h = HartmanGrobmanMap(sol)
    radius = probe_radius if probe_radius is not None else 0.8 * sol.delta
    n = pair.dim
    if n == 1:
        probes = np.linspace(-radius, radius, n_probes).reshape(-1, 1)
    else:
        rng = np.random.default_rng(7)
        probes = rng.standard_normal((n_probes, n))
        probes *= radius * rng.random((n_probes, 1)) ** (1.0 / n) / np.maximum(
            np.linalg.norm(probes, axis=1, keepdims=True), 1e-300
        )

    def ode_rhs(x):
        return pair.system.drift_at(0.0, x, partner=x)

    worst = 0.0
    h0 = h(probes)
    state = probes.copy()
    t_prev = 0.0
    for t in np.asarray(t_grid, float):
        if t > t_prev:
            steps = max(1, int(math.ceil((t - t_prev) / 1e-3)))
            dt = (t - t_prev) / steps
            for _ in range(steps):
                k1 = ode_rhs(state)
                k2 = ode_rhs(state + 0.5 * dt * k1)
                k3 = ode_rhs(state + 0.5 * dt * k2)
                k4 = ode_rhs(state + dt * k3)
                state = state + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            t_prev = t
        lhs = h(state)
        rhs_lin = h0 @ expm(pair.a0 * t).T
        worst = max(worst, float(np.abs(lhs - rhs_lin).max()))
    return worst
