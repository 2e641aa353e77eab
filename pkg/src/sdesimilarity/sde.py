"""SDE system pairs driven by a shared Brownian motion.

The central objects are :class:`SdeSystem` (a drift/diffusion coefficient
pair on R^n with d noise channels) and :class:`Ensemble` (many trajectory
pairs integrated with Euler-Maruyama on a common uniform grid).  Both
trajectories of a pair always consume the *same* Brownian increments; the
package never offers an independent-noise mode.

Reproducibility contract: path ``i`` of an ensemble draws its increments
from a counter-based substream keyed by ``(master_seed, i)``, so results
are a pure function of the configuration and are bitwise independent of
worker count and evaluation order.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.linalg import expm

from .errors import DimensionMismatch, DivergedTrajectory

DEFAULT_BLOWUP_BOUND = 1e12


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid on [0, T] with n_steps intervals."""

    horizon: float
    n_steps: int

    def __post_init__(self):
        if not (self.horizon > 0 and math.isfinite(self.horizon)):
            raise ValueError(f"horizon must be positive and finite, got {self.horizon}")
        if self.n_steps < 1:
            raise ValueError(f"n_steps must be >= 1, got {self.n_steps}")

    @property
    def dt(self) -> float:
        return self.horizon / self.n_steps

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.horizon, self.n_steps + 1)

    def index_of(self, t: float, tol_factor: float = 1e-9):
        """Grid index of time t, or None if t is not a grid point."""
        k = round(t / self.dt)
        if 0 <= k <= self.n_steps and abs(t - k * self.dt) <= tol_factor * self.dt:
            return k
        return None


# ---------------------------------------------------------------------------
# Coefficient specifications
# ---------------------------------------------------------------------------


def _matvec(a: np.ndarray, x: np.ndarray) -> np.ndarray:
    # Fixed-order column accumulation instead of BLAS matmul: summation
    # order must not depend on batch shape, or worker count would change
    # low bits of the results.
    out = np.zeros(x.shape[:-1] + (a.shape[0],))
    for j in range(a.shape[1]):
        out += a[:, j] * x[..., j : j + 1]
    return out


@dataclass(frozen=True)
class Polynomial:
    """Multivariate polynomial sum_k coefs[k] * prod_j x_j**expts[k, j]."""

    coefs: np.ndarray  # (n_terms,)
    expts: np.ndarray  # (n_terms, n_vars), non-negative integers

    def __post_init__(self):
        object.__setattr__(self, "coefs", np.atleast_1d(np.asarray(self.coefs, float)))
        object.__setattr__(self, "expts", np.atleast_2d(np.asarray(self.expts, int)))
        if self.coefs.shape[0] != self.expts.shape[0]:
            raise ValueError("coefs and expts disagree on the number of terms")
        if (self.expts < 0).any():
            raise ValueError("exponents must be non-negative")
        if self.expts.sum(axis=1).max(initial=0) > 3:
            raise ValueError("total degree is limited to 3")

    @property
    def n_vars(self) -> int:
        return self.expts.shape[1]

    def __call__(self, x: np.ndarray) -> np.ndarray:
        out = np.zeros(x.shape[:-1])
        for c, e in zip(self.coefs, self.expts):
            term = np.full(x.shape[:-1], c)
            for j in range(self.n_vars):
                if e[j]:
                    term = term * x[..., j] ** int(e[j])
            out += term
        return out

    def grad(self, x: np.ndarray) -> np.ndarray:
        """Gradient, shape (..., n_vars)."""
        out = np.zeros(x.shape[:-1] + (self.n_vars,))
        for c, e in zip(self.coefs, self.expts):
            for j in range(self.n_vars):
                if e[j] == 0:
                    continue
                term = np.full(x.shape[:-1], c * e[j])
                for i in range(self.n_vars):
                    p = int(e[i]) - (1 if i == j else 0)
                    if p:
                        term = term * x[..., i] ** p
                out[..., j] += term
        return out


class LinearDrift:
    """f(t, x) = A x."""

    kind = "linear"

    def __init__(self, matrix):
        self.matrix = np.atleast_2d(np.asarray(matrix, float))
        if self.matrix.shape[0] != self.matrix.shape[1]:
            raise DimensionMismatch("drift matrix must be square")
        if not np.isfinite(self.matrix).all():
            raise ValueError("drift matrix must be finite")

    @property
    def dim(self):
        return self.matrix.shape[0]

    def __call__(self, t, x, partner=None):
        return _matvec(self.matrix, x)

    def jacobian(self, t, x):
        return np.broadcast_to(self.matrix, x.shape[:-1] + self.matrix.shape)


class AffineDrift:
    """f(t, x) = A x + a."""

    kind = "affine"

    def __init__(self, matrix, offset):
        self.matrix = np.atleast_2d(np.asarray(matrix, float))
        self.offset = np.atleast_1d(np.asarray(offset, float))
        if self.matrix.shape[0] != self.matrix.shape[1]:
            raise DimensionMismatch("drift matrix must be square")
        if self.offset.shape != (self.matrix.shape[0],):
            raise DimensionMismatch("offset length must match matrix dimension")

    @property
    def dim(self):
        return self.matrix.shape[0]

    def __call__(self, t, x, partner=None):
        return _matvec(self.matrix, x) + self.offset

    def jacobian(self, t, x):
        return np.broadcast_to(self.matrix, x.shape[:-1] + self.matrix.shape)


class OutputLinearDrift:
    """Drift C x_partner for an output system read off the partner state.

    This is how a pair like dX = AX dt + B dW, dY = CX dt + D dW is
    expressed: the Y system declares an output drift with matrix C and the
    integrator feeds it the current X state.
    """

    kind = "output"

    def __init__(self, matrix):
        self.matrix = np.atleast_2d(np.asarray(matrix, float))
        if not np.isfinite(self.matrix).all():
            raise ValueError("output matrix must be finite")

    @property
    def dim(self):
        return self.matrix.shape[0]

    def __call__(self, t, x, partner=None):
        if partner is None:
            raise ValueError("output drift needs the partner state")
        return _matvec(self.matrix, partner)

    def jacobian(self, t, x):
        # Derivative with respect to the *own* state: the own state does
        # not enter the drift at all.
        n = self.matrix.shape[0]
        return np.zeros(x.shape[:-1] + (n, n))


class PolynomialDrift:
    """Per-coordinate polynomial drift of total degree <= 3."""

    kind = "polynomial"

    def __init__(self, polys: Sequence[Polynomial]):
        self.polys = list(polys)
        n = len(self.polys)
        for p in self.polys:
            if p.n_vars != n:
                raise DimensionMismatch("each polynomial must take all n coordinates")

    @property
    def dim(self):
        return len(self.polys)

    def __call__(self, t, x, partner=None):
        cols = [p(x) for p in self.polys]
        return np.stack(cols, axis=-1)

    def jacobian(self, t, x):
        rows = [p.grad(x) for p in self.polys]
        return np.stack(rows, axis=-2)


class ConstantDiffusion:
    """sigma(t, x) = B, an n x d constant matrix."""

    kind = "constant"

    def __init__(self, matrix):
        self.matrix = np.atleast_2d(np.asarray(matrix, float))
        if not np.isfinite(self.matrix).all():
            raise ValueError("diffusion matrix must be finite")

    @property
    def dim(self):
        return self.matrix.shape[0]

    @property
    def noise_dim(self):
        return self.matrix.shape[1]

    def __call__(self, t, x):
        return np.broadcast_to(self.matrix, x.shape[:-1] + self.matrix.shape)

    def jacobian(self, t, x):
        n, d = self.matrix.shape
        return np.zeros(x.shape[:-1] + (n, d, n))


class LinearStateDiffusion:
    """sigma(t, x) with columns A_l x, one n x n matrix per noise channel."""

    kind = "linear_in_state"

    def __init__(self, matrices):
        self.matrices = [np.atleast_2d(np.asarray(m, float)) for m in matrices]
        n = self.matrices[0].shape[0]
        for m in self.matrices:
            if m.shape != (n, n):
                raise DimensionMismatch("every channel matrix must be n x n")

    @property
    def dim(self):
        return self.matrices[0].shape[0]

    @property
    def noise_dim(self):
        return len(self.matrices)

    def __call__(self, t, x):
        cols = [_matvec(m, x) for m in self.matrices]
        return np.stack(cols, axis=-1)

    def jacobian(self, t, x):
        n = self.dim
        cols = [
            np.broadcast_to(m, x.shape[:-1] + (n, n)) for m in self.matrices
        ]
        return np.stack(cols, axis=-2)  # (..., n, d, n)


class PolynomialDiffusion:
    """Entrywise polynomial diffusion matrix, total degree <= 3."""

    kind = "polynomial"

    def __init__(self, polys):
        # polys[i][l] gives entry (i, l)
        self.polys = [list(row) for row in polys]
        n = len(self.polys)
        d = len(self.polys[0])
        for row in self.polys:
            if len(row) != d:
                raise DimensionMismatch("ragged diffusion polynomial table")
            for p in row:
                if p.n_vars != n:
                    raise DimensionMismatch("each polynomial must take all n coordinates")

    @property
    def dim(self):
        return len(self.polys)

    @property
    def noise_dim(self):
        return len(self.polys[0])

    def __call__(self, t, x):
        rows = [np.stack([p(x) for p in row], axis=-1) for row in self.polys]
        return np.stack(rows, axis=-2)

    def jacobian(self, t, x):
        rows = [np.stack([p.grad(x) for p in row], axis=-2) for row in self.polys]
        return np.stack(rows, axis=-3)  # (..., n, d, n)


@dataclass(frozen=True)
class SdeSystem:
    """A drift/diffusion coefficient pair on R^n with d noise channels."""

    dim: int
    noise_dim: int
    drift: object
    diffusion: object

    def __post_init__(self):
        if self.dim < 1 or self.noise_dim < 1:
            raise DimensionMismatch("dim and noise_dim must be >= 1")
        if self.drift.dim != self.dim:
            raise DimensionMismatch(
                f"drift is {self.drift.dim}-dimensional, system is {self.dim}"
            )
        if self.diffusion.dim != self.dim:
            raise DimensionMismatch(
                f"diffusion is {self.diffusion.dim}-dimensional, system is {self.dim}"
            )
        if self.diffusion.noise_dim != self.noise_dim:
            raise DimensionMismatch(
                f"diffusion has {self.diffusion.noise_dim} channels, system has"
                f" {self.noise_dim}"
            )

    def drift_at(self, t, x, partner=None):
        return self.drift(t, x, partner)

    def diffusion_at(self, t, x):
        return self.diffusion(t, x)

    def drift_jacobian(self, t, x):
        """d f / d x, shape (..., n, n)."""
        return self.drift.jacobian(t, x)

    def diffusion_jacobian(self, t, x):
        """d sigma / d x, shape (..., n, d, n)."""
        return self.diffusion.jacobian(t, x)


def linear_system(a, b) -> SdeSystem:
    """dX = A X dt + B dW with constant B."""
    a = np.atleast_2d(np.asarray(a, float))
    b = np.atleast_2d(np.asarray(b, float))
    return SdeSystem(a.shape[0], b.shape[1], LinearDrift(a), ConstantDiffusion(b))


def output_system(c, d) -> SdeSystem:
    """dY = C X_partner dt + D dW; the drift reads the partner state."""
    c = np.atleast_2d(np.asarray(c, float))
    d = np.atleast_2d(np.asarray(d, float))
    return SdeSystem(c.shape[0], d.shape[1], OutputLinearDrift(c), ConstantDiffusion(d))


def scalar_polynomial_system(drift_coeffs, diffusion_coeffs) -> SdeSystem:
    """Scalar system from dense power-basis coefficients [c0, c1, c2, c3]."""

    def poly(coeffs):
        coeffs = np.asarray(coeffs, float)
        terms = [(c, [k]) for k, c in enumerate(coeffs) if c != 0.0]
        if not terms:
            terms = [(0.0, [0])]
        return Polynomial([c for c, _ in terms], [e for _, e in terms])

    drift = PolynomialDrift([poly(drift_coeffs)])
    diffusion = PolynomialDiffusion([[poly(diffusion_coeffs)]])
    return SdeSystem(1, 1, drift, diffusion)


# ---------------------------------------------------------------------------
# Brownian paths
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BrownianPath:
    """Increments of one d-dimensional Brownian path on a grid.

    Fully reproducible from (seed, path_index, grid): the generator is a
    counter-based Philox stream keyed by both integers.
    """

    grid: TimeGrid
    increments: np.ndarray  # (n_steps, d)
    seed: int
    path_index: int

    @property
    def noise_dim(self) -> int:
        return self.increments.shape[1]

    def values(self) -> np.ndarray:
        """W on the grid, shape (n_steps + 1, d), W(0) = 0."""
        w = np.zeros((self.grid.n_steps + 1, self.noise_dim))
        np.cumsum(self.increments, axis=0, out=w[1:])
        return w


def _path_rng(seed: int, path_index: int) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=seed, spawn_key=(path_index,))
    return np.random.Generator(np.random.Philox(ss))


def generate_brownian_path(
    grid: TimeGrid, seed: int, path_index: int = 0, noise_dim: int = 1
) -> BrownianPath:
    """Draw N(0, dt I_d) increments for one path, deterministically."""
    if noise_dim < 1:
        raise DimensionMismatch("noise_dim must be >= 1")
    rng = _path_rng(seed, path_index)
    increments = rng.standard_normal((grid.n_steps, noise_dim)) * math.sqrt(grid.dt)
    return BrownianPath(grid, increments, seed, path_index)


# ---------------------------------------------------------------------------
# Euler-Maruyama integration of a shared-noise pair
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PathPair:
    """One (X, Y) trajectory pair advanced with identical increments."""

    grid: TimeGrid
    x: np.ndarray  # (n_steps + 1, n)
    y: np.ndarray  # (n_steps + 1, n)
    path: BrownianPath


@dataclass(frozen=True)
class EnsembleConfig:
    sys_x: SdeSystem
    sys_y: SdeSystem
    x0: np.ndarray
    y0: np.ndarray
    grid: TimeGrid
    n_paths: int
    master_seed: int
    blowup_bound: float = DEFAULT_BLOWUP_BOUND

    def __post_init__(self):
        object.__setattr__(self, "x0", np.atleast_1d(np.asarray(self.x0, float)))
        object.__setattr__(self, "y0", np.atleast_1d(np.asarray(self.y0, float)))
        if self.sys_x.noise_dim != self.sys_y.noise_dim:
            raise DimensionMismatch("both systems must share the noise dimension")
        if self.x0.shape != (self.sys_x.dim,):
            raise DimensionMismatch("x0 length must match the X system dimension")
        if self.y0.shape != (self.sys_y.dim,):
            raise DimensionMismatch("y0 length must match the Y system dimension")
        if self.n_paths < 1:
            raise ValueError("n_paths must be >= 1")


@dataclass
class Ensemble:
    """Stacked trajectory pairs plus the increments that generated them."""

    config: Optional[EnsembleConfig]
    grid: TimeGrid
    x: np.ndarray  # (n_paths, n_steps + 1, n)
    y: np.ndarray  # (n_paths, n_steps + 1, n)
    dw: Optional[np.ndarray] = None  # (n_paths, n_steps, d)
    master_seed: Optional[int] = None

    @property
    def n_paths(self) -> int:
        return self.x.shape[0]

    @property
    def times(self) -> np.ndarray:
        return self.grid.times

    def pair(self, i: int) -> PathPair:
        path = BrownianPath(
            self.grid,
            self.dw[i] if self.dw is not None else np.zeros((self.grid.n_steps, 1)),
            self.master_seed if self.master_seed is not None else -1,
            i,
        )
        return PathPair(self.grid, self.x[i], self.y[i], path)


def _contract_noise(sig: np.ndarray, dw: np.ndarray) -> np.ndarray:
    # (..., n, d) x (..., d) -> (..., n), fixed-order channel accumulation.
    out = np.zeros(sig.shape[:-1])
    for l in range(sig.shape[-1]):
        out += sig[..., l] * dw[..., l : l + 1]
    return out


def _check_state(z: np.ndarray, bound: float, t: float, path_offset: int, label: str):
    norms = np.sqrt(np.sum(z * z, axis=-1))
    bad = ~np.isfinite(norms) | (norms > bound)
    if bad.any():
        i = int(np.argmax(bad))
        raise DivergedTrajectory(
            path_offset + i,
            t,
            f"{label} trajectory diverged on path {path_offset + i} at t={t:.6g}",
        )


def _simulate_batch(config: EnsembleConfig, dw: np.ndarray, path_offset: int = 0):
    """Euler-Maruyama for a batch of paths sharing the coefficient specs.

    All per-state arithmetic is elementwise or fixed-order accumulation, so
    the result for path i does not depend on which batch it was computed in.
    """
    grid = config.grid
    dt = grid.dt
    m = dw.shape[0]
    x = np.empty((m, grid.n_steps + 1, config.sys_x.dim))
    y = np.empty((m, grid.n_steps + 1, config.sys_y.dim))
    x[:, 0] = config.x0
    y[:, 0] = config.y0
    xk = np.broadcast_to(config.x0, (m, config.sys_x.dim)).copy()
    yk = np.broadcast_to(config.y0, (m, config.sys_y.dim)).copy()
    for k in range(grid.n_steps):
        t = k * dt
        dwk = dw[:, k]
        fx = config.sys_x.drift_at(t, xk, partner=yk)
        sx = config.sys_x.diffusion_at(t, xk)
        gy = config.sys_y.drift_at(t, yk, partner=xk)
        sy = config.sys_y.diffusion_at(t, yk)
        xk = xk + fx * dt + _contract_noise(sx, dwk)
        yk = yk + gy * dt + _contract_noise(sy, dwk)
        _check_state(xk, config.blowup_bound, t + dt, path_offset, "X")
        _check_state(yk, config.blowup_bound, t + dt, path_offset, "Y")
        x[:, k + 1] = xk
        y[:, k + 1] = yk
    return x, y


def simulate_pair(
    sys_x: SdeSystem,
    sys_y: SdeSystem,
    x0,
    y0,
    path: BrownianPath,
    blowup_bound: float = DEFAULT_BLOWUP_BOUND,
) -> PathPair:
    """Integrate both systems along one shared Brownian path."""
    config = EnsembleConfig(
        sys_x, sys_y, x0, y0, path.grid, 1, path.seed, blowup_bound
    )
    if path.noise_dim != sys_x.noise_dim:
        raise DimensionMismatch("path noise dimension does not match the systems")
    x, y = _simulate_batch(config, path.increments[None], path_offset=path.path_index)
    return PathPair(path.grid, x[0], y[0], path)


def simulate_ensemble(config: EnsembleConfig, n_workers: int = 1) -> Ensemble:
    """Simulate n_paths shared-noise pairs.

    The per-path substreams make the output a pure function of the config;
    chunked multi-threaded execution returns bitwise the same arrays as a
    single worker.
    """
    grid = config.grid
    d = config.sys_x.noise_dim
    dw = np.empty((config.n_paths, grid.n_steps, d))
    for i in range(config.n_paths):
        dw[i] = generate_brownian_path(grid, config.master_seed, i, d).increments

    if n_workers <= 1 or config.n_paths < 2 * n_workers:
        x, y = _simulate_batch(config, dw)
    else:
        bounds = np.linspace(0, config.n_paths, n_workers + 1).astype(int)
        chunks = [(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]
        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            results = list(
                pool.map(
                    lambda ab: _simulate_batch(config, dw[ab[0] : ab[1]], ab[0]),
                    chunks,
                )
            )
        x = np.concatenate([r[0] for r in results], axis=0)
        y = np.concatenate([r[1] for r in results], axis=0)
    return Ensemble(config, grid, x, y, dw, config.master_seed)


# ---------------------------------------------------------------------------
# Analytic moments of linear SDEs (independent test oracle)
# ---------------------------------------------------------------------------


def ou_moments_oracle(a, b, x0, t: float, quad_steps: int = 100_000):
    """Mean and covariance of dX = A X dt + B dW at time t.

    mean = e^{At} x0;  cov = int_0^t e^{As} B B^T e^{A^T s} ds, computed by
    trapezoidal quadrature with step t/quad_steps.  Deliberately brute
    force: this is the reference the Euler-Maruyama code is tested against,
    so it must not share machinery with the integrator.
    """
    a = np.atleast_2d(np.asarray(a, float))
    b = np.atleast_2d(np.asarray(b, float))
    x0 = np.atleast_1d(np.asarray(x0, float))
    n = a.shape[0]
    if t < 0:
        raise ValueError("t must be >= 0")
    if t == 0:
        return x0.copy(), np.zeros((n, n))
    mean = expm(a * t) @ x0
    h = t / quad_steps
    eh = expm(a * h)
    phi = np.eye(n)
    bbt = b @ b.T
    cov = 0.5 * bbt  # trapezoid endpoint s = 0
    for _ in range(quad_steps - 1):
        phi = phi @ eh
        cov = cov + phi @ bbt @ phi.T
    phi = phi @ eh
    cov = cov + 0.5 * (phi @ bbt @ phi.T)
    return mean, cov * h


def pair_moments_oracle(a, b, c, d, x0, y0, t: float, quad_steps: int = 100_000):
    """Joint moments of the shared-noise pair dX = AX dt + B dW, dY = CY dt + D dW.

    The pair is one linear SDE on R^{2n} with block drift diag(A, C) and
    stacked noise matrix [B; D]; returns (mean, cov) of (X, Y) at time t.
    """
    a = np.atleast_2d(np.asarray(a, float))
    c = np.atleast_2d(np.asarray(c, float))
    b = np.atleast_2d(np.asarray(b, float))
    d = np.atleast_2d(np.asarray(d, float))
    n = a.shape[0]
    joint_a = np.zeros((2 * n, 2 * n))
    joint_a[:n, :n] = a
    joint_a[n:, n:] = c
    joint_b = np.vstack([b, d])
    z0 = np.concatenate([np.atleast_1d(x0), np.atleast_1d(y0)])
    return ou_moments_oracle(joint_a, joint_b, z0, t, quad_steps)


# ---------------------------------------------------------------------------
# CSV interchange
# ---------------------------------------------------------------------------


def ensemble_to_csv(ensemble: Ensemble, path):
    """Write the documented long layout: t,path,x1..xn,y1..yn."""
    times = ensemble.times
    m, steps, n = ensemble.x.shape
    ny = ensemble.y.shape[2]
    header = (
        "t,path,"
        + ",".join(f"x{j + 1}" for j in range(n))
        + ","
        + ",".join(f"y{j + 1}" for j in range(ny))
    )
    rows = np.empty((m * steps, 2 + n + ny))
    rows[:, 0] = np.tile(times, m)
    rows[:, 1] = np.repeat(np.arange(m), steps)
    rows[:, 2 : 2 + n] = ensemble.x.reshape(m * steps, n)
    rows[:, 2 + n :] = ensemble.y.reshape(m * steps, ny)
    np.savetxt(path, rows, delimiter=",", header=header, comments="", fmt="%.17g")


def ensemble_from_csv(path) -> Ensemble:
    """Read the layout written by :func:`ensemble_to_csv`.

    The coefficient specs are not stored in the file, so the returned
    ensemble has config=None and no increments; it still supports every
    cost-functional computation.
    """
    rows = np.loadtxt(path, delimiter=",", skiprows=1)
    with open(path) as fh:
        header = fh.readline().strip().split(",")
    n = sum(1 for h in header if h.startswith("x"))
    ny = sum(1 for h in header if h.startswith("y"))
    paths = rows[:, 1].astype(int)
    m = paths.max() + 1
    steps = np.count_nonzero(paths == 0)
    times = rows[:steps, 0]
    grid = TimeGrid(float(times[-1]), steps - 1)
    x = rows[:, 2 : 2 + n].reshape(m, steps, n)
    y = rows[:, 2 + n : 2 + n + ny].reshape(m, steps, ny)
    return Ensemble(None, grid, x, y, None, None)
