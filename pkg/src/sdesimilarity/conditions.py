"""Numerical probes for the sufficient-condition hypotheses.

Nothing here proves a hypothesis; each probe extracts the empirical
constants a hypothesis asserts (dissipation rate, Lyapunov exponents,
monotonicity/coercivity/Lipschitz bounds) together with honesty metrics
such as violation fractions and confidence halfwidths.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Optional

import numpy as np
from scipy.linalg import expm

from . import mapping as mp
from .errors import DegenerateSamples, DimensionMismatch, HorizonTooShort
from .sde import (
    ConstantDiffusion,
    Ensemble,
    LinearDrift,
    LinearStateDiffusion,
    SdeSystem,
    _path_rng,
)

# ---------------------------------------------------------------------------
# Dissipation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DissipationReport:
    alpha1_hat: float
    regression_r2: float
    fraction_violating: float
    samples_used: int


def _dissipation_pointwise(ensemble: Ensemble, k_map):
    """LHS of the dissipation inequality and the squared defect, pointwise.

    LHS = 2 <J_K(X) f(X) - g(Y), K(X) - Y> + ||J_K(X) sigma(X) - vsigma(Y)||_F^2
    evaluated at every stored (path, time) sample.
    """
    cfg = ensemble.config
    if cfg is None:
        raise ValueError("ensemble was loaded without its coefficient specs")
    x, y = ensemble.x, ensemble.y
    t = np.broadcast_to(ensemble.times[None, :], x.shape[:2])
    fx = cfg.sys_x.drift_at(t, x, partner=y)
    gy = cfg.sys_y.drift_at(t, y, partner=x)
    sx = cfg.sys_x.diffusion_at(t, x)
    sy = cfg.sys_y.diffusion_at(t, y)
    jk = mp.jacobian(k_map, x)
    kx = mp.apply(k_map, x)
    psi = kx - y
    drift_term = np.einsum("...ij,...j->...i", jk, fx) - gy
    noise_term = np.einsum("...ij,...jd->...id", jk, sx) - sy
    lhs = 2.0 * np.sum(drift_term * psi, axis=-1) + np.sum(
        noise_term * noise_term, axis=(-2, -1)
    )
    defect = np.sum(psi * psi, axis=-1)
    return lhs.ravel(), defect.ravel()


def dissipation_report(ensemble: Ensemble, k_map) -> DissipationReport:
    """Fit the decay rate alpha_1 in LHS <= -alpha_1 ||K(X)-Y||^2.

    alpha_1 comes from a least-squares slope constrained to be >= 0; the
    pointwise inequality is almost-sure in the hypothesis, so the report
    carries the fraction of samples violating it at the fitted rate
    rather than pretending the infimum over noisy samples is meaningful.
    """
    lhs, defect = _dissipation_pointwise(ensemble, k_map)
    degenerate = defect < 1e-14
    if degenerate.mean() > 0.99:
        raise DegenerateSamples(
            "squared defect vanishes at more than 99% of sample points"
        )
    denom = float(np.sum(defect * defect))
    beta = float(np.sum(lhs * defect)) / denom
    alpha1 = max(0.0, -beta)
    fitted = -alpha1 * defect
    ss_res = float(np.sum((lhs - fitted) ** 2))
    ss_tot = float(np.sum(lhs * lhs))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    slack = 1e-9 * (np.abs(lhs) + alpha1 * defect + 1.0)
    violating = float(np.mean(lhs > fitted + slack))
    return DissipationReport(alpha1, r2, violating, lhs.size)


class DecayStatus(Enum):
    OK = "ok"
    NO_SIGNAL = "no_signal"


@dataclass(frozen=True)
class DecayReport:
    slope: float
    status: DecayStatus
    window: tuple
    consistent_with_dissipation: Optional[bool] = None


def decay_rate_check(
    ensemble: Ensemble, k_map, alpha1_hat: Optional[float] = None
) -> DecayReport:
    """Fitted exponential rate of E||K(X_t) - Y_t||^2 over [T/2, T].

    When a dissipation fit is supplied, checks the decay chain: the
    measured slope should be at most -0.8 * alpha1_hat.
    """
    kx = mp.apply(k_map, ensemble.x)
    defect = np.sum((kx - ensemble.y) ** 2, axis=-1).mean(axis=0)
    t = ensemble.times
    k0 = len(t) // 2
    window = (float(t[k0]), float(t[-1]))
    tail = defect[k0:]
    if (tail < 1e-14).all():
        return DecayReport(0.0, DecayStatus.NO_SIGNAL, window)
    slope = float(np.polyfit(t[k0:], np.log(np.maximum(tail, 1e-300)), 1)[0])
    consistent = None
    if alpha1_hat is not None:
        consistent = slope <= -0.8 * alpha1_hat
    return DecayReport(slope, DecayStatus.OK, window, consistent)


# ---------------------------------------------------------------------------
# Lyapunov spectra of linear cocycles
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LyapunovSpectrum:
    exponents: np.ndarray       # distinct values, strictly decreasing
    multiplicities: np.ndarray  # same length, sums to n
    horizon_used: float
    ci_halfwidth: float

    @property
    def dim(self) -> int:
        return int(self.multiplicities.sum())

    def expanded(self) -> np.ndarray:
        """Per-dimension exponents, sorted decreasing, length n."""
        return np.repeat(self.exponents, self.multiplicities)


def _cocycle_matrices(system: SdeSystem):
    if not isinstance(system.drift, LinearDrift):
        raise DimensionMismatch("spectrum computation needs a linear drift")
    a0 = system.drift.matrix
    if isinstance(system.diffusion, LinearStateDiffusion):
        noise = [m for m in system.diffusion.matrices]
    elif isinstance(system.diffusion, ConstantDiffusion):
        if np.any(system.diffusion.matrix != 0.0):
            raise DimensionMismatch(
                "constant diffusion must be zero for a linear cocycle"
            )
        noise = []
    else:
        raise DimensionMismatch(
            "spectrum computation needs linear-in-state or zero diffusion"
        )
    return a0, noise


def _expm_gen(m: np.ndarray) -> np.ndarray:
    """Matrix exponential; closed form for n <= 2, scipy above.

    A traceless 2x2 block B has B^2 = (B00^2 + B01 B10) I, so the series
    collapses to cosh/sinh (or cos/sin) of the discriminant root.
    """
    n = m.shape[0]
    if n == 1:
        return np.array([[math.exp(m[0, 0])]])
    if n == 2:
        tr2 = 0.5 * (m[0, 0] + m[1, 1])
        b = m - tr2 * np.eye(2)
        disc = b[0, 0] * b[0, 0] + b[0, 1] * b[1, 0]
        if abs(disc) < 1e-12:
            c, s = 1.0 + 0.5 * disc, 1.0 + disc / 6.0
        elif disc > 0:
            mu = math.sqrt(disc)
            c, s = math.cosh(mu), math.sinh(mu) / mu
        else:
            th = math.sqrt(-disc)
            c, s = math.cos(th), math.sin(th) / th
        return math.exp(tr2) * (c * np.eye(2) + s * b)
    return expm(m)


def _qr_exponents(a0, noise, horizon, dt, rng):
    """One replicate of the discrete QR method along the linearized flow.

    The one-step propagator is exp((A0 - 1/2 sum A_l^2) dt + sum A_l dW_l),
    which solves the linear SDE exactly whenever the coefficient matrices
    commute (this covers every scalar channel) and is a structure-preserving
    order-1 step otherwise.
    """
    n = a0.shape[0]
    n_steps = int(round(horizon / dt))
    ito_drift = a0.copy()
    for m in noise:
        ito_drift = ito_drift - 0.5 * (m @ m)
    if n == 1:
        # Scalar fast path: log growth accumulates in closed form.
        increments = np.full(n_steps, ito_drift[0, 0] * dt)
        for m in noise:
            increments = increments + m[0, 0] * rng.standard_normal(n_steps) * math.sqrt(dt)
        return np.array([increments.sum() / (n_steps * dt)])
    q = np.eye(n)
    log_diag = np.zeros(n)
    const_step = _expm_gen(ito_drift * dt) if not noise else None
    sqrt_dt = math.sqrt(dt)
    for _ in range(n_steps):
        if const_step is not None:
            step = const_step
        else:
            gen = ito_drift * dt
            for m in noise:
                gen = gen + m * (rng.standard_normal() * sqrt_dt)
            step = _expm_gen(gen)
        z = step @ q
        q, r = np.linalg.qr(z)
        diag = np.diag(r)
        signs = np.sign(diag)
        signs[signs == 0] = 1.0
        q = q * signs
        log_diag += np.log(np.abs(diag))
    return log_diag / (n_steps * dt)


def lyapunov_spectrum(
    system: SdeSystem,
    horizon: float,
    seed: int,
    dt: float = 0.01,
    n_seeds: int = 8,
) -> LyapunovSpectrum:
    """Lyapunov spectrum of the linear cocycle generated by the system.

    Runs the QR method on >= 8 independent replicates (one when the
    cocycle is deterministic, where replicates would be identical) and
    reports a confidence halfwidth from the seed spread.  Raises
    HorizonTooShort when the spread is too wide to trust.
    """
    a0, noise = _cocycle_matrices(system)
    n = a0.shape[0]
    deterministic = not noise
    replicates = 1 if deterministic else max(8, n_seeds)
    runs = np.empty((replicates, n))
    for i in range(replicates):
        rng = _path_rng(seed, i)
        runs[i] = np.sort(_qr_exponents(a0, noise, horizon, dt, rng))[::-1]
    mean = runs.mean(axis=0)
    if replicates > 1:
        ci = 2.0 * float(runs.std(axis=0, ddof=1).max()) / math.sqrt(replicates)
    else:
        ci = 0.0
    lam1 = float(mean[0])
    if ci > 0.1 * max(1.0, abs(lam1)):
        raise HorizonTooShort(
            f"seed spread {ci:.3g} too wide for horizon {horizon}; increase it"
        )
    # Merge exponents within the confidence band into one multiplicity.
    merge_tol = max(2.0 * ci, 1e-9 * max(1.0, float(np.abs(mean).max())))
    values = [mean[0]]
    counts = [1]
    for lam in mean[1:]:
        if values[-1] - lam <= merge_tol:
            values[-1] = (values[-1] * counts[-1] + lam) / (counts[-1] + 1)
            counts[-1] += 1
        else:
            values.append(lam)
            counts.append(1)
    return LyapunovSpectrum(
        np.asarray(values), np.asarray(counts, int), horizon, ci
    )


class SimilarityPrediction(Enum):
    HOLDS = "holds"
    FAILS_WITH_POSITIVE_MISMATCH = "fails_with_positive_mismatch"
    INCONCLUSIVE = "inconclusive"


def asymptotic_similarity_prediction(
    spec_x: LyapunovSpectrum, spec_y: LyapunovSpectrum
) -> SimilarityPrediction:
    """Settle asymptotic similarity from the two spectra where possible.

    Equal spectra (within the combined confidence bands) predict that
    asymptotic similarity holds; a mismatched pair containing an exponent
    that is positive beyond its band predicts failure.  Mismatches among
    negative exponents are outside the settled cases and stay inconclusive.
    """
    if spec_x.dim != spec_y.dim:
        raise DimensionMismatch("spectra live in different dimensions")
    lx = spec_x.expanded()
    ly = spec_y.expanded()
    band = spec_x.ci_halfwidth + spec_y.ci_halfwidth
    mismatched = np.abs(lx - ly) > band
    if not mismatched.any():
        return SimilarityPrediction.HOLDS
    for i in np.nonzero(mismatched)[0]:
        if lx[i] - spec_x.ci_halfwidth > 0 or ly[i] - spec_y.ci_halfwidth > 0:
            return SimilarityPrediction.FAILS_WITH_POSITIVE_MISMATCH
    return SimilarityPrediction.INCONCLUSIVE


def change_of_basis(system: SdeSystem, p) -> SdeSystem:
    """The cocycle in coordinates z = P x; preserves the spectrum."""
    p = np.atleast_2d(np.asarray(p, float))
    p_inv = np.linalg.inv(p)
    a0, noise = _cocycle_matrices(system)
    new_drift = LinearDrift(p @ a0 @ p_inv)
    if noise:
        new_diff = LinearStateDiffusion([p @ m @ p_inv for m in noise])
    else:
        new_diff = ConstantDiffusion(np.zeros((p.shape[0], system.noise_dim)))
    return SdeSystem(system.dim, system.noise_dim, new_drift, new_diff)


def tempered_envelope(
    system: SdeSystem,
    lam1: float,
    epsilon: float,
    horizon: float,
    seed: int,
    dt: float = 0.01,
    n_seeds: int = 8,
) -> float:
    """Empirical envelope constant M_eps with ||Phi(t)|| <= M_eps e^{(lam1+eps)t}.

    Measured as the maximum of ||Phi(t)|| e^{-(lam1+eps)t} over sampled
    times and seeds; reported, never assumed.
    """
    a0, noise = _cocycle_matrices(system)
    n = a0.shape[0]
    n_steps = int(round(horizon / dt))
    ito_drift = a0.copy()
    for m in noise:
        ito_drift = ito_drift - 0.5 * (m @ m)
    rate = lam1 + epsilon
    replicates = 1 if not noise else max(1, n_seeds)
    m_eps = 1.0  # t = 0 gives ||I|| = 1
    sqrt_dt = math.sqrt(dt)
    for i in range(replicates):
        rng = _path_rng(seed, i)
        phi = np.eye(n)
        const_step = _expm_gen(ito_drift * dt) if not noise else None
        for k in range(n_steps):
            if const_step is not None:
                step = const_step
            else:
                gen = ito_drift * dt
                for m in noise:
                    gen = gen + m * (rng.standard_normal() * sqrt_dt)
                step = _expm_gen(gen)
            phi = step @ phi
            t = (k + 1) * dt
            ratio = np.linalg.norm(phi, 2) * math.exp(-rate * t)
            if ratio > m_eps:
                m_eps = ratio
    return float(m_eps)


# ---------------------------------------------------------------------------
# Empirical constants for the well-posedness assumptions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AssumptionProbe:
    c1_hat: float   # monotonicity
    c2_hat: float   # coercivity slope
    m1_hat: float   # coercivity offset
    l_hat: float    # Lipschitz
    n_samples: int
    radius: float


def assumption_probe(
    system: SdeSystem, n_samples: int = 4000, radius: float = 1.0, seed: int = 0
) -> AssumptionProbe:
    """Estimate the monotonicity/coercivity/Lipschitz constants empirically.

    Maximizes each defining ratio over random point pairs in the ball of
    the given radius; half the pairs are far apart, half nearly coincident
    so that local derivative peaks are not missed.  The results are lower
    bounds on the true constants.
    """
    if n_samples < 1000:
        raise ValueError("need at least 1000 samples for a meaningful probe")
    rng = _path_rng(seed, 0)
    n = system.dim
    half = n_samples // 2

    def ball(m):
        z = rng.standard_normal((m, n))
        z /= np.maximum(np.linalg.norm(z, axis=1, keepdims=True), 1e-300)
        return z * (radius * rng.random((m, 1)) ** (1.0 / n))

    u_far, v_far = ball(half), ball(half)
    centers = ball(n_samples - half)
    dirs = rng.standard_normal((n_samples - half, n))
    dirs /= np.maximum(np.linalg.norm(dirs, axis=1, keepdims=True), 1e-300)
    u_close = centers
    v_close = centers + 1e-6 * radius * dirs
    u = np.vstack([u_far, u_close])
    v = np.vstack([v_far, v_close])

    def f(z):
        return system.drift_at(0.0, z, partner=z)

    def s(z):
        return system.diffusion_at(0.0, z)

    du = u - v
    ndu = np.linalg.norm(du, axis=1)
    ok = ndu > 1e-300
    df = f(u) - f(v)
    ds = s(u) - s(v)
    ds_f = np.sqrt(np.sum(ds * ds, axis=(1, 2)))
    ndf = np.linalg.norm(df, axis=1)
    l_hat = float(np.max((ndf[ok] + ds_f[ok]) / ndu[ok]))
    c1_hat = float(
        np.max((2.0 * np.sum(df * du, axis=1)[ok] + ds_f[ok] ** 2) / ndu[ok] ** 2)
    )

    w = ball(n_samples)
    nw = np.linalg.norm(w, axis=1)
    expr = 2.0 * np.sum(f(w) * w, axis=1) + np.sum(s(w) ** 2, axis=(1, 2))
    near0 = nw <= radius / 100.0
    m1_hat = float(max(0.0, expr[near0].max())) if near0.any() else max(0.0, float(
        expr[np.argmin(nw)]
    ))
    away = nw >= radius / 10.0
    c2_hat = float(np.max((expr[away] - m1_hat) / nw[away] ** 2)) if away.any() else 0.0

    return AssumptionProbe(c1_hat, c2_hat, m1_hat, l_hat, n_samples, radius)
