"""Candidate conjugating maps between trajectory sets.

Three parametric families: linear, affine, and tabulated monotone
1-d maps built on monotone cubic (PCHIP) interpolation, which is itself a
homeomorphism of an interval whenever the knot values are strictly
monotone.  Maps are value objects; sharing them across workers is safe.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.interpolate import PchipInterpolator
from scipy.optimize import brentq

from .errors import DimensionMismatch, ExtrapolationWarning, SingularMap

CONDITION_BOUND = 1e12


class LinearMap:
    """K(x) = K x."""

    kind = "linear"

    def __init__(self, matrix):
        self.matrix = np.atleast_2d(np.asarray(matrix, float))
        if self.matrix.shape[0] != self.matrix.shape[1]:
            raise DimensionMismatch("map matrix must be square")
        if not np.isfinite(self.matrix).all():
            raise ValueError("map matrix must be finite")

    @property
    def dim(self):
        return self.matrix.shape[0]

    def condition_number(self) -> float:
        sv = np.linalg.svd(self.matrix, compute_uv=False)
        if sv[-1] <= 0:
            return np.inf
        return float(sv[0] / sv[-1])

    def __call__(self, x):
        x = np.asarray(x, float)
        return _batched_matvec(self.matrix, x)

    def jacobian(self, x):
        x = np.asarray(x, float)
        return np.broadcast_to(self.matrix, x.shape[:-1] + self.matrix.shape)

    def inverse(self, y):
        if self.condition_number() > CONDITION_BOUND:
            raise SingularMap("matrix condition number exceeds the invertibility bound")
        y = np.asarray(y, float)
        flat = y.reshape(-1, self.dim)
        sol = np.linalg.solve(self.matrix, flat.T).T
        return sol.reshape(y.shape)

    def to_dict(self):
        return {"kind": "linear", "matrix": self.matrix.tolist()}


class AffineMap:
    """K(x) = K x + b."""

    kind = "affine"

    def __init__(self, matrix, offset):
        self.matrix = np.atleast_2d(np.asarray(matrix, float))
        self.offset = np.atleast_1d(np.asarray(offset, float))
        if self.matrix.shape[0] != self.matrix.shape[1]:
            raise DimensionMismatch("map matrix must be square")
        if self.offset.shape != (self.matrix.shape[0],):
            raise DimensionMismatch("offset length must match the matrix dimension")

    @property
    def dim(self):
        return self.matrix.shape[0]

    def condition_number(self) -> float:
        sv = np.linalg.svd(self.matrix, compute_uv=False)
        if sv[-1] <= 0:
            return np.inf
        return float(sv[0] / sv[-1])

    def __call__(self, x):
        x = np.asarray(x, float)
        return _batched_matvec(self.matrix, x) + self.offset

    def jacobian(self, x):
        x = np.asarray(x, float)
        return np.broadcast_to(self.matrix, x.shape[:-1] + self.matrix.shape)

    def inverse(self, y):
        if self.condition_number() > CONDITION_BOUND:
            raise SingularMap("matrix condition number exceeds the invertibility bound")
        y = np.asarray(y, float)
        flat = (y - self.offset).reshape(-1, self.dim)
        sol = np.linalg.solve(self.matrix, flat.T).T
        return sol.reshape(y.shape)

    def to_dict(self):
        return {
            "kind": "affine",
            "matrix": self.matrix.tolist(),
            "offset": self.offset.tolist(),
        }


class Tabulated1d:
    """Monotone cubic interpolant through (knots, values).

    Outside the knot range the map continues linearly with the endpoint
    derivative and emits :class:`ExtrapolationWarning`.
    """

    kind = "tabulated1d"
    dim = 1

    def __init__(self, knots, values, require_monotone: bool = True):
        self.knots = np.asarray(knots, float)
        self.values = np.asarray(values, float)
        if self.knots.ndim != 1 or self.knots.shape != self.values.shape:
            raise DimensionMismatch("knots and values must be equal-length vectors")
        if self.knots.size < 2:
            raise ValueError("need at least two knots")
        if not (np.diff(self.knots) > 0).all():
            raise ValueError("knots must be strictly increasing")
        dv = np.diff(self.values)
        self.strictly_monotone = bool((dv > 0).all() or (dv < 0).all())
        if require_monotone and not self.strictly_monotone:
            raise SingularMap("tabulated values are not strictly monotone")
        self._interp = PchipInterpolator(self.knots, self.values, extrapolate=False)
        self._deriv = self._interp.derivative()
        # Endpoint derivatives define the linear continuation.
        self._d_lo = float(self._deriv(self.knots[0]))
        self._d_hi = float(self._deriv(self.knots[-1]))

    def condition_number(self) -> float:
        d = np.abs(self._deriv(self.knots))
        lo = d.min()
        if lo <= 0:
            return np.inf
        return float(d.max() / lo)

    def _eval_scalararray(self, u):
        lo, hi = self.knots[0], self.knots[-1]
        below = u < lo
        above = u > hi
        if below.any() or above.any():
            warnings.warn(
                "evaluating tabulated map outside its knot range",
                ExtrapolationWarning,
                stacklevel=3,
            )
        out = self._interp(np.clip(u, lo, hi))
        out = np.where(below, self.values[0] + self._d_lo * (u - lo), out)
        out = np.where(above, self.values[-1] + self._d_hi * (u - hi), out)
        return out

    def __call__(self, x):
        x = np.asarray(x, float)
        if x.shape and x.shape[-1] != 1:
            raise DimensionMismatch("tabulated map is one-dimensional")
        if not x.shape:
            return self._eval_scalararray(x)
        out = self._eval_scalararray(x[..., 0])
        return out[..., None]

    def jacobian(self, x):
        x = np.asarray(x, float)
        u = x[..., 0] if x.shape else x
        lo, hi = self.knots[0], self.knots[-1]
        d = self._deriv(np.clip(u, lo, hi))
        d = np.where(u < lo, self._d_lo, d)
        d = np.where(u > hi, self._d_hi, d)
        return d.reshape(x.shape[:-1] + (1, 1)) if x.shape else d.reshape(1, 1)

    def inverse(self, y):
        if not self.strictly_monotone:
            raise SingularMap("non-monotone tabulation has no inverse")
        y = np.asarray(y, float)
        flat = np.atleast_1d(y.reshape(-1))
        out = np.empty_like(flat)
        increasing = self.values[-1] > self.values[0]
        v_lo, v_hi = sorted((self.values[0], self.values[-1]))
        lo, hi = self.knots[0], self.knots[-1]
        for i, target in enumerate(flat):
            if target < v_lo or target > v_hi:
                # Invert the linear continuation.
                if (target > v_hi) == increasing:
                    out[i] = hi + (target - self.values[-1]) / self._d_hi
                else:
                    out[i] = lo + (target - self.values[0]) / self._d_lo
                continue
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", ExtrapolationWarning)
                out[i] = brentq(
                    lambda u: float(self._eval_scalararray(np.asarray(u)) - target),
                    lo,
                    hi,
                    xtol=1e-14,
                    rtol=8.9e-16,
                )
        return out.reshape(y.shape)

    def to_dict(self):
        return {
            "kind": "tabulated1d",
            "knots": self.knots.tolist(),
            "values": self.values.tolist(),
        }


def _batched_matvec(a, x):
    out = np.zeros(x.shape[:-1] + (a.shape[0],))
    for j in range(a.shape[1]):
        out += a[:, j] * x[..., j : j + 1]
    return out


# ---------------------------------------------------------------------------
# Operations in functional form
# ---------------------------------------------------------------------------


def apply(mapping, x):
    """Evaluate K(x); x is a vector or any (..., n) batch."""
    x = np.asarray(x, float)
    if x.shape and x.shape[-1] != mapping.dim:
        raise DimensionMismatch(
            f"map expects dimension {mapping.dim}, got {x.shape[-1]}"
        )
    return mapping(x)


def jacobian(mapping, x):
    x = np.asarray(x, float)
    if x.shape and x.shape[-1] != mapping.dim:
        raise DimensionMismatch(
            f"map expects dimension {mapping.dim}, got {x.shape[-1]}"
        )
    return mapping.jacobian(x)


def inverse_apply(mapping, y):
    return mapping.inverse(np.asarray(y, float))


def perturbed(mapping, direction, eps: float):
    """The map K + eps * direction within the same parametric family."""
    if mapping.kind != direction.kind:
        raise DimensionMismatch("direction must live in the same family as the map")
    if mapping.kind == "linear":
        return LinearMap(mapping.matrix + eps * direction.matrix)
    if mapping.kind == "affine":
        return AffineMap(
            mapping.matrix + eps * direction.matrix,
            mapping.offset + eps * direction.offset,
        )
    if mapping.kind == "tabulated1d":
        if not np.array_equal(mapping.knots, direction.knots):
            raise DimensionMismatch("tabulated maps must share their knot grid")
        return Tabulated1d(mapping.knots, mapping.values + eps * direction.values)
    raise DimensionMismatch(f"unknown map kind {mapping.kind!r}")


@dataclass(frozen=True)
class HomeoReport:
    is_injective_on_sample: bool
    min_jacobian_singular_value: float
    condition_number: float
    domain_hull: np.ndarray  # (2, n): row 0 mins, row 1 maxs
    n_samples: int


def check_homeomorphism(mapping, ensemble, max_samples: int = 512) -> HomeoReport:
    """Sample-based certificate on the simulated X-trajectory hull.

    Reports the smallest Jacobian singular value over sampled states and a
    pairwise injectivity spot check (distinct points at least 1e-6 apart
    must not collapse within 1e-9).  Failures are reported, never raised.
    """
    pts = ensemble.x.reshape(-1, ensemble.x.shape[-1])
    if pts.shape[0] == 0:
        raise ValueError("ensemble holds no sample points")
    stride = max(1, pts.shape[0] // max_samples)
    sample = pts[::stride][:max_samples]
    hull = np.stack([pts.min(axis=0), pts.max(axis=0)])

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ExtrapolationWarning)
        jacs = jacobian(mapping, sample)
        images = apply(mapping, sample)
    sv = np.linalg.svd(jacs, compute_uv=False)
    min_sv = float(sv.min())
    max_sv = float(sv.max())
    cond = max_sv / max(min_sv, 1e-300)

    diff_x = np.sqrt(
        np.sum((sample[:, None, :] - sample[None, :, :]) ** 2, axis=-1)
    )
    diff_k = np.sqrt(
        np.sum((images[:, None, :] - images[None, :, :]) ** 2, axis=-1)
    )
    collapsing = (diff_x > 1e-6) & (diff_k < 1e-9)
    injective = not bool(collapsing.any())
    if min_sv == 0.0:
        injective = False
    if getattr(mapping, "kind", "") == "tabulated1d" and not mapping.strictly_monotone:
        injective = False

    return HomeoReport(
        is_injective_on_sample=injective,
        min_jacobian_singular_value=min_sv,
        condition_number=min(cond, 1e300),
        domain_hull=hull,
        n_samples=sample.shape[0],
    )


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def mapping_from_dict(spec: dict):
    kind = spec.get("kind")
    if kind == "linear":
        return LinearMap(spec["matrix"])
    if kind == "affine":
        return AffineMap(spec["matrix"], spec["offset"])
    if kind == "tabulated1d":
        return Tabulated1d(spec["knots"], spec["values"])
    raise ValueError(f"unknown map kind {kind!r}")


def identity_map(dim: int) -> LinearMap:
    return LinearMap(np.eye(dim))


def tabulated_to_csv(mapping: Tabulated1d, path):
    rows = np.column_stack([mapping.knots, mapping.values])
    np.savetxt(path, rows, delimiter=",", header="x,y", comments="", fmt="%.17g")


def tabulated_from_csv(path, require_monotone: bool = True) -> Tabulated1d:
    rows = np.loadtxt(path, delimiter=",", skiprows=1)
    return Tabulated1d(rows[:, 0], rows[:, 1], require_monotone=require_monotone)
