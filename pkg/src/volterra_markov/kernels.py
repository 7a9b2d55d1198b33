"""Parametric Volterra kernels.

A :class:`KernelSpec` is an immutable description of a scalar convolution
kernel ``k``. Values, cell integrals and cell integrals of ``k**2`` are
available for every family; closed forms are used where they exist and a
graded Gauss-Legendre rule otherwise.

Example
-------
>>> k = KernelSpec.fractional(0.25)
>>> round(float(k(1.0)), 5)
0.81606
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy import integrate
from scipy.special import gamma as gamma_fn
from scipy.special import gammainc

from . import _quad
from .errors import (
    EvalAtSingularity,
    InvalidParams,
    NotCompletelyMonotone,
    QuadratureFailure,
)

__all__ = [
    "Family",
    "KernelSpec",
    "MatrixKernelSpec",
    "BernsteinApproximation",
    "IncrementScan",
    "bernstein_quadrature",
    "l2_increment_scan",
]


class Family(str, enum.Enum):
    FRACTIONAL = "Fractional"
    GAMMA = "Gamma"
    MITTAG_LEFFLER = "MittagLeffler"
    EXP_SUM = "ExpSum"
    PARAMETRIC = "ParametricClass"
    BERNSTEIN = "BernsteinQuadrature"
    CONSTANT = "Constant"
    TABLE = "TableDefined"


_POWER_FAMILIES = (Family.FRACTIONAL, Family.GAMMA, Family.MITTAG_LEFFLER)
_EXP_FAMILIES = (Family.EXP_SUM, Family.BERNSTEIN)


def _as_array(t):
    return np.asarray(t, dtype=float)


def _ml_series(x, a, terms=120):
    # E_{a,a}(-x) for moderate x
    k = np.arange(terms)
    c = 1.0 / gamma_fn(a * k + a)
    out = np.zeros_like(x)
    p = np.ones_like(x)
    for j in range(terms):
        out += c[j] * p
        p = p * (-x)
    return out


def _ml_density(r, a, lam):
    ra = r**a
    return ra * math.sin(a * math.pi) / (math.pi * (ra * ra + 2.0 * lam * ra * math.cos(a * math.pi) + lam * lam))


def _ml_kernel(t, a, lam):
    """t^{a-1} E_{a,a}(-lam t^a) for 0 < a < 1."""
    t = _as_array(t)
    x = lam * t**a
    out = np.empty_like(t)
    small = x <= 2.0
    out[small] = t[small] ** (a - 1.0) * _ml_series(x[small], a)
    for i in np.flatnonzero(~small):
        ti = float(t.flat[i])

        def f(u, ti=ti):
            return math.exp(-u) * _ml_density(u / ti, a, lam) / ti

        v1, _ = integrate.quad(f, 0.0, 1.0, limit=200, epsabs=0.0, epsrel=1e-12)
        v2, _ = integrate.quad(f, 1.0, np.inf, limit=200, epsabs=0.0, epsrel=1e-12)
        out.flat[i] = v1 + v2
    return out


@dataclass(frozen=True)
class KernelSpec:
    """Scalar Volterra kernel.

    Parameters
    ----------
    family : Family
        Analytic family.
    hurst : float
        Hurst index ``H``; the kernel behaves like ``t^(H-1/2)`` near zero.
    damping : float
        Exponential damping rate ``lambda``.
    shifts : tuple of float
        ``(eps0, eps1, eps2)`` of the parametric class
        ``c (t+eps0)^(H-1/2) exp(-lambda (t+eps1)) log(1 + (t+eps2)^alpha)``.
    log_exponent : float
        ``alpha`` of the log modulation; 0 switches the modulation off.
    scale : float
        Multiplicative constant ``c``.
    exp_terms : tuple of (weight, rate)
        Terms of an exponential sum.
    bernstein_nodes : tuple of (weight, rate)
        Positive-weight exponential sum from a Bernstein quadrature.
    table : tuple or None
        ``(grid, values)`` for table-defined kernels.
    offset : float
        Evaluate the family at ``t + offset`` (forward shift).
    """

    family: Family
    hurst: float = 0.5
    damping: float = 0.0
    shifts: tuple = (0.0, 0.0, 0.0)
    log_exponent: float = 0.0
    scale: float = 1.0
    exp_terms: tuple = ()
    bernstein_nodes: tuple = ()
    table: tuple | None = field(default=None, compare=False)
    offset: float = 0.0

    # ------------------------------------------------------------------
    # construction

    def __post_init__(self):
        object.__setattr__(self, "family", Family(self.family))
        object.__setattr__(self, "shifts", tuple(float(s) for s in self.shifts))
        object.__setattr__(self, "exp_terms", tuple((float(a), float(r)) for a, r in self.exp_terms))
        object.__setattr__(self, "bernstein_nodes", tuple((float(a), float(r)) for a, r in self.bernstein_nodes))
        if self.table is not None:
            g, v = self.table
            object.__setattr__(self, "table", (tuple(float(x) for x in g), tuple(float(x) for x in v)))
        self._validate()

    def _validate(self):
        f = self.family
        H, lam = self.hurst, self.damping
        if not np.isfinite(self.scale) or self.scale == 0.0:
            raise InvalidParams("scale must be finite and nonzero")
        if lam < 0 or not np.isfinite(lam):
            raise InvalidParams("damping must be >= 0")
        if self.offset < 0 or not np.isfinite(self.offset):
            raise InvalidParams("offset must be >= 0")
        if f in (Family.FRACTIONAL, Family.GAMMA, Family.PARAMETRIC, Family.MITTAG_LEFFLER):
            if not (0.0 < H < 1.0):
                raise InvalidParams(f"hurst must lie in (0, 1), got {H}")
        if f is Family.MITTAG_LEFFLER and H > 0.5:
            raise InvalidParams("MittagLeffler kernel needs hurst <= 1/2")
        if f is Family.PARAMETRIC:
            if any(s < 0 for s in self.shifts) or len(self.shifts) != 3:
                raise InvalidParams("shifts must be three nonnegative reals")
            if not (-1.0 <= self.log_exponent <= 1.0):
                raise InvalidParams("log_exponent must lie in [-1, 1]")
            if self.log_exponent > 0 and self.shifts[2] == 0.0 and H - 0.5 + self.log_exponent <= -0.5:
                raise InvalidParams("kernel not locally square integrable")
        if f is Family.EXP_SUM:
            if not self.exp_terms:
                raise InvalidParams("ExpSum needs at least one term")
            if any(r < 0 for _, r in self.exp_terms):
                raise InvalidParams("ExpSum rates must be >= 0")
        if f is Family.BERNSTEIN:
            if not self.bernstein_nodes:
                raise InvalidParams("BernsteinQuadrature needs nodes")
            if any(w <= 0 or r < 0 for w, r in self.bernstein_nodes):
                raise InvalidParams("Bernstein weights must be > 0 and rates >= 0")
        if f is Family.TABLE:
            if self.table is None:
                raise InvalidParams("TableDefined kernel needs a table")
            g, v = (np.asarray(x) for x in self.table)
            if g.ndim != 1 or g.size < 2 or g.size != v.size:
                raise InvalidParams("table needs matching grid and values with >= 2 nodes")
            if np.any(np.diff(g) <= 0) or g[0] < 0:
                raise InvalidParams("table grid must be increasing and nonnegative")
            if not np.all(np.isfinite(v)):
                raise InvalidParams("table values must be finite")

    @classmethod
    def fractional(cls, hurst, scale=1.0):
        """``c t^(H-1/2) / Gamma(H+1/2)``."""
        return cls(Family.FRACTIONAL, hurst=hurst, scale=scale)

    @classmethod
    def gamma_kernel(cls, hurst, damping, scale=1.0):
        """``c t^(H-1/2) exp(-lambda t) / Gamma(H+1/2)``."""
        return cls(Family.GAMMA, hurst=hurst, damping=damping, scale=scale)

    @classmethod
    def mittag_leffler(cls, hurst, damping, scale=1.0):
        """``c t^(a-1) E_{a,a}(-lambda t^a)`` with ``a = H+1/2``."""
        return cls(Family.MITTAG_LEFFLER, hurst=hurst, damping=damping, scale=scale)

    @classmethod
    def exp_sum(cls, terms):
        """``sum_j a_j exp(-lambda_j t)``."""
        return cls(Family.EXP_SUM, exp_terms=tuple(terms))

    @classmethod
    def exponential(cls, rate, weight=1.0):
        return cls.exp_sum([(weight, rate)])

    @classmethod
    def constant(cls, c=1.0):
        return cls(Family.CONSTANT, scale=c)

    @classmethod
    def parametric(cls, hurst, damping=0.0, shifts=(0.0, 0.0, 0.0), log_exponent=0.0, scale=1.0):
        return cls(Family.PARAMETRIC, hurst=hurst, damping=damping, shifts=tuple(shifts),
                   log_exponent=log_exponent, scale=scale)

    @classmethod
    def from_table(cls, grid, values):
        return cls(Family.TABLE, table=(tuple(np.asarray(grid, float)), tuple(np.asarray(values, float))))

    def shifted(self, z):
        """Forward shift ``k(. + z)``."""
        if z < 0:
            raise InvalidParams("shift must be >= 0")
        return replace(self, offset=self.offset + float(z))

    # ------------------------------------------------------------------
    # structure

    @property
    def _base_singular(self):
        f = self.family
        if f in _POWER_FAMILIES:
            return self.hurst < 0.5
        if f is Family.PARAMETRIC:
            e0, _, e2 = self.shifts
            return (e0 == 0.0 and self.hurst < 0.5) or (e2 == 0.0 and self.log_exponent < 0.0)
        if f is Family.TABLE:
            return self._table_power()[1] < 0.0
        return False

    @property
    def is_singular(self):
        """True when ``k(0+) = infinity``."""
        return self.offset == 0.0 and self._base_singular

    def value_at_zero(self):
        """``k(0)``, or ``inf`` for singular kernels."""
        if self.is_singular:
            return math.inf
        if self.offset > 0.0:
            return float(self(0.0))
        f = self.family
        if f in _POWER_FAMILIES:
            if self.hurst == 0.5:
                return self.scale
            return 0.0 if self.hurst > 0.5 else math.inf
        if f is Family.PARAMETRIC:
            e0, e1, e2 = self.shifts
            if e0 == 0.0 and self.hurst > 0.5:
                return 0.0
            if e2 == 0.0 and self.log_exponent > 0.0:
                return 0.0
            return float(self(0.0))
        return float(self(0.0))

    @property
    def index(self):
        """Regular variation index ``rho`` at zero (``k(t) ~ t^rho``)."""
        if self.offset > 0.0:
            return 0.0
        f = self.family
        if f in _POWER_FAMILIES:
            return self.hurst - 0.5
        if f is Family.PARAMETRIC:
            rho = self.hurst - 0.5 if self.shifts[0] == 0.0 else 0.0
            if self.shifts[2] == 0.0 and self.log_exponent > 0.0:
                rho += self.log_exponent
            return rho
        if f is Family.TABLE:
            return self._table_power()[1]
        return 0.0

    @property
    def growth_bound(self):
        """Analytic growth exponent ``beta = (H - 1/2)_+`` at infinity."""
        if self.family in (Family.FRACTIONAL, Family.PARAMETRIC):
            return max(self.hurst - 0.5, 0.0)
        if self.family is Family.GAMMA and self.damping == 0.0:
            return max(self.hurst - 0.5, 0.0)
        return 0.0

    def limit_at_infinity(self):
        """``k(infinity)`` or ``None`` when it does not exist or is infinite."""
        f = self.family
        if f is Family.CONSTANT:
            return self.scale
        if f in _EXP_FAMILIES:
            terms = self.exp_terms or self.bernstein_nodes
            return float(sum(a for a, r in terms if r == 0.0))
        if f in _POWER_FAMILIES:
            if self.damping > 0.0 or self.hurst < 0.5:
                return 0.0
            return self.scale if self.hurst == 0.5 else None
        if f is Family.PARAMETRIC:
            if self.damping > 0.0:
                return 0.0
            if self.hurst < 0.5 and self.log_exponent <= 0.0:
                return 0.0
            if self.hurst == 0.5 and self.log_exponent == 0.0:
                return self.scale
            return None
        if f is Family.TABLE:
            return None
        return None

    # ------------------------------------------------------------------
    # evaluation

    def __call__(self, t):
        return self.eval(t)

    def eval(self, t):
        """Evaluate ``k(t)``; vectorized, returns a float for scalar input."""
        arr = _as_array(t)
        if np.any(arr < 0) or np.any(np.isnan(arr)):
            raise InvalidParams("kernel argument must be >= 0")
        if self.is_singular and np.any(arr == 0.0):
            raise EvalAtSingularity(f"{self.family.value} kernel is singular at 0")
        out = self._eval_base(np.atleast_1d(arr) + self.offset)
        return float(out[0]) if arr.ndim == 0 else out.reshape(arr.shape)

    def _eval_base(self, t):
        f, c, H, lam = self.family, self.scale, self.hurst, self.damping
        if f is Family.FRACTIONAL:
            with np.errstate(divide="ignore"):
                return c * t ** (H - 0.5) / gamma_fn(H + 0.5)
        if f is Family.GAMMA:
            with np.errstate(divide="ignore"):
                return c * t ** (H - 0.5) * np.exp(-lam * t) / gamma_fn(H + 0.5)
        if f is Family.MITTAG_LEFFLER:
            a = H + 0.5
            if a == 1.0:
                return c * np.exp(-lam * t)
            if lam == 0.0:
                with np.errstate(divide="ignore"):
                    return c * t ** (a - 1.0) / gamma_fn(a)
            out = np.full_like(t, np.inf)
            pos = t > 0
            out[pos] = c * _ml_kernel(t[pos], a, lam)
            return out
        if f in _EXP_FAMILIES:
            terms = np.array(self.exp_terms or self.bernstein_nodes)
            return np.exp(-np.outer(t, terms[:, 1])) @ terms[:, 0]
        if f is Family.CONSTANT:
            return np.full_like(t, c)
        if f is Family.PARAMETRIC:
            e0, e1, e2 = self.shifts
            with np.errstate(divide="ignore"):
                out = c * (t + e0) ** (H - 0.5) * np.exp(-lam * (t + e1))
                if self.log_exponent != 0.0:
                    out = out * np.log1p((t + e2) ** self.log_exponent)
            return out
        if f is Family.TABLE:
            return self._table_eval(t)
        raise InvalidParams(f"unknown family {f}")

    # table helpers -----------------------------------------------------

    def _table_arrays(self):
        g, v = self.table
        return np.asarray(g), np.asarray(v)

    def _table_power(self):
        """Power-law extrapolation ``A t^p`` below the first node."""
        g, v = self._table_arrays()
        if g[0] == 0.0:
            return v[0], 0.0
        if v[0] * v[1] > 0 and v[0] != v[1]:
            p = math.log(v[1] / v[0]) / math.log(g[1] / g[0])
            p = max(p, -0.999)
            return v[0] / g[0] ** p, p
        return v[0], 0.0

    def _table_eval(self, t):
        g, v = self._table_arrays()
        out = np.interp(t, g, v)
        lo = t < g[0]
        if np.any(lo):
            A, p = self._table_power()
            with np.errstate(divide="ignore"):
                out[lo] = A * t[lo] ** p
        return out

    def _table_cumulative(self, t, power):
        g, v = self._table_arrays()
        A, p = self._table_power()
        q = p * power + 1.0
        if q <= 0:
            raise InvalidParams("table kernel not integrable at 0")
        head = A**power * g[0] ** q / q
        if power == 1:
            seg = 0.5 * (v[1:] + v[:-1]) * np.diff(g)
        else:
            seg = (v[1:] ** 2 + v[1:] * v[:-1] + v[:-1] ** 2) * np.diff(g) / 3.0
        cum = np.concatenate(([head], head + np.cumsum(seg)))
        t = np.minimum(t, g[-1])  # held constant beyond the last node
        out = np.empty_like(t)
        lo = t < g[0]
        out[lo] = A**power * t[lo] ** q / q
        hi = ~lo
        i = np.clip(np.searchsorted(g, t[hi], side="right") - 1, 0, g.size - 2)
        x0, y0, y1 = g[i], v[i], v[i + 1]
        s = t[hi] - x0
        slope = (y1 - y0) / (g[i + 1] - x0)
        if power == 1:
            part = y0 * s + 0.5 * slope * s * s
        else:
            part = y0 * y0 * s + y0 * slope * s * s + slope * slope * s**3 / 3.0
        out[hi] = cum[i] + part
        return out

    # cumulative integrals -----------------------------------------------

    def cumulative(self, t, power=1):
        """``int_0^t k(s)^power ds`` for ``power`` in {1, 2}; vectorized."""
        arr = np.atleast_1d(_as_array(t))
        if np.any(arr < 0):
            raise InvalidParams("upper limit must be >= 0")
        if self.offset > 0.0:
            out = self._base_cumulative(arr + self.offset, power) - self._base_cumulative(
                np.array([self.offset]), power
            )
        else:
            out = self._base_cumulative(arr, power)
        return float(out[0]) if np.ndim(t) == 0 else out.reshape(np.shape(t))

    def _base_cumulative(self, t, power):
        f, c, H, lam = self.family, self.scale, self.hurst, self.damping
        if f is Family.FRACTIONAL:
            if power == 1:
                return c * t ** (H + 0.5) / gamma_fn(H + 1.5)
            return c * c * t ** (2 * H) / (2 * H * gamma_fn(H + 0.5) ** 2)
        if f is Family.GAMMA and lam > 0.0:
            if power == 1:
                a = H + 0.5
                return c * lam ** (-a) * gammainc(a, lam * t)
            a = 2 * H
            return c * c * (2 * lam) ** (-a) * gamma_fn(a) * gammainc(a, 2 * lam * t) / gamma_fn(H + 0.5) ** 2
        if f is Family.GAMMA:
            return replace(self, family=Family.FRACTIONAL)._base_cumulative(t, power)
        if f is Family.MITTAG_LEFFLER and (lam == 0.0 or H == 0.5):
            if lam == 0.0:
                return replace(self, family=Family.FRACTIONAL)._base_cumulative(t, power)
            return KernelSpec.exponential(lam, c)._base_cumulative(t, power)
        if f is Family.CONSTANT:
            return c**power * t
        if f in _EXP_FAMILIES:
            terms = np.array(self.exp_terms or self.bernstein_nodes)
            if power == 1:
                w, r = terms[:, 0], terms[:, 1]
            else:
                w = np.outer(terms[:, 0], terms[:, 0]).ravel()
                r = np.add.outer(terms[:, 1], terms[:, 1]).ravel()
            rt = np.outer(t, r)
            with np.errstate(divide="ignore", invalid="ignore"):
                fac = np.where(r > 0, -np.expm1(-rt) / np.where(r > 0, r, 1.0), t[:, None])
            return fac @ w
        if f is Family.TABLE:
            return self._table_cumulative(t, power)
        return self._generic_cumulative(t, power)

    def _generic_cumulative(self, t, power):
        def fn(s):
            return self._eval_base(s) ** power

        tmax = float(np.max(t)) if t.size else 0.0
        if tmax == 0.0:
            return np.zeros_like(t)
        geo = tmax * 0.5 ** np.arange(0, 60)
        uniq = np.unique(np.concatenate((t[t > 0], geo)))
        # refine so that every panel has ratio <= 2
        edges = [uniq[0]]
        for e in uniq[1:]:
            while e > 2.0 * edges[-1]:
                edges.append(2.0 * edges[-1])
            edges.append(e)
        edges = np.asarray(edges)
        head = _quad.integrate_from(fn, 0.0, float(edges[0]), levels=40)
        parts = _quad.panels(fn, edges, 20)
        cum = np.concatenate(([head], head + np.cumsum(parts)))
        if not np.all(np.isfinite(cum)):
            raise QuadratureFailure("non-finite kernel integral")
        out = np.zeros_like(t)
        pos = t > 0
        out[pos] = cum[np.searchsorted(edges, t[pos])]
        return out

    def integral(self, a, b, power=1):
        """``int_a^b k(s)^power ds``; vectorized over ``a`` and ``b``."""
        a, b = np.broadcast_arrays(_as_array(a), _as_array(b))
        f = self.family
        if f in _EXP_FAMILIES and power == 1:
            terms = np.array(self.exp_terms or self.bernstein_nodes)
            w, r = terms[:, 0], terms[:, 1]
            aa = a.ravel()[:, None] + self.offset
            width = (b - a).ravel()[:, None]
            with np.errstate(divide="ignore", invalid="ignore"):
                fac = np.where(r > 0, np.exp(-r * aa) * -np.expm1(-r * width) / np.where(r > 0, r, 1.0), width)
            out = (fac @ w).reshape(a.shape)
            return float(out) if out.ndim == 0 else out
        both = np.concatenate((a.ravel(), b.ravel()))
        cum = self.cumulative(both, power)
        out = (cum[a.size:] - cum[: a.size]).reshape(a.shape)
        return float(out) if out.ndim == 0 else out

    # ------------------------------------------------------------------
    # Bernstein representation

    def bernstein_density(self, x):
        """Density of the Bernstein measure ``k(t) = int exp(-t x) mu(dx)``.

        Raises
        ------
        NotCompletelyMonotone
            If the family has no known Bernstein density.
        """
        x = _as_array(x)
        f, c, H, lam = self.family, self.scale, self.hurst, self.damping
        if self.offset != 0.0 or c < 0 or f not in _POWER_FAMILIES or H >= 0.5:
            raise NotCompletelyMonotone(f"no Bernstein density for {f.value}")
        a = H + 0.5
        norm = c / (gamma_fn(a) * gamma_fn(1.0 - a))
        if f is Family.FRACTIONAL:
            return norm * x ** (-a)
        if f is Family.GAMMA:
            s = np.where(x > lam, x - lam, np.inf)
            return norm * s ** (-a)
        return c * _ml_density(x, a, lam)

    def to_dict(self):
        d = {"family": self.family.value}
        f = self.family
        if f in _POWER_FAMILIES or f is Family.PARAMETRIC:
            d["hurst"] = self.hurst
        if f in (Family.GAMMA, Family.MITTAG_LEFFLER, Family.PARAMETRIC):
            d["damping"] = self.damping
        if f is Family.PARAMETRIC:
            d["shifts"] = list(self.shifts)
            d["log_exponent"] = self.log_exponent
        if f not in _EXP_FAMILIES and f is not Family.TABLE:
            d["scale"] = self.scale
        if f is Family.EXP_SUM:
            d["exp_terms"] = [list(p) for p in self.exp_terms]
        if f is Family.BERNSTEIN:
            d["bernstein_nodes"] = [list(p) for p in self.bernstein_nodes]
        if f is Family.TABLE:
            d["table"] = {"grid": list(self.table[0]), "values": list(self.table[1])}
        if self.offset:
            d["offset"] = self.offset
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        try:
            fam = Family(d.pop("family"))
        except (KeyError, ValueError) as exc:
            raise InvalidParams(f"bad kernel family: {exc}") from exc
        table = d.pop("table", None)
        if table is not None:
            if isinstance(table, dict):
                table = (table["grid"], table["values"])
            d["table"] = table
        allowed = {"hurst", "damping", "shifts", "log_exponent", "scale", "exp_terms", "bernstein_nodes",
                   "table", "offset"}
        extra = set(d) - allowed
        if extra:
            raise InvalidParams(f"unknown kernel fields: {sorted(extra)}")
        try:
            return cls(fam, **d)
        except TypeError as exc:
            raise InvalidParams(str(exc)) from exc


@dataclass(frozen=True)
class MatrixKernelSpec:
    """Matrix kernel given row by row.

    ``rows[l]`` lists ``(column, KernelSpec)`` pairs; missing entries are zero.
    """

    rows: tuple
    dims: tuple

    def __post_init__(self):
        rows = tuple(tuple((int(j), k) for j, k in row) for row in self.rows)
        object.__setattr__(self, "rows", rows)
        n, d = (int(x) for x in self.dims)
        object.__setattr__(self, "dims", (n, d))
        if len(rows) != n:
            raise InvalidParams("number of rows does not match dims")
        for row in rows:
            cols = [j for j, _ in row]
            if len(set(cols)) != len(cols) or any(not (0 <= j < d) for j in cols):
                raise InvalidParams("invalid column indices in matrix kernel")

    @classmethod
    def column(cls, kernels: Sequence[KernelSpec]):
        """Stack scalar kernels as an N x 1 system."""
        return cls(tuple(((0, k),) for k in kernels), (len(kernels), 1))

    @classmethod
    def diagonal(cls, kernels: Sequence[KernelSpec]):
        n = len(kernels)
        return cls(tuple(((i, k),) for i, k in enumerate(kernels)), (n, n))

    @property
    def is_diagonal_like(self):
        return all(len(row) == 1 for row in self.rows)

    def partition(self):
        """``S_i`` = rows whose single nonzero entry sits in column ``i``."""
        if not self.is_diagonal_like:
            raise InvalidParams("partition only defined for diagonal-like kernels")
        parts = {i: [] for i in range(self.dims[1])}
        for l, row in enumerate(self.rows):
            parts[row[0][0]].append(l)
        return {i: s for i, s in parts.items() if s}

    def entry(self, l, i):
        for j, k in self.rows[l]:
            if j == i:
                return k
        return None

    def to_dict(self):
        return {"dims": list(self.dims),
                "rows": [[[j, k.to_dict()] for j, k in row] for row in self.rows]}

    @classmethod
    def from_dict(cls, d):
        try:
            rows = tuple(tuple((j, KernelSpec.from_dict(k)) for j, k in row) for row in d["rows"])
            return cls(rows, tuple(d["dims"]))
        except (KeyError, TypeError) as exc:
            raise InvalidParams(f"bad matrix kernel: {exc}") from exc


# ----------------------------------------------------------------------
# characterizations


@dataclass
class IncrementScan:
    """Result of :func:`l2_increment_scan`."""

    h: np.ndarray
    values: np.ndarray
    gamma_K: float
    fit_r2: float


def _increment_energy(kernel, T, h):
    k = kernel.eval

    def inc(r):
        return (k(r + h) - k(r)) ** 2

    # (0, h] graded toward 0, then geometric panels out to T
    near = _quad.integrate_from(inc, 0.0, min(h, T), levels=50) if kernel.is_singular else float(
        _quad.panels(inc, np.linspace(0.0, min(h, T), 5), 20).sum())
    far = 0.0
    if T > h:
        edges = [h]
        while edges[-1] < T:
            edges.append(min(2.0 * edges[-1], T))
        far = float(_quad.panels(inc, np.asarray(edges), 24).sum())
    return near + far + float(kernel.cumulative(h, power=2))


def l2_increment_scan(kernel: KernelSpec, T: float = 1.0, h_list=None):
    """Estimate the increment exponent ``gamma_K`` of a kernel.

    Computes ``I(h) = int_0^T |k(r+h) - k(r)|^2 dr + int_0^h k(r)^2 dr`` and
    fits ``log I`` against ``log h``; ``gamma_K`` is half the slope.
    """
    if h_list is None:
        h_list = np.logspace(-2, -6, 25)
    h = np.asarray(h_list, dtype=float)
    if np.any(h <= 0) or np.any(h > T):
        raise InvalidParams("all h must lie in (0, T]")
    vals = np.array([_increment_energy(kernel, T, hi) for hi in h])
    if not np.all(np.isfinite(vals)) or np.any(vals <= 0):
        raise QuadratureFailure("increment energy not positive and finite")
    x, y = np.log(h), np.log(vals)
    slope, icpt = np.polyfit(x, y, 1)
    resid = y - (slope * x + icpt)
    r2 = 1.0 - resid.var() / y.var() if y.var() > 0 else 1.0
    return IncrementScan(h=h, values=vals, gamma_K=0.5 * slope, fit_r2=float(r2))


@dataclass
class BernsteinApproximation:
    """Exponential-sum approximation and its measured accuracy."""

    kernel: KernelSpec
    max_rel_error: float
    test_grid: np.ndarray


def bernstein_quadrature(kernel: KernelSpec, n_nodes: int = 40, T: float = 1.0, n_test: int = 200):
    """Approximate a completely monotone kernel by a positive exponential sum.

    Densities are discretized by the trapezoidal rule in ``log x`` (nodes
    geometric in ``x``), which converges exponentially for Laplace-type
    integrands; the mass below the smallest node is lumped into one extra
    node placed at its mean.
    """
    f = kernel.family
    test = np.geomspace(T / 1000.0, T, n_test)
    if f in _EXP_FAMILIES:
        terms = kernel.exp_terms or kernel.bernstein_nodes
        if kernel.offset:
            terms = tuple((w * math.exp(-r * kernel.offset), r) for w, r in terms)
        if any(w <= 0 for w, _ in terms):
            raise NotCompletelyMonotone("negative weights in exponential sum")
        if n_nodes < len(terms):
            raise InvalidParams("n_nodes smaller than number of exponential terms")
        approx = KernelSpec(Family.BERNSTEIN, bernstein_nodes=terms)
    elif f is Family.CONSTANT and kernel.scale > 0:
        approx = KernelSpec(Family.BERNSTEIN, bernstein_nodes=((kernel.scale, 0.0),))
    else:
        if n_nodes < 3:
            raise InvalidParams("need at least 3 nodes")
        kernel.bernstein_density(1.0)  # raises when unavailable
        shift = kernel.damping if f is Family.GAMMA else 0.0
        x_lo, x_hi = 1e-6 / T, 3.6e4 / T
        m = n_nodes - 1
        hstep = math.log(x_hi / x_lo) / m
        y = math.log(x_lo) + hstep * (np.arange(m) + 0.5)
        xs = np.exp(y)
        w = hstep * xs * kernel.bernstein_density(shift + xs)
        mass, _ = integrate.quad(lambda u: kernel.bernstein_density(shift + u), 0.0, x_lo, limit=200)
        first, _ = integrate.quad(lambda u: u * kernel.bernstein_density(shift + u), 0.0, x_lo, limit=200)
        nodes = [(mass, shift + first / mass)] + list(zip(w, shift + xs))
        approx = KernelSpec(Family.BERNSTEIN, bernstein_nodes=tuple(nodes))
    exact = kernel(test)
    err = float(np.max(np.abs(approx(test) - exact) / np.abs(exact)))
    return BernsteinApproximation(kernel=approx, max_rel_error=err, test_grid=test)
