"""Admissible kernel perturbations.

Shifts, constants and derivatives are direct; the forward fractional
(Marchaud) derivative and the fractional integral are computed by split
quadrature and returned as table-defined kernels.
"""

from __future__ import annotations

import enum
import math
from dataclasses import asdict, dataclass, field
from functools import lru_cache

import numpy as np
from scipy import integrate
from scipy.special import gamma as gamma_fn
from scipy.special import roots_jacobi

from . import _quad
from .errors import (
    DivergentIntegral,
    IllConditioned,
    InvalidOrder,
    InvalidParams,
    NoLimitAtInfinity,
    OutOfRegion,
    QuadratureFailure,
)
from .kernels import Family, KernelSpec

__all__ = [
    "PerturbationKind",
    "PerturbationSpec",
    "C_alpha",
    "marchaud_values",
    "marchaud_forward",
    "marchaud_exp",
    "fractional_integral_values",
    "fractional_integral_perturb",
    "shift_perturb",
    "apply_perturbation",
    "exp_span_project",
    "perturbation_grid",
]


class PerturbationKind(str, enum.Enum):
    SHIFT = "Shift"
    CONSTANT = "Constant"
    DERIVATIVE = "Derivative"
    MARCHAUD = "MarchaudDerivative"
    FRACTIONAL_INTEGRAL = "FractionalIntegral"


@dataclass(frozen=True)
class PerturbationSpec:
    """Description of one admissible perturbation.

    The tilt ``lambda_tilt`` enters the measures
    ``exp(-lambda z) z^(-1-alpha) dz`` (derivative) and
    ``exp(-lambda z) z^(alpha-1) / Gamma(alpha) dz`` (integral) and must be
    positive.
    """

    kind: PerturbationKind
    alpha: float = 0.5
    lambda_tilt: float = 1.0
    shift_z: float = 0.0
    coordinate: int = 0
    tail_cut: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", PerturbationKind(self.kind))
        if self.kind in (PerturbationKind.MARCHAUD, PerturbationKind.FRACTIONAL_INTEGRAL):
            if not (0.0 < self.alpha < 1.0):
                raise InvalidOrder(f"alpha must lie in (0, 1), got {self.alpha}")
            if not self.lambda_tilt > 0:
                raise InvalidParams("lambda_tilt must be positive (untilted measures are not supported)")
        if self.shift_z < 0:
            raise InvalidParams("shift_z must be >= 0")

    @property
    def z_max(self):
        return self.tail_cut if self.tail_cut is not None else 37.0 / self.lambda_tilt

    def to_dict(self):
        d = asdict(self)
        d["kind"] = self.kind.value
        return d

    @classmethod
    def from_dict(cls, d):
        extra = set(d) - set(cls.__dataclass_fields__)
        if extra:
            raise InvalidParams(f"unknown perturbation fields: {sorted(extra)}")
        try:
            return cls(**d)
        except (TypeError, ValueError) as exc:
            raise InvalidParams(str(exc)) from exc


# ----------------------------------------------------------------------
# the limit constant


def _c_alpha_split(rho, alpha, split):
    def near(u):
        if u == 0.0:
            return rho
        return math.expm1(rho * math.log1p(u)) / u

    def far(s):
        # u = split / s maps (split, inf) onto (0, 1]
        if s == 0.0:
            return -(split**-alpha) if rho < 0 else 0.0
        return split**-alpha * math.expm1(rho * math.log1p(split / s))

    a, _ = integrate.quad(near, 0.0, split, weight="alg", wvar=(-alpha, 0.0), epsabs=1e-14, epsrel=1e-13,
                          limit=200)
    b, _ = integrate.quad(far, 0.0, 1.0, weight="alg", wvar=(alpha - 1.0, 0.0), epsabs=1e-14, epsrel=1e-13,
                          limit=200)
    return a + b


def C_alpha(rho: float, alpha: float) -> float:
    """``int_0^inf ((1+u)^rho - 1) u^(-1-alpha) du``.

    Computed with splits at ``u = 1`` and ``u = 1/2``; the two results must
    agree to 1e-8.

    Raises
    ------
    OutOfRegion
        Unless ``max(0, rho) < alpha < 1``.
    """
    if not (max(0.0, rho) < alpha < 1.0):
        raise OutOfRegion(f"need max(0, rho) < alpha < 1, got rho={rho}, alpha={alpha}")
    if rho == 0.0:
        return 0.0
    v1 = _c_alpha_split(rho, alpha, 1.0)
    v2 = _c_alpha_split(rho, alpha, 0.5)
    if abs(v1 - v2) > 1e-8 * max(1.0, abs(v1)):
        raise QuadratureFailure(f"split estimates disagree: {v1!r} vs {v2!r}")
    return v1


# ----------------------------------------------------------------------
# quadrature rules


@lru_cache(maxsize=None)
def _jacobi_01(n, expo):
    """Nodes/weights on [0, 1] for weight ``u^expo``."""
    x, w = roots_jacobi(n, 0.0, expo)
    return 0.5 * (x + 1.0), w * 2.0 ** (-1.0 - expo)


def _far_edges(t0, zmax):
    edges = [t0]
    while edges[-1] < zmax:
        edges.append(min(2.0 * edges[-1], zmax))
    return np.asarray(edges)


def _tail_bound(kernel, t, zmax, tilt, expo):
    """Bound on the discarded mass beyond ``zmax``: increments bounded by
    ``|k(t)| + |k(t+zmax)| (1 + z/zmax)^beta`` (``beta`` the growth bound)."""
    beta = kernel.growth_bound
    kt = abs(float(kernel(t))) + abs(float(kernel(t + zmax)))
    # int_Z^inf (1+z/Z)^beta e^{-lam z} z^expo dz <= 2^beta Z^expo e^{-lam Z} / lam for expo <= 0
    return kt * 2.0**beta * zmax ** min(expo, 0.0) * math.exp(-tilt * zmax) / tilt


def _marchaud_point(kernel, t, alpha, tilt, zmax, n):
    k = kernel.eval
    kt = float(k(t))
    z0 = min(t, zmax)
    # near part: z = z0 u, weight u^{-alpha}; bracket is smooth at u = 0
    u, w = _jacobi_01(n, -alpha)
    z = z0 * u
    br = (k(t + z) - kt) * np.exp(-tilt * z) / u
    near = z0 ** (-alpha) * float(br @ w)
    far = 0.0
    if zmax > z0:
        edges = _far_edges(z0, zmax)

        def f(zz):
            return (k(t + zz) - kt) * np.exp(-tilt * zz) * zz ** (-1.0 - alpha)

        far = float(_quad.panels(f, edges, 24).sum())
    return near, far


def marchaud_values(kernel: KernelSpec, t, alpha: float, lambda_tilt: float = 1.0, z_max: float | None = None,
                    return_report=False):
    """``int_0^inf (k(t+z) - k(t)) exp(-lambda z) z^(-1-alpha) dz`` pointwise.

    The near-zero part ``z in (0, t]`` uses Gauss-Jacobi nodes for the
    weight ``z^(-alpha)`` applied to the increment quotient, so no
    cancellation-prone differencing of tabulated values is involved.
    """
    if not (0.0 < alpha < 1.0):
        raise InvalidOrder("alpha must lie in (0, 1)")
    if alpha <= kernel.growth_bound:
        raise InvalidOrder(f"alpha={alpha} not above the growth bound {kernel.growth_bound}")
    ts = np.atleast_1d(np.asarray(t, dtype=float))
    if np.any(ts <= 0):
        raise InvalidParams("evaluation points must be positive")
    zmax = z_max if z_max is not None else 37.0 / lambda_tilt
    out = np.empty(ts.size)
    worst_near, worst_tail = 0.0, 0.0
    for i, ti in enumerate(ts):
        near, far = _marchaud_point(kernel, ti, alpha, lambda_tilt, zmax, 40)
        near2, _ = _marchaud_point(kernel, ti, alpha, lambda_tilt, min(ti, zmax), 20)
        scale = abs(near) + abs(far) + 1e-300
        dev = abs(near - near2) / scale
        if not np.isfinite(near + far) or dev > 1e-6:
            raise DivergentIntegral(f"near-zero Marchaud estimate unstable at t={ti} (rel. change {dev:.2e})")
        out[i] = near + far
        worst_near = max(worst_near, dev)
        worst_tail = max(worst_tail, _tail_bound(kernel, ti, zmax, lambda_tilt, -1.0 - alpha) / scale)
    val = float(out[0]) if np.ndim(t) == 0 else out.reshape(np.shape(t))
    if return_report:
        return val, {"near_rel_change": worst_near, "tail_bound_rel": worst_tail, "z_max": zmax}
    return val


def perturbation_grid(grid, inner=4, graded=12):
    """Evaluation points for perturbation tables: geometric points below the
    first grid node and ``inner`` sub-points per cell."""
    dt, n = grid.dt, grid.n_steps
    head = dt * np.geomspace(1e-4, 1.0, graded, endpoint=False)
    body = dt * (1.0 + np.arange((n - 1) * inner + 1) / inner)
    return np.concatenate((head, body))


def marchaud_forward(kernel: KernelSpec, spec: PerturbationSpec, grid, return_report=False):
    """Marchaud forward derivative of ``kernel`` as a table-defined kernel.

    Raises
    ------
    InvalidOrder
        If ``alpha`` does not exceed the growth bound of the kernel.
    DivergentIntegral
        If the near-zero part does not converge, or the output is not
        locally square integrable.
    """
    if spec.kind is not PerturbationKind.MARCHAUD:
        raise InvalidParams("spec is not a Marchaud derivative")
    if kernel.index - spec.alpha <= -0.5:
        raise DivergentIntegral("perturbed kernel is not locally square integrable")
    pts = perturbation_grid(grid)
    vals, rep = marchaud_values(kernel, pts, spec.alpha, spec.lambda_tilt, spec.z_max, return_report=True)
    out = KernelSpec.from_table(pts, vals)
    return (out, rep) if return_report else out


def marchaud_exp(kernel: KernelSpec, alpha: float, lambda_tilt: float = 1.0) -> KernelSpec:
    """Closed form for exponential sums: each ``exp(-r t)`` is an eigenfunction
    with eigenvalue ``Gamma(-alpha) ((lambda + r)^alpha - lambda^alpha)``."""
    if kernel.family not in (Family.EXP_SUM, Family.BERNSTEIN):
        raise InvalidParams("closed form needs an exponential-sum kernel")
    if not 0.0 < alpha < 1.0 or lambda_tilt <= 0:
        raise InvalidOrder("need 0 < alpha < 1 and a positive tilt")
    terms = kernel.exp_terms or kernel.bernstein_nodes
    g = gamma_fn(-alpha)
    out = [(w * math.exp(-r * kernel.offset) * g * ((lambda_tilt + r) ** alpha - lambda_tilt**alpha), r)
           for w, r in terms]
    return KernelSpec.exp_sum(out)


def fractional_integral_values(kernel: KernelSpec, t, alpha: float, lambda_tilt: float = 1.0,
                               z_max: float | None = None):
    """``int_0^inf (k(z+t) - k(inf)) exp(-lambda z) z^(alpha-1) / Gamma(alpha) dz``."""
    kinf = kernel.limit_at_infinity()
    if kinf is None:
        raise NoLimitAtInfinity(f"{kernel.family.value} kernel has no finite limit at infinity")
    ts = np.atleast_1d(np.asarray(t, dtype=float))
    zmax = z_max if z_max is not None else 37.0 / lambda_tilt
    out = np.empty(ts.size)
    for i, ti in enumerate(ts):
        z0 = min(ti, zmax) if ti > 0 else min(1.0, zmax)
        u, w = _jacobi_01(40, alpha - 1.0)
        z = z0 * u
        near = z0**alpha * float(((kernel(ti + z) - kinf) * np.exp(-lambda_tilt * z)) @ w)
        f = lambda zz, ti=ti: (kernel(ti + zz) - kinf) * np.exp(-lambda_tilt * zz) * zz ** (alpha - 1.0)
        far = float(_quad.panels(f, _far_edges(z0, zmax), 24).sum()) if zmax > z0 else 0.0
        out[i] = (near + far) / gamma_fn(alpha)
    return float(out[0]) if np.ndim(t) == 0 else out.reshape(np.shape(t))


def fractional_integral_perturb(kernel: KernelSpec, spec: PerturbationSpec, grid, return_report=False):
    """Fractional-integral perturbation as a table-defined kernel."""
    if spec.kind is not PerturbationKind.FRACTIONAL_INTEGRAL:
        raise InvalidParams("spec is not a fractional integral")
    pts = perturbation_grid(grid)
    vals = fractional_integral_values(kernel, pts, spec.alpha, spec.lambda_tilt, spec.z_max)
    kinf = kernel.limit_at_infinity()
    bound = (abs(float(kernel(pts[0]))) + abs(kinf)) * spec.z_max ** (spec.alpha - 1.0) * math.exp(
        -spec.lambda_tilt * spec.z_max) / (spec.lambda_tilt * gamma_fn(spec.alpha))
    out = KernelSpec.from_table(pts, vals)
    return (out, {"tail_bound": bound, "z_max": spec.z_max}) if return_report else out


def shift_perturb(kernel: KernelSpec, z: float) -> KernelSpec:
    """Forward shift ``k(. + z)``; regular at 0 for ``z > 0``."""
    return kernel.shifted(z)


def _derivative_table(kernel, grid):
    pts = perturbation_grid(grid)
    d = 1e-4 * pts
    vals = (kernel(pts + d) - kernel(pts - d)) / (2 * d)
    return KernelSpec.from_table(pts, vals)


def apply_perturbation(kernel: KernelSpec, spec: PerturbationSpec, grid) -> KernelSpec:
    """Dispatch on ``spec.kind``; a nonzero ``shift_z`` is applied first."""
    base = kernel.shifted(spec.shift_z) if spec.shift_z else kernel
    kind = spec.kind
    if kind is PerturbationKind.SHIFT:
        return base
    if kind is PerturbationKind.CONSTANT:
        kinf = kernel.limit_at_infinity()
        if kinf is None or kinf == 0.0:
            raise NoLimitAtInfinity("constant perturbation needs a nonzero limit at infinity")
        return KernelSpec.constant(kinf)
    if kind is PerturbationKind.DERIVATIVE:
        return _derivative_table(base, grid)
    if kind is PerturbationKind.MARCHAUD:
        if base.family in (Family.EXP_SUM, Family.BERNSTEIN):
            return marchaud_exp(base, spec.alpha, spec.lambda_tilt)
        return marchaud_forward(base, spec, grid)
    return fractional_integral_perturb(base, spec, grid)


# ----------------------------------------------------------------------
# exponential span


@dataclass
class SpanProjection:
    residual: float
    coefficients: np.ndarray
    condition: float
    discrete: bool = field(default=False)


def exp_span_project(kernel: KernelSpec, candidate: KernelSpec, T: float = 1.0, grid=None) -> SpanProjection:
    """Relative L2([0, T]) residual of ``candidate`` after projection onto
    ``span{exp(-lambda_j t)}`` for the rates of ``kernel``.

    Table-defined candidates are projected in the discrete inner product on
    their own nodes in ``[0, T]`` (trapezoid weights), so linear
    interpolation between nodes does not pollute the residual.

    Raises
    ------
    IllConditioned
        If the Gram matrix of the exponentials has condition number above 1e12.
    """
    if kernel.family not in (Family.EXP_SUM, Family.BERNSTEIN):
        raise InvalidParams("kernel must be an exponential sum")
    rates = np.array(sorted({r for _, r in (kernel.exp_terms or kernel.bernstein_nodes)}))
    if candidate.family is Family.TABLE:
        g = np.asarray(candidate.table[0])
        g = g[g <= T * (1 + 1e-12)]
        wq = np.zeros(g.size)
        dg = np.diff(g)
        wq[:-1] += 0.5 * dg
        wq[1:] += 0.5 * dg
        E = np.exp(-np.outer(g, rates))
        c = candidate(g)
        G = E.T @ (E * wq[:, None])
        b = E.T @ (c * wq)
        discrete = True
    else:
        rs = np.add.outer(rates, rates)
        G = np.where(rs > 0, -np.expm1(-rs * T) / np.where(rs > 0, rs, 1.0), T)
        x, w = _quad.gauss_legendre(24)
        edges = _quad.geometric_edges(0.0, T, levels=50)[1:]
        pts = (edges[:-1, None] + np.diff(edges)[:, None] * x).ravel()
        wts = (np.diff(edges)[:, None] * w).ravel()
        E = np.exp(-np.outer(pts, rates))
        c = candidate(pts)
        b = E.T @ (c * wts)
        g, wq = pts, wts
        discrete = False
    cond = np.linalg.cond(G)
    if cond > 1e12:
        raise IllConditioned(f"exponential Gram condition number {cond:.2e}")
    coef = np.linalg.solve(G, b)
    r = c - E @ coef
    num = math.sqrt(float(np.sum(wq * r * r)))
    den = math.sqrt(float(np.sum(wq * c * c)))
    return SpanProjection(residual=num / den if den > 0 else 0.0, coefficients=coef, condition=float(cond),
                          discrete=discrete)
