"""Gram matrices of kernel systems and nondegeneracy exponents.

``G(h) = int_0^h K(r) K(r)^T dr`` for an ``N x d`` matrix kernel ``K``. The
exponent ``gamma*`` is estimated from the log-log slope of the smallest
eigenvalue: ``lambda_min(G(h)) ~ h^(2 gamma*)``. A finite scan cannot certify
a liminf statement, so every report is labeled ``"estimated"``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gamma as gamma_fn

from . import _quad
from .errors import DegenerateSystem, InvalidParams, QuadratureFailure
from .kernels import Family, KernelSpec, MatrixKernelSpec

__all__ = [
    "GramScanReport",
    "BalanceParams",
    "BalanceReport",
    "product_integral",
    "gram_matrix",
    "jacobi_eigenvalues",
    "nondegeneracy_scan",
    "affine_Mz_scan",
    "balance_check",
]

MAX_DIM = 64
DEFAULT_WINDOW = (1e-6, 1e-2)


def _exp_terms(k: KernelSpec):
    """Exponential terms of ``k`` (with its offset folded in), or None."""
    if k.family is Family.CONSTANT:
        return [(k.scale, 0.0)]
    if k.family in (Family.EXP_SUM, Family.BERNSTEIN):
        terms = k.exp_terms or k.bernstein_nodes
        return [(w * math.exp(-r * k.offset), r) for w, r in terms]
    if k.family in (Family.MITTAG_LEFFLER, Family.GAMMA, Family.FRACTIONAL) and k.hurst == 0.5:
        if k.family is Family.FRACTIONAL:
            return [(k.scale, 0.0)]
        return [(k.scale * math.exp(-k.damping * k.offset), k.damping)]
    return None


def product_integral(k1: KernelSpec, k2: KernelSpec, h: float) -> float:
    """``int_0^h k1(r) k2(r) dr``.

    Pure power and exponential pairs use closed forms; other pairs use a
    graded Gauss-Legendre rule.
    """
    if h <= 0:
        raise InvalidParams("h must be positive")
    if k1 == k2:
        return float(k1.cumulative(h, power=2))
    if k1.family is Family.FRACTIONAL and k2.family is Family.FRACTIONAL and k1.offset == k2.offset == 0.0:
        s = k1.hurst + k2.hurst
        return k1.scale * k2.scale * h**s / (s * gamma_fn(k1.hurst + 0.5) * gamma_fn(k2.hurst + 0.5))
    e1, e2 = _exp_terms(k1), _exp_terms(k2)
    if e1 is not None and e2 is not None:
        total = 0.0
        for w1, r1 in e1:
            for w2, r2 in e2:
                r = r1 + r2
                total += w1 * w2 * (-math.expm1(-r * h) / r if r > 0 else h)
        return total

    def f(t):
        return k1(t) * k2(t)

    breaks = [np.asarray(k.table[0]) - k.offset for k in (k1, k2) if k.family is Family.TABLE]
    return _quad.integrate_checked(f, 0.0, h, breaks=np.concatenate(breaks) if breaks else ())


def gram_matrix(kernels: MatrixKernelSpec, h: float) -> np.ndarray:
    """``G_{ll'}(h) = sum_i int_0^h K_{li} K_{l'i}``; symmetric by construction."""
    n, d = kernels.dims
    if n > MAX_DIM:
        raise InvalidParams(f"at most {MAX_DIM} rows supported")
    G = np.zeros((n, n))
    for l in range(n):
        for lp in range(l, n):
            acc = 0.0
            for i, kl in kernels.rows[l]:
                klp = kernels.entry(lp, i)
                if klp is not None:
                    acc += product_integral(kl, klp, h)
            G[l, lp] = G[lp, l] = acc
    return G


def jacobi_eigenvalues(A, tol=1e-15, max_sweeps=60):
    """Eigenvalues of a small symmetric matrix by cyclic Jacobi rotations.

    Rotations stop once ``|a_pq| <= tol sqrt(|a_pp a_qq|)`` for all pairs, the
    relative criterion that keeps tiny eigenvalues of graded positive
    definite matrices accurate.
    """
    A = np.array(A, dtype=float)
    n = A.shape[0]
    if A.shape != (n, n) or not np.allclose(A, A.T, rtol=1e-12, atol=0):
        raise InvalidParams("matrix must be square and symmetric")
    for _ in range(max_sweeps):
        rotated = False
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = A[p, q]
                if abs(apq) <= tol * math.sqrt(abs(A[p, p] * A[q, q])) or apq == 0.0:
                    continue
                rotated = True
                theta = (A[q, q] - A[p, p]) / (2.0 * apq)
                t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(theta * theta + 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                app, aqq = A[p, p], A[q, q]
                rp, rq = A[p, :].copy(), A[q, :].copy()
                A[p, :] = c * rp - s * rq
                A[q, :] = s * rp + c * rq
                A[:, p], A[:, q] = A[p, :], A[q, :]
                A[p, p] = app - t * apq
                A[q, q] = aqq + t * apq
                A[p, q] = A[q, p] = 0.0
        if not rotated:
            break
    return np.sort(np.diag(A))


def _eigenvalues(G):
    if G.shape[0] <= 16:
        return jacobi_eigenvalues(G)
    return np.linalg.eigvalsh(G)


@dataclass
class GramScanReport:
    """Samples of ``lambda_min(G(h))`` and the fitted exponent."""

    h_values: np.ndarray
    lambda_min: np.ndarray
    lambda_max: np.ndarray
    fitted_gamma_star: float
    fit_r2: float
    intercept: float
    fit_window: tuple
    corrected: np.ndarray | None = None
    blocks: dict = field(default_factory=dict)
    label: str = "estimated"
    condition_9: bool | None = None
    condition_margin: float | None = None

    def to_dict(self):
        out = {
            "label": self.label,
            "gamma_star": self.fitted_gamma_star,
            "r2": self.fit_r2,
            "intercept": self.intercept,
            "fit_window": list(self.fit_window),
            "blocks": {str(k): {"gamma_star": v.fitted_gamma_star, "r2": v.fit_r2} for k, v in self.blocks.items()},
        }
        if self.condition_9 is not None:
            out["condition_9"] = self.condition_9
            out["condition_margin"] = self.condition_margin
        return out


def _fit(h, lam, window):
    lo, hi = window
    m = (h >= lo * (1 - 1e-12)) & (h <= hi * (1 + 1e-12)) & (lam > 0)
    if m.sum() < 3:
        raise InvalidParams("fewer than 3 scan points inside the fit window")
    x, y = np.log(h[m]), np.log(lam[m])
    slope, icpt = np.polyfit(x, y, 1)
    resid = y - (slope * x + icpt)
    r2 = 1.0 - resid.var() / y.var() if y.var() > 0 else 1.0
    return 0.5 * float(slope), float(r2), float(icpt)


def _log_modulation(kernels, h):
    """``min_l |l_row(h)|`` for the log family; rows without it contribute 1."""
    vals = []
    for row in kernels.rows:
        for _, k in row:
            if k.family is Family.PARAMETRIC and k.log_exponent != 0.0:
                vals.append(abs(math.log1p((h + k.shifts[2] + k.offset) ** k.log_exponent)))
            else:
                vals.append(1.0)
    return min(vals)


def _scan(kernels, h, window, check_degenerate=True):
    lmin, lmax = np.empty(h.size), np.empty(h.size)
    for i, hi in enumerate(h):
        ev = _eigenvalues(gram_matrix(kernels, hi))
        lmin[i], lmax[i] = ev[0], ev[-1]
    if check_degenerate:
        j = int(np.argmax(h))
        if lmin[j] < 1e-14 * lmax[j]:
            raise DegenerateSystem(
                f"lambda_min={lmin[j]:.3e} below 1e-14 lambda_max at h={h[j]:.3e}: rows linearly dependent")
    g, r2, icpt = _fit(h, lmin, window)
    corr = np.array([lm / _log_modulation(kernels, hi) ** 2 for lm, hi in zip(lmin, h)])
    return GramScanReport(h_values=h, lambda_min=lmin, lambda_max=lmax, fitted_gamma_star=g, fit_r2=r2,
                          intercept=icpt, fit_window=tuple(window), corrected=corr)


def nondegeneracy_scan(kernels: MatrixKernelSpec, h_list=None, fit_window=DEFAULT_WINDOW) -> GramScanReport:
    """Estimate ``gamma*`` from ``lambda_min(G(h))`` over ``h_list``.

    Parameters
    ----------
    kernels : MatrixKernelSpec
    h_list : array_like, optional
        Defaults to 25 log-spaced points on the fit window.
    fit_window : tuple
        Only points inside ``[lo, hi]`` enter the slope fit.

    Raises
    ------
    DegenerateSystem
        If the rows are numerically linearly dependent.
    """
    if h_list is None:
        h_list = np.logspace(math.log10(fit_window[1]), math.log10(fit_window[0]), 25)
    h = np.asarray(h_list, dtype=float)
    if np.any(h <= 0):
        raise InvalidParams("h values must be positive")
    rep = _scan(kernels, h, fit_window)
    if kernels.is_diagonal_like and len(kernels.partition()) > 1:
        for i, rows in kernels.partition().items():
            sub = MatrixKernelSpec(tuple(((0, kernels.rows[l][0][1]),) for l in rows), (len(rows), 1))
            rep.blocks[i] = _scan(sub, h, fit_window, check_degenerate=False)
    return rep


def affine_Mz_scan(kernel: KernelSpec, kz, h_list=None, gamma=None, chi_sigma=0.5,
                   fit_window=DEFAULT_WINDOW) -> GramScanReport:
    """Scan ``M_z(h)``, the Gram matrix of the pair ``(K, K_z)``.

    ``kz`` is a :class:`~volterra_markov.resolvents.PiTable` with ``Kz``
    filled. When ``gamma`` is given the report carries
    ``gamma* < min(gamma, 1/2) + chi_sigma * gamma`` (``chi_sigma = 1/2`` for
    square-root diffusions).
    """
    if kz.Kz is None:
        raise InvalidParams("PiTable has no K_z values")
    ktab = KernelSpec.from_table(kz.Kz_times, kz.Kz)
    if h_list is None:
        h_list = np.logspace(math.log10(fit_window[1]), math.log10(fit_window[0]), 25)
    h = np.asarray(h_list, dtype=float)
    if h.max() > kz.Kz_times[-1]:
        raise InvalidParams("K_z table does not cover the h range")
    mk = MatrixKernelSpec.column([kernel, ktab])
    rep = _scan(mk, h, fit_window)
    if gamma is not None:
        bound = min(gamma, 0.5) + chi_sigma * gamma
        rep.condition_margin = bound - rep.fitted_gamma_star
        rep.condition_9 = bool(rep.condition_margin > 0)
    return rep


@dataclass
class BalanceParams:
    """Inputs of :func:`balance_check`; unset inequalities are skipped.

    ``gamma_star``, ``gamma_b`` and ``gamma_sigma`` may be sequences in
    diagonal mode.
    """

    gamma_star: object = None
    gamma_b: object = None
    gamma_sigma: object = None
    gamma_K: float | None = None
    chi_b: float = 1.0
    chi_sigma: float = 0.5
    diagonal: bool = False
    H_b: float | None = None
    H_sigma: float | None = None
    gamma: float | None = None

    @classmethod
    def from_dict(cls, d):
        extra = set(d) - set(cls.__dataclass_fields__)
        if extra:
            raise InvalidParams(f"unknown balance fields: {sorted(extra)}")
        return cls(**d)


@dataclass
class BalanceReport:
    verdict: bool
    checks: dict
    margins: dict

    def to_dict(self):
        return {"verdict": "pass" if self.verdict else "fail", "checks": self.checks, "margins": self.margins}


def _vec(x, n):
    a = np.atleast_1d(np.asarray(x, dtype=float))
    return np.broadcast_to(a, (n,)) if a.size == 1 else a


def balance_check(params: BalanceParams) -> BalanceReport:
    """Evaluate the regularity balance inequalities that have inputs.

    * ``h_condition``: ``gamma* < min(gamma_b + 1/2 + chi_b gamma_K, gamma_sigma + chi_sigma gamma_K)``,
      coordinatewise in diagonal mode.
    * ``hurst_balance``: ``max(H_b, H_sigma) < 1/2 + chi min(H_b, H_sigma)`` with
      ``chi = chi_sigma`` if ``H_sigma < H_b`` else ``min(chi_sigma, (1 + chi_b)/2)``.
    * ``affine_condition``: ``gamma* < min(gamma, 1/2) + chi_sigma gamma``.

    Margins are signed: positive means the inequality holds.
    """
    p = params
    if p.chi_sigma is None or p.chi_sigma <= 0:
        raise InvalidParams("chi_sigma must be positive")
    checks, margins = {}, {}
    have_h = None not in (p.gamma_star, p.gamma_b, p.gamma_sigma, p.gamma_K)
    if have_h:
        n = max(np.size(p.gamma_star), np.size(p.gamma_b), np.size(p.gamma_sigma)) if p.diagonal else 1
        gs, gb, gsig = (_vec(x, n) for x in (p.gamma_star, p.gamma_b, p.gamma_sigma))
        if not p.diagonal and n == 1 and max(gs.size, gb.size, gsig.size) > 1:
            raise InvalidParams("vector exponents need diagonal mode")
        bound = np.minimum(gb + 0.5 + p.chi_b * p.gamma_K, gsig + p.chi_sigma * p.gamma_K)
        m = bound - gs
        margins["h_condition"] = m.tolist() if p.diagonal else float(m[0])
        checks["h_condition"] = bool(np.all(m > 0))
    if p.H_b is not None and p.H_sigma is not None:
        chi = p.chi_sigma if p.H_sigma < p.H_b else min(p.chi_sigma, 0.5 * (1.0 + p.chi_b))
        m = 0.5 + chi * min(p.H_b, p.H_sigma) - max(p.H_b, p.H_sigma)
        margins["hurst_balance"] = float(m)
        checks["hurst_balance"] = bool(m > 0)
    if p.gamma is not None and p.gamma_star is not None and not p.diagonal:
        m = min(p.gamma, 0.5) + p.chi_sigma * p.gamma - float(np.asarray(p.gamma_star))
        margins["affine_condition"] = float(m)
        checks["affine_condition"] = bool(m > 0)
    if not checks:
        raise InvalidParams("no inequality has all of its inputs")
    for v in (p.gamma_star, p.gamma_b, p.gamma_sigma, p.gamma_K, p.H_b, p.H_sigma, p.gamma):
        if v is not None and (np.any(~np.isfinite(np.asarray(v, float))) or np.any(np.asarray(v, float) < 0)):
            raise InvalidParams("balance parameters must be finite and nonnegative")
    return BalanceReport(verdict=all(checks.values()), checks=checks, margins=margins)
