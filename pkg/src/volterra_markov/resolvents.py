"""Discrete resolvent calculus on a uniform grid.

Conventions
-----------
Cell ``m`` (``m >= 1``) is ``((m-1) dt, m dt]`` and ``k_m`` is the cell average
of the kernel over it. The resolvent of the first kind ``L`` is stored as
cell masses ``lam_j`` on ``[j dt, (j+1) dt)``; ``lam_0`` includes the atom
``K(0)^{-1}``. The masses solve ``sum_{j<i} k_{i-j} lam_j = 1`` for every
``i >= 1``, which is the left-point discretization used by the simulator, so
the conditional-mean coefficients below are exact for the simulated scheme.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import fftconvolve

from .errors import BoundViolation, GridMismatch, InconsistentRoutes, InvalidParams, SingularSystem
from .kernels import KernelSpec

__all__ = [
    "TimeGrid",
    "ResolventTables",
    "PiTable",
    "CondExpCoefficients",
    "resolvent_first_kind",
    "resolvent_EK",
    "pi_z",
    "kz_kernel",
    "cond_exp_coeffs",
]


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid ``t_i = i dt``, ``i = 0..n_steps``."""

    dt: float
    n_steps: int

    def __post_init__(self):
        if not (self.dt > 0 and np.isfinite(self.dt)):
            raise InvalidParams("dt must be positive")
        if int(self.n_steps) != self.n_steps or self.n_steps < 1:
            raise InvalidParams("n_steps must be a positive integer")
        object.__setattr__(self, "n_steps", int(self.n_steps))

    @classmethod
    def from_horizon(cls, horizon, dt):
        n = horizon / dt
        if abs(n - round(n)) > 1e-9 * max(1.0, n):
            raise GridMismatch("horizon is not a multiple of dt")
        return cls(dt, int(round(n)))

    @property
    def horizon(self):
        return self.n_steps * self.dt

    @property
    def nodes(self):
        return np.arange(self.n_steps + 1) * self.dt

    def index(self, t):
        """Index of grid node ``t``; raises :class:`GridMismatch` otherwise."""
        i = t / self.dt
        j = int(round(i))
        if abs(i - j) > 1e-9 * max(1.0, abs(i)) or j < 0 or j > self.n_steps:
            raise GridMismatch(f"t={t} is not a node of the grid")
        return j

    def cell_averages(self, kernel: KernelSpec, power=1):
        """``k_m`` for ``m = 0..n_steps`` with ``k_0 = 0``."""
        m = np.arange(self.n_steps + 1, dtype=float)
        cum = kernel.cumulative(m * self.dt, power)
        out = np.zeros(self.n_steps + 1)
        out[1:] = np.diff(cum) / self.dt
        return out


def _causal_conv(a, b, n):
    """First ``n`` entries of the full discrete convolution of ``a`` and ``b``."""
    if min(a.size, b.size) < 64:
        return np.convolve(a, b)[:n]
    return fftconvolve(a, b)[:n]


@dataclass
class ResolventTables:
    """Grid tables of ``L`` and ``E_K``.

    Attributes
    ----------
    atom : float
        ``K(0)^{-1}``, zero for singular kernels.
    lam : ndarray
        Cell masses of ``L`` on ``[j dt, (j+1) dt)``; ``lam[0]`` includes the atom.
    L0 : ndarray
        Density values ``(lam_j - atom [j=0]) / dt`` per cell.
    EK : ndarray or None
        Cell averages of ``E_K`` on cells ``1..n`` (index 0 unused, zero).
    residual : float
        ``max |(K*L) - 1|`` at cell midpoints with ``t >= horizon/64``.
    residual_all : float
        Same maximum over every midpoint of the grid.
    """

    kernel: KernelSpec
    grid: TimeGrid
    atom: float
    k: np.ndarray
    lam: np.ndarray
    L0: np.ndarray
    residual: float
    residual_all: float
    beta: float = 0.0
    EK: np.ndarray | None = None
    residual_profile: np.ndarray = field(default=None, repr=False)

    def with_EK(self, beta):
        return resolvent_EK(self.kernel, beta, self.grid, tables=self)

    def EK_at(self, t):
        """Point value of ``E_K`` by linear interpolation of cell averages at midpoints."""
        if self.EK is None:
            raise InvalidParams("E_K not computed")
        if self.beta == 0.0:
            return float(self.kernel(t))
        mids = (np.arange(1, self.grid.n_steps + 1) - 0.5) * self.grid.dt
        return float(np.interp(t, mids, self.EK[1:]))


def _identity_residual(kernel, grid, lam, atom):
    """``(K*L)(t) - 1`` at cell midpoints with exact kernel cell integrals."""
    n, dt = grid.n_steps, grid.dt
    # I_m = int_{(m-1/2) dt}^{(m+1/2) dt} K for m >= 1, I_0 = int_0^{dt/2} K
    half = (np.arange(n + 1) + 0.5) * dt
    cum = kernel.cumulative(np.concatenate(([0.0], half)))
    I = np.diff(cum)
    dens = lam.copy()
    dens[0] -= atom
    dens /= dt
    conv = _causal_conv(I, dens, n)
    mids = half[:n]
    atom_part = atom * kernel(mids) if atom else 0.0
    return conv + atom_part - 1.0


def resolvent_first_kind(kernel: KernelSpec, grid: TimeGrid) -> ResolventTables:
    """Resolvent of the first kind ``L = K(0)^{-1} delta + L0``.

    Solves the lower-triangular Toeplitz system ``sum_{j<i} k_{i-j} lam_j = 1``
    by forward substitution and reports the midpoint residual of ``K*L = 1``
    computed with exact kernel integrals.
    """
    n, dt = grid.n_steps, grid.dt
    k = grid.cell_averages(kernel)
    if not np.isfinite(k[1]) or k[1] == 0.0:
        raise SingularSystem("leading kernel cell integral vanishes")
    lam = np.empty(n)
    lam[0] = 1.0 / k[1]
    rev = k[::-1]  # rev[n - m] = k[m]
    for i in range(2, n + 1):
        # sum_{j=0}^{i-2} k[i-j] lam_j
        s = rev[n - i: n - 1] @ lam[: i - 1]
        lam[i - 1] = (1.0 - s) / k[1]
    k0 = kernel.value_at_zero()
    atom = 0.0 if not math.isfinite(k0) or k0 == 0.0 else 1.0 / k0
    L0 = lam / dt
    L0[0] = (lam[0] - atom) / dt
    res = _identity_residual(kernel, grid, lam, atom)
    start = max(int(math.ceil(n / 64)) - 1, 0)
    return ResolventTables(
        kernel=kernel, grid=grid, atom=atom, k=k, lam=lam, L0=L0,
        residual=float(np.max(np.abs(res[start:]))),
        residual_all=float(np.max(np.abs(res))),
        residual_profile=res,
    )


def resolvent_EK(kernel: KernelSpec, beta: float, grid: TimeGrid, tables: ResolventTables | None = None):
    """Cell averages of ``E_K = K + beta K * E_K``.

    Forward substitution ``E_m = k_m + beta dt sum_{1<=j<m} k_{m-j} E_j``; for
    ``beta = 0`` this returns the kernel cell averages exactly.
    """
    if tables is None:
        tables = resolvent_first_kind(kernel, grid)
    n, dt = grid.n_steps, grid.dt
    k = tables.k
    E = k.copy()
    if beta != 0.0:
        E[0] = 0.0
        rev = k[::-1]
        for m in range(2, n + 1):
            # sum_{j=1}^{m-1} k_{m-j} E_j
            E[m] = k[m] + beta * dt * (rev[n - m + 1: n] @ E[1:m])
    out = ResolventTables(**{**tables.__dict__})
    out.beta = float(beta)
    out.EK = E
    return out


@dataclass
class PiTable:
    """``Pi_z`` on the grid together with cell masses and ``K_z``.

    ``Pi[s]`` is ``Pi_z(t_s)``. ``dPi[s]`` for ``s >= 1`` is the mass on
    cell ``s`` and multiplies ``X_{t-s dt}`` in the conditional mean; ``dPi[0]``
    is the lag-zero mass beyond the atom term ``atom * E_K(z)``.
    """

    z: float
    q: int
    Pi: np.ndarray
    dPi: np.ndarray
    route_discrepancy: float
    Kz: np.ndarray | None = None
    Kz_times: np.ndarray | None = None
    bound_f: float | None = None
    bound_ratio_range: tuple | None = None
    EK_z: float = 0.0
    c2_total: float = 0.0


def pi_z(tables: ResolventTables, z: float, grid: TimeGrid | None = None, tol: float | None = None) -> PiTable:
    """``Pi_z(t) = -int_0^z E_K(r) L0(t+z-r) dr`` on the grid.

    Two routes are computed: the integral route (a correlation of ``E_K``
    with the ``L`` masses) and the convolution route
    ``(Delta_z E_K * L)(t) - (E_K * L)(t+z)``. Cell masses come from the
    differenced form, which only involves differences of ``L0``.
    """
    grid = grid or tables.grid
    if grid != tables.grid:
        raise GridMismatch("tables were built on a different grid")
    if tables.EK is None:
        raise InvalidParams("E_K missing; call resolvent_EK first")
    q = grid.index(z)
    if q < 1:
        raise InvalidParams("z must be a positive grid multiple")
    n = grid.n_steps
    ns = n - q  # s = 0..ns-1 available
    if ns < 1:
        raise GridMismatch("grid does not cover horizon + z")
    E, lam = tables.EK, tables.lam
    Eq = E[1: q + 1]
    # integral route: Pi_s = -sum_{m=1}^{q} E_m lam_{s+q+1-m}
    corr = _causal_conv(Eq, lam, n)  # corr[i] = sum_m E_{m} lam_{i-m+1}
    Pi = -corr[q: q + ns]
    # differenced form on the mass increments of L
    dlam = np.diff(lam)
    dcorr = _causal_conv(Eq, np.concatenate(([0.0], dlam)), n)
    dPi = np.empty(ns)
    dPi[1:] = -dcorr[q + 1: q + ns]
    # convolution route
    full = _causal_conv(E, lam, n + 1)  # (E*lam)_i = sum_j E_{i-j} lam_j
    shifted = _causal_conv(E[q + 1:], lam, ns)  # sum_{j<=s} E_{s+q+1-j} lam_j
    conv_route = shifted[:ns] - full[q + 1: q + 1 + ns]
    disc = float(np.max(np.abs(conv_route - Pi)))
    scale = max(1.0, float(np.max(np.abs(Pi))))
    if tol is None:
        tol = max(10.0 * tables.residual, 1e-9) * scale
    if disc > tol:
        raise InconsistentRoutes(f"Pi_z routes disagree by {disc:.3e} (tol {tol:.3e})")
    EKz = tables.EK_at(z)
    c2_total = float(E[q + 1] * lam[0]) if q + 1 <= n else float("nan")
    dPi[0] = c2_total - tables.atom * EKz
    return PiTable(z=float(z), q=q, Pi=Pi, dPi=dPi, route_discrepancy=disc, EK_z=EKz, c2_total=c2_total)


def kz_kernel(tables: ResolventTables, pi: PiTable, grid: TimeGrid | None = None,
              slack: float = 1e-2, t_range: tuple | None = None, check: bool = True) -> PiTable:
    """``K_z = K * dPi_z`` on cells, with the two-sided bound check.

    ``Kz[i-1]`` is the value on cell ``i`` and is reported at its midpoint.
    The ratio ``K_z(t) / (K(t+z) - K(z) K(0)^{-1} K(t))`` is checked against
    ``[1 - f(z), 1 + f(z)]`` with ``f(z) = |beta| sup_{u<=z} |(K*E_K)(u)| / K(z)``.
    """
    grid = grid or tables.grid
    ns = pi.dPi.size
    dt, q = grid.dt, pi.q
    k = tables.k
    Kz = _causal_conv(k[1: ns + 1], pi.dPi, ns)  # cell i: sum_{s=0}^{i-1} k_{i-s} dPi_s
    times = (np.arange(1, ns + 1) - 0.5) * dt
    kern = tables.kernel
    beta = tables.beta
    E = tables.EK
    kz_val = float(kern(pi.z))
    # (K*E_K)(u) on cells up to z
    KE = (E[1: q + 1] - k[1: q + 1]) / beta if beta != 0.0 else np.zeros(q)
    f = abs(beta) * float(np.max(np.abs(KE))) / kz_val if beta != 0.0 else 0.0
    denom = kern(times + pi.z) - kz_val * tables.atom * kern(times)
    out = PiTable(**{**pi.__dict__})
    out.Kz, out.Kz_times, out.bound_f = Kz, times, f
    lo, hi = t_range or (dt, (ns - 0.5) * dt)
    floor = 1e-9 * np.abs(kern(times + pi.z))
    mask = (times >= lo - 0.5 * dt) & (times <= hi) & (denom > floor)
    if np.any(mask):
        ratio = Kz[mask] / denom[mask]
        out.bound_ratio_range = (float(ratio.min()), float(ratio.max()))
        if check and (ratio.min() < 1 - f - slack or ratio.max() > 1 + f + slack):
            raise BoundViolation(
                f"K_z ratio range [{ratio.min():.4g}, {ratio.max():.4g}] outside 1 -/+ {f:.4g} (slack {slack})")
    return out


@dataclass
class CondExpCoefficients:
    """Coefficients of ``E[X_T | F_t]`` for the affine Volterra model.

    ``value = c0 + c1_x0 + c2 X_t + sum_{s=0}^{n} dPi[s] X_{t - s dt}``.
    """

    t: float
    T: float
    c0: float
    c1_x0: float
    c2: float
    dPi: np.ndarray

    def evaluate(self, history):
        """Evaluate on path histories ``X_{t_0..t_n}`` (last axis is time)."""
        h = np.asarray(history, dtype=float)
        n = self.dPi.size - 1
        if h.shape[-1] != n + 1:
            raise GridMismatch("history length does not match t")
        past = h[..., ::-1] @ self.dPi
        return self.c0 + self.c1_x0 + self.c2 * h[..., -1] + past


def cond_exp_coeffs(tables: ResolventTables, pi: PiTable, t: float, T: float, b: float, x0: float):
    """Coefficients of the conditional-mean formula at ``(t, T)``."""
    grid = tables.grid
    n, N = grid.index(t), grid.index(T)
    if not 0 <= n < N:
        raise InvalidParams("need 0 <= t < T")
    q = N - n
    if q != pi.q:
        raise GridMismatch("T - t does not match pi.z")
    if n >= pi.Pi.size:
        raise GridMismatch("Pi table does not cover t")
    E = tables.EK
    c0 = b * grid.dt * float(E[1: q + 1].sum())
    c1 = -float(pi.Pi[n]) * x0
    c2 = tables.atom * pi.EK_z
    return CondExpCoefficients(t=t, T=T, c0=c0, c1_x0=c1, c2=c2, dPi=pi.dPi[: n + 1].copy())


def mean_curve(tables: ResolventTables, b: float, x0: float):
    """``m(t_n) = x0 + (b + beta x0) dt sum_{m<=n} E_m`` on the grid."""
    E = tables.EK
    return x0 + (b + tables.beta * x0) * tables.grid.dt * np.concatenate(([0.0], np.cumsum(E[1:])))
