"""Statistical checks of path dependence.

Two questions are asked of a simulated ensemble:

* does the closed-form conditional mean of the affine model agree with
  nested Monte Carlo continuations, and
* is a perturbation process ``Z_t`` a function of ``X_t`` alone?

The second is measured by the within-bin variance ratio
``R = E[Var(Z | bin(X_t))] / Var(Z)`` on equal-count bins. ``R`` is a
calibrated heuristic, not a test statistic with known size.
"""

from __future__ import annotations

import enum
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtri

from .errors import EmptyBin, InvalidParams
from .resolvents import CondExpCoefficients, PiTable, ResolventTables, TimeGrid, cond_exp_coeffs, pi_z, resolvent_EK
from .sim import AffineDrift, HestonDiffusion, ModelSpec, SqrtDiffusion, branch_paths, simulate_sve

__all__ = [
    "Verdict",
    "MarkovTestReport",
    "ConditionalMeanCheck",
    "GammaMass",
    "EPS_MARKOV",
    "MIN_PER_BIN",
    "within_bin_ratio",
    "conditional_mean_check",
    "sigma_measurability_test",
    "gamma_sigma_mass",
]

EPS_MARKOV = 0.02
MIN_PER_BIN = 50
STABLE_RATIO = 0.75  # R(2n)/R(n) above this counts as stable under refinement


class Verdict(str, enum.Enum):
    MARKOV_CONSISTENT = "MarkovConsistent"
    PATH_DEPENDENT = "PathDependent"
    INCONCLUSIVE = "Inconclusive"


# ----------------------------------------------------------------------
# binning


def _bin_index(x, n_bins):
    """Equal-count bins on the rows of ``x`` (shape ``(n,)`` or ``(n, k)``, ``k <= 3``).

    Edges are sample values, so the assignment is invariant under strictly
    increasing maps of each coordinate. Repeated edges (atoms) are merged.
    """
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    k = x.shape[1]
    if k > 3:
        raise InvalidParams("joint binning supports at most 3 coordinates")
    per = max(1, int(round(n_bins ** (1.0 / k))))
    idx = np.zeros(x.shape[0], dtype=np.int64)
    merged = False
    for c in range(k):
        q = np.arange(1, per) / per
        edges = np.quantile(x[:, c], q, method="inverted_cdf") if per > 1 else np.empty(0)
        uniq = np.unique(edges)
        merged |= uniq.size < edges.size
        idx = idx * per + np.searchsorted(uniq, x[:, c], side="right")
    if merged:
        warnings.warn("atoms in X_t: some quantile bins were merged", RuntimeWarning, stacklevel=3)
    _, idx = np.unique(idx, return_inverse=True)
    return idx


def within_bin_ratio(x, z, n_bins):
    """``sum_b n_b Var(z | b) / (n Var(z))`` with population variances, in ``[0, 1]``."""
    z = np.asarray(z, dtype=float)
    idx = _bin_index(x, n_bins)
    nb = idx.max() + 1
    cnt = np.bincount(idx, minlength=nb)
    s1 = np.bincount(idx, z, minlength=nb)
    s2 = np.bincount(idx, z * z, minlength=nb)
    within = float(np.sum(s2 - s1**2 / cnt))
    total = float(np.sum((z - z.mean()) ** 2))
    if total <= 0.0:
        return 0.0, idx
    return min(1.0, max(0.0, within / total)), idx


# ----------------------------------------------------------------------
# Gamma_sigma mass


def _wilson(k, n, level):
    if n == 0:
        return 0.0, 1.0
    zq = ndtri(0.5 + 0.5 * level)
    p = k / n
    den = 1.0 + zq**2 / n
    mid = (p + zq**2 / (2 * n)) / den
    half = zq * math.sqrt(p * (1 - p) / n + zq**2 / (4 * n * n)) / den
    lo = 0.0 if k == 0 else max(0.0, mid - half)
    hi = 1.0 if k == n else min(1.0, mid + half)
    return lo, hi


@dataclass
class GammaMass:
    """Fraction of paths where ``sigma sigma^T`` is invertible at ``t``."""

    t: float
    mass: float
    ci: tuple
    n_paths: int
    paley_zygmund: float | None = None

    def to_dict(self):
        return {"t": self.t, "mass": self.mass, "ci": list(self.ci), "n_paths": self.n_paths,
                "paley_zygmund": self.paley_zygmund}


def gamma_sigma_mass(ens, t: float, level: float = 0.95) -> GammaMass:
    """Estimate ``P[X_t in Gamma_sigma]`` with a Wilson interval.

    For square-root diffusions the Paley-Zygmund bound
    ``E[V]^2 / E[V^2] <= P[V > 0]`` on the variance coordinate is reported too.
    """
    n = ens.grid.index(t)
    x = ens.X[:, n, :]
    sig = np.asarray(ens.model.diffusion(n * ens.grid.dt, x))
    gram = sig @ np.swapaxes(sig, 1, 2)
    det = np.linalg.det(gram)
    thr = max(np.finfo(float).tiny, np.finfo(float).eps * float(np.max(np.abs(det), initial=0.0)))
    k = int(np.sum(np.abs(det) > thr)) if np.any(det != 0) else 0
    P = x.shape[0]
    pz = None
    diff = ens.model.diffusion
    if isinstance(diff, (SqrtDiffusion, HestonDiffusion)):
        v = x[:, -1]
        m2 = float(np.mean(v * v))
        pz = float(np.mean(v) ** 2 / m2) if m2 > 0 else 0.0
    return GammaMass(t=n * ens.grid.dt, mass=k / P, ci=_wilson(k, P, level), n_paths=P, paley_zygmund=pz)


# ----------------------------------------------------------------------
# conditional mean


@dataclass
class ConditionalMeanCheck:
    t: float
    T: float
    n_outer: int
    n_inner: int
    z: float
    bin_z: np.ndarray
    formula: np.ndarray
    branch_mean: np.ndarray
    branch_stderr: np.ndarray
    coefficients: CondExpCoefficients

    def to_dict(self):
        return {"t": self.t, "T": self.T, "n_outer": self.n_outer, "n_inner": self.n_inner, "z": self.z,
                "bin_z": self.bin_z.tolist()}


def _affine_scalars(model: ModelSpec):
    if model.d != 1 or not isinstance(model.drift, AffineDrift):
        raise InvalidParams("conditional-mean formula needs a scalar affine model")
    if model.g.times is not None:
        raise InvalidParams("conditional-mean formula needs a constant initial curve")
    return float(model.drift.b[0]), float(model.drift.beta[0][0]), float(model.g.x0[0])


def conditional_mean_check(model: ModelSpec, tables: ResolventTables | None, pi: PiTable | None, t: float,
                           T: float, n_outer: int, n_inner: int, seed: int, n_bins: int = 10,
                           weight_mode: str = "cell-average", dt: float | None = None) -> ConditionalMeanCheck:
    """Compare the affine conditional-mean formula with nested continuations.

    The global score is ``sum_p (mean_p - formula_p) / sqrt(sum_p se_p^2)``
    and per-bin scores use the same statistic on quantile bins of ``X_t``.
    The tables must cover ``T + dt``; when ``tables`` is None they are built
    with step ``dt`` on a grid two cells beyond ``T``.
    """
    b, beta, x0 = _affine_scalars(model)
    if tables is None:
        if dt is None:
            raise InvalidParams("dt is required when tables are not given")
        tg = TimeGrid(dt, TimeGrid.from_horizon(T, dt).n_steps + 2)
        tables = resolvent_EK(model.kernel_b.entry(0, 0), beta, tg)
    if abs(beta - tables.beta) > 1e-14 * max(1.0, abs(beta)):
        raise InvalidParams("tables were built for a different beta")
    if pi is None:
        pi = pi_z(tables, T - t)
    co = cond_exp_coeffs(tables, pi, t, T, b, x0)
    grid = TimeGrid(tables.grid.dt, tables.grid.index(T))
    ens = simulate_sve(model, grid, n_outer, seed, weight_mode=weight_mode, retain_history=True)
    n = grid.index(t)
    hist = ens.raw()[:, : n + 1, 0]
    f = co.evaluate(hist)
    br = branch_paths(ens, t, n_inner, seed, T=T)
    d = br.mean[:, 0] - f
    se2 = br.stderr[:, 0] ** 2
    z = float(d.sum() / math.sqrt(se2.sum())) if se2.sum() > 0 else 0.0
    nb = min(n_bins, max(1, n_outer // 20))
    idx = _bin_index(ens.X[:, n, 0], nb)
    bz = np.array([d[idx == i].sum() / math.sqrt(max(se2[idx == i].sum(), 1e-300)) for i in range(idx.max() + 1)])
    return ConditionalMeanCheck(t=float(t), T=float(T), n_outer=n_outer, n_inner=n_inner, z=z, bin_z=bz,
                                formula=f, branch_mean=br.mean[:, 0], branch_stderr=br.stderr[:, 0],
                                coefficients=co)


# ----------------------------------------------------------------------
# sigma(X_t)-measurability


@dataclass
class MarkovTestReport:
    """Outcome of the within-bin variance test.

    ``R`` is a calibrated heuristic; ``R_refined`` is its value with
    ``refined_bins`` bins and drives the refinement check.
    """

    t: float
    T: float | None
    n_paths: int
    n_bins: int
    n_inner: int
    R: float
    R_ci: tuple
    R_refined: float
    refined_bins: int
    zscores: np.ndarray | None
    gamma_mass: float
    gamma_ci: tuple
    verdict: Verdict
    epsilon: float = EPS_MARKOV
    level: float = 0.95
    bin_centers: np.ndarray = field(default=None, repr=False)
    bin_shares: np.ndarray = field(default=None, repr=False)
    label: str = "calibrated heuristic"

    def to_dict(self):
        return {
            "t": self.t,
            "T": self.T,
            "n_paths": self.n_paths,
            "n_bins": self.n_bins,
            "n_inner": self.n_inner,
            "R": self.R,
            "R_ci": list(self.R_ci),
            "R_refined": self.R_refined,
            "refined_bins": self.refined_bins,
            "zscores": None if self.zscores is None else self.zscores.tolist(),
            "gamma_mass": self.gamma_mass,
            "gamma_ci": list(self.gamma_ci),
            "verdict": self.verdict.value,
            "epsilon": self.epsilon,
            "level": self.level,
            "label": self.label,
        }


def _verdict(R, lo, R_ref, refined_up, gmass, eps):
    stable = R_ref >= STABLE_RATIO * R if refined_up else R >= STABLE_RATIO * R_ref
    shrinking = R_ref < R if refined_up else R < R_ref
    if lo > eps and stable and gmass > 0:
        return Verdict.PATH_DEPENDENT
    if R < eps and (shrinking or R == 0.0):
        return Verdict.MARKOV_CONSISTENT
    return Verdict.INCONCLUSIVE


def sigma_measurability_test(ens, t: float, n_bins: int = 64, n_boot: int = 500, seed: int = 0,
                             column: int = 0, level: float = 0.95, epsilon: float = EPS_MARKOV,
                             coordinates=None, zscores=None, T=None, n_inner: int = 0) -> MarkovTestReport:
    """Within-bin variance test of ``Z_t`` against bins of ``X_t``.

    Verdicts
    --------
    PathDependent
        The lower bootstrap bound of ``R`` exceeds ``epsilon``, ``R`` does
        not drop under bin doubling and ``Gamma_sigma`` has positive mass.
    MarkovConsistent
        ``R < epsilon`` and ``R`` decreases when bins are refined.
    Inconclusive
        Anything else.

    Raises
    ------
    EmptyBin
        If fewer than 50 paths per bin are available.
    """
    if ens.Z is None:
        raise InvalidParams("ensemble has no perturbation columns")
    if not 0 <= column < ens.Z.shape[2]:
        raise InvalidParams("perturbation column out of range")
    P = ens.n_paths
    if n_bins < 1 or P / n_bins < MIN_PER_BIN:
        raise EmptyBin(f"{P} paths for {n_bins} bins leaves fewer than {MIN_PER_BIN} per bin")
    n = ens.grid.index(t)
    coords = [0] if coordinates is None else list(coordinates)
    x = ens.X[:, n, coords]
    z = ens.Z[:, n, column]
    R, idx = within_bin_ratio(x, z, n_bins)
    refined_up = P / (2 * n_bins) >= MIN_PER_BIN
    rb = 2 * n_bins if refined_up else max(1, n_bins // 2)
    R_ref, _ = within_bin_ratio(x, z, rb)
    rng = np.random.Generator(np.random.Philox(key=[int(seed) & 0xFFFFFFFFFFFFFFFF, 11]))
    boots = np.empty(n_boot)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        for i in range(n_boot):
            s = rng.integers(0, P, P)
            boots[i] = within_bin_ratio(x[s], z[s], n_bins)[0]
    a = 0.5 * (1.0 - level)
    lo, hi = (float(v) for v in np.quantile(boots, [a, 1.0 - a])) if n_boot else (R, R)
    gm = gamma_sigma_mass(ens, t, level)
    cnt = np.bincount(idx)
    centers = np.bincount(idx, x[:, 0]) / cnt
    zb = np.bincount(idx, z) / cnt
    share = (np.bincount(idx, z * z) - cnt * zb**2)
    tot = float(np.sum((z - z.mean()) ** 2))
    share = share / tot if tot > 0 else np.zeros_like(share)
    return MarkovTestReport(
        t=n * ens.grid.dt, T=T, n_paths=P, n_bins=n_bins, n_inner=n_inner, R=R, R_ci=(lo, hi), R_refined=R_ref,
        refined_bins=rb, zscores=zscores, gamma_mass=gm.mass, gamma_ci=gm.ci,
        verdict=_verdict(R, lo, R_ref, refined_up, gm.mass, epsilon), epsilon=epsilon, level=level,
        bin_centers=centers, bin_shares=share,
    )
