"""Grid version of the time-shift Markovian lift.

The forward curve of a simulated path at time ``t = t_n`` is::

    Xc_t(x) = g(t + x) + sum_{j<n} [ int_{cell j shifted by x} K^b ] b_j
                       + sum_{j<n} [ avg_{cell j shifted by x} K^sigma ] sigma_j dB_j

with the cell-average convention, so ``Xc_t(0)`` reproduces the scheme value
in cell-average mode.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidParams, MissingHistory, TooFewPaths
from .resolvents import TimeGrid

__all__ = [
    "LiftState",
    "SpectrumReport",
    "default_x_grid",
    "lift_state",
    "flow_check",
    "covariance_rank",
    "forward_contribution",
]


def default_x_grid(grid: TimeGrid, n=32):
    """``x = 0`` plus ``n`` geometric points on ``[dt, horizon]``."""
    return np.concatenate(([0.0], np.geomspace(grid.dt, grid.horizon, n)))


def _shifted_weights(kernel, kind, dt, lags, x):
    """Weights for lags ``m >= 1`` with the cell shifted forward by ``x``."""
    hi = lags * dt + x
    lo = (lags - 1) * dt + x
    if kind == "variance-exact":
        sq = (kernel.cumulative(hi, 2) - kernel.cumulative(lo, 2)) / dt
        avg = (kernel.cumulative(hi) - kernel.cumulative(lo)) / dt
        return np.sign(avg) * np.sqrt(np.maximum(sq, 0.0))
    avg = (kernel.cumulative(hi) - kernel.cumulative(lo)) / dt
    return avg * dt if kind == "drift" else avg


def _streams(ens, ch, rows, j0, j1):
    """Channel input ``f_j`` for ``j0 <= j < j1`` on outer rows, shape ``(j1-j0, len(rows))``."""
    bv = ens.drift_evals[rows, j0:j1, ch.col]
    sv = np.einsum("pnj,pnj->pn", ens.diff_evals[rows, j0:j1, ch.col, :], ens.dW[rows, j0:j1, :])
    if ch.source == "both":
        out = bv * ens.grid.dt + sv
    elif ch.source == "drift":
        out = bv
    else:
        out = sv
    return out.T


def forward_contribution(ens, chans, n0, rows):
    """``sum_{j<n0} W_{k-j} f_j`` for future nodes ``k = n0..N`` of ``chans``' grid.

    Returns shape ``(N - n0 + 1, len(rows), d)``. Used by branching so that
    history enters the continuation only through the forward curve.
    """
    if not ens.retains_history:
        raise MissingHistory("ensemble was simulated without retained history")
    rows = np.asarray(rows)
    N = chans[0].weights.size - 1 if chans else ens.grid.n_steps
    d = ens.model.d
    out = np.zeros((N - n0 + 1, rows.size, d))
    if n0 == 0:
        return out
    k = np.arange(n0, N + 1)[:, None]
    j = np.arange(n0)[None, :]
    lag = k - j
    for ch in chans:
        out[:, :, ch.target] += ch.weights[lag] @ _streams(ens, ch, rows, 0, n0)
    return out


@dataclass
class LiftState:
    """Forward curve ``d x (M+1)`` on ``x_grid`` at time ``t``."""

    t: float
    x_grid: np.ndarray
    curve: np.ndarray

    def to_rows(self):
        return [[float(x)] + [float(v) for v in self.curve[:, i]] for i, x in enumerate(self.x_grid)]


def _lift_channels(ens):
    from .sim import _channels

    return _channels(ens.model, ens.grid, "cell-average", fast=False)


def _curve(ens, chans, path, n, x_grid):
    dt = ens.grid.dt
    d = ens.model.d
    t = n * dt
    curve = ens.model.g(t + x_grid).T.copy()  # (d, M+1)
    if n == 0:
        return curve
    lags = np.arange(n, 0, -1, dtype=float)  # lag for j = 0..n-1
    for ch in chans:
        f = _streams(ens, ch, np.array([path]), 0, n)[:, 0]
        for i, x in enumerate(x_grid):
            w = _shifted_weights(ch.kernel, ch.kind, dt, lags, x)
            curve[ch.target, i] += w @ f
    return curve


def lift_state(ens, path_index: int, t: float, x_grid=None) -> LiftState:
    """Forward curve of one path at grid time ``t``.

    Cell integrals of the shifted kernel are used throughout, so singular
    kernels need no point evaluation at the singularity.
    """
    if not ens.retains_history:
        raise MissingHistory("ensemble was simulated without retained history")
    if not 0 <= path_index < ens.n_paths:
        raise InvalidParams("path index out of range")
    n = ens.grid.index(t)
    xg = default_x_grid(ens.grid) if x_grid is None else np.asarray(x_grid, dtype=float)
    if np.any(xg < 0):
        raise InvalidParams("x_grid must be nonnegative")
    return LiftState(t=n * ens.grid.dt, x_grid=xg, curve=_curve(ens, _lift_channels(ens), path_index, n, xg))


@dataclass
class FlowCheck:
    residual: float
    scale: float
    consistency: float


def flow_check(ens, path_index: int, t: float, s: float, x_grid=None) -> FlowCheck:
    """Compare ``Xc_{t+s}(x)`` with ``Xc_t(x+s)`` plus the increments on ``[t, t+s)``.

    The increments are weighted with the scheme's own diffusion weights, so in
    cell-average mode both routes are rearrangements of one finite sum and
    in variance-exact mode they differ.
    """
    from .sim import _channels

    grid = ens.grid
    n, q = grid.index(t), grid.index(s)
    if n + q > grid.n_steps:
        raise InvalidParams("t + s beyond horizon")
    xg = default_x_grid(grid) if x_grid is None else np.asarray(x_grid, dtype=float)
    lift_ch = _lift_channels(ens)
    A = _curve(ens, lift_ch, path_index, n + q, xg)
    B = _curve(ens, lift_ch, path_index, n, xg + q * grid.dt)
    B += ens.model.g((n + q) * grid.dt + xg).T - ens.model.g(n * grid.dt + xg + q * grid.dt).T
    scheme_ch = _channels(ens.model, grid, ens.weight_mode, fast=False)
    if q > 0:
        lags = np.arange(q, 0, -1, dtype=float)
        for ch in scheme_ch:
            f = _streams(ens, ch, np.array([path_index]), n, n + q)[:, 0]
            for i, x in enumerate(xg):
                B[ch.target, i] += _shifted_weights(ch.kernel, ch.kind, grid.dt, lags, x) @ f
    scale = max(1.0, float(np.max(np.abs(A))))
    cons = float(np.max(np.abs(A[:, 0] - ens.raw()[path_index, n + q])))
    return FlowCheck(residual=float(np.max(np.abs(A - B))), scale=scale, consistency=cons)


@dataclass
class SpectrumReport:
    """Eigenvalues of the functional-restricted covariance with bootstrap CIs."""

    t: float
    eigenvalues: np.ndarray
    ci_low: np.ndarray
    ci_high: np.ndarray
    rank: int
    floor: float
    level: float
    n_boot: int
    label: str = "functional-restricted covariance"

    def to_dict(self):
        return {
            "t": self.t,
            "label": self.label,
            "eigenvalues": self.eigenvalues.tolist(),
            "ci_low": self.ci_low.tolist(),
            "ci_high": self.ci_high.tolist(),
            "rank": self.rank,
            "zero_floor": self.floor,
            "level": self.level,
            "n_boot": self.n_boot,
        }


def covariance_rank(ens, t: float, n_boot: int = 500, seed: int = 0, level: float = 0.95,
                    rel_floor: float = 1e-13) -> SpectrumReport:
    """Spectrum of the empirical covariance of ``(Z_1, ..., Z_N)`` at time ``t``.

    An eigenvalue counts toward the rank when the lower end of its percentile
    bootstrap interval exceeds ``rel_floor * lambda_max``. The default floor
    is a few hundred machine epsilons, above the rounding noise of the
    eigenvalues of an exactly rank-deficient sample covariance. A second,
    absolute floor scaled by ``max |Z|`` catches columns that are constant
    up to rounding.
    """
    if ens.Z is None:
        raise InvalidParams("ensemble has no perturbation columns")
    n = ens.grid.index(t)
    Z = ens.Z[:, n, :]
    P, N = Z.shape
    if P < 10 * N:
        raise TooFewPaths(f"need at least {10 * N} paths, got {P}")

    def spectrum(sample):
        c = np.cov(sample, rowvar=False, ddof=1).reshape(N, N)
        return np.sort(np.linalg.eigvalsh(c))[::-1]

    ev = spectrum(Z)
    rng = np.random.Generator(np.random.Philox(key=[int(seed) & 0xFFFFFFFFFFFFFFFF, 7]))
    boots = np.empty((n_boot, N))
    for b in range(n_boot):
        boots[b] = spectrum(Z[rng.integers(0, P, P)])
    a = 0.5 * (1.0 - level)
    lo, hi = np.quantile(boots, [a, 1.0 - a], axis=0)
    # absolute part: variance left by rounding when Z is constant across paths
    tiny = (64.0 * np.finfo(float).eps * float(np.max(np.abs(Z), initial=0.0))) ** 2
    floor = max(rel_floor * max(float(ev[0]), 0.0), tiny)
    rank = int(np.sum(lo > floor)) if ev[0] > 0 else 0
    return SpectrumReport(t=n * ens.grid.dt, eigenvalues=ev, ci_low=lo, ci_high=hi, rank=rank, floor=floor,
                          level=level, n_boot=n_boot)
