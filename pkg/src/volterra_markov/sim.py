"""Monte Carlo engine for stochastic Volterra equations.

Left-point Volterra-Euler scheme on a uniform grid::

    X_n = g(t_n) + sum_{j<n} Wb_{n-j} b(t_j, X_j) + sum_{j<n} Ws_{n-j} sigma(t_j, X_j) dB_j

Drift weights are exact cell integrals of the kernel. Diffusion weights are
either cell averages (``"cell-average"``) or root-mean-square cell values
(``"variance-exact"``). Convolutions are evaluated blockwise: sums inside the
current block directly, completed blocks pushed into future nodes by one
matrix product. Exponential-sum kernels in cell-average mode use the
equivalent finite-dimensional recursion instead.

Noise for path ``p`` comes from a Philox stream keyed by ``(p, seed)``, so
results do not depend on chunking.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import InvalidParams, MissingHistory, NumericalBlowup
from .kernels import Family, KernelSpec, MatrixKernelSpec
from .resolvents import TimeGrid

__all__ = [
    "AffineDrift",
    "CallableDrift",
    "ConstantDiffusion",
    "AffineDiffusion",
    "SqrtDiffusion",
    "HestonDiffusion",
    "InitialCurve",
    "ModelSpec",
    "PathEnsemble",
    "BranchResult",
    "WEIGHT_MODES",
    "simulate_sve",
    "simulate_with_perturbation",
    "branch_paths",
    "volterra_cir",
    "rough_heston",
    "gaussian_fractional",
    "path_normals",
]

WEIGHT_MODES = ("cell-average", "variance-exact")
CHUNK_ELEMENTS = 6_000_000  # paths * steps per chunk
BLOCK = 32


# ----------------------------------------------------------------------
# coefficients


@dataclass(frozen=True)
class AffineDrift:
    """``b(t, x) = b + beta x``."""

    b: tuple
    beta: tuple

    def __post_init__(self):
        b = np.atleast_1d(np.asarray(self.b, dtype=float))
        beta = np.atleast_2d(np.asarray(self.beta, dtype=float))
        if beta.shape != (b.size, b.size):
            raise InvalidParams("beta must be d x d")
        object.__setattr__(self, "b", tuple(b))
        object.__setattr__(self, "beta", tuple(map(tuple, beta)))

    @property
    def dim(self):
        return len(self.b)

    def __call__(self, t, x):
        return x @ np.asarray(self.beta).T + np.asarray(self.b)

    def to_dict(self):
        return {"type": "affine", "b": list(self.b), "beta": [list(r) for r in self.beta]}


@dataclass(frozen=True)
class CallableDrift:
    """Drift given by ``fn(t, x) -> array (paths, d)``; not serializable."""

    fn: Callable
    dim: int

    def __call__(self, t, x):
        return np.asarray(self.fn(t, x), dtype=float).reshape(x.shape)

    def to_dict(self):
        raise InvalidParams("callable drifts cannot be serialized")


@dataclass(frozen=True)
class ConstantDiffusion:
    """Constant ``d x m`` matrix."""

    sigma: tuple

    def __post_init__(self):
        s = np.atleast_2d(np.asarray(self.sigma, dtype=float))
        object.__setattr__(self, "sigma", tuple(map(tuple, s)))

    @property
    def shape(self):
        return np.asarray(self.sigma).shape

    truncate = None

    def __call__(self, t, x):
        s = np.asarray(self.sigma)
        return np.broadcast_to(s, (x.shape[0],) + s.shape)

    def to_dict(self):
        return {"type": "constant", "sigma": [list(r) for r in self.sigma]}


@dataclass(frozen=True)
class AffineDiffusion:
    """``sigma_ij(x) = s0_ij + s1_ij x_i``."""

    s0: tuple
    s1: tuple

    def __post_init__(self):
        a = np.atleast_2d(np.asarray(self.s0, dtype=float))
        b = np.atleast_2d(np.asarray(self.s1, dtype=float))
        if a.shape != b.shape:
            raise InvalidParams("s0 and s1 must have equal shapes")
        object.__setattr__(self, "s0", tuple(map(tuple, a)))
        object.__setattr__(self, "s1", tuple(map(tuple, b)))

    @property
    def shape(self):
        return np.asarray(self.s0).shape

    truncate = None

    def __call__(self, t, x):
        return np.asarray(self.s0)[None] + np.asarray(self.s1)[None] * x[:, :, None]

    def to_dict(self):
        return {"type": "affine", "s0": [list(r) for r in self.s0], "s1": [list(r) for r in self.s1]}


@dataclass(frozen=True)
class SqrtDiffusion:
    """``sigma(x) = diag(sigma_i sqrt(x_i^+))`` (full truncation)."""

    sigma: tuple

    def __post_init__(self):
        object.__setattr__(self, "sigma", tuple(np.atleast_1d(np.asarray(self.sigma, dtype=float))))

    @property
    def shape(self):
        n = len(self.sigma)
        return (n, n)

    @property
    def truncate(self):
        return np.ones(len(self.sigma), dtype=bool)

    def __call__(self, t, x):
        s = np.asarray(self.sigma)
        v = s[None, :] * np.sqrt(np.maximum(x, 0.0))
        out = np.zeros(x.shape + (x.shape[1],))
        idx = np.arange(x.shape[1])
        out[:, idx, idx] = v
        return out

    def to_dict(self):
        return {"type": "sqrt", "sigma": list(self.sigma)}


@dataclass(frozen=True)
class HestonDiffusion:
    """Log-price/variance block driven by ``(B_perp, B)``."""

    rho: float
    sigma: float

    def __post_init__(self):
        if not -1.0 <= self.rho <= 1.0:
            raise InvalidParams("rho must lie in [-1, 1]")

    shape = (2, 2)

    @property
    def truncate(self):
        return np.array([False, True])

    def __call__(self, t, x):
        sv = np.sqrt(np.maximum(x[:, 1], 0.0))
        out = np.zeros((x.shape[0], 2, 2))
        out[:, 0, 0] = math.sqrt(1.0 - self.rho**2) * sv
        out[:, 0, 1] = self.rho * sv
        out[:, 1, 1] = self.sigma * sv
        return out

    def to_dict(self):
        return {"type": "heston", "rho": self.rho, "sigma": self.sigma}


def diffusion_from_dict(d):
    kind = d.get("type")
    try:
        if kind == "constant":
            return ConstantDiffusion(d["sigma"])
        if kind == "affine":
            return AffineDiffusion(d["s0"], d["s1"])
        if kind == "sqrt":
            return SqrtDiffusion(d["sigma"])
        if kind == "heston":
            return HestonDiffusion(d["rho"], d["sigma"])
    except KeyError as exc:
        raise InvalidParams(f"diffusion missing field {exc}") from exc
    raise InvalidParams(f"unknown diffusion type {kind!r}")


@dataclass(frozen=True)
class InitialCurve:
    """Deterministic ``g``: constant ``x0`` or linear interpolation of a table."""

    x0: tuple
    times: tuple | None = None
    values: tuple | None = None

    def __post_init__(self):
        object.__setattr__(self, "x0", tuple(np.atleast_1d(np.asarray(self.x0, dtype=float))))
        if self.times is not None:
            v = np.asarray(self.values, dtype=float).reshape(len(self.times), -1)
            object.__setattr__(self, "times", tuple(float(t) for t in self.times))
            object.__setattr__(self, "values", tuple(map(tuple, v)))

    @property
    def dim(self):
        return len(self.x0)

    def __call__(self, t):
        t = np.atleast_1d(np.asarray(t, dtype=float))
        if self.times is None:
            return np.broadcast_to(np.asarray(self.x0), (t.size, self.dim)).copy()
        v = np.asarray(self.values)
        return np.stack([np.interp(t, self.times, v[:, i]) for i in range(v.shape[1])], axis=1)

    def to_dict(self):
        d = {"x0": list(self.x0)}
        if self.times is not None:
            d["times"] = list(self.times)
            d["values"] = [list(r) for r in self.values]
        return d


@dataclass(frozen=True)
class ModelSpec:
    """Stochastic Volterra equation ``X = g + K^b * b(X) + K^sigma * sigma(X) dB``."""

    kernel_b: MatrixKernelSpec
    kernel_sigma: MatrixKernelSpec
    drift: object
    diffusion: object
    g: InitialCurve
    name: str = "custom"
    blowup_bound: float = 1e8

    def __post_init__(self):
        d = self.g.dim
        if self.kernel_b.dims != (d, d) or self.kernel_sigma.dims != (d, d):
            raise InvalidParams("kernels must be d x d")
        if self.drift.dim != d:
            raise InvalidParams("drift dimension mismatch")
        if self.diffusion.shape[0] != d:
            raise InvalidParams("diffusion must have d rows")
        if isinstance(self.diffusion, SqrtDiffusion):
            if np.any(np.asarray(self.g.x0) < 0):
                raise InvalidParams("square-root model needs x0 >= 0")
            if isinstance(self.drift, AffineDrift):
                beta = np.asarray(self.drift.beta)
                off = beta - np.diag(np.diag(beta))
                if np.any(np.asarray(self.drift.b) < 0) or np.any(off < 0):
                    raise InvalidParams("square-root model needs b >= 0 and nonnegative off-diagonal beta")

    @property
    def d(self):
        return self.g.dim

    @property
    def m(self):
        return self.diffusion.shape[1]

    @property
    def truncate(self):
        t = getattr(self.diffusion, "truncate", None)
        return None if t is None else np.asarray(t)

    def to_dict(self):
        return {
            "name": self.name,
            "kernel_b": self.kernel_b.to_dict(),
            "kernel_sigma": self.kernel_sigma.to_dict(),
            "drift": self.drift.to_dict(),
            "diffusion": self.diffusion.to_dict(),
            "g": self.g.to_dict(),
            "blowup_bound": self.blowup_bound,
        }

    @classmethod
    def from_dict(cls, d):
        try:
            dr = d["drift"]
            if dr.get("type", "affine") != "affine":
                raise InvalidParams("only affine drifts can be configured")
            g = d["g"]
            return cls(
                kernel_b=MatrixKernelSpec.from_dict(d["kernel_b"]),
                kernel_sigma=MatrixKernelSpec.from_dict(d["kernel_sigma"]),
                drift=AffineDrift(dr["b"], dr["beta"]),
                diffusion=diffusion_from_dict(d["diffusion"]),
                g=InitialCurve(g["x0"], g.get("times"), g.get("values")),
                name=d.get("name", "custom"),
                blowup_bound=float(d.get("blowup_bound", 1e8)),
            )
        except KeyError as exc:
            raise InvalidParams(f"model missing field {exc}") from exc


# presets ----------------------------------------------------------------


def volterra_cir(x0=0.3, b=0.3, beta=-0.7, sigma=0.3, kernel: KernelSpec | None = None, hurst=None):
    """Volterra square-root process ``X = x0 + K*(b + beta X) + sigma K*(sqrt(X) dB)``."""
    if kernel is None:
        kernel = KernelSpec.fractional(0.3 if hurst is None else hurst)
    mk = MatrixKernelSpec.diagonal([kernel])
    return ModelSpec(mk, mk, AffineDrift([b], [[beta]]), SqrtDiffusion([sigma]), InitialCurve([x0]),
                     name="volterra-cir")


def rough_heston(v0=0.04, kappa=0.3, theta=0.04, sigma=0.3, rho=-0.7, hurst=0.1, log_s0=0.0):
    """Volterra Heston model in ``(log S, V)`` with ``K = diag(1, k)``."""
    k = KernelSpec.fractional(hurst)
    mk = MatrixKernelSpec.diagonal([KernelSpec.constant(1.0), k])
    drift = AffineDrift([0.0, kappa * theta], [[0.0, -0.5], [0.0, -kappa]])
    return ModelSpec(mk, mk, drift, HestonDiffusion(rho, sigma), InitialCurve([log_s0, v0]), name="rough-heston")


def gaussian_fractional(hurst=0.3, sigma=1.0, x0=0.0):
    """``X = x0 + sigma K * dB`` with a fractional kernel."""
    mk = MatrixKernelSpec.diagonal([KernelSpec.fractional(hurst)])
    return ModelSpec(mk, mk, AffineDrift([0.0], [[0.0]]), ConstantDiffusion([[sigma]]), InitialCurve([x0]),
                     name="gaussian-fractional")


# ----------------------------------------------------------------------
# weights and channels


def _cell_weights(kernel: KernelSpec, grid: TimeGrid, kind: str):
    """Length ``n+1`` weight array, index = lag; ``w[0] = 0``."""
    if kind == "drift":
        w = grid.cell_averages(kernel) * grid.dt
    elif kind == "cell-average":
        w = grid.cell_averages(kernel)
    elif kind == "variance-exact":
        sq = grid.cell_averages(kernel, power=2)
        sign = np.sign(grid.cell_averages(kernel))
        w = sign * np.sqrt(np.maximum(sq, 0.0))
    else:
        raise InvalidParams(f"unknown weight mode {kind!r}")
    if not np.all(np.isfinite(w)):
        raise NumericalBlowup("non-finite kernel weights; refine dt")
    return w


def _exp_structure(kernel: KernelSpec, grid: TimeGrid, kind: str):
    """``(c_a, decay_a)`` with ``w_m = sum_a c_a decay_a^(m-1)`` when available."""
    if kind == "variance-exact":
        return None
    if kernel.family is Family.CONSTANT:
        terms = [(kernel.scale, 0.0)]
    elif kernel.family in (Family.EXP_SUM, Family.BERNSTEIN):
        terms = [(w * math.exp(-r * kernel.offset), r) for w, r in (kernel.exp_terms or kernel.bernstein_nodes)]
    else:
        return None
    dt = grid.dt
    c, dec = [], []
    for a, r in terms:
        cell = a * (-math.expm1(-r * dt) / r if r > 0 else dt)
        c.append(cell if kind == "drift" else cell / dt)
        dec.append(math.exp(-r * dt))
    return np.array(c), np.array(dec)


@dataclass
class _Channel:
    target: int
    weights: np.ndarray
    source: str  # "drift", "noise" or "both"
    col: int
    exp: tuple | None = None
    kernel: KernelSpec | None = None
    kind: str = "drift"  # weight kind used for ``weights``


def _channels(model: ModelSpec, grid: TimeGrid, mode: str, fast: bool):
    chans = []
    for i in range(model.d):
        bs = dict(model.kernel_b.rows[i])
        ss = dict(model.kernel_sigma.rows[i])
        for k in sorted(set(bs) | set(ss)):
            kb, ks = bs.get(k), ss.get(k)
            if kb is not None and kb == ks and mode == "cell-average":
                w = _cell_weights(ks, grid, "cell-average")
                ex = _exp_structure(ks, grid, "cell-average") if fast else None
                chans.append(_Channel(i, w, "both", k, ex, ks, "cell-average"))
                continue
            if kb is not None:
                ex = _exp_structure(kb, grid, "drift") if fast else None
                chans.append(_Channel(i, _cell_weights(kb, grid, "drift"), "drift", k, ex, kb, "drift"))
            if ks is not None:
                ex = _exp_structure(ks, grid, mode) if fast else None
                chans.append(_Channel(i, _cell_weights(ks, grid, mode), "noise", k, ex, ks, mode))
    return chans


def _stream(ch: _Channel, bvals, svals, dt):
    if ch.source == "both":
        return bvals[:, ch.col] * dt + svals[:, ch.col]
    if ch.source == "drift":
        return bvals[:, ch.col]
    return svals[:, ch.col]


def path_normals(seed: int, paths: Sequence[int], n_steps: int, m: int, tag: int = 0):
    """Standard normals ``(len(paths), n_steps, m)``; path ``p`` uses Philox key ``(p, seed)``."""
    out = np.empty((len(paths), n_steps, m))
    for r, p in enumerate(paths):
        bg = np.random.Philox(key=[int(p), int(seed) & 0xFFFFFFFFFFFFFFFF], counter=[0, 0, 0, int(tag)])
        out[r] = np.random.Generator(bg).standard_normal((n_steps, m))
    return out


def _engine(model, chans, grid, n0, base, x_start, dB, retain, check_bound=True):
    """Run the scheme from node ``n0`` to ``grid.n_steps``.

    ``base[k - n0]`` holds ``g(t_k)`` plus any contribution from increments
    before ``n0`` (shape ``(N - n0 + 1, P, d)``); ``dB`` has shape
    ``(P, N - n0, m)``.
    """
    N, dt = grid.n_steps, grid.dt
    L = N - n0
    P, d = x_start.shape
    trunc = model.truncate
    X = np.empty((L + 1, P, d))
    X[0] = x_start
    raw = np.empty((L + 1, P, d)) if trunc is not None else X
    raw[0] = x_start
    C = len(chans)
    S = np.empty((C, L, P))
    acc = np.zeros((d, L + 1, P))
    # exponential fast-path states
    expstate = {c: np.zeros((ch.exp[0].size, P)) for c, ch in enumerate(chans) if ch.exp is not None}
    direct = [c for c, ch in enumerate(chans) if ch.exp is None]
    hist_b = np.empty((P, L, d)) if retain else None
    hist_s = np.empty((P, L, d, model.m)) if retain else None
    bstart = 0
    for j in range(L):
        t = (n0 + j) * dt
        xj = X[j]
        bv = model.drift(t, xj)
        sig = model.diffusion(t, xj)
        sv = np.einsum("pij,pj->pi", sig, dB[:, j, :])
        if retain:
            hist_b[:, j] = bv
            hist_s[:, j] = sig
        for c, ch in enumerate(chans):
            S[c, j] = _stream(ch, bv, sv, dt)
        n = j + 1
        xn = base[n].T.copy()  # (d, P)
        xn += acc[:, n]
        for c in direct:
            ch = chans[c]
            w = ch.weights[n - np.arange(bstart, n)]
            xn[ch.target] += w @ S[c, bstart:n]
        for c, st in expstate.items():
            ch = chans[c]
            cc, dec = ch.exp
            st *= dec[:, None]
            st += S[c, j][None, :]
            xn[ch.target] += cc @ st
        xn = xn.T
        raw[n] = xn
        if trunc is not None:
            xn = xn.copy()
            xn[:, trunc] = np.maximum(xn[:, trunc], 0.0)
        X[n] = xn
        if check_bound and not (np.all(np.isfinite(xn)) and np.max(np.abs(xn), initial=0.0) <= model.blowup_bound):
            raise NumericalBlowup(f"|X| exceeded {model.blowup_bound:g} at t={(n0 + n) * dt:.6g}; refine dt")
        if n - bstart == BLOCK or n == L:
            if direct and n < L:
                fut = np.arange(n + 1, L + 1)
                src = np.arange(bstart, n)
                lag = fut[:, None] - src[None, :]
                for c in direct:
                    ch = chans[c]
                    acc[ch.target, n + 1:] += ch.weights[lag] @ S[c, bstart:n]
            bstart = n
    return X, raw, S, hist_b, hist_s


@dataclass
class PathEnsemble:
    """Simulated paths on a uniform grid.

    Attributes
    ----------
    X : ndarray, shape (n_paths, n_steps + 1, d)
        States after truncation.
    X_raw : ndarray or None
        Untruncated scheme values (only kept when they differ from ``X``).
    Z : ndarray or None, shape (n_paths, n_steps + 1, N_pert)
    dW : ndarray or None, shape (n_paths, n_steps, m)
    drift_evals : ndarray or None, shape (n_paths, n_steps, d)
    diff_evals : ndarray or None, shape (n_paths, n_steps, d, m)
    seeds : ndarray
        Path indices; path ``p`` uses the Philox stream keyed by ``(p, seed)``.
    """

    grid: TimeGrid
    model: ModelSpec
    seed: int
    weight_mode: str
    X: np.ndarray
    seeds: np.ndarray
    X_raw: np.ndarray | None = None
    Z: np.ndarray | None = None
    perturbations: list = field(default_factory=list)
    dW: np.ndarray | None = None
    drift_evals: np.ndarray | None = None
    diff_evals: np.ndarray | None = None

    @property
    def n_paths(self):
        return self.X.shape[0]

    @property
    def retains_history(self):
        return self.dW is not None

    def raw(self):
        return self.X if self.X_raw is None else self.X_raw

    def dump(self, path):
        """Binary dump: little-endian ``uint64`` header ``(d, N_pert, n_steps, n_paths)``
        followed by ``X`` then ``Z`` as row-major ``float64``."""
        npert = 0 if self.Z is None else self.Z.shape[2]
        hdr = np.array([self.X.shape[2], npert, self.grid.n_steps, self.n_paths], dtype="<u8")
        with open(path, "wb") as fh:
            fh.write(hdr.tobytes())
            fh.write(np.ascontiguousarray(self.X, dtype="<f8").tobytes())
            if self.Z is not None:
                fh.write(np.ascontiguousarray(self.Z, dtype="<f8").tobytes())

    @staticmethod
    def load_dump(path):
        """Read a binary dump back as ``(X, Z)``."""
        with open(path, "rb") as fh:
            d, npert, n, p = (int(v) for v in np.frombuffer(fh.read(32), dtype="<u8"))
            X = np.frombuffer(fh.read(8 * p * (n + 1) * d), dtype="<f8").reshape(p, n + 1, d)
            Z = None
            if npert:
                Z = np.frombuffer(fh.read(8 * p * (n + 1) * npert), dtype="<f8").reshape(p, n + 1, npert)
        return X, Z


def _chunks(n_paths, n_steps, width):
    size = max(1, CHUNK_ELEMENTS // max(1, (n_steps + 1) * width))
    for s in range(0, n_paths, size):
        yield s, min(n_paths, s + size)


def _toeplitz_apply(w, S):
    """``out[n] = sum_{j<n} w[n-j] S[j]`` for ``n = 0..L``; ``S`` is ``(L, P)``."""
    L = S.shape[0]
    n = np.arange(L + 1)[:, None]
    j = np.arange(L)[None, :]
    lag = n - j
    T = np.where(lag > 0, w[np.clip(lag, 0, None)], 0.0)
    return T @ S


def simulate_with_perturbation(model: ModelSpec, grid: TimeGrid, n_paths: int, seed: int,
                               perturbations: Sequence = (), weight_mode: str = "cell-average",
                               retain_history: bool = False, fast_path: bool = True,
                               coordinates: Sequence[int] | None = None, workers: int = 1) -> PathEnsemble:
    """Simulate ``X`` and companion processes ``Z^(p)`` sharing its noise.

    ``Z^(p)_n = sum_{j<n} Wb~_{n-j} b_i(X_j) + Ws~_{n-j} (sigma dB)_i,j`` with
    ``i`` the coordinate of perturbation ``p`` and weights computed from the
    perturbed kernel ``k~`` in the same way as for ``X``. Path chunks run on
    ``workers`` threads; results do not depend on the worker count.
    """
    if weight_mode not in WEIGHT_MODES:
        raise InvalidParams(f"weight_mode must be one of {WEIGHT_MODES}")
    if n_paths < 1:
        raise InvalidParams("n_paths must be positive")
    N, d, m = grid.n_steps, model.d, model.m
    perts = list(perturbations)
    coords = list(coordinates) if coordinates is not None else [0] * len(perts)
    if len(coords) != len(perts) or any(not 0 <= c < d for c in coords):
        raise InvalidParams("invalid perturbation coordinates")
    chans = _channels(model, grid, weight_mode, fast_path)
    pw = [(_cell_weights(k, grid, "drift"), _cell_weights(k, grid, weight_mode)) for k in perts]
    X = np.empty((n_paths, N + 1, d))
    trunc = model.truncate is not None
    X_raw = np.empty((n_paths, N + 1, d)) if trunc else None
    Z = np.empty((n_paths, N + 1, len(perts))) if perts else None
    dW_all = np.empty((n_paths, N, m)) if retain_history else None
    hb_all = np.empty((n_paths, N, d)) if retain_history else None
    hs_all = np.empty((n_paths, N, d, m)) if retain_history else None
    gvals = model.g(grid.nodes)

    def run(chunk):
        a, b = chunk
        P = b - a
        dB = path_normals(seed, range(a, b), N, m) * math.sqrt(grid.dt)
        base = np.broadcast_to(gvals[:, None, :], (N + 1, P, d))
        x0 = np.broadcast_to(gvals[0], (P, d)).copy()
        Xc, rawc, S, hb, hs = _engine(model, chans, grid, 0, base, x0, dB, retain_history or bool(perts))
        X[a:b] = Xc.transpose(1, 0, 2)
        if trunc:
            X_raw[a:b] = rawc.transpose(1, 0, 2)
        if perts:
            sv = np.einsum("pnij,pnj->pni", hs, dB)
            for q, (wb, ws) in enumerate(pw):
                i = coords[q]
                Zq = _toeplitz_apply(wb, hb[:, :, i].T) + _toeplitz_apply(ws, sv[:, :, i].T)
                Z[a:b, :, q] = Zq.T
        if retain_history:
            dW_all[a:b], hb_all[a:b], hs_all[a:b] = dB, hb, hs

    chunks = list(_chunks(n_paths, N, max(d, 1) * (len(chans) + 2)))
    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(run, chunks))
    else:
        for c in chunks:
            run(c)
    if trunc and np.array_equal(X, X_raw):
        X_raw = None
    return PathEnsemble(grid=grid, model=model, seed=int(seed), weight_mode=weight_mode, X=X,
                        seeds=np.arange(n_paths), X_raw=X_raw, Z=Z, perturbations=perts,
                        dW=dW_all, drift_evals=hb_all, diff_evals=hs_all)


def simulate_sve(model: ModelSpec, grid: TimeGrid, n_paths: int, seed: int, weight_mode: str = "cell-average",
                 retain_history: bool = False, fast_path: bool = True, workers: int = 1) -> PathEnsemble:
    """Simulate ``n_paths`` paths of the model on ``grid``."""
    return simulate_with_perturbation(model, grid, n_paths, seed, (), weight_mode, retain_history, fast_path,
                                      workers=workers)


# ----------------------------------------------------------------------
# branching


@dataclass
class BranchResult:
    """Continuations from node ``t`` of each outer path."""

    t: float
    T: float
    n_inner: int
    mean: np.ndarray  # (n_outer, d) inner means of X_T
    stderr: np.ndarray  # (n_outer, d)
    X_T: np.ndarray | None = None  # (n_outer, n_inner, d) when kept


def _past_contribution(ens: PathEnsemble, chans, n0, rows):
    """``sum_{j<n0} W_{k-j} f_j`` for ``k = n0..N`` on the given outer rows."""
    from .lift import forward_contribution

    return forward_contribution(ens, chans, n0, rows)


def branch_paths(ens: PathEnsemble, t: float, n_inner: int, seed: int, T: float | None = None,
                 keep: bool = False, fast_path: bool = True) -> BranchResult:
    """Nested continuations of every outer path from grid node ``t``.

    The history enters only through the forward curve at the future nodes;
    fresh noise for outer path ``p`` comes from the Philox stream keyed by
    ``(p, seed)`` with a branch tag.
    """
    if not ens.retains_history:
        raise MissingHistory("ensemble was simulated without retained history")
    grid, model = ens.grid, ens.model
    n0 = grid.index(t)
    if n0 >= grid.n_steps:
        raise InvalidParams("t must be before the horizon")
    N_T = grid.index(T) if T is not None else grid.n_steps
    if N_T <= n0:
        raise InvalidParams("T must exceed t")
    sub = TimeGrid(grid.dt, N_T)
    chans = _channels(model, sub, ens.weight_mode, fast_path)
    P_out, d, m = ens.n_paths, model.d, model.m
    L = N_T - n0
    mean = np.empty((P_out, d))
    se = np.empty((P_out, d))
    XT = np.empty((P_out, n_inner, d)) if keep else None
    gvals = model.g(sub.nodes[n0:])
    per = max(1, CHUNK_ELEMENTS // max(1, (L + 1) * n_inner * max(d, 1) * (len(chans) + 2)))
    for a in range(0, P_out, per):
        rows = np.arange(a, min(P_out, a + per))
        past = _past_contribution(ens, chans, n0, rows)  # (L+1, len(rows), d)
        base = gvals[:, None, :] + past
        base = np.repeat(base, n_inner, axis=1)
        x_start = np.repeat(ens.X[rows, n0, :], n_inner, axis=0)
        dB = np.concatenate([_inner_normals(seed, p, n0, n_inner, L, m) for p in rows]) * math.sqrt(grid.dt)
        Xc, _, _, _, _ = _engine(model, chans, sub, n0, base, x_start, dB, False)
        xt = Xc[-1].reshape(len(rows), n_inner, d)
        mean[rows] = xt.mean(axis=1)
        se[rows] = xt.std(axis=1, ddof=1) / math.sqrt(n_inner) if n_inner > 1 else 0.0
        if keep:
            XT[rows] = xt
    return BranchResult(t=float(t), T=float(N_T * grid.dt), n_inner=n_inner, mean=mean, stderr=se, X_T=XT)


def _inner_normals(seed, p, n0, n_inner, L, m):
    bg = np.random.Philox(key=[int(p), int(seed) & 0xFFFFFFFFFFFFFFFF], counter=[0, 0, int(n0), 1])
    return np.random.Generator(bg).standard_normal((n_inner, L, m))
