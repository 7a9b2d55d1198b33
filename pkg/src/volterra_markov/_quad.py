"""Small quadrature helpers shared by the kernel and perturbation code."""

from functools import lru_cache

import numpy as np

from .errors import QuadratureFailure


@lru_cache(maxsize=None)
def gauss_legendre(n):
    """Gauss-Legendre nodes and weights on [0, 1]."""
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (x + 1.0), 0.5 * w


def panels(f, edges, n=16):
    """Integrate vectorized ``f`` over consecutive panels given by ``edges``.

    Returns the per-panel integrals.
    """
    edges = np.asarray(edges, dtype=float)
    x, w = gauss_legendre(n)
    a = edges[:-1, None]
    h = np.diff(edges)[:, None]
    vals = f(a + h * x[None, :])
    return (vals * w[None, :]).sum(axis=1) * h[:, 0]


def geometric_edges(a, b, ratio=0.5, min_width=1e-300, levels=None):
    """Edges ``a, a + (b-a) r^k, ...`` graded toward ``a``; first edge is ``a``."""
    if levels is None:
        levels = 60
    k = np.arange(levels, -1, -1)
    e = a + (b - a) * ratio**k
    return np.concatenate(([a], e))


def integrate_from(f, a, b, *, n=16, levels=60, tail_power=True):
    """Integrate ``f`` on ``(a, b]`` allowing an integrable singularity at ``a``.

    Geometric panels shrink toward ``a``; the remaining piece ``(a, a + w]``
    is handled by fitting ``f(a+s) ~ A s^p`` on the smallest panel.
    """
    if b <= a:
        return 0.0
    edges = geometric_edges(a, b, levels=levels)
    inner = edges[1:]
    parts = panels(f, inner, n)
    total = parts.sum()
    if tail_power:
        s1, s2 = inner[0] - a, inner[1] - a
        f1, f2 = f(np.array([a + s1])), f(np.array([a + s2]))
        f1, f2 = float(f1[0]), float(f2[0])
        if f1 != 0.0 and f2 != 0.0 and np.sign(f1) == np.sign(f2):
            p = np.log(f2 / f1) / np.log(s2 / s1)
            if p <= -1.0:
                raise QuadratureFailure("non-integrable singularity")
            total += f1 * s1 / (p + 1.0)
        else:
            total += f1 * s1
    return float(total)


def _piecewise(f, a, b, breaks, n):
    inner = [x for x in np.unique(np.asarray(breaks, dtype=float)) if a < x < b]
    if not inner:
        return integrate_from(f, a, b, n=n)
    edges = np.concatenate((inner, [b]))
    return integrate_from(f, a, inner[0], n=n) + float(panels(f, edges, n).sum())


def integrate_checked(f, a, b, *, rtol=1e-7, atol=1e-300, breaks=()):
    """:func:`integrate_from` at two orders; raise if they disagree.

    ``breaks`` are points where ``f`` is only piecewise smooth (table nodes).
    """
    hi = _piecewise(f, a, b, breaks, 24)
    lo = _piecewise(f, a, b, breaks, 12)
    if not np.isfinite(hi) or abs(hi - lo) > max(rtol * abs(hi), atol):
        raise QuadratureFailure(f"quadrature estimates disagree: {hi!r} vs {lo!r}")
    return hi
