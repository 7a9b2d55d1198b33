import numpy as np
import pytest
from scipy.special import gamma

from volterra_markov.errors import GridMismatch, InvalidParams
from volterra_markov.kernels import KernelSpec
from volterra_markov.resolvents import (
    TimeGrid,
    cond_exp_coeffs,
    kz_kernel,
    mean_curve,
    pi_z,
    resolvent_EK,
    resolvent_first_kind,
)


def test_grid_index_and_mismatch():
    g = TimeGrid.from_horizon(1.0, 2**-6)
    assert g.n_steps == 64
    assert g.index(0.5) == 32
    with pytest.raises(GridMismatch):
        g.index(0.3)
    with pytest.raises(GridMismatch):
        TimeGrid.from_horizon(1.0, 0.3)
    with pytest.raises(InvalidParams):
        TimeGrid(-1.0, 3)


def test_fractional_resolvent_masses():
    H = 0.3
    g = TimeGrid(2**-10, 1024)
    tab = resolvent_first_kind(KernelSpec.fractional(H), g)
    assert tab.atom == 0.0
    # L(t) = t^(-1/2-H) / Gamma(1/2-H); its cell integrals
    edges = np.arange(g.n_steps + 1) * g.dt
    cell = (edges[1:] ** (0.5 - H) - edges[:-1] ** (0.5 - H)) / ((0.5 - H) * gamma(0.5 - H))
    rel = np.abs(tab.lam / cell - 1)
    assert rel[100:].max() < 5e-3
    assert rel[500:].max() < rel[100:200].max()
    assert tab.residual < 2e-3


def test_exponential_kernel_has_atom_and_unit_density():
    g = TimeGrid(2**-9, 512)
    tab = resolvent_first_kind(KernelSpec.exponential(1.0), g)
    assert tab.atom == 1.0
    # K * (delta + 1) = 1; the first cell carries a discretization artifact
    assert np.max(np.abs(tab.L0[5:] - 1.0)) < 5e-3
    assert tab.residual < 1e-3


def test_resolvent_residual_shrinks_with_dt():
    k = KernelSpec.fractional(0.3)
    r = [resolvent_first_kind(k, TimeGrid(2.0**-p, 2**p)).residual for p in (8, 9, 10)]
    assert r[0] > 1.5 * r[1] > 2.25 * r[2]


def test_EK_fractional_is_mittag_leffler():
    beta, H = -0.7, 0.3
    g = TimeGrid(2**-10, 1024)
    tab = resolvent_EK(KernelSpec.fractional(H), beta, g)
    ml = KernelSpec.mittag_leffler(H, -beta)
    for t in (0.1, 0.5, 0.9):
        assert tab.EK_at(t) == pytest.approx(float(ml(t)), rel=5e-3)


def test_EK_exponential_closed_form():
    beta = -0.5
    g = TimeGrid(2**-9, 512)
    tab = resolvent_EK(KernelSpec.exponential(1.0), beta, g)
    mids = (np.arange(1, 513) - 0.5) * g.dt
    assert np.max(np.abs(tab.EK[1:] - np.exp(-(1 - beta) * mids))) < 2e-3


def test_pi_routes_agree_and_beta_zero_kz_is_shift():
    k = KernelSpec.fractional(0.3)
    g = TimeGrid(2**-10, 1280)
    tab = resolvent_EK(k, 0.0, g)
    pi = kz_kernel(tab, pi_z(tab, 0.25))
    assert pi.route_discrepancy < 1e-10
    m = pi.Kz_times >= g.dt
    rel = np.abs(pi.Kz[m] - k(pi.Kz_times[m] + 0.25)) / k(pi.Kz_times[m] + 0.25)
    assert rel.max() < 5e-3


def test_constant_kernel_conditional_mean_is_classical():
    # K = 1, beta = 0: E[X_T | F_t] = X_t + b (T - t)
    g = TimeGrid(2**-6, 66)
    tab = resolvent_EK(KernelSpec.constant(1.0), 0.0, g)
    pi = pi_z(tab, 0.5)
    co = cond_exp_coeffs(tab, pi, 0.5, 1.0, b=0.3, x0=0.2)
    assert co.c2 == pytest.approx(1.0)
    assert co.c0 == pytest.approx(0.15, rel=1e-12)
    assert abs(co.c1_x0) < 1e-14
    assert np.max(np.abs(co.dPi)) < 1e-14
    hist = np.linspace(0.2, 0.7, 33)
    assert co.evaluate(hist) == pytest.approx(0.7 + 0.15)


def test_mean_curve_solves_discrete_equation():
    k = KernelSpec.fractional(0.3)
    g = TimeGrid(2**-7, 128)
    b, beta, x0 = 0.3, -0.7, 0.3
    tab = resolvent_EK(k, beta, g)
    m = mean_curve(tab, b, x0)
    w = g.cell_averages(k) * g.dt
    for n in (1, 17, 128):
        rhs = x0 + np.sum(w[n - np.arange(n)] * (b + beta * m[:n]))
        assert m[n] == pytest.approx(rhs, rel=1e-12)


def test_pi_requires_EK_and_grid_multiple():
    g = TimeGrid(2**-6, 64)
    tab = resolvent_first_kind(KernelSpec.fractional(0.3), g)
    with pytest.raises(InvalidParams):
        pi_z(tab, 0.25)
    tab = tab.with_EK(-0.5)
    with pytest.raises(GridMismatch):
        pi_z(tab, 0.3)
