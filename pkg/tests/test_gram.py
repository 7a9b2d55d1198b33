import math

import mpmath as mp
import numpy as np
import pytest

from volterra_markov.errors import DegenerateSystem, InvalidParams
from volterra_markov.gram import (
    BalanceParams,
    affine_Mz_scan,
    balance_check,
    gram_matrix,
    jacobi_eigenvalues,
    nondegeneracy_scan,
    product_integral,
)
from volterra_markov.kernels import KernelSpec, MatrixKernelSpec
from volterra_markov.resolvents import TimeGrid, kz_kernel, pi_z, resolvent_EK


def test_product_integral_closed_forms_against_quadrature():
    a, b = KernelSpec.fractional(0.1), KernelSpec.fractional(0.3)
    mp.mp.dps = 30
    ref = mp.quad(lambda r: r ** (-0.4) * r ** (-0.2), [0, 0.01]) / (mp.gamma(0.6) * mp.gamma(0.8))
    assert product_integral(a, b, 0.01) == pytest.approx(float(ref), rel=1e-13)
    e1, e2 = KernelSpec.exponential(1.0), KernelSpec.exponential(2.0)
    assert product_integral(e1, e2, 0.5) == pytest.approx(-math.expm1(-1.5) / 3.0, rel=1e-14)


def test_product_integral_generic_pair():
    a, b = KernelSpec.gamma_kernel(0.3, 1.0), KernelSpec.fractional(0.2)
    mp.mp.dps = 30
    f = lambda r: r ** (-0.2) * mp.e ** (-r) / mp.gamma(0.8) * r ** (-0.3) / mp.gamma(0.7)  # noqa: E731
    assert product_integral(a, b, 0.1) == pytest.approx(float(mp.quad(f, [0, 0.1])), rel=1e-7)


def test_gram_matrix_is_symmetric_psd():
    mk = MatrixKernelSpec.column([KernelSpec.fractional(h) for h in (0.1, 0.2, 0.4)])
    G = gram_matrix(mk, 0.1)
    assert np.array_equal(G, G.T)
    assert np.all(np.linalg.eigvalsh(G) > 0)


def test_jacobi_matches_lapack_and_keeps_small_eigenvalues():
    rng = np.random.default_rng(4)
    A = rng.standard_normal((6, 6))
    A = A @ A.T
    assert np.allclose(jacobi_eigenvalues(A), np.linalg.eigvalsh(A), rtol=1e-12)
    # graded matrix: diag scaling by 1e-8 keeps relative accuracy of the tiny eigenvalue
    D = np.diag([1.0, 1e-4, 1e-8])
    B = D @ np.array([[2.0, 0.5, 0.1], [0.5, 2.0, 0.3], [0.1, 0.3, 2.0]]) @ D
    mp.mp.dps = 50
    ref = sorted(float(x) for x in mp.eigsy(mp.matrix(B.tolist()))[0])
    assert jacobi_eigenvalues(B)[0] == pytest.approx(ref[0], rel=1e-12)


def test_jacobi_rejects_asymmetric():
    with pytest.raises(InvalidParams):
        jacobi_eigenvalues([[1.0, 2.0], [0.0, 1.0]])


def test_singular_pair_exponent():
    mk = MatrixKernelSpec.column([KernelSpec.fractional(0.1), KernelSpec.fractional(0.3)])
    rep = nondegeneracy_scan(mk)
    assert 0.27 <= rep.fitted_gamma_star <= 0.33
    assert rep.label == "estimated"
    assert rep.h_values.size == 25


def test_unnormalized_rows_reference_value():
    # rows t^(H-1/2) without the Gamma normalization
    ks = [KernelSpec.fractional(h, scale=math.gamma(h + 0.5)) for h in (0.1, 0.3)]
    lam = jacobi_eigenvalues(gram_matrix(MatrixKernelSpec.column(ks), 0.01))[0]
    assert lam == pytest.approx(2.53e-2, rel=1e-2)


def test_duplicate_rows_are_degenerate():
    k = KernelSpec.fractional(0.3)
    with pytest.raises(DegenerateSystem):
        nondegeneracy_scan(MatrixKernelSpec.column([k, k]))


def test_diagonal_blocks_reported():
    mk = MatrixKernelSpec.diagonal([KernelSpec.fractional(0.2), KernelSpec.fractional(0.4)])
    rep = nondegeneracy_scan(mk)
    assert set(rep.blocks) == {0, 1}
    assert rep.blocks[0].fitted_gamma_star == pytest.approx(0.2, abs=1e-6)
    assert rep.fitted_gamma_star == pytest.approx(0.4, abs=1e-6)


def test_affine_Mz_scan_reports_condition():
    k = KernelSpec.fractional(0.3)
    g = TimeGrid(2**-10, 1280)
    tab = resolvent_EK(k, -0.7, g)
    pi = kz_kernel(tab, pi_z(tab, 0.25))
    rep = affine_Mz_scan(k, pi, h_list=np.geomspace(1e-2, 2e-3, 8), gamma=0.3, fit_window=(2e-3, 1e-2))
    # K_z is smooth at 0, so the pair behaves like (t^(H-1/2), 1) with exponent 1/2
    assert rep.fitted_gamma_star == pytest.approx(0.5, abs=0.03)
    assert rep.condition_margin == pytest.approx(0.45 - rep.fitted_gamma_star)
    assert rep.condition_9 is (rep.condition_margin > 0)


@pytest.mark.parametrize(
    "params, verdict",
    [
        (dict(H_b=0.3, H_sigma=0.3, chi_sigma=0.5), True),
        (dict(gamma_star=1.0, gamma=0.5), False),
        (dict(H_b=0.2, H_sigma=0.8, chi_b=1.0, chi_sigma=1.0), False),
    ],
)
def test_balance_worked_sets(params, verdict):
    assert balance_check(BalanceParams(**params)).verdict is verdict


def test_balance_margins_and_errors():
    rep = balance_check(BalanceParams(gamma_star=0.3, gamma_b=0.3, gamma_sigma=0.3, gamma_K=0.3))
    assert rep.margins["h_condition"] == pytest.approx(0.15)
    d = balance_check(BalanceParams(gamma_star=[0.1, 0.5], gamma_b=0.3, gamma_sigma=0.3, gamma_K=0.3, diagonal=True))
    assert d.checks["h_condition"] is False
    with pytest.raises(InvalidParams):
        balance_check(BalanceParams())
    with pytest.raises(InvalidParams):
        balance_check(BalanceParams(H_b=-0.1, H_sigma=0.3))
