import math

import mpmath as mp
import numpy as np
import pytest
from scipy.special import gamma

from volterra_markov.errors import DivergentIntegral, InvalidOrder, InvalidParams, NoLimitAtInfinity, OutOfRegion
from volterra_markov.kernels import Family, KernelSpec
from volterra_markov.perturb import (
    C_alpha,
    PerturbationKind,
    PerturbationSpec,
    apply_perturbation,
    exp_span_project,
    fractional_integral_values,
    marchaud_exp,
    marchaud_forward,
    marchaud_values,
)
from volterra_markov.resolvents import TimeGrid

MARCHAUD = PerturbationKind.MARCHAUD


@pytest.mark.parametrize("rho, alpha", [(-0.25, 0.1), (-0.4, 0.05), (0.2, 0.6), (-0.1, 0.9)])
def test_C_alpha_closed_form(rho, alpha):
    mp.mp.dps = 30
    ref = mp.gamma(-alpha) * mp.gamma(alpha - rho) / mp.gamma(-rho)
    assert C_alpha(rho, alpha) == pytest.approx(float(ref), rel=1e-10)


def test_C_alpha_reference_value_and_region():
    assert C_alpha(-0.25, 0.1) == pytest.approx(-7.504629037705, abs=1e-11)
    assert C_alpha(0.0, 0.3) == 0.0
    with pytest.raises(OutOfRegion):
        C_alpha(0.5, 0.3)
    with pytest.raises(OutOfRegion):
        C_alpha(-0.2, 1.0)


def test_marchaud_exponential_eigenrelation():
    k = KernelSpec.exponential(1.0)
    t = np.linspace(0.01, 2.0, 50)
    a = 0.3
    exact = gamma(-a) * (2.0**a - 1.0) * np.exp(-t)
    assert np.max(np.abs(marchaud_values(k, t, a) / exact - 1)) < 1e-10


def test_marchaud_exp_closed_form_matches_quadrature():
    k = KernelSpec.exp_sum([(1.0, 1.0), (0.5, 4.0)])
    kp = marchaud_exp(k, 0.2, lambda_tilt=2.0)
    t = np.array([0.05, 0.5, 1.5])
    assert np.allclose(kp(t), marchaud_values(k, t, 0.2, lambda_tilt=2.0), rtol=1e-9)
    assert kp.family is Family.EXP_SUM


def test_marchaud_fractional_against_mpmath():
    mp.mp.dps = 40
    H, a, t = mp.mpf(3) / 10, mp.mpf(2) / 10, mp.mpf(3) / 10
    kk = lambda s: s ** (H - mp.mpf(1) / 2) / mp.gamma(H + mp.mpf(1) / 2)  # noqa: E731
    # near part in z = t u with the u^(-alpha) singularity split off exactly
    h = lambda u: (kk(t + t * u) - kk(t)) * mp.exp(-t * u) / u  # noqa: E731
    h0 = t * mp.diff(kk, t)
    near = t**-a * (h0 / (1 - a) + mp.quad(lambda u: (h(u) - h0) * u**-a, [0, 1]))
    far = mp.quad(lambda z: (kk(t + z) - kk(t)) * mp.exp(-z) * z ** (-1 - a), [t, 1, 10, mp.inf])
    got = marchaud_values(KernelSpec.fractional(0.3), 0.3, 0.2)
    assert got == pytest.approx(float(near + far), rel=1e-12)


def test_marchaud_small_t_ratio_approaches_constant():
    # deviation from C(alpha) decays like t^alpha
    H, a = 0.25, 0.1
    k = KernelSpec.fractional(H)
    c = C_alpha(H - 0.5, a)
    dev = [abs(marchaud_values(k, t, a) / (t**-a * float(k(t))) - c) for t in (1e-6, 1e-10)]
    assert dev[1] < dev[0]
    assert dev[0] / dev[1] == pytest.approx(10 ** (4 * a), rel=0.1)


def test_marchaud_order_and_integrability_errors():
    with pytest.raises(InvalidOrder):
        marchaud_values(KernelSpec.fractional(0.9), 0.5, 0.3)
    grid = TimeGrid(2**-6, 64)
    with pytest.raises(DivergentIntegral):
        marchaud_forward(KernelSpec.fractional(0.1), PerturbationSpec(MARCHAUD, alpha=0.15), grid)
    with pytest.raises(InvalidOrder):
        PerturbationSpec(MARCHAUD, alpha=1.2)
    with pytest.raises(InvalidParams):
        PerturbationSpec(MARCHAUD, alpha=0.2, lambda_tilt=0.0)


def test_marchaud_forward_table_shifts_index():
    grid = TimeGrid(2**-6, 64)
    kp = marchaud_forward(KernelSpec.fractional(0.3), PerturbationSpec(MARCHAUD, alpha=0.1), grid)
    assert kp.family is Family.TABLE
    # local slope at the first table nodes, below the limiting index -0.3
    assert -0.45 < kp.index < -0.3


def test_fractional_integral_of_exponential():
    k = KernelSpec.exponential(1.0)
    t = np.array([0.1, 1.0])
    a, lam = 0.4, 0.5
    assert np.allclose(fractional_integral_values(k, t, a, lam), np.exp(-t) * (1 + lam) ** -a, rtol=1e-9)
    with pytest.raises(NoLimitAtInfinity):
        fractional_integral_values(KernelSpec.fractional(0.7), 0.5, 0.3)


def test_apply_perturbation_dispatch():
    grid = TimeGrid(2**-6, 64)
    e = KernelSpec.exponential(1.0)
    d = apply_perturbation(e, PerturbationSpec(PerturbationKind.DERIVATIVE), grid)
    assert float(d(0.5)) == pytest.approx(-math.exp(-0.5), rel=1e-6)
    s = apply_perturbation(e, PerturbationSpec(PerturbationKind.SHIFT, shift_z=0.2), grid)
    assert float(s(0.1)) == pytest.approx(math.exp(-0.3))
    c = apply_perturbation(KernelSpec.exp_sum([(1.0, 1.0), (0.3, 0.0)]), PerturbationSpec(PerturbationKind.CONSTANT),
                           grid)
    assert c.family is Family.CONSTANT and c.scale == pytest.approx(0.3)
    with pytest.raises(NoLimitAtInfinity):
        apply_perturbation(e, PerturbationSpec(PerturbationKind.CONSTANT), grid)


def test_spec_round_trip():
    spec = PerturbationSpec(MARCHAUD, alpha=0.05, lambda_tilt=2.0, coordinate=1)
    assert PerturbationSpec.from_dict(spec.to_dict()) == spec
    with pytest.raises(InvalidParams):
        PerturbationSpec.from_dict({"kind": "MarchaudDerivative", "beta": 1})


def test_exp_span_projection():
    k = KernelSpec.exp_sum([(1.0, 1.0), (1.0, 3.0)])
    inside = exp_span_project(k, KernelSpec.exp_sum([(2.0, 1.0), (-1.0, 3.0)]))
    assert inside.residual < 1e-10
    assert np.allclose(inside.coefficients, [2.0, -1.0])
    outside = exp_span_project(k, KernelSpec.fractional(0.3))
    assert outside.residual > 1e-3
    grid = TimeGrid(2**-6, 64)
    tab = marchaud_forward(KernelSpec.exponential(1.0), PerturbationSpec(MARCHAUD, alpha=0.3), grid)
    assert exp_span_project(KernelSpec.exponential(1.0), tab).residual < 1e-8
