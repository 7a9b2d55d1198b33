"""End-to-end acceptance checks.

Each test records one ``PASS`` / ``FAIL`` line with the measured value, the
tolerance and the runtime. ``conftest.py`` prints them in the terminal
summary.
"""

import math
import sys
import time
from pathlib import Path

import numpy as np
import pytest
from scipy.special import gamma

from volterra_markov import sim
from volterra_markov.gram import BalanceParams, balance_check, nondegeneracy_scan
from volterra_markov.kernels import KernelSpec, MatrixKernelSpec
from volterra_markov.lift import covariance_rank, flow_check, lift_state
from volterra_markov.markovtest import Verdict, conditional_mean_check, sigma_measurability_test
from volterra_markov.perturb import (
    C_alpha,
    PerturbationKind,
    PerturbationSpec,
    apply_perturbation,
    marchaud_forward,
    marchaud_values,
)
from volterra_markov.resolvents import TimeGrid, kz_kernel, mean_curve, pi_z, resolvent_EK, resolvent_first_kind

MARCHAUD = PerturbationKind.MARCHAUD
_LINES = []


def _emit(no, ok, detail, elapsed, budget):
    ok = bool(ok) and elapsed < budget
    line = f"acceptance {no:>2}: {'PASS' if ok else 'FAIL'}  {detail}  [{elapsed:.2f}s / {budget:g}s]"
    _LINES.append(line)
    print(line)
    return ok


def _marchaud(kernel, alphas, grid):
    return [apply_perturbation(kernel, PerturbationSpec(MARCHAUD, alpha=a), grid) for a in alphas]


def test_01_gram_singular_pair():
    t0 = time.perf_counter()
    mk = MatrixKernelSpec.column([KernelSpec.fractional(0.1), KernelSpec.fractional(0.3)])
    g = nondegeneracy_scan(mk, np.geomspace(1e-6, 1e-2, 25)).fitted_gamma_star
    assert _emit(1, 0.27 <= g <= 0.33, f"gamma*={g:.4f} in [0.27, 0.33]", time.perf_counter() - t0, 5)


def test_02_gram_regular_pair():
    t0 = time.perf_counter()
    mk = MatrixKernelSpec.column([KernelSpec.exponential(1.0), KernelSpec.exponential(2.0)])
    slope = 2.0 * nondegeneracy_scan(mk).fitted_gamma_star
    assert _emit(2, 1.9 <= slope <= 2.1, f"slope={slope:.4f} in [1.9, 2.1]", time.perf_counter() - t0, 5)


def test_03_marchaud_constant():
    t0 = time.perf_counter()
    H, a, t = 0.25, 0.1, 1e-5
    k = KernelSpec.fractional(H)
    c = C_alpha(H - 0.5, a)  # raises unless both quadratures agree to 1e-8
    ratio = float(marchaud_values(k, t, a)) / (t**-a * float(k(t)))
    rel = abs(ratio - c) / abs(c)
    assert _emit(3, rel < 0.02, f"ratio={ratio:.4f} C={c:.4f} rel={rel:.3e} < 0.02", time.perf_counter() - t0, 1)


def test_04_exponential_eigenrelation():
    t0 = time.perf_counter()
    a = 0.3
    kp = marchaud_forward(KernelSpec.exponential(1.0), PerturbationSpec(MARCHAUD, alpha=a), TimeGrid(2**-6, 128))
    t = np.asarray(kp.table[0])
    t = t[(t >= 0.01) & (t <= 2.0)]
    exact = gamma(-a) * (2.0**a - 1.0) * np.exp(-t)
    dev = float(np.max(np.abs(kp(t) - exact) / np.abs(exact)))
    assert _emit(4, dev < 1e-6, f"sup rel dev={dev:.3e} < 1e-6", time.perf_counter() - t0, 1)


def test_05_resolvent_identity():
    t0 = time.perf_counter()
    k = KernelSpec.fractional(0.3)
    r1 = resolvent_first_kind(k, TimeGrid(2**-11, 2**11)).residual
    r2 = resolvent_first_kind(k, TimeGrid(2**-12, 2**12)).residual
    ok = r2 < 1e-3 and r1 / r2 >= 1.5
    assert _emit(5, ok, f"residual={r2:.3e} < 1e-3, halving ratio={r1 / r2:.2f} >= 1.5", time.perf_counter() - t0, 10)


def test_06_kz_exactness_and_bounds():
    t0 = time.perf_counter()
    k = KernelSpec.fractional(0.3)
    z = 0.25
    g = TimeGrid(2**-10, 1280)
    pi = kz_kernel(resolvent_EK(k, 0.0, g), pi_z(resolvent_EK(k, 0.0, g), z))
    m = (pi.Kz_times >= g.dt) & (pi.Kz_times <= 1.0)
    ref = k(pi.Kz_times[m] + z)
    rel = float(np.max(np.abs(pi.Kz[m] - ref) / ref))
    tab = resolvent_EK(k, -1.0, g)
    pb = kz_kernel(tab, pi_z(tab, z), slack=1e-2, t_range=(g.dt, 1.0))  # raises BoundViolation on failure
    lo, hi = pb.bound_ratio_range
    ok = rel < 5e-3 and lo >= 1 - pb.bound_f - 1e-2 and hi <= 1 + pb.bound_f + 1e-2
    assert _emit(6, ok, f"beta=0 rel={rel:.3e} < 5e-3; beta=-1 ratio in [{lo:.4f}, {hi:.4f}], f={pb.bound_f:.4f}",
                 time.perf_counter() - t0, 10)


@pytest.mark.slow
def test_07_conditional_mean():
    t0 = time.perf_counter()
    chk = conditional_mean_check(sim.volterra_cir(hurst=0.3), None, None, 0.5, 1.0, 2000, 200, seed=7, dt=2**-9)
    assert _emit(7, abs(chk.z) < 3, f"|z|={abs(chk.z):.3f} < 3", time.perf_counter() - t0, 300)


@pytest.mark.slow
def test_08_markov_dichotomy():
    t0 = time.perf_counter()
    grid = TimeGrid(2**-8, 128)
    out = {}
    for name, k in (("exp", KernelSpec.exponential(1.0)), ("frac", KernelSpec.fractional(0.1))):
        ens = sim.simulate_with_perturbation(sim.volterra_cir(kernel=k), grid, 100_000, 1, _marchaud(k, [0.05], grid))
        out[name] = sigma_measurability_test(ens, 0.5, n_bins=64, n_boot=500, seed=1)
    e, f = out["exp"], out["frac"]
    ok = (e.R < 0.02 and e.verdict is Verdict.MARKOV_CONSISTENT and f.R_ci[0] > 0
          and f.verdict is Verdict.PATH_DEPENDENT)
    detail = (f"exp R={e.R:.4f} {e.verdict.value}; frac R={f.R:.4f} "
              f"CI=[{f.R_ci[0]:.4f}, {f.R_ci[1]:.4f}] {f.verdict.value}")
    assert _emit(8, ok, detail, time.perf_counter() - t0, 600)


def test_09_lift_consistency():
    t0 = time.perf_counter()
    grid = TimeGrid(2**-7, 128)
    worst_c, worst_r = 0.0, 0.0
    for model in (sim.volterra_cir(hurst=0.3), sim.rough_heston()):
        ens = sim.simulate_sve(model, grid, 8, 3, retain_history=True)
        for p in range(ens.n_paths):
            for t, s in ((0.0, 0.5), (0.25, 0.25), (0.5, 0.125), (0.75, 0.25)):
                st = lift_state(ens, p, t)
                x = ens.raw()[p, grid.index(t)]
                rel = np.abs(st.curve[:, 0] - x) / np.maximum(1.0, np.abs(x))
                worst_c = max(worst_c, float(np.max(rel)))
                fc = flow_check(ens, p, t, s)
                worst_r = max(worst_r, fc.residual / fc.scale)
    # zero up to rounding: the scheme sums the same terms in blocked order
    tol = 64 * np.finfo(float).eps
    ok = worst_c <= tol and worst_r < 1e-12
    assert _emit(9, ok, f"max|X(0)-X|={worst_c:.1e} <= {tol:.1e}, flow residual/scale={worst_r:.2e} < 1e-12",
                 time.perf_counter() - t0, 30)


@pytest.mark.slow
def test_10_covariance_rank():
    t0 = time.perf_counter()
    grid = TimeGrid(2**-8, 128)
    ke, kf = KernelSpec.exponential(1.0), KernelSpec.fractional(0.3)
    ee = sim.simulate_with_perturbation(sim.volterra_cir(kernel=ke), grid, 20000, 1,
                                        _marchaud(ke, (0.1, 0.2, 0.3), grid))
    re = covariance_rank(ee, 0.5, n_boot=500, seed=1)
    ef = sim.simulate_with_perturbation(sim.volterra_cir(kernel=kf), grid, 20000, 1,
                                        _marchaud(kf, (0.05, 0.1, 0.15, 0.2), grid))
    rf = covariance_rank(ef, 0.5, n_boot=500, seed=1)
    ok = re.rank == 1 and re.ci_low[1] <= re.floor and rf.rank == 4 and np.all(rf.ci_low > rf.floor)
    detail = (f"exp rank={re.rank} (lambda2 CI low {re.ci_low[1]:.1e} <= floor {re.floor:.1e}); "
              f"frac rank={rf.rank} (lambda4 CI low {rf.ci_low[3]:.1e} > floor {rf.floor:.1e})")
    assert _emit(10, ok, detail, time.perf_counter() - t0, 300)


@pytest.mark.slow
def test_11_mc_sanity():
    t0 = time.perf_counter()
    grid = TimeGrid(2**-8, 256)
    P = 100_000
    H = 0.3
    x = sim.simulate_sve(sim.gaussian_fractional(H), grid, P, 4, weight_mode="variance-exact").X[:, -1, 0]
    target = float(KernelSpec.fractional(H).cumulative(1.0, 2))
    v = x.var(ddof=1)
    z_var = abs(v - target) / (v * math.sqrt(2.0 / (P - 1)))
    m = sim.volterra_cir(hurst=H)
    y = sim.simulate_sve(m, grid, P, 5).raw()[:, -1, 0]
    mc = mean_curve(resolvent_EK(m.kernel_b.entry(0, 0), -0.7, grid), 0.3, 0.3)[-1]
    z_mean = abs(y.mean() - mc) / (y.std(ddof=1) / math.sqrt(P))
    ok = z_var < 3 and z_mean < 3
    assert _emit(11, ok, f"variance {z_var:.2f} stderr < 3; CIR mean {z_mean:.2f} stderr < 3",
                 time.perf_counter() - t0, 120)


def test_12_balance_worked_sets():
    t0 = time.perf_counter()
    got = [
        balance_check(BalanceParams(H_b=0.3, H_sigma=0.3, chi_sigma=0.5)).verdict,
        balance_check(BalanceParams(gamma_star=1.0, gamma=0.5)).verdict,
        balance_check(BalanceParams(H_b=0.2, H_sigma=0.8, chi_b=1.0, chi_sigma=1.0)).verdict,
    ]
    ok = got == [True, False, False]
    assert _emit(12, ok, f"verdicts={got} == [True, False, False]", time.perf_counter() - t0, 1)


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider", "--rootdir", str(Path(__file__).parent)]))
