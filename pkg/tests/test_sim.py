import math

import numpy as np
import pytest

from volterra_markov import sim
from volterra_markov.errors import InvalidParams, MissingHistory, NumericalBlowup
from volterra_markov.kernels import KernelSpec, MatrixKernelSpec
from volterra_markov.resolvents import TimeGrid, cond_exp_coeffs, mean_curve, pi_z, resolvent_EK


@pytest.fixture(scope="module")
def grid():
    return TimeGrid(2**-7, 128)


def test_brownian_motion_variance(grid):
    ens = sim.simulate_sve(sim.gaussian_fractional(0.5), grid, 20000, 3)
    v = ens.X[:, -1, 0].var(ddof=1)
    assert abs(v - 1.0) < 3 * math.sqrt(2.0 / 20000)


def test_variance_exact_mode_matches_kernel_energy(grid):
    k = KernelSpec.fractional(0.2)
    ens = sim.simulate_sve(sim.gaussian_fractional(0.2), grid, 20000, 5, weight_mode="variance-exact")
    target = k.cumulative(1.0, 2)
    # every step has exact one-step variance, so the terminal variance is exact
    assert abs(ens.X[:, -1, 0].var(ddof=1) - target) < 3 * target * math.sqrt(2.0 / 20000)


def test_deterministic_model_follows_mean_curve(grid):
    k = KernelSpec.fractional(0.3)
    mk = MatrixKernelSpec.diagonal([k])
    m = sim.ModelSpec(mk, mk, sim.AffineDrift([0.3], [[-0.7]]), sim.ConstantDiffusion([[0.0]]),
                      sim.InitialCurve([0.3]))
    ens = sim.simulate_sve(m, grid, 2, 0)
    mc = mean_curve(resolvent_EK(k, -0.7, grid), 0.3, 0.3)
    assert np.max(np.abs(ens.X[0, :, 0] - mc)) < 1e-13


def test_cir_mean(grid):
    m = sim.volterra_cir()
    ens = sim.simulate_sve(m, grid, 20000, 11)
    mc = mean_curve(resolvent_EK(m.kernel_b.entry(0, 0), -0.7, grid), 0.3, 0.3)
    x = ens.raw()[:, -1, 0]
    assert abs(x.mean() - mc[-1]) < 3.5 * x.std() / math.sqrt(x.size)
    assert np.all(ens.X >= 0)


def test_exp_fast_path_matches_direct(grid):
    m = sim.volterra_cir(kernel=KernelSpec.exp_sum([(1.0, 2.0), (0.5, 10.0)]))
    a = sim.simulate_sve(m, grid, 64, 4)
    b = sim.simulate_sve(m, grid, 64, 4, fast_path=False)
    assert np.max(np.abs(a.X - b.X)) < 1e-13


def test_seed_and_worker_determinism(grid, monkeypatch):
    m = sim.volterra_cir()
    a = sim.simulate_sve(m, grid, 50, 9)
    b = sim.simulate_sve(m, grid, 50, 9)
    assert np.array_equal(a.X, b.X)
    monkeypatch.setattr(sim, "CHUNK_ELEMENTS", 2000)
    c = sim.simulate_sve(m, grid, 50, 9)
    d = sim.simulate_sve(m, grid, 50, 9, workers=3)
    assert np.array_equal(c.X, d.X)
    # chunk size only changes BLAS summation order
    assert np.max(np.abs(a.X - c.X)) < 1e-13
    # a path does not depend on the ensemble size
    e = sim.simulate_sve(m, grid, 10, 9)
    assert np.max(np.abs(e.X - a.X[:10])) < 1e-13


def test_path_normals_streams_are_independent_of_batch():
    z1 = sim.path_normals(5, [3, 4], 10, 2)
    z2 = sim.path_normals(5, [4], 10, 2)
    assert np.array_equal(z1[1], z2[0])


def test_perturbation_with_same_kernel_reproduces_state(grid):
    m = sim.volterra_cir()
    ens = sim.simulate_with_perturbation(m, grid, 200, 1, [m.kernel_b.entry(0, 0)])
    assert np.max(np.abs(ens.Z[:, :, 0] - (ens.raw()[:, :, 0] - 0.3))) < 1e-13


def test_rough_heston_shapes(grid):
    m = sim.rough_heston()
    ens = sim.simulate_sve(m, grid, 100, 2, retain_history=True)
    assert ens.X.shape == (100, 129, 2)
    assert ens.dW.shape == (100, 128, 2)
    assert np.all(ens.X[:, :, 1] >= 0)


def test_blowup_detection(grid):
    mk = MatrixKernelSpec.diagonal([KernelSpec.constant(1.0)])
    m = sim.ModelSpec(mk, mk, sim.AffineDrift([0.0], [[40.0]]), sim.ConstantDiffusion([[0.0]]),
                      sim.InitialCurve([1.0]), blowup_bound=1e6)
    with pytest.raises(NumericalBlowup):
        sim.simulate_sve(m, grid, 2, 0)


def test_model_validation():
    mk = MatrixKernelSpec.diagonal([KernelSpec.fractional(0.3)])
    with pytest.raises(InvalidParams):
        sim.ModelSpec(mk, mk, sim.AffineDrift([-0.1], [[0.0]]), sim.SqrtDiffusion([0.3]), sim.InitialCurve([0.3]))
    with pytest.raises(InvalidParams):
        sim.HestonDiffusion(rho=1.5, sigma=0.3)
    m = sim.volterra_cir()
    assert sim.ModelSpec.from_dict(m.to_dict()) == m


def test_dump_round_trip(tmp_path, grid):
    m = sim.volterra_cir()
    ens = sim.simulate_with_perturbation(m, grid, 7, 1, [KernelSpec.fractional(0.2)])
    ens.dump(tmp_path / "e.bin")
    raw = (tmp_path / "e.bin").read_bytes()
    assert np.frombuffer(raw[:32], dtype="<u8").tolist() == [1, 1, 128, 7]
    X, Z = sim.PathEnsemble.load_dump(tmp_path / "e.bin")
    assert np.array_equal(X, ens.X) and np.array_equal(Z, ens.Z)


def test_conditional_mean_formula_is_exact_for_the_scheme():
    # with the future noise switched off the continuation is the conditional mean
    g = TimeGrid(2**-7, 130)
    k = KernelSpec.fractional(0.3)
    mk = MatrixKernelSpec.diagonal([k])
    m = sim.ModelSpec(mk, mk, sim.AffineDrift([0.3], [[-0.7]]), sim.ConstantDiffusion([[0.3]]),
                      sim.InitialCurve([0.3]))
    tab = resolvent_EK(k, -0.7, g)
    co = cond_exp_coeffs(tab, pi_z(tab, 0.5), 0.5, 1.0, 0.3, 0.3)
    sg = TimeGrid(g.dt, 128)
    ens = sim.simulate_sve(m, sg, 8, 2, retain_history=True)
    from volterra_markov.lift import forward_contribution

    n = sg.index(0.5)
    chans = sim._channels(m, sg, "cell-average", False)
    base = m.g(sg.nodes[n:])[:, None, :] + forward_contribution(ens, chans, n, np.arange(8))
    Xc = sim._engine(m, chans, sg, n, base, ens.X[:, n, :], np.zeros((8, 128 - n, 1)), False)[0]
    assert np.max(np.abs(Xc[-1, :, 0] - co.evaluate(ens.X[:, : n + 1, 0]))) < 1e-13


def test_branching(grid):
    m = sim.volterra_cir()
    ens = sim.simulate_sve(m, grid, 5, 1, retain_history=True)
    br = sim.branch_paths(ens, 0.5, 400, 3, keep=True)
    assert br.X_T.shape == (5, 400, 1)
    again = sim.branch_paths(ens, 0.5, 400, 3)
    assert np.array_equal(br.mean, again.mean)
    with pytest.raises(MissingHistory):
        sim.branch_paths(sim.simulate_sve(m, grid, 2, 1), 0.5, 10, 0)
