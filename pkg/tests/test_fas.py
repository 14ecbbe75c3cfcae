import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fasunet import fas
from fasunet.model import BlurSpec, ModelParams, apply_F, eval_energy


def test_config_validation():
    with pytest.raises(ValueError):
        fas.FasConfig(levels=0)
    with pytest.raises(ValueError):
        fas.FasConfig(k_l=-1)
    with pytest.raises(ValueError):
        fas.FasConfig(levels=2, k_m=0)
    with pytest.raises(ValueError):
        fas.FasConfig(tau=-0.1)


def test_hierarchy_extents_and_minimum():
    h = fas.build_hierarchy((17, 10), ModelParams(), fas.FasConfig(levels=3, min_coarse_extent=2))
    assert h.extents == [(17, 10), (9, 5), (5, 3)]
    with pytest.raises(ValueError, match="min_coarse_extent"):
        fas.build_hierarchy((8, 8), ModelParams(), fas.FasConfig(levels=4))


def test_auto_tau_bound():
    p = ModelParams(mu=0.1, nu=1.0, eps_tv=0.01)
    assert fas.auto_tau(p) == pytest.approx(1.0 / (1.0 + 0.1 * (8.0 + 400.0)))
    lin = ModelParams(mu=0.1, nu=1.0, tv_enabled=False)
    assert fas.auto_tau(lin) == pytest.approx(1.0 / 1.8)


def test_smoother_reduces_residual(rng):
    p = ModelParams(mu=0.2, nu=0.5, eps_tv=0.1)
    b = rng.standard_normal((1, 12, 12))
    u0 = np.zeros_like(b)
    r0 = np.linalg.norm(b - apply_F(u0, p))
    u = fas.smooth(u0, b, p, 20)
    assert np.linalg.norm(b - apply_F(u, p)) < r0
    assert np.array_equal(fas.smooth(u0, b, p, 0), u0)


def test_smoother_divergence_is_reported():
    p = ModelParams(mu=0.1, nu=1.0, tv_enabled=False)
    b = np.ones((1, 8, 8))
    with pytest.raises(fas.DivergenceError):
        fas.smooth(np.zeros_like(b), b, p, 2000, tau=1e3)


def test_restrict_prolong_preserve_constants():
    assert np.allclose(fas.restrict(np.full((9, 8), 2.0)), 2.0)
    assert np.allclose(fas.prolong(np.full((5, 4), -1.0), 9, 8), -1.0)
    with pytest.raises(ValueError):
        fas.prolong(np.zeros((4, 4)), 9, 9)


def test_prolong_is_bilinear_on_linear_functions():
    ii, jj = np.mgrid[0:5, 0:6]
    coarse = 2.0 * ii - 3.0 * jj
    fine = fas.prolong(coarse, 9, 11)
    fi, fj = np.mgrid[0:9, 0:11]
    assert np.allclose(fine, fi - 1.5 * fj)


@settings(max_examples=30, deadline=None)
@given(st.integers(5, 16), st.integers(5, 16), st.integers(0, 2**31 - 1))
def test_restrict_prolong_adjoint_on_interior(H, W, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((H, W))
    h, w = (H + 1) // 2, (W + 1) // 2
    y = np.zeros((h, w))
    y[1:-1, 1:-1] = rng.standard_normal((h - 2, w - 2))
    assert abs(4 * np.sum(fas.restrict(x) * y) - np.sum(x * fas.prolong(y, H, W))) < 1e-10


def test_single_level_is_plain_smoothing(rng):
    p = ModelParams(mu=0.1, nu=1.0, tv_enabled=False)
    cfg = fas.FasConfig(levels=1, k_m=5)
    b = rng.standard_normal((1, 8, 8))
    h = fas.build_hierarchy((8, 8), p, cfg)
    assert np.allclose(fas.fas_vcycle(b, b, 1, h, cfg), fas.smooth(b, b, p, 5))


def test_solve_traces_and_energy_decrease(rng):
    f = rng.random((32, 32))
    p = ModelParams(mu=0.3, nu=0.05, eps_tv=0.1, blur=BlurSpec("gaussian", 1.0, 1))
    res = fas.solve(f, p, fas.FasConfig(levels=3, cycles=6))
    assert len(res.residual_norms) == len(res.energies) == 7
    assert res.residual_norms[-1] < 1e-2 * res.residual_norms[0]
    assert res.energies[-1] < res.energies[0]
    assert res.energies[-1] == pytest.approx(eval_energy(res.u, f, p))


def test_solve_rejects_bad_input():
    with pytest.raises(ValueError):
        fas.solve(np.zeros((2, 8, 8)), ModelParams(), fas.FasConfig())
    bad = np.zeros((16, 16))
    bad[3, 3] = np.nan
    with pytest.raises(ValueError):
        fas.solve(bad, ModelParams(), fas.FasConfig())


def test_solve_is_deterministic(rng):
    f = rng.random((16, 16))
    p, cfg = ModelParams(mu=0.2, eps_tv=0.1), fas.FasConfig(levels=2, cycles=3)
    assert np.array_equal(fas.solve(f, p, cfg).u, fas.solve(f, p, cfg).u)
