import numpy as np
import pytest

from klyzflow import flow
from klyzflow import geometry as geo
from klyzflow.grid import Grid
from klyzflow.scenarios import default_params, initial_state, random_field

from conftest import unit_metric


def _form(preset, n=16, **kw):
    grid = Grid.uniform(1, n)
    params = default_params("form_level_n1", preset, kw.pop("flow", None))
    return initial_state("form_level_n1", preset, grid, params, **kw), params


# background volume ------------------------------------------------------------


def test_background_volume_of_fixed_point_is_zero(grid1):
    g = unit_metric(grid1)
    assert np.abs(flow.solve_background_volume(grid1, g, g)).max() == 0.0


def test_background_volume_fourier_example():
    grid = Grid.uniform(1, 32)
    x, _ = grid.mesh()
    eps = 0.2
    omega = unit_metric(grid)
    alpha = geo.scalar_metric(grid, 1 + eps * np.cos(2 * np.pi * x))
    # (1/4) psi'' = omega - alpha = -eps cos  =>  psi = eps cos / pi^2
    psi = flow.solve_background_volume(grid, omega, alpha)
    assert np.allclose(psi, eps / np.pi**2 * np.cos(2 * np.pi * x), atol=1e-13)


def test_background_volume_rejects_wrong_class(grid1):
    g = unit_metric(grid1)
    with pytest.raises(flow.CohomologyMismatch):
        flow.solve_background_volume(grid1, g, 2.0 * g)


# right-hand sides ------------------------------------------------------------


def _dense_d1(n, period):
    # spectral first derivative matrix, even n, Nyquist dropped
    h = 2 * np.pi / n
    j = np.arange(n)
    d = j[:, None] - j[None, :]
    with np.errstate(divide="ignore"):
        m = 0.5 * (-1.0) ** d / np.tan(d * h / 2)
    m[d == 0] = 0.0
    return m * (2 * np.pi / period)


def _dense_d2(n, period):
    h = 2 * np.pi / n
    j = np.arange(n)
    d = j[:, None] - j[None, :]
    with np.errstate(divide="ignore"):
        m = -0.5 * (-1.0) ** d / np.sin(d * h / 2) ** 2
    m[d == 0] = -np.pi**2 / (3 * h**2) - 1 / 6
    return m * (2 * np.pi / period) ** 2


def _along(m, u, axis):
    return np.moveaxis(np.tensordot(m, np.moveaxis(u, axis, 0), axes=1), 0, axis)


def _dense_ddbar(grid, u):
    n = grid.n_complex
    d1 = [_dense_d1(p, L) for p, L in zip(grid.points_per_axis, grid.periods)]
    d2 = [_dense_d2(p, L) for p, L in zip(grid.points_per_axis, grid.periods)]
    out = np.empty(grid.shape + (n, n), dtype=complex)
    for i in range(n):
        for j in range(n):
            if i == j:
                out[..., i, i] = 0.25 * (_along(d2[2 * i], u, 2 * i) + _along(d2[2 * i + 1], u, 2 * i + 1))
                continue
            dz = lambda v: 0.5 * (_along(d1[2 * i], v, 2 * i) - 1j * _along(d1[2 * i + 1], v, 2 * i + 1))
            dzb = lambda v: 0.5 * (_along(d1[2 * j], v, 2 * j) + 1j * _along(d1[2 * j + 1], v, 2 * j + 1))
            out[..., i, j] = dz(dzb(u.astype(complex)))
    return out


@pytest.mark.parametrize("n, points", [(1, 32), (2, 8)])
def test_rhs_potential_matches_dense_oracle(n, points):
    grid = Grid.uniform(n, points)
    scen = "potential_torus_n1" if n == 1 else "potential_torus_n2"
    params = default_params(scen, "perturbed")
    state = initial_state(scen, "perturbed", grid, params, amplitude=1e-2, modes=1)
    phi = 2e-3 * random_field(grid, 7, 1)
    f = 1e-3 * random_field(grid, 8, 1)
    state = state.with_fields(0.0, {"phi": phi, "f": f})
    got = flow.rhs_potential(state, params)

    g = state.background + _dense_ddbar(grid, phi)
    alpha = state.background_alpha
    c_phi, c_f = state.gauge
    dphi = np.log(np.linalg.det(g).real) - state.log_omega - c_phi + params.lam * phi + f
    g_inv = np.linalg.inv(g)
    lap_f = np.einsum("...ji,...ij->...", g_inv, _dense_ddbar(grid, f)).real
    df = lap_f + np.einsum("...ji,...ij->...", g_inv, alpha).real - c_f
    assert np.abs(got["phi"] - dphi).max() < 1e-8
    assert np.abs(got["f"] - df).max() < 1e-8


def test_rhs_potential_constant_f_shifts_phi():
    grid = Grid.uniform(1, 16)
    params = default_params("potential_torus_n1", "flat_fixed_point")
    state = initial_state("potential_torus_n1", "flat_fixed_point", grid, params)
    state = state.with_fields(0.0, {"phi": state.phi, "f": np.full(grid.shape, 0.3)})
    r = flow.rhs_potential(state, params)
    assert np.allclose(r["phi"], 0.3, atol=1e-14)
    assert np.abs(r["f"]).max() < 1e-14


def test_rhs_form_level_examples():
    s, p = _form("flat_fixed_point")
    r = flow.rhs(s, p)
    assert np.abs(r["g"]).max() == 0.0 and np.abs(r["alpha"]).max() == 0.0
    s, p = _form("exponential")
    assert np.allclose(flow.rhs(s, p)["g"], 0.5)
    grid = Grid.uniform(1, 16)
    x, _ = grid.mesh()
    p = default_params("form_level_n1", "frozen_heat", {"kappa": 2.0})
    s = flow.make_form_state(grid, np.ones(grid.shape), 1 + 0.1 * np.cos(2 * np.pi * x))
    r = flow.rhs(s, p)
    assert np.abs(r["g"]).max() == 0.0
    assert np.allclose(r["alpha"], -2.0 * 4 * np.pi**2 * 0.1 * np.cos(2 * np.pi * x), atol=1e-10)


def test_rhs_rejects_mismatched_formulation():
    s, _ = _form("flat_fixed_point")
    with pytest.raises(ValueError):
        flow.rhs(s, flow.FlowParams(formulation="potential"))


def test_params_validation():
    with pytest.raises(ValueError):
        flow.FlowParams(kappa=0.0)
    with pytest.raises(ValueError):
        flow.FlowParams(formulation="potential", kappa=2.0)
    p = flow.FlowParams(formulation="potential", kappa=2.0, generalized_kappa=True)
    assert (p.a, p.b) == (-2.0, 2.0)
    assert flow.FlowParams(heat_normalization="complex").c_heat == 0.25


# integration ------------------------------------------------------------


def test_fixed_point_is_stationary():
    s, p = _form("flat_fixed_point")
    rec = flow.run(s, p, 0.1, 1e-2, sample_every=0.05)
    assert rec.cause == "reached_T"
    assert flow.field_drift(rec.samples[0], rec.samples[-1]) == 0.0


def test_exponential_solution_and_order():
    errs = []
    for dt in (0.1, 0.05):
        s, p = _form("exponential")
        rec = flow.run(s, p, 1.0, dt, sample_every=0.5)
        errs.append(np.abs(rec.samples[-1].g_coeff - np.exp(0.5)).max())
    assert errs[0] < 1e-7
    assert np.log2(errs[0] / errs[1]) > 3.5


def test_area_follows_ode():
    s, p = _form("exponential")
    rec = flow.run(s, p, 1.0, 1e-2, sample_every=0.25)
    t = np.array(rec.times)
    assert np.allclose(rec.area, np.exp(0.5 * t), rtol=1e-12)


@pytest.mark.parametrize("kappa", [0.5, 2.0])
def test_frozen_heat_decay(kappa):
    grid = Grid.uniform(1, 16)
    x, _ = grid.mesh()
    p = default_params("form_level_n1", "frozen_heat", {"kappa": kappa})
    s = flow.make_form_state(grid, np.ones(grid.shape), 1 + 0.1 * np.cos(2 * np.pi * x))
    rec = flow.run(s, p, 0.05, 1e-3, sample_every=0.05)
    exact = 1 + 0.1 * np.exp(-4 * np.pi**2 * kappa * 0.05) * np.cos(2 * np.pi * x)
    assert np.abs(rec.samples[-1].alpha_coeff - exact).max() < 1e-12


def test_potential_flow_preserves_classes():
    grid = Grid.uniform(1, 16)
    p = default_params("potential_torus_n1", "perturbed")
    s = initial_state("potential_torus_n1", "perturbed", grid, p, amplitude=5e-2)
    rec = flow.run(s, p, 0.1, 5e-3, sample_every=0.05)
    for smp in rec.samples:
        assert np.allclose(grid.mean(smp.metric()), grid.mean(s.metric()), atol=1e-13)
        assert np.allclose(grid.mean(smp.alpha()), grid.mean(s.alpha()), atol=1e-13)


def test_positivity_loss_terminates():
    grid = Grid.uniform(1, 16)
    p = flow.FlowParams()
    s = flow.make_form_state(grid, np.ones(grid.shape), np.full(grid.shape, -5.0))
    # g' = -g - 5 reaches zero at t = log(1.2)
    rec = flow.run(s, p, 1.0, 1e-2, sample_every=0.05)
    assert rec.cause == "positivity_lost"
    assert rec.times[-1] < np.log(1.2)
    with pytest.raises(flow.StepRejected) as info:
        flow.step(s, p, 0.5)
    assert info.value.cause == "positivity_lost"


def test_nan_is_rejected():
    s, p = _form("flat_fixed_point")
    bad = s.with_fields(0.0, {"g": s.g_coeff, "alpha": np.where(np.arange(16)[:, None] == 3, np.nan, s.alpha_coeff)})
    with pytest.raises(flow.StepRejected) as info:
        flow.step(bad, p, 1e-3)
    assert info.value.cause == "nan_detected"


def test_ceiling_stops_curved_run():
    grid = Grid.uniform(1, 16)
    x, _ = grid.mesh()
    g = 1 + 0.3 * np.cos(2 * np.pi * x)
    s = flow.make_form_state(grid, g, g)
    rec = flow.run(s, flow.FlowParams(), 0.1, 1e-3, ceiling=1.0)
    assert rec.cause == "blowup_threshold"
    assert len(rec.times) == 1


def test_sample_times_increase():
    s, p = _form("perturbed")
    rec = flow.run(s, p, 0.1, 1e-3, sample_every=0.02)
    assert np.all(np.diff(rec.times) > 0)
    assert rec.times[-1] == pytest.approx(0.1)


@pytest.mark.parametrize("method, dts, order", [("imex1", (2e-3, 1e-3), 1.0), ("rk4_explicit", (0.1, 0.05), 4.0)])
def test_alternative_integrators(method, dts, order):
    errs = []
    for dt in dts:
        s, p = _form("exponential", n=8)
        rec = flow.run(s, p, 0.2, dt, sample_every=0.2, method=method)
        errs.append(np.abs(rec.samples[-1].g_coeff - np.exp(0.1)).max())
    assert np.log2(errs[0] / errs[1]) == pytest.approx(order, abs=0.3)


def test_cfl_limit_scales_with_grid():
    s16, p = _form("perturbed", n=16)
    s32, _ = _form("perturbed", n=32)
    assert flow.cfl_limit(s16, p) / flow.cfl_limit(s32, p) == pytest.approx(4.0, rel=0.05)
