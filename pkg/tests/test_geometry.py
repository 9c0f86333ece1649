import numpy as np
import pytest
import sympy as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from klyzflow import geometry as geo
from klyzflow.grid import Grid
from klyzflow.scenarios import random_field

from conftest import unit_metric


def _metric_n1(grid, phi):
    return geo.metric_from_potential(grid, unit_metric(grid), phi)


def test_potential_metric_matches_symbolic_derivative():
    grid = Grid.uniform(1, 32)
    eps = 0.05
    xs, ys = sp.symbols("x y", real=True)
    phi_expr = eps * sp.cos(2 * sp.pi * xs) / 4
    # d/dz d/dzbar = (d_xx + d_yy) / 4
    g_expr = 1 + (sp.diff(phi_expr, xs, 2) + sp.diff(phi_expr, ys, 2)) / 4
    g_fn = sp.lambdify((xs, ys), g_expr, "numpy")
    x, y = grid.mesh()
    g = _metric_n1(grid, eps * np.cos(2 * np.pi * x) / 4)
    assert np.allclose(g[..., 0, 0].real, g_fn(x, y) + 0 * y, atol=1e-12)
    assert np.allclose(g[..., 0, 0].real, 1 - eps * np.pi**2 / 4 * np.cos(2 * np.pi * x), atol=1e-12)


def test_positivity_lost_when_potential_too_large():
    grid = Grid.uniform(1, 32)
    x, _ = grid.mesh()
    eps = 1 / np.pi**2 + 0.1
    # g = 1 - eps pi^2 cos, which is negative at x = 0
    with pytest.raises(geo.PositivityLost):
        _metric_n1(grid, eps * np.cos(2 * np.pi * x))
    g = geo.scalar_metric(grid, 1 - eps * np.pi**2 * np.cos(2 * np.pi * x))
    with pytest.raises(geo.PositivityLost):
        geo.curvature_bundle(grid, g)


def test_ricci_of_constant_metric_vanishes(grid2):
    g = geo.constant_field(grid2, np.array([[2.0, 0.3j], [-0.3j, 1.5]]))
    assert np.abs(geo.ricci_form(grid2, g)).max() < 1e-13
    assert np.abs(geo.riemann_tensor(grid2, g)).max() < 1e-13


def _fd_second(u, h):
    # eighth-order central difference on a periodic axis
    c = [-205 / 72, 8 / 5, -1 / 5, 8 / 315, -1 / 560]
    out = c[0] * u
    for k in range(1, 5):
        out = out + c[k] * (np.roll(u, k, axis=0) + np.roll(u, -k, axis=0))
    return out / h**2


def test_ricci_matches_finite_difference_oracle():
    grid = Grid.uniform(1, 128)
    x, _ = grid.mesh()
    eps = 0.1
    g_coeff = 1 - eps * np.cos(2 * np.pi * x)
    g = geo.scalar_metric(grid, g_coeff)
    ric = geo.ricci_form(grid, g)[..., 0, 0].real
    # Ric = -ddbar log g = -(1/4) d_xx log g for y-independent g
    oracle = -0.25 * _fd_second(np.log(g_coeff), grid.spacing[0])
    assert np.abs(ric - oracle).max() < 1e-8


def test_laplacian_of_sine():
    grid = Grid.uniform(1, 32)
    x, _ = grid.mesh()
    u = np.sin(2 * np.pi * x)
    lap = geo.laplacian(grid, unit_metric(grid), u)
    assert np.allclose(lap, -np.pi**2 * u, atol=1e-11)
    assert np.abs(geo.laplacian(grid, unit_metric(grid), np.ones(grid.shape))).max() < 1e-13


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([1, 2]))
def test_laplacian_integrates_to_zero(seed, n):
    grid = Grid.uniform(n, 16 if n == 1 else 8)
    g = geo.metric_from_potential(grid, unit_metric(grid), 2e-3 * random_field(grid, seed, 1))
    u = random_field(grid, seed + 1, 2)
    val = grid.integrate(geo.laplacian(grid, g, u) * geo.det(g).real)
    assert abs(val) < 1e-12


def test_trace_examples(grid1, grid2):
    g = geo.scalar_metric(grid1, 2.0 * np.ones(grid1.shape))
    a = geo.scalar_metric(grid1, 3.0 * np.ones(grid1.shape))
    assert np.allclose(geo.trace_form(g, a), 1.5)
    g2 = unit_metric(grid2)
    assert np.allclose(geo.trace_form(g2, g2), 2.0)
    assert np.allclose(geo.trace_form(g2, np.zeros_like(g2)), 0.0)


@pytest.mark.parametrize("n", [1, 2])
def test_norm_of_metric_is_sqrt_n(n):
    grid = Grid.uniform(n, 8)
    g = geo.metric_from_potential(grid, unit_metric(grid), 1e-3 * random_field(grid, 3, 1))
    b = geo.curvature_bundle(grid, g, alpha=g)
    assert np.allclose(b.norm_alpha, np.sqrt(n), atol=1e-12)


def test_n1_curvature_norms_coincide():
    # the Riemann and Ricci paths differ by spectral truncation only
    grid = Grid.uniform(1, 64)
    g = _metric_n1(grid, 1e-2 * random_field(grid, 0, 2))
    b = geo.curvature_bundle(grid, g)
    assert np.allclose(b.norm_rm, b.norm_ric, atol=1e-10)
    assert np.allclose(b.norm_ric, np.abs(b.scalar), atol=1e-12)
    assert np.allclose(geo.contract_riemann(g, b.riemann), b.ricci, atol=1e-12)


def test_product_metric_has_no_mixed_curvature():
    grid2 = Grid.uniform(2, 16)
    grid1 = Grid.uniform(1, 16)
    x1, y1, x2, y2 = grid2.mesh()
    f1 = lambda x, y: 1e-2 * (np.cos(2 * np.pi * x) + np.sin(2 * np.pi * y))
    f2 = lambda x, y: 1e-2 * np.cos(2 * np.pi * (x + y))
    g = geo.metric_from_potential(grid2, unit_metric(grid2), f1(x1, y1) + f2(x2, y2))
    rm = geo.riemann_tensor(grid2, g)
    mask = np.ones((2, 2, 2, 2), bool)
    mask[0, 0, 0, 0] = mask[1, 1, 1, 1] = False
    assert np.abs(rm[..., mask]).max() < 1e-10
    # diagonal blocks are the n=1 curvatures of each factor
    u, v = grid1.mesh()
    rm1 = geo.riemann_tensor(grid1, _metric_n1(grid1, f1(u, v)))[..., 0, 0, 0, 0]
    rm2 = geo.riemann_tensor(grid1, _metric_n1(grid1, f2(u, v)))[..., 0, 0, 0, 0]
    assert np.allclose(rm[..., 0, 0, 0, 0], rm1[:, :, None, None], atol=1e-10)
    assert np.allclose(rm[..., 1, 1, 1, 1], rm2[None, None], atol=1e-10)


def test_kahler_symmetries():
    grid = Grid.uniform(2, 8)
    g = geo.metric_from_potential(grid, unit_metric(grid), 3e-3 * random_field(grid, 5, 1))
    rm = geo.riemann_tensor(grid, g)
    # R_{i jbar k lbar} symmetric in (i,k) and (jbar,lbar), hermitian pairing
    assert np.allclose(rm, np.swapaxes(rm, -4, -2), atol=1e-13)
    assert np.allclose(rm, np.swapaxes(rm, -3, -1), atol=1e-13)
    assert np.allclose(rm, np.conj(np.transpose(rm, (0, 1, 2, 3, 5, 4, 7, 6))), atol=1e-13)


@settings(max_examples=5, deadline=None)
@given(st.integers(0, 10_000))
def test_norms_invariant_under_axis_permutation(seed):
    grid = Grid.uniform(2, 8)
    phi = 3e-3 * random_field(grid, seed, 1)
    swapped = np.transpose(phi, (2, 3, 0, 1))
    n_a = geo.curvature_bundle(grid, geo.metric_from_potential(grid, unit_metric(grid), phi))
    n_b = geo.curvature_bundle(grid, geo.metric_from_potential(grid, unit_metric(grid), swapped))
    assert np.allclose(np.transpose(n_a.norm_rm, (2, 3, 0, 1)), n_b.norm_rm, atol=1e-13)
    assert np.allclose(np.transpose(n_a.scalar, (2, 3, 0, 1)), n_b.scalar, atol=1e-13)


def test_covariant_derivatives_on_flat_metric():
    grid = Grid.uniform(1, 32)
    x, _ = grid.mesh()
    eps = 0.1
    for c in (1.0, 2.0):
        g = geo.scalar_metric(grid, c * np.ones(grid.shape))
        flat = geo.covariant_derivative_norms(geo.curvature_bundle(grid, g, alpha=2.0 * g))
        for v in flat.values():
            assert np.abs(v).max() < 1e-20
        a = geo.scalar_metric(grid, 1 + eps * np.sin(2 * np.pi * x))
        d = geo.covariant_derivative_norms(geo.curvature_bundle(grid, g, alpha=a))
        # |d_z a|^2 = (pi eps cos)^2, two derivative types, three inverse metrics
        assert np.allclose(d["alpha"], 2 * (np.pi * eps * np.cos(2 * np.pi * x)) ** 2 / c**3, atol=1e-12)


def test_nabla_ricci_converges_under_refinement():
    vals = []
    for n in (8, 16, 32):
        grid = Grid.uniform(1, n)
        x, y = grid.mesh()
        phi = 1e-2 * (np.cos(2 * np.pi * x) + np.sin(2 * np.pi * y))
        b = geo.curvature_bundle(grid, _metric_n1(grid, phi))
        vals.append(grid.integrate(geo.covariant_derivative_norms(b)["ric"]))
    assert abs(vals[2] - vals[1]) < abs(vals[1] - vals[0]) / 16 + 1e-15
