import numpy as np
import pytest

from rdtlab.curvature import (
    bianchi_operator,
    christoffel,
    compute_curvature,
    deturck_field,
    directional_derivative,
    laplace_beltrami,
    lie_derivative_metric,
)
from rdtlab.grid import Grid, MetricField, gradient_array, hessian_array

from conftest import mixed_perturbation, sine_conformal


def test_flat_metric_has_no_curvature(grid32):
    b = compute_curvature(MetricField.euclidean(grid32))
    for arr in (b.christoffel, b.riemann, b.ricci, b.scalar, b.deturck):
        assert np.abs(arr).max() == 0.0


def test_conformal_oracle_converges():
    errs = []
    for n in (32, 64):
        g, exact = sine_conformal(Grid.from_length(2, n, 4.0), 0.1)
        errs.append(np.abs(compute_curvature(g).scalar - exact).max())
    assert errs[0] / errs[1] > 12


def test_round_sphere_patch_has_positive_curvature():
    # u = -log(1 + |x|²/4) near o is the unit sphere's stereographic factor, R = 2
    g = Grid.from_length(2, 128, 16.0)
    r2 = g.distance() ** 2
    u = -np.log1p(r2 / 4)
    b = compute_curvature(MetricField.conformal(g, u))
    o = g.origin_index
    assert b.scalar[o] == pytest.approx(2.0, rel=1e-3)


def test_riemann_symmetries(grid32):
    g = MetricField.from_perturbation(grid32, mixed_perturbation(grid32, 5.0))
    rm = compute_curvature(g).riemann
    assert np.abs(rm + np.swapaxes(rm, 0, 1)).max() < 1e-12
    assert np.abs(rm + np.swapaxes(rm, 2, 3)).max() < 1e-12
    pair = np.einsum("abcd...->cdab...", rm)
    assert np.abs(rm - pair).max() < 1e-10


def test_two_dimensional_ricci_is_half_scalar_times_metric(grid32):
    g = MetricField.from_perturbation(grid32, mixed_perturbation(grid32, 5.0))
    b = compute_curvature(g)
    assert np.abs(b.ricci - 0.5 * b.scalar * g.values).max() < 1e-10


def test_deturck_field_is_minus_traced_christoffel(grid32):
    g = MetricField.from_perturbation(grid32, mixed_perturbation(grid32, 5.0))
    _, gam = christoffel(g.inverse, gradient_array(g.values, grid32))
    traced = np.einsum("pq...,ipq...->i...", g.inverse, gam)
    assert np.abs(deturck_field(g) + traced).max() < 1e-12


def test_conformal_metrics_in_2d_have_no_gauge_field(grid32):
    g, _ = sine_conformal(grid32, 0.2)
    assert np.abs(deturck_field(g)).max() < 1e-12


def test_bianchi_operator_on_flat_base_matches_deturck_field(grid32):
    h = mixed_perturbation(grid32, 5.0)
    base = MetricField.euclidean(grid32)
    g = MetricField.from_perturbation(grid32, h)
    assert np.abs(bianchi_operator(h, base) - deturck_field(g)).max() < 1e-14


def test_bianchi_operator_is_covariant_for_curved_base(grid32):
    # X_b(b) = 0 for any background b: h = 0 gives zero
    base, _ = sine_conformal(grid32, 0.2)
    assert np.abs(bianchi_operator(np.zeros((2, 2) + grid32.shape), base)).max() == 0.0


def test_drift_laplacian_identity(grid32):
    # Δ_g u - X·∇u equals g^{ij} ∂_i ∂_j u when X = -g^{pq} Γ_pq
    g = MetricField.from_perturbation(grid32, mixed_perturbation(grid32, 5.0))
    k = 2 * np.pi / grid32.length
    u = np.cos(k * grid32.coords[0]) * np.sin(2 * k * grid32.coords[1])
    lhs = laplace_beltrami(u, g) - directional_derivative(deturck_field(g), u, grid32)
    rhs = np.einsum("ij...,ij...->...", g.inverse, hessian_array(u, grid32))
    assert np.abs(lhs - rhs).max() < 1e-12


def test_lie_derivative_along_translation_is_transport(grid32):
    g = MetricField.from_perturbation(grid32, mixed_perturbation(grid32, 5.0))
    x = np.zeros((2,) + grid32.shape)
    x[0] = 1.0
    lie = lie_derivative_metric(x, g)
    assert np.abs(lie - gradient_array(g.values, grid32)[0]).max() < 1e-14


def test_laplace_beltrami_of_constant_vanishes(grid32):
    g, _ = sine_conformal(grid32, 0.2)
    assert np.abs(laplace_beltrami(np.full(grid32.shape, 2.0), g)).max() < 1e-10


def test_norms_are_measured_with_the_metric(grid32):
    g, _ = sine_conformal(grid32, 0.2)
    b = compute_curvature(g)
    # in 2D |Ric|² = R²/2 and |Rm|² = R²
    assert np.abs(b.ricci_norm_sq - 0.5 * b.scalar**2).max() < 1e-12
    assert np.abs(b.riemann_norm - np.abs(b.scalar)).max() < 1e-12


def _metric_3d(n):
    grid = Grid.from_length(3, n, 4.0)
    k = 2 * np.pi / grid.length
    x, y, z = grid.coords
    h = np.zeros((3, 3) + grid.shape)
    h[0, 0] = 0.05 * np.sin(k * x) * np.cos(k * z)
    h[1, 1] = 0.04 * np.cos(k * y + 0.2) * np.sin(k * x)
    h[2, 2] = -0.03 * np.sin(k * z) * np.sin(k * y)
    h[0, 1] = h[1, 0] = 0.02 * np.sin(k * (x + y))
    h[1, 2] = h[2, 1] = 0.015 * np.cos(k * (y - z))
    return MetricField.from_perturbation(grid, h)


def _bianchi_defect(g):
    grid = g.grid
    b = compute_curvature(g)
    gam = b.christoffel
    d_ric = gradient_array(b.ricci, grid)  # [k, i, j]
    cov = d_ric - np.einsum("pki...,pj...->kij...", gam, b.ricci) - np.einsum("pkj...,ip...->kij...", gam, b.ricci)
    div = np.einsum("jk...,kij...->i...", g.inverse, cov)
    return np.abs(div - 0.5 * gradient_array(b.scalar, grid)).max()


def test_contracted_bianchi_identity_converges():
    coarse, fine = _bianchi_defect(_metric_3d(16)), _bianchi_defect(_metric_3d(32))
    assert fine < 1e-4
    assert coarse / fine > 12


@pytest.mark.parametrize("lam", [0.5, 2.0])
def test_scalar_curvature_scales_inversely(grid32, lam):
    g = MetricField.from_perturbation(grid32, mixed_perturbation(grid32, 5.0))
    scaled = MetricField(grid32, lam**2 * g.values)
    r, rs = compute_curvature(g).scalar, compute_curvature(scaled).scalar
    assert np.abs(rs - r / lam**2).max() <= 1e-12 * np.abs(r).max()


def test_curvature_commutes_with_grid_translations(grid32):
    g = MetricField.from_perturbation(grid32, mixed_perturbation(grid32, 5.0))
    shift = (3, -5)
    moved = MetricField(grid32, np.roll(g.values, shift, axis=(2, 3)))
    expected = np.roll(compute_curvature(g).scalar, shift, axis=(0, 1))
    assert np.array_equal(compute_curvature(moved).scalar, expected)


def test_ricci_and_scalar_are_traces(grid32):
    g = MetricField.from_perturbation(grid32, mixed_perturbation(grid32, 5.0))
    b = compute_curvature(g)
    ric = np.einsum("ac...,abcd...->bd...", g.inverse, b.riemann)
    assert np.abs(ric - b.ricci).max() <= 1e-12 * np.abs(b.ricci).max()
    assert np.abs(np.einsum("ij...,ij...->...", g.inverse, b.ricci) - b.scalar).max() <= 1e-12 * np.abs(b.scalar).max()
