import numpy as np
import pytest

from rdtlab.curvature import compute_curvature
from rdtlab.flow import FlowConfig, evolve
from rdtlab.grid import Grid, MetricField
from rdtlab.heat_kernel import (
    GaussianFitError,
    KernelResolutionError,
    evolve_scalar,
    fit_gaussian_bound,
    flat_periodic_kernel,
    frozen_trajectory,
    kernel,
    point_source,
    source_kernel,
    supersolution_bound,
)

from conftest import compact_bump, mixed_perturbation


@pytest.fixture(scope="module")
def flat32():
    return frozen_trajectory(MetricField.euclidean(Grid.from_length(2, 32, 4.0)), 1.0)


@pytest.fixture(scope="module")
def curved():
    # non-conformal, so the DeTurck drift is nonzero
    grid = Grid.from_length(2, 48, 6.0)
    h = mixed_perturbation(grid, 3.0) + compact_bump(grid, 0.03)[None, None] * grid.eye()
    return evolve(MetricField.from_perturbation(grid, h), FlowConfig(t_end=0.4, keep_dense=True))


def test_flat_kernel_matches_periodic_gaussian(flat32):
    grid = flat32.grid
    snaps = kernel(flat32, (0.0, 0.0), 0.0, 0.4, record_times=[0.2])
    for snap in snaps:
        exact = flat_periodic_kernel(grid, snap.center, snap.elapsed)
        assert np.abs(snap.values - exact).max() < 0.01 * exact.max()


def test_flat_kernel_preserves_unit_mass(flat32):
    for snap in kernel(flat32, (0.25, -0.5), 0.0, 0.3, record_times=[0.2]):
        assert snap.mass == pytest.approx(1.0, abs=1e-6)


def test_flat_kernel_has_dihedral_symmetry(flat32):
    v = kernel(flat32, (0.0, 0.0), 0.0, 0.25)[-1].values
    o = flat32.grid.origin_index[0]
    # reflections about o and the diagonal swap
    core = np.roll(np.roll(v, -o, 0), -o, 1)
    assert np.allclose(core, np.roll(core[::-1, :], 1, axis=0), atol=1e-14)
    assert np.allclose(core, np.roll(core[:, ::-1], 1, axis=1), atol=1e-14)
    assert np.allclose(core, core.T, atol=1e-14)


def test_resolution_is_enforced(flat32):
    dx2 = flat32.grid.dx ** 2
    with pytest.raises(KernelResolutionError):
        kernel(flat32, (0.0, 0.0), 0.0, 5 * dx2)
    with pytest.raises(KernelResolutionError):
        source_kernel(flat32, (0.0, 0.0), 0.5, 0.5 - 5 * dx2)


def test_point_source_has_unit_mass(grid32):
    g = MetricField.conformal(grid32, compact_bump(grid32, 0.1))
    u = point_source(grid32, (0.3, 0.1), g.sqrt_det)
    assert g.integrate(u) == pytest.approx(1.0, abs=1e-14)


def test_constants_are_caloric(curved):
    u = np.full(curved.grid.shape, 2.5)
    out = evolve_scalar(u, curved, 0.0, 0.2)
    assert np.abs(out[0.2] - 2.5).max() < 1e-12


def test_comparison_principle(curved, rng):
    grid = curved.grid
    lo = rng.random(grid.shape)
    hi = lo + rng.random(grid.shape) * 0.1
    a = evolve_scalar(lo, curved, 0.0, 0.2)[0.2]
    b = evolve_scalar(hi, curved, 0.0, 0.2)[0.2]
    assert np.all(b >= a - 1e-12)


def test_kernel_is_positive(curved):
    for snap in kernel(curved, (0.0, 0.0), 0.0, 0.35, record_times=[0.2]):
        assert snap.values.min() > -1e-12 * snap.values.max()


def test_source_kernel_conserves_mass_on_evolving_metric(curved):
    snaps = source_kernel(curved, (0.0, 0.0), 0.4, 0.0, record_times=[0.1, 0.2])
    assert len(snaps) == 3
    for snap in snaps:
        assert snap.mass == pytest.approx(1.0, abs=1e-6)
        assert snap.values.min() > -1e-12 * snap.values.max()


def test_source_kernel_conserves_mass_without_drift(curved):
    snap = source_kernel(curved, (0.5, 0.0), 0.4, 0.1, drift=False)[-1]
    assert snap.mass == pytest.approx(1.0, abs=1e-6)


def test_source_kernel_conserves_mass_on_frozen_curved_metric():
    grid = Grid.from_length(2, 48, 5.0)
    traj = frozen_trajectory(MetricField.conformal(grid, compact_bump(grid, 0.1)), 0.5)
    snap = source_kernel(traj, (0.0, 0.0), 0.5, 0.1)[-1]
    assert snap.mass == pytest.approx(1.0, abs=1e-8)


def test_metric_rate_matches_dense_derivatives(curved):
    t, _, rate = curved.dense[5]
    assert np.allclose(curved.metric_rate_at(t), rate, rtol=0, atol=1e-12)


def test_forward_mass_changes_by_scalar_curvature_integral(curved):
    # d/dt ∫ K dg_t = -∫ R K dg_t with the drift included
    times = np.linspace(0.2, 0.4, 9)
    snaps = kernel(curved, (0.0, 0.0), 0.0, 0.4, record_times=list(times))
    mass = np.array([s.mass for s in snaps])
    integrand = []
    for s in snaps:
        g = MetricField(curved.grid, curved.metric_at(s.time), check=False)
        integrand.append(-g.integrate(compute_curvature(g).scalar * s.values))
    from scipy.integrate import simpson

    predicted = simpson(integrand, x=times)
    assert mass[-1] - mass[0] == pytest.approx(predicted, rel=0.02, abs=1e-7)


def test_flat_fit_recovers_gaussian_constants():
    grid = Grid.from_length(2, 64, 4.0)
    traj = frozen_trajectory(MetricField.euclidean(grid), 0.2)
    lo, hi = 10 * grid.dx**2, grid.length**2 / 100
    times = list(np.linspace(0.2 - hi, 0.2 - lo, 10))
    snaps = source_kernel(traj, (0.0, 0.0), 0.2, times[0], record_times=times)
    fit = fit_gaussian_bound(snaps, traj)
    assert fit.d == 4.5
    flat = 1 / (4 * np.pi)
    assert flat <= fit.c2 <= 2 * flat
    assert fit.c2_tail >= 1.0
    assert fit.ladder_c2 == fit.c2_tail


def test_fit_needs_enough_snapshots(flat32):
    snaps = source_kernel(flat32, (0.0, 0.0), 1.0, 0.5, record_times=[0.6, 0.7])
    with pytest.raises(ValueError):
        fit_gaussian_bound(snaps)
    with pytest.raises(ValueError, match="factor 4"):
        fit_gaussian_bound(snaps * 4)


def test_fit_fails_without_finite_constant(flat32):
    snaps = source_kernel(flat32, (0.0, 0.0), 1.0, 0.2, record_times=list(np.linspace(0.25, 0.8, 9)))
    with pytest.raises(GaussianFitError):
        fit_gaussian_bound(snaps, d_grid=(), floor=1e-9)


def test_flat_supersolution_is_trivial(flat32):
    r_t, integral = supersolution_bound(flat32, (0.0, 0.0), 0.2, 0.6)
    assert r_t == 0.0 and integral == 0.0


@pytest.mark.parametrize("x", [(0.0, 0.0), (0.5, -0.25)])
def test_forward_and_source_kernels_compose(curved, x):
    # K(x,t;y,s) = ∫ K(x,t;z,m) K(z,m;y,s) dg_m(z)
    s, m, t = 0.0, 0.2, 0.4
    forward = kernel(curved, (0.0, 0.0), s, t, record_times=[m])
    at_m, at_t = forward[0].values, forward[-1].values
    backward = source_kernel(curved, x, t, m)[-1].values
    g_m = MetricField(curved.grid, curved.metric_at(m), check=False)
    composed = g_m.integrate(backward * at_m)
    grid = curved.grid
    idx = tuple(int(round(c / grid.dx)) + o for c, o in zip(x, grid.origin_index))
    assert abs(composed - at_t[idx]) <= 2e-3 * at_t.max()
