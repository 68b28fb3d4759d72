import numpy as np
import pytest

from rdtlab.curvature import compute_curvature
from rdtlab.diffeo import (
    DiffeoTrack,
    drift_speed,
    gauge_consistency,
    integrate_diffeo,
    pullback_metric,
    pullback_scalar,
)
from rdtlab.flow import FlowConfig, evolve
from rdtlab.grid import DegenerateMetricError, Grid, MetricField

from conftest import compact_bump, mixed_perturbation, sine_conformal


@pytest.fixture(scope="module")
def tracked():
    grid = Grid.from_length(2, 48, 6.0)
    g0 = MetricField.from_perturbation(grid, mixed_perturbation(grid))
    cfg = dict(t_end=0.04, record_times=[0.01, 0.02, 0.03], diagnostic_orders=())
    coupled = evolve(g0, FlowConfig(track_diffeo=True, **cfg))
    dense = evolve(g0, FlowConfig(keep_dense=True, **cfg))
    return coupled, dense


def test_flat_flow_has_identity_gauge(grid32):
    traj = evolve(MetricField.euclidean(grid32), FlowConfig(t_end=0.01, track_diffeo=True))
    track = integrate_diffeo(traj)
    assert all(np.array_equal(p, grid32.coords) for p in track.positions)
    assert track.sup_velocity == 0.0 and drift_speed(track) == 0.0


def test_conformal_2d_flow_has_identity_gauge(grid32):
    g0, _ = sine_conformal(grid32, 0.1)
    track = integrate_diffeo(evolve(g0, FlowConfig(t_end=0.01, track_diffeo=True)))
    assert track.max_displacement.max() < 1e-12


def test_identity_pullback_is_exact(grid32):
    g = MetricField.from_perturbation(grid32, mixed_perturbation(grid32))
    assert np.allclose(pullback_metric(grid32.coords, g).values, g.values, atol=1e-15)


def test_translation_pullback_of_flat_metric_is_flat(grid32):
    shift = np.array([0.3, -0.17])[:, None, None]
    g = MetricField.euclidean(grid32)
    pulled = pullback_metric(grid32.coords + shift, g)
    assert np.abs(pulled.perturbation).max() < 1e-14
    assert np.abs(compute_curvature(pulled).scalar).max() < 1e-12


def test_translation_pullback_moves_scalars():
    grid = Grid.from_length(2, 64, 4.0)
    k = 2 * np.pi / grid.length
    f = np.sin(k * grid.coords[0]) * np.cos(2 * k * grid.coords[1])
    shift = np.array([0.21, 0.37])
    moved = pullback_scalar(grid.coords + shift[:, None, None], f, grid)
    x, y = grid.coords
    exact = np.sin(k * (x + shift[0])) * np.cos(2 * k * (y + shift[1]))
    assert np.abs(moved - exact).max() < 1e-5


def test_folded_map_is_rejected(grid32):
    k = 2 * np.pi / grid32.length
    pos = grid32.coords.copy()
    pos[0] += 2.0 / k * np.sin(k * grid32.coords[0])
    with pytest.raises(DegenerateMetricError):
        pullback_metric(pos, MetricField.euclidean(grid32))


def test_coupled_and_dense_tracks_agree(tracked):
    a, b = (integrate_diffeo(t) for t in tracked)
    assert np.array_equal(a.times, b.times)
    assert max(np.abs(p - q).max() for p, q in zip(a.positions, b.positions)) < 1e-10


def test_drift_speed_is_bounded_by_gauge_field(tracked):
    track = integrate_diffeo(tracked[0])
    assert 0 < drift_speed(track) <= track.sup_velocity * (1 + 1e-6)
    assert track.truncated is None


def test_gauge_consistency_is_small(tracked):
    traj = tracked[0]
    track = integrate_diffeo(traj)
    for t in track.times:
        assert gauge_consistency(traj, track, t) < 1e-5


def test_track_lookup_requires_sample(tracked):
    track = integrate_diffeo(tracked[0])
    with pytest.raises(KeyError):
        track.at(0.015)


def test_drift_speed_on_synthetic_track(grid32):
    pos = [grid32.coords, grid32.coords + 0.3, grid32.coords + 1.5]
    fake = DiffeoTrack(grid32, np.array([0.0, 0.1, 0.2]), pos, np.array([0, 0.42, 2.1]), 1.0)
    assert drift_speed(fake) == pytest.approx(np.sqrt(2) * 1.2 / 0.1)


def test_bump_flow_without_history_is_rejected(grid48):
    traj = evolve(MetricField.conformal(grid48, compact_bump(grid48, 0.02)), FlowConfig(t_end=0.005))
    with pytest.raises(ValueError):
        integrate_diffeo(traj)
