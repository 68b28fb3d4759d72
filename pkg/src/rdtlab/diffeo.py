"""Gauge diffeomorphisms of the DeTurck flow and the Ricci-flow identities they restore.

``Φ_t`` solves ``∂_t Φ_t = X(g_t) ∘ Φ_t`` with ``Φ_0 = id``; the pullbacks
``g̃_t = Φ_t^* g_t`` then satisfy ``∂_t g̃ = -2 Ric(g̃)`` and
``∂_t R̃ = Δ R̃ + 2 |Ric̃|²``.  Maps are tracked on grid nodes (Lagrangian
positions), so the pullback needs only ``Φ`` and its Jacobian at nodes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .curvature import compute_curvature, deturck_field, laplace_beltrami
from .flow import Trajectory
from .grid import DegenerateMetricError, MetricField, gradient_array, resample

__all__ = [
    "DiffeoTrack",
    "integrate_diffeo",
    "pullback_metric",
    "pullback_scalar",
    "ricci_flow_residual",
    "scalar_identity_residual",
    "gauge_consistency",
    "drift_speed",
]


@dataclass
class DiffeoTrack:
    """Node positions ``Φ_t(x)`` at the sample times.

    ``positions[j]`` has shape ``(dim, *grid.shape)`` in coordinates relative
    to ``o`` and is not wrapped, so ``positions - coords`` is the
    displacement.  ``truncated`` records why the track stopped early.
    """

    grid: object
    times: np.ndarray
    positions: list[np.ndarray]
    max_displacement: np.ndarray
    sup_velocity: float
    truncated: str | None = None

    def at(self, t: float) -> np.ndarray:
        j = int(np.argmin(np.abs(self.times - t)))
        if not np.isclose(self.times[j], t, rtol=1e-12, atol=1e-14):
            raise KeyError(f"no sample at t={t}")
        return self.positions[j]


def _rk4_positions(pos, t0, h, velocity):
    k1 = velocity(t0, pos)
    k2 = velocity(t0 + h / 2, pos + h / 2 * k1)
    k3 = velocity(t0 + h / 2, pos + h / 2 * k2)
    k4 = velocity(t0 + h, pos + h * k3)
    return pos + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)


def integrate_diffeo(traj: Trajectory) -> DiffeoTrack:
    """Build the track of ``Φ_t`` over the recorded states of ``traj``.

    Trajectories run with ``track_diffeo=True`` already carry positions
    integrated together with the metric.  Otherwise the dense history
    (``keep_dense=True``) is used: ``Φ`` is advanced with RK4 over each flow
    step, the metric at stage times coming from cubic Hermite interpolation.
    """
    grid = traj.grid
    times = traj.times()
    if all(s.positions is not None for s in traj.states):
        positions = [s.positions for s in traj.states]
    elif traj.dense is not None:
        def velocity(t, pos):
            g = MetricField(grid, traj.metric_at(t), check=False)
            return resample(deturck_field(g), grid, pos)

        pos = grid.coords.copy()
        positions = [pos.copy()]
        dense_t = np.array([d[0] for d in traj.dense])
        for t_prev, t_next in zip(times[:-1], times[1:]):
            steps = dense_t[(dense_t > t_prev + 1e-14) & (dense_t < t_next - 1e-14)]
            nodes = np.concatenate([[t_prev], steps, [t_next]])
            for a, b in zip(nodes[:-1], nodes[1:]):
                pos = _rk4_positions(pos, a, b - a, velocity)
            positions.append(pos.copy())
    else:
        raise ValueError("trajectory has neither tracked positions nor a dense history")

    disp = [float(np.sqrt(np.sum((p - grid.coords) ** 2, axis=0)).max()) for p in positions]
    truncated = None
    limit = grid.length / 4
    for j, d in enumerate(disp):
        if d >= limit:
            truncated = f"displacement {d:.4g} >= L/4 at t={times[j]:.6g}"
            positions, disp, times = positions[:j], disp[:j], times[:j]
            break
    sup_x = max(float(np.sqrt(np.sum(deturck_field(s.metric) ** 2, axis=0)).max()) for s in traj.states)
    return DiffeoTrack(grid, np.asarray(times), positions, np.array(disp), sup_x, truncated)


def pullback_metric(positions: np.ndarray, g: MetricField) -> MetricField:
    """``(Φ^* g)_ij(x) = ∂_i Φ^a ∂_j Φ^b g_ab(Φ(x))`` at every node.

    The Jacobian is the identity plus the finite-difference gradient of the
    (periodic) displacement; ``g`` is evaluated at ``Φ(x)`` by cubic
    interpolation.
    """
    grid = g.grid
    disp = positions - grid.coords
    jac = gradient_array(disp, grid)  # jac[i, a] = ∂_i (Φ^a - x^a)
    jac = jac + grid.eye()
    det = np.linalg.det(np.moveaxis(jac, (0, 1), (-2, -1)))
    if np.any(det <= 0):
        raise DegenerateMetricError("Jacobian of the tracked map is not positive")
    g_at = resample(g.values, grid, positions)
    values = np.einsum("ia...,jb...,ab...->ij...", jac, jac, g_at)
    return MetricField(grid, 0.5 * (values + np.swapaxes(values, 0, 1)))


def pullback_scalar(positions: np.ndarray, f: np.ndarray, grid) -> np.ndarray:
    """``f ∘ Φ`` at every node."""
    return resample(f, grid, positions)


def _pullbacks(traj: Trajectory, track: DiffeoTrack, t: float, dt: float):
    return [pullback_metric(track.at(s), traj.at(s).metric) for s in (t - dt, t, t + dt)]


def ricci_flow_residual(traj: Trajectory, track: DiffeoTrack, t: float, dt: float) -> float:
    """``sup |(g̃(t+dt) - g̃(t-dt))/(2 dt) + 2 Ric(g̃(t))|`` in the Euclidean frame."""
    before, now, after = _pullbacks(traj, track, t, dt)
    ric = compute_curvature(now).ricci
    res = (after.values - before.values) / (2 * dt) + 2 * ric
    return float(np.sqrt(np.sum(res**2, axis=(0, 1))).max())


def scalar_identity_residual(traj: Trajectory, track: DiffeoTrack, t: float, dt: float) -> float:
    """``sup |(R̃(t+dt) - R̃(t-dt))/(2 dt) - Δ R̃ - 2 |Ric̃|²|``."""
    before, now, after = _pullbacks(traj, track, t, dt)
    bundle = compute_curvature(now)
    dr = (compute_curvature(after).scalar - compute_curvature(before).scalar) / (2 * dt)
    res = dr - laplace_beltrami(bundle.scalar, now) - 2 * bundle.ricci_norm_sq
    return float(np.abs(res).max())


def gauge_consistency(traj: Trajectory, track: DiffeoTrack, t: float) -> float:
    """``max |R(g̃_t)(x) - R(g_t)(Φ_t(x))| / (1 + |R|)`` over nodes."""
    positions = track.at(t)
    g = traj.at(t).metric
    pulled = compute_curvature(pullback_metric(positions, g)).scalar
    moved = pullback_scalar(positions, compute_curvature(g).scalar, g.grid)
    return float(np.max(np.abs(pulled - moved) / (1 + np.abs(moved))))


def drift_speed(track: DiffeoTrack) -> float:
    """``max`` over consecutive samples of ``sup_x |Φ_t(x) - Φ_s(x)| / |t - s|``."""
    best = 0.0
    for j in range(1, len(track.times)):
        step = np.sqrt(np.sum((track.positions[j] - track.positions[j - 1]) ** 2, axis=0)).max()
        best = max(best, float(step / (track.times[j] - track.times[j - 1])))
    return best
