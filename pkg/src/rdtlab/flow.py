"""Ricci DeTurck flow on the flat torus, in h-form with a flat background.

The production right-hand side is the geometric one, ``-2 Ric(g) - L_X g``
with ``X = X_{g_eucl}(g)``.  :func:`hform_rhs` evaluates the same operator as
``Δh + Q(h, ∂h, ∂²h)`` and is used only as a cross-check.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .curvature import CurvatureBundle, compute_curvature, lie_derivative_metric
from .grid import (
    DegenerateMetricError,
    Grid,
    MetricField,
    gradient_array,
    hessian_array,
    partial_norm,
    resample,
)

__all__ = [
    "FlowConfig",
    "FlowState",
    "Trajectory",
    "CFLError",
    "rhs",
    "hform_rhs",
    "stable_dt",
    "step",
    "evolve",
    "continuous_dependence_harness",
    "smoothing_constants",
    "curvature_decay_constant",
]

log = logging.getLogger(__name__)


class CFLError(ValueError):
    """Time step exceeds the parabolic stability limit."""


@dataclass
class FlowConfig:
    """Parameters of a flow run; times are in the normalized interval [0, 1)."""

    t_end: float = 0.1
    cfl_fraction: float = 0.2
    epsilon: float = 0.1
    record_times: list[float] = field(default_factory=list)
    diagnostic_orders: tuple[int, ...] = (1, 2, 3)
    dt: float | None = None
    keep_dense: bool = False
    track_diffeo: bool = False
    blowup_bilipschitz: float = 2.0

    def __post_init__(self):
        if not 0 < self.cfl_fraction <= 0.5:
            raise ValueError(f"cfl_fraction must be in (0, 0.5], got {self.cfl_fraction}")
        if not 0 < self.t_end < 1:
            raise ValueError(f"t_end must be in (0, 1), got {self.t_end}")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if any(m not in (1, 2, 3, 4) for m in self.diagnostic_orders):
            raise ValueError("diagnostic orders must lie in 1..4")
        times = sorted(set(float(t) for t in self.record_times) | {0.0, float(self.t_end)})
        if times[0] < 0 or times[-1] > self.t_end:
            raise ValueError("record times must lie in [0, t_end]")
        self.record_times = times


@dataclass
class FlowState:
    t: float
    metric: MetricField
    diagnostics: dict = field(default_factory=dict)
    positions: np.ndarray | None = None

    @property
    def grid(self) -> Grid:
        return self.metric.grid


@dataclass
class Trajectory:
    """Recorded states plus a per-step log of cheap scalars.

    ``dense`` holds ``(t, g, ∂_t g)`` after every step when requested, which
    is enough for cubic Hermite interpolation in time.
    """

    states: list[FlowState]
    step_times: np.ndarray
    step_min_scalar: np.ndarray
    dt: float
    failure: str | None = None
    violations: list[str] = field(default_factory=list)
    dense: list[tuple[float, np.ndarray, np.ndarray]] | None = None
    dense_positions: list[np.ndarray] | None = None

    @property
    def ok(self) -> bool:
        return self.failure is None

    @property
    def grid(self) -> Grid:
        return self.states[0].grid

    def times(self) -> np.ndarray:
        return np.array([s.t for s in self.states])

    def at(self, t: float) -> FlowState:
        """The recorded state at time ``t`` (must be a record time)."""
        for s in self.states:
            if math.isclose(s.t, t, rel_tol=1e-12, abs_tol=1e-14):
                return s
        raise KeyError(f"no recorded state at t={t}")

    def metric_at(self, t: float) -> np.ndarray:
        """Metric components at any time in the dense span (cubic Hermite)."""
        return self._hermite(t, rate=False)

    def metric_rate_at(self, t: float) -> np.ndarray:
        """``∂_t g`` at any time in the dense span, from the same Hermite interpolant."""
        return self._hermite(t, rate=True)

    def _hermite(self, t: float, rate: bool) -> np.ndarray:
        if self.dense is None:
            raise ValueError("trajectory was run without keep_dense")
        times = self._dense_times
        if not times[0] - 1e-14 <= t <= times[-1] + 1e-14:
            raise ValueError(f"t={t} outside dense span [{times[0]}, {times[-1]}]")
        k = int(np.clip(np.searchsorted(times, t, side="right") - 1, 0, len(times) - 2))
        t0, g0, d0 = self.dense[k]
        t1, g1, d1 = self.dense[k + 1]
        h = t1 - t0
        s = (t - t0) / h
        if rate:
            return (6 * s * (s - 1) * (g0 - g1) / h + (1 - s) * (1 - 3 * s) * d0 + s * (3 * s - 2) * d1)
        h00 = (1 + 2 * s) * (1 - s) ** 2
        h10 = s * (1 - s) ** 2
        h01 = s * s * (3 - 2 * s)
        h11 = s * s * (s - 1)
        return h00 * g0 + h10 * h * d0 + h01 * g1 + h11 * h * d1

    @property
    def _dense_times(self) -> np.ndarray:
        return np.array([d[0] for d in self.dense])


# ---------------------------------------------------------------------------
# right-hand sides


def rhs(h: np.ndarray, grid: Grid, bundle: CurvatureBundle | None = None) -> np.ndarray:
    """``∂_t h = -2 Ric(g) - L_{X(g)} g`` with ``g = g_eucl + h``."""
    if bundle is None:
        bundle = compute_curvature(MetricField.from_perturbation(grid, h))
    lie = lie_derivative_metric(bundle.deturck, bundle.metric, bundle.dg)
    return -2.0 * bundle.ricci - lie


def hform_rhs(h: np.ndarray, grid: Grid) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """The same operator split as ``Δh``, the second-order part of Q, and the gradient-squared part.

    Flat-background form of the DeTurck equation::

        ∂_t g_ij = g^{ab} ∂_a∂_b g_ij
                   + ½ g^{ab} g^{pq} (∂_i g_pa ∂_j g_qb + 2 ∂_a g_jp ∂_q g_ib
                                      - 2 ∂_a g_jp ∂_b g_iq - 2 ∂_j g_pa ∂_b g_iq
                                      - 2 ∂_i g_pa ∂_b g_jq)
    """
    g = MetricField.from_perturbation(grid, h)
    ginv = g.inverse
    dh = gradient_array(h, grid)
    ddh = hessian_array(h, grid, first=dh)
    lap = np.einsum("aaij...->ij...", ddh)
    eye = grid.eye()
    second = np.einsum("ab...,abij...->ij...", ginv - eye, ddh)
    e = np.einsum
    quad = (
        e("ab...,pq...,ipa...,jqb...->ij...", ginv, ginv, dh, dh)
        + 2 * e("ab...,pq...,ajp...,qib...->ij...", ginv, ginv, dh, dh)
        - 2 * e("ab...,pq...,ajp...,biq...->ij...", ginv, ginv, dh, dh)
        - 2 * e("ab...,pq...,jpa...,biq...->ij...", ginv, ginv, dh, dh)
        - 2 * e("ab...,pq...,ipa...,bjq...->ij...", ginv, ginv, dh, dh)
    )
    quad = 0.5 * quad
    quad = 0.5 * (quad + np.swapaxes(quad, 0, 1))
    return lap, second, quad


# ---------------------------------------------------------------------------
# time stepping


def stable_dt(metric: MetricField, cfl_fraction: float) -> float:
    """``cfl · dx² / (2n · sup λ_max(g^{-1}))``."""
    grid = metric.grid
    lam = 1.0 / float(metric.smallest_eigenvalue.min())
    return cfl_fraction * grid.dx**2 / (2 * grid.dim * lam)


def _diffeo_velocity(bundle: CurvatureBundle, positions: np.ndarray) -> np.ndarray:
    return resample(bundle.deturck, bundle.grid, positions)


def _derivs(h, grid, positions):
    bundle = compute_curvature(MetricField.from_perturbation(grid, h))
    dh = rhs(h, grid, bundle)
    dphi = None if positions is None else _diffeo_velocity(bundle, positions)
    return bundle, dh, dphi


def _rk4(h, grid, dt, positions=None, first=None):
    """One classical RK4 step; returns new h, new positions, first-stage bundle and slope."""
    b1, k1, p1 = first if first is not None else _derivs(h, grid, positions)
    track = positions is not None
    _, k2, p2 = _derivs(h + 0.5 * dt * k1, grid, positions + 0.5 * dt * p1 if track else None)
    _, k3, p3 = _derivs(h + 0.5 * dt * k2, grid, positions + 0.5 * dt * p2 if track else None)
    _, k4, p4 = _derivs(h + dt * k3, grid, positions + dt * p3 if track else None)
    h_new = h + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    pos_new = positions + dt / 6.0 * (p1 + 2 * p2 + 2 * p3 + p4) if track else None
    return h_new, pos_new, b1, k1


def diagnose(metric: MetricField, orders=(1, 2, 3), bundle: CurvatureBundle | None = None) -> dict:
    if bundle is None:
        bundle = compute_curvature(metric)
    grid = metric.grid
    h = metric.perturbation
    d = {
        "bilipschitz": metric.bilipschitz(),
        "sup_h": float(np.sqrt(np.sum(h**2, axis=(0, 1))).max()),
        "minR": float(bundle.scalar.min()),
        "maxR": float(bundle.scalar.max()),
        "maxRm": float(bundle.riemann_norm.max()),
    }
    for m in orders:
        d[f"sup_d{m}g"] = partial_norm(metric.values, grid, m)
    return d


def step(state: FlowState, dt: float, cfl_fraction: float = 0.5, orders=(1, 2, 3)) -> FlowState:
    """Advance one RK4 step of size ``dt`` and refresh diagnostics."""
    limit = stable_dt(state.metric, cfl_fraction)
    if dt > limit * (1 + 1e-12):
        raise CFLError(f"dt={dt:.3e} exceeds stability limit {limit:.3e}")
    grid = state.grid
    h_new, pos_new, _, _ = _rk4(state.metric.perturbation, grid, dt, state.positions)
    if not np.all(np.isfinite(h_new)):
        raise FloatingPointError(f"non-finite metric after step at t={state.t + dt}")
    metric = MetricField.from_perturbation(grid, h_new)
    return FlowState(state.t + dt, metric, diagnose(metric, orders), pos_new)


def evolve(g0: MetricField, cfg: FlowConfig) -> Trajectory:
    """Run the flow from ``g0`` to ``cfg.t_end``, recording states at ``cfg.record_times``.

    Failures (degenerate metric, non-finite values, bilipschitz blow-up) stop
    the run and are reported on the returned trajectory rather than raised.
    """
    grid = g0.grid
    b0 = g0.bilipschitz()
    if b0 > 1 + cfg.epsilon + 1e-12:
        log.warning("initial metric is %.4f-bilipschitz, outside the (1+ε) class", b0)
    dt = cfg.dt if cfg.dt is not None else stable_dt(g0, cfg.cfl_fraction) / 1.1
    cfl_check = min(0.5, 1.25 * cfg.cfl_fraction) if cfg.dt is None else 0.5
    orders = tuple(cfg.diagnostic_orders)

    h = g0.perturbation.copy()
    positions = grid.coords.copy() if cfg.track_diffeo else None
    t = 0.0
    states = []
    step_times, step_min = [], []
    dense = [] if cfg.keep_dense else None
    dense_pos = [] if cfg.track_diffeo and cfg.keep_dense else None
    failure = None
    violations = []
    pending = list(cfg.record_times)

    metric = g0
    bundle, k1, p1 = _derivs(h, grid, positions)
    while True:
        if pending and t >= pending[0] - 1e-13:
            states.append(FlowState(t, metric, diagnose(metric, orders, bundle),
                                    None if positions is None else positions.copy()))
            b = states[-1].diagnostics["bilipschitz"]
            if b >= 1.1:
                violations.append(f"t={t:.6g}: bilipschitz {b:.4f} >= 1.1")
            pending.pop(0)
        step_times.append(t)
        step_min.append(float(bundle.scalar.min()))
        if dense is not None:
            dense.append((t, metric.values, k1))
            if dense_pos is not None:
                dense_pos.append(positions.copy())
        if not pending:
            break
        this_dt = min(dt, pending[0] - t)
        if this_dt > stable_dt(metric, cfl_check) * (1 + 1e-12):
            failure = f"CFL limit violated at t={t:.6g}"
            break
        h, positions, _, _ = _rk4(h, grid, this_dt, positions, first=(bundle, k1, p1))
        t = pending[0] if math.isclose(t + this_dt, pending[0], rel_tol=1e-12) else t + this_dt
        if not np.all(np.isfinite(h)):
            failure = f"non-finite metric at t={t:.6g}"
            break
        try:
            metric = MetricField.from_perturbation(grid, h)
        except DegenerateMetricError as exc:
            failure = f"degenerate metric at t={t:.6g}: {exc}"
            break
        if metric.bilipschitz() > cfg.blowup_bilipschitz:
            failure = f"bilipschitz blow-up at t={t:.6g}"
            break
        bundle, k1, p1 = _derivs(h, grid, positions)

    if failure:
        log.error("flow halted: %s", failure)
    return Trajectory(states, np.array(step_times), np.array(step_min), dt, failure,
                      violations, dense, dense_pos)


# ---------------------------------------------------------------------------
# measured constants


def smoothing_constants(traj: Trajectory, orders=(1, 2, 3), t_min: float = 0.0) -> dict[int, float]:
    """``max_t t^{m/2} sup|∂^m g_t|`` over recorded states with ``t > t_min``."""
    out = {}
    for m in orders:
        vals = [s.t ** (m / 2) * s.diagnostics[f"sup_d{m}g"] for s in traj.states if s.t > t_min]
        out[m] = max(vals) if vals else float("nan")
    return out


def curvature_decay_constant(traj: Trajectory, t_min: float = 0.0) -> float:
    """``max_t t · max|Rm|(·, t)`` over recorded states with ``t > t_min``."""
    vals = [s.t * max(s.diagnostics["maxRm"], abs(s.diagnostics["minR"]), abs(s.diagnostics["maxR"]))
            for s in traj.states if s.t > t_min]
    return max(vals) if vals else float("nan")


def continuous_dependence_harness(g1: MetricField, g2: MetricField, cfg: FlowConfig) -> float:
    """``sup_t ‖g¹_t - g²_t‖ / ‖g¹_0 - g²_0‖`` over the recorded times.

    Both runs use the same fixed step so the comparison is not polluted by
    different time grids.
    """
    d0 = float(np.sqrt(np.sum((g1.values - g2.values) ** 2, axis=(0, 1))).max())
    if d0 < 1e-14:
        return 0.0
    if cfg.dt is None:
        dt = min(stable_dt(g1, cfg.cfl_fraction), stable_dt(g2, cfg.cfl_fraction)) / 1.1
        cfg = FlowConfig(**{**cfg.__dict__, "dt": dt})
    t1 = evolve(g1, cfg)
    t2 = evolve(g2, cfg)
    for tr in (t1, t2):
        if not tr.ok:
            raise RuntimeError(f"flow failed: {tr.failure}")
    worst = 0.0
    for s1, s2 in zip(t1.states, t2.states):
        diff = s1.metric.values - s2.metric.values
        worst = max(worst, float(np.sqrt(np.sum(diff**2, axis=(0, 1))).max()))
    return worst / d0
