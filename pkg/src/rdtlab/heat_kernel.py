"""Heat kernels of the drift Laplacian on an evolving DeTurck background.

Forward kernels ``K(·, t; y, s)`` solve ``∂_t u = Δ_{g_t} u - X·∇u`` from a
point source at ``y``.  Source kernels ``K(x, t; ·, s)`` solve the conjugate
equation ``-∂_s v = Δ_{g_s} v + X·∇v - R v`` backwards from a point source at
``x``; integrals over the source variable, such as the unit-mass identity
and the kernel average of ``R``, are computed from these.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .curvature import christoffel, compute_curvature
from .flow import CFLError, FlowState, Trajectory, diagnose
from .grid import Grid, MetricField, gradient_array, hessian_array

__all__ = [
    "KernelSnapshot",
    "GaussianFit",
    "KernelResolutionError",
    "GaussianFitError",
    "D_GRID",
    "evolve_scalar",
    "kernel",
    "source_kernel",
    "point_source",
    "fit_gaussian_bound",
    "supersolution_bound",
    "tail_mass",
    "flat_periodic_kernel",
    "frozen_trajectory",
]

D_GRID = (4.5, 5.0, 6.0, 8.0, 12.0, 16.0)
MIN_ELAPSED_CELLS = 10  # kernels need t - s >= 10 dx²
SOURCE_WIDTH_CELLS = 2.0


class KernelResolutionError(ValueError):
    """The requested time separation is too small to resolve on the grid."""


class GaussianFitError(RuntimeError):
    """No admissible (C₂, D) pair was found."""


@dataclass
class KernelSnapshot:
    """One time slice of a kernel.

    ``free`` says which variable is sampled: ``"target"`` gives
    ``K(·, time; center, center_time)`` and ``"source"`` gives
    ``K(center, center_time; ·, time)``.  ``mass`` is the integral of the
    slice against the volume form of ``time``.
    """

    grid: Grid
    free: str
    center: np.ndarray
    center_time: float
    time: float
    values: np.ndarray
    mass: float

    @property
    def elapsed(self) -> float:
        return abs(self.center_time - self.time)


@dataclass
class GaussianFit:
    """Constants of the kernel bounds ``K < C₂ (t-s)^{-n/2} exp(-d²/(D(t-s)))``
    and ``∫_{outside B(x,r)} K dg_s < C_tail exp(-r²/(D(t-s)))``.

    ``c2`` is the pointwise constant.  The tail bound cannot share it: at
    ``r = 0`` the tail is the full unit mass, so ``c2_tail >= 1`` while the
    flat pointwise constant is ``(4π)^{-n/2}``.  ``ladder_c2`` is the larger
    of the two and is what the ladder consumes.
    """

    c2: float
    d: float
    valid_pairs: int
    c2_tail: float = float("nan")
    table: dict = field(default_factory=dict)

    @property
    def ladder_c2(self) -> float:
        return max(self.c2, self.c2_tail) if np.isfinite(self.c2_tail) else self.c2


class _Coefficients:
    """Metric-derived coefficient fields at one instant."""

    def __init__(self, g: MetricField, rate: np.ndarray | None = None):
        grid = g.grid
        dg = gradient_array(g.values, grid)
        self.ginv = g.inverse
        _, gam = christoffel(self.ginv, dg)
        self.gamma_trace = np.einsum("ij...,kij...->k...", self.ginv, gam)
        # X_{g_eucl}(g) = -g^{ij} Γ^k_ij for a flat background
        div = np.einsum("pq...,pqj...->j...", self.ginv, dg)
        grad_tr = np.einsum("pq...,jpq...->j...", self.ginv, dg)
        self.drift = np.einsum("ij...,j...->i...", self.ginv, -div + 0.5 * grad_tr)
        self.sqrt_det = g.sqrt_det
        self.div_drift = None
        self.volume_rate = None
        if rate is not None:
            flux = gradient_array(self.sqrt_det * self.drift, grid)
            self.div_drift = np.einsum("kk...->...", flux) / self.sqrt_det
            # ∂_t log sqrt(det g)
            self.volume_rate = 0.5 * np.einsum("ij...,ij...->...", self.ginv, rate)


def _coefficients(traj: Trajectory, t: float, need_rate: bool = False, cache: dict | None = None) -> _Coefficients:
    # RK4 evaluates each stage time twice, so a small cache halves the metric work
    dense = traj.dense
    frozen = len(dense) == 2 and dense[0][1] is dense[1][1] and not np.any(dense[0][2])
    key = ("frozen" if frozen else round(t, 15), need_rate)
    if cache is not None and key in cache:
        return cache[key]
    g = MetricField(traj.grid, traj.metric_at(t), check=False)
    c = _Coefficients(g, traj.metric_rate_at(t) if need_rate else None)
    if cache is not None:
        if len(cache) > 8:
            cache.clear()  # RK4 never revisits older stage times
        cache[key] = c
    return c


def _operator(u: np.ndarray, grid: Grid, c: _Coefficients, drift_sign: float, use_drift: bool,
              potential: np.ndarray | None = None) -> np.ndarray:
    du = gradient_array(u, grid)
    ddu = hessian_array(u, grid, first=du)
    lap = np.einsum("ij...,ij...->...", c.ginv, ddu) - np.einsum("k...,k...->...", c.gamma_trace, du)
    out = lap
    if use_drift:
        out = out + drift_sign * np.einsum("k...,k...->...", c.drift, du)
    if potential is not None:
        out = out - potential * u
    return out


def _stable_dt(traj: Trajectory, cfl_fraction: float) -> float:
    grid = traj.grid
    worst = max(1.0 / float(MetricField(grid, g, check=False).smallest_eigenvalue.min())
                for _, g, _ in traj.dense[:: max(1, len(traj.dense) // 20)])
    return cfl_fraction * grid.dx**2 / (2 * grid.dim * worst * 1.05)


def _march(u, traj, t0, t1, record, cfl_fraction, rhs_at):
    """RK4 in the signed direction from t0 to t1, stopping exactly at ``record`` times."""
    direction = 1.0 if t1 > t0 else -1.0
    dt_max = _stable_dt(traj, cfl_fraction)
    stops = sorted(set(record) | {t1}, reverse=direction < 0)
    t = t0
    out = {}
    for stop in stops:
        while direction * (stop - t) > 1e-14:
            h = min(dt_max, abs(stop - t))
            k1 = rhs_at(t, u)
            k2 = rhs_at(t + direction * h / 2, u + direction * h / 2 * k1)
            k3 = rhs_at(t + direction * h / 2, u + direction * h / 2 * k2)
            k4 = rhs_at(t + direction * h, u + direction * h * k3)
            u = u + direction * h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
            t = stop if abs(stop - t) <= h * (1 + 1e-12) else t + direction * h
        out[stop] = u
    return out


def evolve_scalar(u_s: np.ndarray, traj: Trajectory, s: float, t: float, *,
                  record_times=(), drift: bool = True, cfl_fraction: float = 0.2) -> dict[float, np.ndarray]:
    """Solve ``∂_t u = Δ_{g_t} u - X·∇u`` from ``u(s) = u_s`` up to ``t``.

    Returns the solution at ``t`` and at every ``record_times`` entry, keyed
    by time.  ``drift=False`` drops the ``X·∇u`` term.
    """
    if traj.dense is None:
        raise ValueError("kernel computations need a trajectory run with keep_dense=True")
    if not s < t:
        raise ValueError("need s < t")
    if cfl_fraction > 0.5:
        raise CFLError("cfl_fraction must be at most 0.5")
    grid = traj.grid
    cache: dict = {}

    def rhs_at(tau, u):
        return _operator(u, grid, _coefficients(traj, tau, cache=cache), -1.0, drift)

    return _march(np.asarray(u_s, dtype=float), traj, s, t,
                  [r for r in record_times if s < r <= t], cfl_fraction, rhs_at)


def point_source(grid: Grid, center, sqrt_det: np.ndarray, width: float | None = None) -> np.ndarray:
    """Gaussian of standard deviation ``width`` (default 2 dx) with unit mass against ``sqrt_det``.

    Equal to the flat heat kernel after elapsed time ``width²/2``.
    """
    width = SOURCE_WIDTH_CELLS * grid.dx if width is None else width
    d2 = np.sum(grid.displacement(center) ** 2, axis=0)
    bump = np.exp(-d2 / (2 * width**2))
    return bump / (np.sum(bump * sqrt_det) * grid.cell_volume)


def _check_elapsed(grid: Grid, elapsed: float):
    if elapsed < MIN_ELAPSED_CELLS * grid.dx**2 * (1 - 1e-12):
        raise KernelResolutionError(
            f"t - s = {elapsed:.4g} is below {MIN_ELAPSED_CELLS} dx² = "
            f"{MIN_ELAPSED_CELLS * grid.dx**2:.4g}; refine the grid or widen the interval"
        )


def kernel(traj: Trajectory, y, s: float, t: float, record_times=(), drift: bool = True,
           cfl_fraction: float = 0.2) -> list[KernelSnapshot]:
    """Forward kernel ``K(·, τ; y, s)`` for ``τ`` in ``record_times`` (and ``t``).

    ``y`` is a physical position.  Snapshots whose elapsed time is below
    ``10 dx²`` are not emitted.
    """
    grid = traj.grid
    _check_elapsed(grid, t - s)
    width = SOURCE_WIDTH_CELLS * grid.dx
    start = s + width**2 / 2
    g_start = MetricField(grid, traj.metric_at(start), check=False)
    u0 = point_source(grid, y, g_start.sqrt_det, width)
    times = [r for r in record_times if r - s >= MIN_ELAPSED_CELLS * grid.dx**2 * (1 - 1e-12)]
    sol = evolve_scalar(u0, traj, start, t, record_times=times, drift=drift, cfl_fraction=cfl_fraction)
    out = []
    for tau in sorted(sol):
        g = MetricField(grid, traj.metric_at(tau), check=False)
        out.append(KernelSnapshot(grid, "target", np.asarray(y, float), s, tau, sol[tau], g.integrate(sol[tau])))
    return out


def source_kernel(traj: Trajectory, x, t: float, s: float, record_times=(), drift: bool = True,
                  cfl_fraction: float = 0.2) -> list[KernelSnapshot]:
    """Source kernel ``K(x, t; ·, σ)`` for ``σ`` in ``record_times`` (and ``s``), ``σ < t``.

    Marches the conjugate equation ``-∂_σ v = Δv + div(X v) + (∂_σ log√det g) v``
    backwards from a point source at ``x``; along the DeTurck flow the
    zeroth-order terms combine to ``-R v``.  The volume rate comes from the
    trajectory, so frozen metrics get no curvature term.  ``drift=False``
    gives the conjugate of the undrifted forward operator.
    """
    grid = traj.grid
    _check_elapsed(grid, t - s)
    width = SOURCE_WIDTH_CELLS * grid.dx
    start = t - width**2 / 2
    g_start = MetricField(grid, traj.metric_at(start), check=False)
    v0 = point_source(grid, x, g_start.sqrt_det, width)
    times = [r for r in record_times if t - r >= MIN_ELAPSED_CELLS * grid.dx**2 * (1 - 1e-12) and r >= s]

    cache: dict = {}

    def rhs_at(tau, v):
        c = _coefficients(traj, tau, need_rate=True, cache=cache)
        # -∂_σ v = L* v + (∂_σ log sqrt(det g)) v with L* the adjoint of Δ - X·∇;
        # along the flow the zeroth-order coefficient is -R
        zeroth = c.volume_rate + c.div_drift if drift else c.volume_rate
        return -_operator(v, grid, c, +1.0, drift, potential=-zeroth)

    sol = _march(v0, traj, start, s, times, cfl_fraction, rhs_at)
    out = []
    for tau in sorted(sol):
        g = MetricField(grid, traj.metric_at(tau), check=False)
        out.append(KernelSnapshot(grid, "source", np.asarray(x, float), t, tau, sol[tau], g.integrate(sol[tau])))
    return out


def tail_mass(snap: KernelSnapshot, traj: Trajectory, radius: float) -> float:
    """``∫_{outside B(center, r)} K dg`` against the volume form of ``snap.time``."""
    grid = snap.grid
    g = MetricField(grid, traj.metric_at(snap.time), check=False)
    outside = grid.distance(snap.center) > radius
    return float(np.sum(snap.values[outside] * g.sqrt_det[outside]) * grid.cell_volume)


def fit_gaussian_bound(samples: list[KernelSnapshot], traj: Trajectory | None = None, *,
                       d_grid=D_GRID, floor: float = 1e-9, tie_tolerance: float = 0.01,
                       n_radii: int = 24) -> GaussianFit:
    """Smallest pointwise ``C₂`` over ``D ∈ d_grid``, plus the tail constant at that ``D``.

    The pointwise bound is checked at nodes where ``K`` exceeds ``floor``
    times the snapshot maximum (below that the values are round-off).  Among
    ``D`` values whose ``C₂`` is within ``tie_tolerance`` of the best, the
    smallest ``D`` (the sharpest decay) is selected.  The tail constant is
    fitted on ``"source"`` snapshots, whose free variable is the one
    integrated in the tail bound, over ``n_radii`` radii up to a third of the
    box; it needs ``traj`` for the volume form.
    """
    if len(samples) < 10:
        raise ValueError(f"need at least 10 snapshots, got {len(samples)}")
    elapsed = np.array([s.elapsed for s in samples])
    if elapsed.max() < 4 * elapsed.min() * (1 - 1e-12):
        raise ValueError("snapshots must span at least a factor 4 in t - s")
    n = samples[0].grid.dim

    log_ratio = {d: -np.inf for d in d_grid}
    log_tail = {d: -np.inf for d in d_grid}
    pairs = 0
    for snap in samples:
        tau = snap.elapsed
        d2 = np.sum(snap.grid.displacement(snap.center) ** 2, axis=0)
        keep = snap.values > floor * snap.values.max()
        pairs += int(keep.sum())
        logk = np.log(snap.values[keep]) + 0.5 * n * np.log(tau)
        for d in d_grid:
            log_ratio[d] = max(log_ratio[d], float(np.max(logk + d2[keep] / (d * tau))))
        if snap.free == "source" and traj is not None:
            for r in np.linspace(0.0, snap.grid.length / 3, n_radii):
                m = tail_mass(snap, traj, r)
                if m <= 0:
                    continue
                for d in d_grid:
                    log_tail[d] = max(log_tail[d], np.log(m) + r * r / (d * tau))

    finite = {d: float(np.exp(v)) for d, v in log_ratio.items() if np.isfinite(v)}
    if not finite:
        raise GaussianFitError("no D in the grid admits a finite C₂")
    best = min(finite.values())
    chosen = min(d for d, v in finite.items() if v <= best * (1 + tie_tolerance))
    tail = float(np.exp(log_tail[chosen]))
    table = {d: (finite.get(d, np.inf), float(np.exp(log_tail[d]))) for d in d_grid}
    return GaussianFit(finite[chosen], chosen, pairs, tail if tail > 0 else float("nan"), table)


def supersolution_bound(traj: Trajectory, x, s: float, t: float, cfl_fraction: float = 0.2) -> tuple[float, float]:
    """``(R(x, t), ∫ K(x, t; y, s) R(y, s) dg_s(y))``; the first should dominate the second."""
    grid = traj.grid
    snap = source_kernel(traj, x, t, s, cfl_fraction=cfl_fraction)[-1]
    g_s = MetricField(grid, traj.metric_at(s), check=False)
    g_t = MetricField(grid, traj.metric_at(t), check=False)
    r_s = compute_curvature(g_s).scalar
    r_t = compute_curvature(g_t).scalar
    idx = tuple(int(round(v)) % grid.points for v in np.asarray(x) / grid.dx + np.asarray(grid.origin_index))
    return float(r_t[idx]), g_s.integrate(snap.values * r_s)


def frozen_trajectory(g: MetricField, t_end: float) -> Trajectory:
    """A trajectory whose metric is ``g`` at every time in ``[0, t_end]``."""
    zero = np.zeros_like(g.values)
    state = FlowState(0.0, g, diagnose(g, ()))
    return Trajectory([state, FlowState(t_end, g, state.diagnostics)], np.array([0.0]),
                      np.array([state.diagnostics["minR"]]), t_end, dense=[(0.0, g.values, zero), (t_end, g.values, zero)])


def flat_periodic_kernel(grid: Grid, center, elapsed: float, images: int = 3) -> np.ndarray:
    """Euclidean heat kernel on the periodic box, summed over ``images`` periods each way."""
    n = grid.dim
    disp = grid.displacement(center)
    total = np.zeros(grid.shape)
    shifts = range(-images, images + 1)
    from itertools import product

    for shift in product(shifts, repeat=n):
        d2 = sum((disp[a] + shift[a] * grid.length) ** 2 for a in range(n))
        total += np.exp(-d2 / (4 * elapsed))
    return total / (4 * np.pi * elapsed) ** (n / 2)
