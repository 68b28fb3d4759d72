"""Witness metric sequences with a guaranteed scalar-curvature lower bound.

Conformal metrics ``e^{2u} g_eucl`` in two dimensions have
``R = -2 e^{-2u} Δu``, so a lower bound on ``R`` is an upper bound on ``Δu``.
The profiles below are built from potentials of compactly supported radial
densities, which gives ``Δu`` in closed form and exact compact support.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .curvature import compute_curvature
from .grid import Grid, MetricField

__all__ = [
    "FAMILY_KINDS",
    "FamilyConstructionError",
    "MetricFamily",
    "density",
    "potential",
    "ring_potential",
    "spike_profile",
    "smooth_cutoff",
    "make_family",
]

FAMILY_KINDS = ("conformal-spike", "smooth-C2-converging", "glued", "negative-control")

# smoothness exponent of the radial densities; u is then C^{k+1}
BUMP_POWER = 4


class FamilyConstructionError(ValueError):
    """A constructed member violates its advertised curvature bound."""


def density(r: np.ndarray, radius: float, k: int = BUMP_POWER) -> np.ndarray:
    """Unit-mass radial density ``(k+1)/(π a²) (1 - r²/a²)^k`` on the disc of radius ``a``."""
    q = np.clip(np.asarray(r) ** 2 / radius**2, 0.0, 1.0)
    return (k + 1) / (np.pi * radius**2) * (1.0 - q) ** k


def potential(r: np.ndarray, radius: float, k: int = BUMP_POWER) -> np.ndarray:
    """Radial solution of ``ΔP = density``, equal to ``log(r)/2π`` outside the disc."""
    r = np.asarray(r, dtype=float)
    q = np.clip(r**2 / radius**2, 0.0, 1.0)
    inner = np.log(radius) - 0.5 * sum((1.0 - q) ** j / j for j in range(1, k + 2))
    with np.errstate(divide="ignore"):
        outer = np.log(np.where(r > 0, r, 1.0))
    return np.where(r < radius, inner, outer) / (2 * np.pi)


def ring_potential(r: np.ndarray, ring_inner: float, ring_outer: float, k: int = BUMP_POWER):
    """Potential and density of a unit-mass radial density supported on an annulus.

    The density is ``c (r-a)^k (b-r)^k / r`` on ``a < r < b``; the potential is
    constant inside the ring, equals ``log(r)/2π`` outside it, and is
    evaluated in closed form from polynomial antiderivatives.
    """
    from numpy.polynomial import Polynomial as P

    a, b = ring_inner, ring_outer
    if not 0 < a < b:
        raise ValueError("need 0 < ring_inner < ring_outer")
    p = P([-a, 1.0]) ** k * P([b, -1.0]) ** k
    m = p.integ(lbnd=a)  # ∫_a^r p
    c = 1.0 / (2 * np.pi * m(b))
    # ∫_a^r m(s)/s ds = Σ_{j>=1} m_j (r^j - a^j)/j + m_0 log(r/a)
    coef = m.coef
    tail = P(np.concatenate([[0.0], coef[1:] / np.arange(1, len(coef))]))

    def integral(x):
        return tail(x) - tail(a) + coef[0] * np.log(x / a)

    const = np.log(b) / (2 * np.pi) - c * integral(b)
    r = np.asarray(r, dtype=float)
    rc = np.clip(r, a, b)
    inside = const + c * integral(rc)
    with np.errstate(divide="ignore"):
        outside = np.log(np.where(r > 0, r, 1.0)) / (2 * np.pi)
    pot = np.where(r <= a, const, np.where(r < b, inside, outside))
    dens = np.where((r > a) & (r < b), c * p(rc) / np.where(r > 0, r, 1.0), 0.0)
    return pot, dens, float(c * max(p(x) / x for x in np.linspace(a, b, 2001)))


def spike_profile(r, amplitude: float, inner: float, ring: tuple[float, float], k: int = BUMP_POWER):
    """``u = A (P_ring - P_inner)`` and its exact Laplacian.

    Between ``inner`` and the ring ``u`` is exactly ``A (const - log(r)/2π)``;
    it vanishes outside the ring.  ``Δu = A (η_ring - η_inner)``.  Returns
    ``(u, lap, max_positive_laplacian)``.
    """
    if not 0 < inner < ring[0]:
        raise ValueError("need 0 < inner < ring_inner")
    pr, dr, peak = ring_potential(r, *ring, k=k)
    u = amplitude * (pr - potential(r, inner, k))
    lap = amplitude * (dr - density(r, inner, k))
    return u, lap, abs(amplitude) * peak


def smooth_cutoff(r: np.ndarray, r_one: float, r_zero: float) -> np.ndarray:
    """C^∞ radial cutoff: 1 for ``r <= r_one``, 0 for ``r >= r_zero``."""
    s = np.clip((np.asarray(r) - r_one) / (r_zero - r_one), 0.0, 1.0)

    def psi(x):
        with np.errstate(divide="ignore", over="ignore"):
            return np.where(x > 0, np.exp(-1.0 / np.where(x > 0, x, 1.0)), 0.0)

    a, b = psi(1.0 - s), psi(s)
    return a / (a + b)


@dataclass
class MetricFamily:
    """A sequence ``g_1, g_2, ...`` with its C0 limit and curvature lower bound ``kappa``."""

    kind: str
    grid: Grid
    members: list[MetricField]
    limit: MetricField
    kappa: float
    params: dict = field(default_factory=dict)
    analytic_scalar: list[np.ndarray] | None = None

    def __len__(self):
        return len(self.members)

    def c0_distances(self) -> np.ndarray:
        """``‖g_i - g_limit‖_sup`` in the Euclidean frame."""
        out = []
        for m in self.members:
            diff = m.values - self.limit.values
            out.append(float(np.sqrt(np.sum(diff**2, axis=(0, 1))).max()))
        return np.array(out)


def _spike_params(i: int, amplitude: float, inner: float) -> tuple[float, float]:
    # amplitude ~ i^{-3/2} so the C0 size shrinks; inner ~ 1/i so the
    # negative Laplacian dip (~ A / inner²) grows like sqrt(i)
    return amplitude / i**1.5, inner / i


def make_family(
    kind: str,
    grid: Grid,
    kappa: float,
    count: int = 3,
    *,
    amplitude: float | None = None,
    inner: float = 0.6,
    ring: tuple[float, float] = (0.9, 1.45),
    max_bilipschitz: float = 1.09,
    tolerance: float = 1e-2,
    base_kind: str = "conformal-spike",
) -> MetricFamily:
    """Build ``count`` members of a witness family on ``grid`` (2D conformal metrics).

    ``conformal-spike``
        ``u_i = A_i (P_ring - P_{ρ_i})`` with ``A_i = A / i^{3/2}`` and
        ``ρ_i = inner / i``: ``‖g_i - g_eucl‖_sup → 0`` while the
        Laplacian dip at the origin deepens.  Limit ``g_eucl``.
    ``smooth-C2-converging``
        ``u_i = u_1 / i``; converges in C2 to ``g_eucl``.
    ``negative-control``
        the spike members, paired with a limit that carries a dent of
        curvature ``2 kappa`` at ``o``.  The members do not converge to it.
    ``glued``
        ``base_kind`` members passed through :func:`glue_to_euclidean`.

    When ``amplitude`` is omitted it is chosen so the first member is
    ``max_bilipschitz``-bilipschitz to ``g_eucl`` and, for ``kappa < 0``,
    its ring contributes at most ``0.9 |kappa|`` of negative curvature.  Every member is checked
    with :func:`compute_curvature`: ``R >= kappa - tolerance`` must hold at
    every node, otherwise construction is rejected.
    """
    if kind not in FAMILY_KINDS:
        raise ValueError(f"unknown family kind {kind!r}; choose from {FAMILY_KINDS}")
    if count < 3:
        raise ValueError("a family needs at least 3 members")
    if grid.dim != 2:
        raise ValueError("witness families are conformal metrics in two dimensions")
    if ring[1] >= grid.length / 4:
        raise ValueError(f"profile radius {ring[1]} leaves the middle half of the box (L={grid.length})")
    r = grid.distance()
    params = {"inner": inner, "ring": tuple(ring), "count": count}
    members, analytic = [], []

    if kind == "glued":
        from .gromov import default_cutoff, glue_to_euclidean

        base = make_family(base_kind, grid, kappa, count, amplitude=amplitude, inner=inner,
                           ring=ring, max_bilipschitz=max_bilipschitz, tolerance=tolerance)
        phi = default_cutoff(grid)
        members = [glue_to_euclidean(m, phi) for m in base.members]
        limit = glue_to_euclidean(base.limit, phi)
        params.update(base.params, base_kind=base_kind)
        _check_lower_bound(kind, members, kappa, tolerance)
        return MetricFamily(kind, grid, members, limit, kappa, params, base.analytic_scalar)

    if amplitude is None:
        u_peak, _, lap_peak = spike_profile(np.zeros(1), 1.0, inner, ring)
        amplitude = 0.5 * np.log(max_bilipschitz) / float(u_peak[0])
        if kappa < 0:
            # u >= 0 wherever Δu > 0, so R >= -2 A max(η_ring) there
            amplitude = min(amplitude, 0.9 * abs(kappa) / (2 * lap_peak))
    params["amplitude"] = amplitude

    if kind in ("conformal-spike", "negative-control"):
        if kappa >= 0:
            raise ValueError("conformal spike families on a torus need kappa < 0")
        for i in range(1, count + 1):
            a_i, rho_i = _spike_params(i, amplitude, inner)
            u, lap, _ = spike_profile(r, a_i, rho_i, ring)
            members.append(MetricField.conformal(grid, u))
            analytic.append(-2.0 * np.exp(-2.0 * u) * lap)
        if kind == "conformal-spike":
            limit = MetricField.euclidean(grid)
        else:
            # dent radius chosen so R(o) ≈ 2 kappa for the limit
            k = BUMP_POWER
            dent = 0.75 * amplitude
            rho = float(np.sqrt(dent * 2 * (k + 1) / (np.pi * abs(2 * kappa))))
            rho = min(rho, 0.9 * ring[0])
            u0, _, _ = spike_profile(r, -dent, rho, ring)
            limit = MetricField.conformal(grid, u0)
            params["limit_inner"] = rho

    else:  # smooth-C2-converging
        if kappa >= 0:
            raise ValueError("conformal families on a torus need kappa < 0")
        u1, lap1, _ = spike_profile(r, amplitude, inner, ring)
        for i in range(1, count + 1):
            u, lap = u1 / i, lap1 / i
            members.append(MetricField.conformal(grid, u))
            analytic.append(-2.0 * np.exp(-2.0 * u) * lap)
        limit = MetricField.euclidean(grid)

    _check_lower_bound(kind, members, kappa, tolerance)
    return MetricFamily(kind, grid, members, limit, kappa, params, analytic)


def _check_lower_bound(kind: str, members: list[MetricField], kappa: float, tolerance: float) -> None:
    for i, m in enumerate(members, start=1):
        scalar = compute_curvature(m).scalar
        if scalar.min() < kappa - tolerance:
            raise FamilyConstructionError(
                f"member {i} of {kind} has min R = {scalar.min():.4f} < kappa = {kappa}"
            )
