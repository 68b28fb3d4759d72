"""Periodic lattices, tensor fields and fourth-order finite differences.

Fields are plain numpy arrays whose leading axes are tensor components and
whose trailing ``n`` axes are the lattice, e.g. a metric on a 2D grid has
shape ``(2, 2, N, N)``.  :class:`TensorField` and :class:`MetricField` wrap
such arrays with the grid and a small amount of bookkeeping.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from itertools import product

import numpy as np
from scipy.ndimage import correlate1d

__all__ = [
    "Grid",
    "TensorField",
    "MetricField",
    "DegenerateMetricError",
    "GridSizeError",
    "STENCILS",
    "partial_derivative",
    "derivative_array",
    "gradient_array",
    "hessian_array",
    "sup_norm",
    "pointwise_norm",
    "ball_infimum",
    "resample",
    "DEGENERACY_THRESHOLD",
]

# Positive-definiteness cutoff, relative to the trace.
DEGENERACY_THRESHOLD = 1e-10


class GridSizeError(ValueError):
    """A stencil or ball does not fit on the periodic grid."""


class DegenerateMetricError(ValueError):
    """A metric failed the positive-definiteness check."""


# Fourth-order central stencils on offsets -hw..hw, in units of dx**-m.
STENCILS = {
    1: np.array([1.0, -8.0, 0.0, 8.0, -1.0]) / 12.0,
    2: np.array([-1.0, 16.0, -30.0, 16.0, -1.0]) / 12.0,
    3: np.array([1.0, -8.0, 13.0, 0.0, -13.0, 8.0, -1.0]) / 8.0,
    4: np.array([-1.0, 12.0, -39.0, 56.0, -39.0, 12.0, -1.0]) / 6.0,
}


@dataclass(frozen=True)
class Grid:
    """Uniform periodic lattice with ``points`` nodes per axis.

    The marked point ``o`` sits at ``origin_index``; physical coordinates are
    measured from it, so node ``idx`` has coordinate ``(idx - origin) * dx``.
    """

    dim: int
    points: int
    dx: float
    origin_index: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.dim not in (2, 3):
            raise ValueError(f"dim must be 2 or 3, got {self.dim}")
        if self.points < 16:
            raise GridSizeError(f"need at least 16 points per axis, got {self.points}")
        if not self.dx > 0:
            raise ValueError("dx must be positive")
        if self.origin_index is None:
            object.__setattr__(self, "origin_index", (self.points // 2,) * self.dim)
        origin = tuple(int(i) for i in self.origin_index)
        if len(origin) != self.dim or any(not 0 <= i < self.points for i in origin):
            raise ValueError(f"origin_index {origin} is not a lattice node")
        object.__setattr__(self, "origin_index", origin)

    @classmethod
    def from_length(cls, dim: int, points: int, length: float) -> "Grid":
        return cls(dim, points, length / points)

    @property
    def length(self) -> float:
        return self.points * self.dx

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.points,) * self.dim

    @property
    def cell_volume(self) -> float:
        return self.dx**self.dim

    @cached_property
    def coords(self) -> np.ndarray:
        """Node coordinates relative to ``o``, shape ``(dim, *shape)``."""
        axes = [(np.arange(self.points) - o) * self.dx for o in self.origin_index]
        return np.array(np.meshgrid(*axes, indexing="ij"))

    def displacement(self, center) -> np.ndarray:
        """Minimal-image displacement of every node from ``center``."""
        center = np.asarray(center, dtype=float).reshape((self.dim,) + (1,) * self.dim)
        d = self.coords - center
        return d - self.length * np.round(d / self.length)

    def distance(self, center=None) -> np.ndarray:
        """Periodic Euclidean distance of every node from ``center`` (default ``o``)."""
        if center is None:
            center = np.zeros(self.dim)
        return np.sqrt(np.sum(self.displacement(center) ** 2, axis=0))

    def node_position(self, index) -> np.ndarray:
        return (np.asarray(index) - np.asarray(self.origin_index)) * self.dx

    def refined(self) -> "Grid":
        """Same box with half the spacing; ``o`` keeps its physical position."""
        return Grid(self.dim, 2 * self.points, self.dx / 2, tuple(2 * i for i in self.origin_index))

    def zeros(self, *components: int) -> np.ndarray:
        return np.zeros(tuple(components) + self.shape)

    def eye(self) -> np.ndarray:
        """The Euclidean metric as a component array."""
        g = self.zeros(self.dim, self.dim)
        for i in range(self.dim):
            g[i, i] = 1.0
        return g


@dataclass(frozen=True)
class TensorField:
    """Component array on a grid.

    ``signature`` lists the slot types (``"d"`` covariant, ``"u"``
    contravariant), so a metric is ``"dd"`` and a vector field ``"u"``.
    With ``symmetric=True`` the first two slots are symmetrized on
    construction so paired components are stored identically.
    """

    grid: Grid
    values: np.ndarray
    signature: str = ""
    symmetric: bool = False

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        rank = len(self.signature)
        expected = (self.grid.dim,) * rank + self.grid.shape
        if values.shape != expected:
            raise ValueError(f"values shape {values.shape} != expected {expected}")
        if self.symmetric:
            if rank < 2:
                raise ValueError("symmetric fields need at least two slots")
            values = 0.5 * (values + np.swapaxes(values, 0, 1))
        if not np.all(np.isfinite(values)):
            raise FloatingPointError("tensor field has non-finite components")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def rank(self) -> int:
        return len(self.signature)

    def __add__(self, other: "TensorField") -> "TensorField":
        return TensorField(self.grid, self.values + other.values, self.signature, self.symmetric)

    def __sub__(self, other: "TensorField") -> "TensorField":
        return TensorField(self.grid, self.values - other.values, self.signature, self.symmetric)

    def __mul__(self, scalar: float) -> "TensorField":
        return TensorField(self.grid, scalar * self.values, self.signature, self.symmetric)

    __rmul__ = __mul__


class MetricField:
    """Symmetric positive-definite 2-tensor with cached inverse and volume density."""

    def __init__(self, grid: Grid, values: np.ndarray, check: bool = True):
        self.grid = grid
        self.field = TensorField(grid, values, "dd", symmetric=True)
        if check:
            self.check_positive()

    @classmethod
    def euclidean(cls, grid: Grid) -> "MetricField":
        return cls(grid, grid.eye())

    @classmethod
    def conformal(cls, grid: Grid, u: np.ndarray) -> "MetricField":
        """The metric ``exp(2u) g_eucl``."""
        return cls(grid, np.exp(2.0 * np.asarray(u)) * grid.eye())

    @classmethod
    def from_perturbation(cls, grid: Grid, h: np.ndarray) -> "MetricField":
        return cls(grid, grid.eye() + h)

    @property
    def values(self) -> np.ndarray:
        return self.field.values

    @property
    def dim(self) -> int:
        return self.grid.dim

    @cached_property
    def perturbation(self) -> np.ndarray:
        """``h = g - g_eucl``."""
        return self.values - self.grid.eye()

    @cached_property
    def _nodewise(self) -> np.ndarray:
        # (nodes..., n, n) view for batched linear algebra
        n = self.dim
        return np.moveaxis(self.values.reshape(n, n, -1), -1, 0)

    @cached_property
    def eigenvalues(self) -> np.ndarray:
        """Eigenvalues relative to the Euclidean metric, shape ``(nodes, n)``."""
        return np.linalg.eigvalsh(self._nodewise)

    @cached_property
    def inverse(self) -> np.ndarray:
        g = self.values
        if self.dim == 2:
            det = self.determinant
            inv = np.array([[g[1, 1], -g[0, 1]], [-g[1, 0], g[0, 0]]]) / det
        else:
            # adjugate / determinant
            inv = np.empty_like(g)
            for i in range(3):
                for j in range(3):
                    r = [k for k in range(3) if k != j]
                    c = [k for k in range(3) if k != i]
                    minor = g[r[0], c[0]] * g[r[1], c[1]] - g[r[0], c[1]] * g[r[1], c[0]]
                    inv[i, j] = (-1) ** (i + j) * minor
            inv = inv / self.determinant
        return 0.5 * (inv + np.swapaxes(inv, 0, 1))

    @cached_property
    def determinant(self) -> np.ndarray:
        g = self.values
        if self.dim == 2:
            return g[0, 0] * g[1, 1] - g[0, 1] * g[1, 0]
        return (
            g[0, 0] * (g[1, 1] * g[2, 2] - g[1, 2] * g[2, 1])
            - g[0, 1] * (g[1, 0] * g[2, 2] - g[1, 2] * g[2, 0])
            + g[0, 2] * (g[1, 0] * g[2, 1] - g[1, 1] * g[2, 0])
        )

    @cached_property
    def sqrt_det(self) -> np.ndarray:
        return np.sqrt(self.determinant)

    @cached_property
    def smallest_eigenvalue(self) -> np.ndarray:
        if self.dim == 2:
            g = self.values
            half_tr = 0.5 * (g[0, 0] + g[1, 1])
            disc = np.sqrt(np.maximum(half_tr**2 - self.determinant, 0.0))
            return half_tr - disc
        return self.eigenvalues[:, 0].reshape(self.grid.shape)

    def check_positive(self) -> None:
        trace = np.trace(self.values, axis1=0, axis2=1)
        smallest = self.smallest_eigenvalue
        bad = ~(smallest > DEGENERACY_THRESHOLD * np.abs(trace))
        if np.any(bad):
            node = np.unravel_index(int(np.argmax(bad)), self.grid.shape)
            raise DegenerateMetricError(
                f"metric not positive definite at node {node} "
                f"(smallest eigenvalue {np.nanmin(smallest):.3e})"
            )

    def bilipschitz(self) -> float:
        """Smallest ``L >= 1`` with ``g_eucl / L <= g <= L g_eucl`` at every node."""
        ev = self.eigenvalues
        return float(max(1.0, ev[:, -1].max(), 1.0 / ev[:, 0].min()))

    def volume(self) -> float:
        return float(self.sqrt_det.sum() * self.grid.cell_volume)

    def integrate(self, f: np.ndarray) -> float:
        """``∫ f dg`` by the periodic rectangle rule."""
        return float(np.sum(f * self.sqrt_det) * self.grid.cell_volume)


# ---------------------------------------------------------------------------
# finite differences


def _check_fits(grid_points: int, order: int) -> np.ndarray:
    if order not in STENCILS:
        raise ValueError(f"derivative order must be in 1..4, got {order}")
    weights = STENCILS[order]
    half_width = len(weights) // 2
    if order * half_width >= grid_points / 2:
        raise GridSizeError(
            f"order-{order} stencil (half-width {half_width}) needs more than "
            f"{2 * order * half_width} points per axis, grid has {grid_points}"
        )
    return weights


def derivative_array(values: np.ndarray, grid: Grid, axis: int, order: int = 1) -> np.ndarray:
    """``∂^order / ∂x_axis^order`` of a component array (lattice axes last)."""
    weights = _check_fits(grid.points, order)
    if not 0 <= axis < grid.dim:
        raise ValueError(f"axis {axis} out of range for dim {grid.dim}")
    array_axis = values.ndim - grid.dim + axis
    out = correlate1d(values, weights, axis=array_axis, mode="wrap")
    return out / grid.dx**order


def gradient_array(values: np.ndarray, grid: Grid) -> np.ndarray:
    """All first partials; the new derivative index is placed first."""
    return np.stack([derivative_array(values, grid, a) for a in range(grid.dim)])


def hessian_array(values: np.ndarray, grid: Grid, first: np.ndarray | None = None) -> np.ndarray:
    """All second partials ``[a, b, ...] = ∂_a ∂_b``, exactly symmetric in ``a, b``.

    Pure second derivatives use the 5-point stencil; mixed ones compose two
    first-derivative stencils.  ``first`` may pass a precomputed gradient.
    """
    n = grid.dim
    if first is None:
        first = gradient_array(values, grid)
    out = np.empty((n, n) + values.shape)
    for a in range(n):
        out[a, a] = derivative_array(values, grid, a, 2)
        for b in range(a + 1, n):
            out[a, b] = derivative_array(first[a], grid, b)
            out[b, a] = out[a, b]
    return out


def partial_derivative(f: TensorField, axis: int, order: int = 1) -> TensorField:
    values = derivative_array(f.values, f.grid, axis, order)
    return TensorField(f.grid, values, f.signature, f.symmetric)


def all_partials(values: np.ndarray, grid: Grid, order: int) -> list[np.ndarray]:
    """Every mixed partial of the given total order, one array per sorted multi-index."""
    out = []
    for multi in product(range(grid.dim), repeat=order):
        if list(multi) != sorted(multi):
            continue
        counts = np.bincount(multi, minlength=grid.dim)
        d = values
        for axis, count in enumerate(counts):
            if count:
                d = derivative_array(d, grid, axis, int(count))
        out.append((multi, d))
    return out


def partial_norm(values: np.ndarray, grid: Grid, order: int) -> float:
    """``sup |∂^m f|``: max over nodes of the Euclidean norm of the m-th derivative tensor.

    The norm counts each ordered multi-index, so mixed partials are weighted
    by their multiplicity.
    """
    from math import factorial

    comp_axes = values.ndim - grid.dim
    total = np.zeros(grid.shape)
    for multi, d in all_partials(values, grid, order):
        counts = np.bincount(multi, minlength=grid.dim)
        mult = factorial(order)
        for c in counts:
            mult //= factorial(int(c))
        total += mult * np.sum(d**2, axis=tuple(range(comp_axes)))
    return float(np.sqrt(total.max()))


# ---------------------------------------------------------------------------
# norms and reductions


def pointwise_norm(values: np.ndarray, grid: Grid) -> np.ndarray:
    comp_axes = values.ndim - grid.dim
    if comp_axes == 0:
        return np.abs(values)
    return np.sqrt(np.sum(values**2, axis=tuple(range(comp_axes))))


def sup_norm(f) -> float:
    """Max over nodes of the Euclidean-frame tensor norm."""
    if isinstance(f, MetricField):
        f = f.field
    return float(pointwise_norm(f.values, f.grid).max())


def ball_infimum(values: np.ndarray, grid: Grid, center=None, radius: float = 1.0) -> float:
    """Minimum of a scalar field over nodes within Euclidean ``radius`` of ``center``.

    ``center`` is a physical position (default ``o``).
    """
    if not 0 < radius < grid.length / 2:
        raise GridSizeError(f"ball radius {radius} must lie in (0, L/2) with L = {grid.length}")
    inside = grid.distance(center) <= radius * (1 + 1e-12)
    return float(np.min(values[inside]))


def resample(values: np.ndarray, grid: Grid, positions: np.ndarray) -> np.ndarray:
    """Tensor-product Lagrange interpolation on the 5 nodes nearest each position.

    ``positions`` has shape ``(dim, *pts)`` in coordinates relative to ``o``
    and wraps periodically.  Returns ``(*components, *pts)``.  Reproduces
    polynomials of degree 4 exactly wherever the stencil does not cross the
    periodic seam.  Centering on the nearest node makes the error an odd,
    smooth function of the offset, so fields resampled at positions within
    half a cell of their nodes can be differentiated again without losing
    convergence (a floor-based even stencil has a kink at every node).
    """
    n = grid.dim
    positions = np.asarray(positions, dtype=float)
    pts_shape = positions.shape[1:]
    comp_shape = values.shape[: values.ndim - n]
    flat_vals = values.reshape(comp_shape + grid.shape)

    idx_float = positions.reshape(n, -1) / grid.dx + np.asarray(grid.origin_index)[:, None]
    base = np.round(idx_float)
    frac = idx_float - base
    frac = np.where(np.abs(frac) < 1e-9, 0.0, frac)
    base = base.astype(np.int64)

    nodes = np.arange(-2, 3)
    s = frac[None]
    w = np.ones((5,) + frac.shape)
    for m in range(5):
        for j in nodes:
            if j != nodes[m]:
                w[m] *= (s[0] - j) / (nodes[m] - j)

    npts = base.shape[1]
    out = np.zeros(comp_shape + (npts,))
    for offsets in product(range(5), repeat=n):
        weight = np.ones(npts)
        index = []
        for axis, k in enumerate(offsets):
            weight = weight * w[k, axis]
            index.append((base[axis] + nodes[k]) % grid.points)
        out += weight * flat_vals[(...,) + tuple(index)]
    return out.reshape(comp_shape + pts_shape)
