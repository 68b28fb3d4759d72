"""Curvature of grid metrics and the DeTurck gauge vector field.

Index conventions: ``dg[c, a, b] = ∂_c g_ab``; Christoffel symbols
``gamma[k, i, j] = Γ^k_ij``; the Riemann tensor is stored fully lowered with
``Ric_bd = g^{ac} Rm_abcd``, so round spheres have positive curvature.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .grid import Grid, MetricField, gradient_array, hessian_array

__all__ = [
    "CurvatureBundle",
    "compute_curvature",
    "christoffel",
    "bianchi_operator",
    "deturck_field",
    "lie_derivative_metric",
    "laplace_beltrami",
    "directional_derivative",
]


def christoffel(ginv: np.ndarray, dg: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Christoffel symbols of the first (``Γ_kij``) and second (``Γ^k_ij``) kind."""
    first = 0.5 * (
        np.einsum("ijk...->kij...", dg)
        + np.einsum("jik...->kij...", dg)
        - dg
    )
    second = np.einsum("lk...,kij...->lij...", ginv, first)
    return first, second


@dataclass(frozen=True)
class CurvatureBundle:
    """Curvature quantities derived from one metric.

    ``deturck`` is ``X_{g_eucl}(g)``, the Bianchi operator applied to
    ``h = g - g_eucl``.
    """

    metric: MetricField
    dg: np.ndarray
    christoffel_first: np.ndarray
    christoffel: np.ndarray
    riemann: np.ndarray
    ricci: np.ndarray
    scalar: np.ndarray
    deturck: np.ndarray

    @property
    def grid(self) -> Grid:
        return self.metric.grid

    @cached_property
    def ricci_norm_sq(self) -> np.ndarray:
        """``|Ric|²`` measured with the evolving metric."""
        ginv = self.metric.inverse
        ric_up = np.einsum("ia...,jb...,ab...->ij...", ginv, ginv, self.ricci)
        return np.einsum("ij...,ij...->...", ric_up, self.ricci)

    @cached_property
    def riemann_norm(self) -> np.ndarray:
        ginv = self.metric.inverse
        up = np.einsum("ia...,abcd...->ibcd...", ginv, self.riemann)
        up = np.einsum("jb...,ibcd...->ijcd...", ginv, up)
        up = np.einsum("kc...,ijcd...->ijkd...", ginv, up)
        up = np.einsum("ld...,ijkd...->ijkl...", ginv, up)
        sq = np.einsum("ijkl...,ijkl...->...", up, self.riemann)
        return np.sqrt(np.maximum(sq, 0.0))


def _riemann(ddg: np.ndarray, first: np.ndarray, second: np.ndarray) -> np.ndarray:
    # ddg[c, d, a, b] = ∂_c ∂_d g_ab
    lin = 0.5 * (
        np.einsum("bcad...->abcd...", ddg)
        + np.einsum("adbc...->abcd...", ddg)
        - np.einsum("acbd...->abcd...", ddg)
        - np.einsum("bdac...->abcd...", ddg)
    )
    quad = np.einsum("qbc...,qad...->abcd...", first, second)
    quad = quad - np.einsum("abcd...->abdc...", quad)
    return lin + quad


def compute_curvature(g: MetricField) -> CurvatureBundle:
    grid = g.grid
    values = g.values
    ginv = g.inverse
    dg = gradient_array(values, grid)
    ddg = hessian_array(values, grid, first=dg)
    first, second = christoffel(ginv, dg)
    rm = _riemann(ddg, first, second)
    ric = np.einsum("ac...,abcd...->bd...", ginv, rm)
    ric = 0.5 * (ric + np.swapaxes(ric, 0, 1))
    scalar = np.einsum("bd...,bd...->...", ginv, ric)
    x = _bianchi_flat(ginv, dg)
    return CurvatureBundle(g, dg, first, second, rm, ric, scalar, x)


def _bianchi_flat(ginv: np.ndarray, dh: np.ndarray) -> np.ndarray:
    # trace over p,q of (-∂_p h_qj + ½ ∂_j h_pq)
    div = np.einsum("pq...,pqj...->j...", ginv, dh)
    grad_tr = np.einsum("pq...,jpq...->j...", ginv, dh)
    return np.einsum("ij...,j...->i...", ginv, -div + 0.5 * grad_tr)


def bianchi_operator(h: np.ndarray, base: MetricField) -> np.ndarray:
    """``X^i = (ḡ+h)^{ij} (ḡ+h)^{pq} (-∇_p h_qj + ½ ∇_j h_pq)``, ∇ taken w.r.t. ``base``."""
    grid = base.grid
    total = MetricField(grid, base.values + h)
    dh = gradient_array(np.asarray(h), grid)
    dbase = gradient_array(base.values, grid)
    if np.any(dbase):
        _, gam = christoffel(base.inverse, dbase)
        # ∇_p h_qj = ∂_p h_qj - Γ^r_pq h_rj - Γ^r_pj h_qr
        dh = (
            dh
            - np.einsum("rpq...,rj...->pqj...", gam, h)
            - np.einsum("rpj...,qr...->pqj...", gam, h)
        )
    return _bianchi_flat(total.inverse, dh)


def deturck_field(g: MetricField) -> np.ndarray:
    """``X_{g_eucl}(g)`` for a metric on the flat torus."""
    return _bianchi_flat(g.inverse, gradient_array(g.values, g.grid))


def lie_derivative_metric(x: np.ndarray, g: MetricField, dg: np.ndarray | None = None) -> np.ndarray:
    """``(L_X g)_ij = X^k ∂_k g_ij + g_kj ∂_i X^k + g_ik ∂_j X^k``."""
    grid = g.grid
    if dg is None:
        dg = gradient_array(g.values, grid)
    dx = gradient_array(np.asarray(x), grid)  # dx[i, k] = ∂_i X^k
    transport = np.einsum("k...,kij...->ij...", x, dg)
    stretch = np.einsum("kj...,ik...->ij...", g.values, dx)
    return transport + stretch + np.swapaxes(stretch, 0, 1)


def directional_derivative(x: np.ndarray, u: np.ndarray, grid: Grid) -> np.ndarray:
    return np.einsum("i...,i...->...", x, gradient_array(u, grid))


def laplace_beltrami(u: np.ndarray, g: MetricField, gamma_trace: np.ndarray | None = None) -> np.ndarray:
    """``Δ_g u = g^{ij} ∂_i ∂_j u - g^{ij} Γ^k_ij ∂_k u``.

    ``gamma_trace`` may pass a precomputed ``g^{ij} Γ^k_ij``.
    """
    grid = g.grid
    du = gradient_array(u, grid)
    ddu = hessian_array(u, grid, first=du)
    if gamma_trace is None:
        _, gam = christoffel(g.inverse, gradient_array(g.values, grid))
        gamma_trace = np.einsum("ij...,kij...->k...", g.inverse, gam)
    return np.einsum("ij...,ij...->...", g.inverse, ddu) - np.einsum("k...,k...->...", gamma_trace, du)
