"""
Curvature on a grid and the DeTurck flow of a bump
==================================================

A conformal metric ``e^{2u} g_eucl`` in two dimensions has scalar curvature
``-2 e^{-2u} Δu``, which gives a closed-form check of the discrete
curvature.  We then flow a compactly supported bump and watch it spread.
"""

# %%
import numpy as np

from rdtlab import FlowConfig, Grid, MetricField, compute_curvature, evolve
from rdtlab.families import smooth_cutoff

# %% Fourth-order curvature: the error drops ~16x per halving of dx
for n in (32, 64, 128):
    grid = Grid.from_length(2, n, 4.0)
    k = 2 * np.pi / grid.length
    x, y = grid.coords
    u = 0.1 * np.sin(k * x) * np.sin(k * y)
    exact = -2 * np.exp(-2 * u) * (-2 * k * k * u)
    err = np.abs(compute_curvature(MetricField.conformal(grid, u)).scalar - exact).max()
    print(f"N={n:4d}  sup|R - R_exact| = {err:.3e}")

# %% A bump of height 0.04 on a 6x6 torus
grid = Grid.from_length(2, 64, 6.0)
g0 = MetricField.conformal(grid, 0.04 * smooth_cutoff(grid.distance(), 0.0, 1.0))
traj = evolve(g0, FlowConfig(t_end=0.1, record_times=[0.01, 0.02, 0.05]))

print(f"{'t':>6} {'bilip':>8} {'sup|h|':>9} {'min R':>9} {'max R':>9}")
for s in traj.states:
    d = s.diagnostics
    print(f"{s.t:6.3f} {d['bilipschitz']:8.5f} {d['sup_h']:9.5f} {d['minR']:9.5f} {d['maxR']:9.5f}")

# %% The minimum of R never decreases (maximum principle)
print("min R nondecreasing:", bool(np.all(np.diff(traj.step_min_scalar) >= -1e-10)))
