#!/usr/bin/env python3
"""Auditing the discrete energy balance.

Runs the same short coupled problem at four step sizes and measures the
residual of the per-step balance

    [E(n+1) - E(n)]/dt + 2||sqrt(nu) Du||^2 + ||grad mu||^2  ~  0.

The residual shrinks linearly with dt, and its running time integral
stays below zero: the scheme errs on the dissipative side.  Writes
energy_budget.csv with the residual series of each run.

Usage: python3 energy_budget.py
"""

import csv
import os

import numpy as np

from nlchns import diagnostics as dg
from nlchns import grid_ops as go
from nlchns import ns_step as ns
from nlchns.ch_step import ch_step, init_state
from nlchns.grid_ops import Grid, ScalarField
from nlchns.kernel import KernelSpec, build_kernel
from nlchns.ns_step import ViscositySpec, init_ns_state
from nlchns.potential import PotentialSpec, build_F_eps

OUT = os.path.join(os.path.dirname(os.path.abspath(__file__)), "out")


def smooth_start(grid, kd, pot, visc):
    """A few relaxed steps so the refinement study starts from smooth data."""
    x, y = grid.cell_mesh()
    v = np.cos(np.pi * x / grid.lx) * np.cos(np.pi * y / grid.ly) \
        + 0.4 * np.cos(2 * np.pi * x / grid.lx)
    v -= v.mean()
    ch = init_state(ScalarField(grid, 0.3 * v / np.max(np.abs(v))), kd, pot)
    xc, yc = grid.corner_mesh()
    psi = 0.4 * np.sin(np.pi * xc / grid.lx) ** 2 \
        * np.sin(np.pi * yc / grid.ly) ** 2
    flow = init_ns_state(go.velocity_from_streamfunction(grid, psi))
    for _ in range(10):
        flow = ns.ns_step(flow, ch.phi, ch.mu, None, visc, 2e-3)
        ch = ch_step(ch, flow.u, 2e-3, kd, pot)
    return ch, flow


def main():
    os.makedirs(OUT, exist_ok=True)
    grid = Grid(16, 16, 1.0, 1.0)
    kd = build_kernel(KernelSpec("gaussian", 0.15, j_l1=4.0), grid)
    pot = build_F_eps(PotentialSpec(1.0, 2.0, 1, 1e-2).with_beta(kd.beta))
    visc = ViscositySpec(0.05, 0.2)
    ch0, flow0 = smooth_start(grid, kd, pot, visc)

    rows = [["dt", "t", "residual", "running_integral"]]
    print(f"{'dt':>8} {'max|residual|':>14} {'integral':>12}")
    maxima = []
    for dt in (4e-3, 2e-3, 1e-3, 5e-4):
        ch, flow = ch0, flow0
        phis, us, vs = [ch.phi.values.copy()], [flow.u.u.copy()], \
            [flow.u.v.copy()]
        for _ in range(int(round(0.1 / dt))):
            flow = ns.ns_step(flow, ch.phi, ch.mu, None, visc, dt)
            ch = ch_step(ch, flow.u, dt, kd, pot)
            phis.append(ch.phi.values.copy())
            us.append(flow.u.u.copy())
            vs.append(flow.u.v.copy())
        traj = dg.Trajectory(grid, dt, np.array(phis), np.array(us),
                             np.array(vs))
        res = dg.energy_identity_residuals(traj, kd, pot, visc)
        running = dg.running_cumulative(res, dt)
        maxima.append(np.max(np.abs(res)))
        print(f"{dt:8.0e} {maxima[-1]:14.6e} {running[-1]:12.4e}")
        rows += [[dt, (k + 1) * dt, res[k], running[k]]
                 for k in range(len(res))]

    ratios = [maxima[i] / maxima[i + 1] for i in range(len(maxima) - 1)]
    print("halving ratios:", ", ".join(f"{r:.3f}" for r in ratios),
          "(first order: 2)")

    path = os.path.join(OUT, "energy_budget.csv")
    with open(path, "w", newline="") as fh:
        csv.writer(fh).writerows(rows)
    print(f"wrote {path}")


if __name__ == "__main__":
    main()
