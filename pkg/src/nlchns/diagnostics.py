"""Energy accounting, the discrete energy identity, the dissipative
estimate, and a trajectory metric for comparing runs.

Energy of a state (phi, u):

    E = 1/2 ||u||^2  +  1/4 iint J(x-y) (phi(x) - phi(y))^2  +  int F(phi)

The nonlocal quadratic term is evaluated through the convolution,
(1/2)<a phi, phi> - (1/2)<phi, J*phi>, which agrees with the double sum
identically because both use the same kernel table and cell quadrature;
a direct O(N^2) evaluation is kept here as a cross-check oracle.

The identity residual follows the stepper's conventions: viscous
dissipation is evaluated with coefficients frozen at the start-of-step
concentration against the end-of-step velocity, the chemical dissipation
and transport power at the end-of-step state, and the forcing power pairs
the start-of-step force with the end-of-step velocity:

    r_n = [E_{n+1} - E_n]/dt + 2||sqrt(nu(phi_n)) D u_{n+1}||^2
          + ||grad mu_{n+1}||^2 - <h_n, u_{n+1}>

For the exact time discretization the residual is O(dt) on smooth data,
and its cumulative integral stays nonnegative up to roundoff (the scheme
dissipates at least as much as the identity claims).

Trajectory distance: a sum of five nonnegative terms, each a norm of the
difference (or the square root of a gap), so symmetry and the triangle
inequality hold term by term:

    sup_t ( ||du|| + ||dphi||_{L^{2+2q}} )
  + sup over unit windows of the windowed L^2 of V-norms of differences
  + windowed L^{4/3} of velocity difference quotients in the dual
    (Stokes-inverse) gradient seminorm
  + windowed L^2 of concentration difference quotients in the dual
    Neumann seminorm
  + sqrt( sup_t | int F(phi_a) - int F(phi_b) | )

Windows have unit length; a horizon shorter than one window degenerates
to a single truncated window over the whole trajectory.
"""

from dataclasses import dataclass

import numpy as np

from . import grid_ops as go
from . import ns_step
from .grid_ops import ScalarField, VectorField

WINDOW_WIDTH = 1.0


class DiagnosticsError(Exception):
    pass


# ---------------------------------------------------------------- energy

@dataclass
class EnergyReport:
    t: float
    kinetic: float
    nonlocal_: float
    potential: float
    total: float
    dissipation_visc: float
    dissipation_mu: float
    forcing: float
    identity_residual: float


def nonlocal_energy(phi, kernel):
    """1/4 iint J(x-y)(phi(x)-phi(y))^2 via the convolution form."""
    p = phi.values
    conv = kernel.convolve_raw(p)
    val = 0.5 * float(np.sum(p * (kernel.a_field.values * p - conv))) \
        * phi.grid.cell_volume
    return val


def nonlocal_energy_direct(phi, kernel):
    """O(N^2) double-sum reference; keep to small grids."""
    grid = phi.grid
    nx, ny = grid.nx, grid.ny
    p = phi.values
    jt = kernel.Jtab
    total = 0.0
    for i in range(nx):
        for j in range(ny):
            block = jt[nx - 1 - i:2 * nx - 1 - i, ny - 1 - j:2 * ny - 1 - j]
            total += np.sum(block * (p[i, j] - p) ** 2)
    return 0.25 * total * grid.cell_volume ** 2


def potential_energy(phi, feps):
    return float(np.sum(feps.f(phi.values))) * phi.grid.cell_volume


def total_energy(phi, vel, kernel, feps):
    kin = 0.0 if vel is None else 0.5 * go.vector_l2(vel) ** 2
    return kin + nonlocal_energy(phi, kernel) + potential_energy(phi, feps)


def energy_report(t, phi, vel, kernel, feps, visc=None, mu=None,
                  forcing=None, identity_residual=float("nan")):
    """Snapshot energy budget.  Dissipation fields use the state's own
    coefficients nu(phi); the identity residual (a pairwise quantity) is
    passed in by whoever computed it."""
    kinetic = 0.0 if vel is None else 0.5 * go.vector_l2(vel) ** 2
    nl = nonlocal_energy(phi, kernel)
    pot = potential_energy(phi, feps)
    diss_v = 0.0
    if visc is not None and vel is not None:
        nu_c, nu_n = ns_step.viscosity_fields(phi.grid, phi.values, visc)
        diss_v = ns_step.dissipation(phi.grid, nu_c, nu_n, vel.u, vel.v)
    diss_m = 0.0
    if mu is not None:
        diss_m = go.h1_seminorm(mu) ** 2
    power = 0.0
    if forcing is not None and vel is not None:
        power = go.inner_vec(forcing, vel)
    return EnergyReport(t=float(t), kinetic=float(kinetic), nonlocal_=nl,
                        potential=pot, total=float(kinetic + nl + pot),
                        dissipation_visc=diss_v, dissipation_mu=diss_m,
                        forcing=power, identity_residual=identity_residual)


# ------------------------------------------------------------ trajectory

@dataclass
class Trajectory:
    """Uniformly sampled run history.  Times are canonical, t0 + k dt,
    so translation composes exactly."""

    grid: go.Grid
    dt: float
    phis: np.ndarray     # (n, nx, ny)
    us: np.ndarray       # (n, nx+1, ny)
    vs: np.ndarray       # (n, nx, ny+1)
    t0: float = 0.0

    def __post_init__(self):
        if not (self.dt > 0.0):
            raise DiagnosticsError(f"dt must be positive, got {self.dt}")
        self.phis = np.asarray(self.phis, dtype=float)
        self.us = np.asarray(self.us, dtype=float)
        self.vs = np.asarray(self.vs, dtype=float)
        n = self.phis.shape[0]
        nx, ny = self.grid.nx, self.grid.ny
        if self.phis.shape != (n, nx, ny) or self.us.shape != (n, nx + 1, ny) \
                or self.vs.shape != (n, nx, ny + 1):
            raise DiagnosticsError("trajectory array shapes are inconsistent")
        if n < 1:
            raise DiagnosticsError("trajectory needs at least one snapshot")
        if not (np.all(np.isfinite(self.phis)) and np.all(np.isfinite(self.us))
                and np.all(np.isfinite(self.vs))):
            raise DiagnosticsError("trajectory contains non-finite data")
        means = self.phis.mean(axis=(1, 2))
        if np.max(np.abs(means)) >= 1.0:
            raise DiagnosticsError("concentration mean escaped (-1, 1)")

    @property
    def n_snapshots(self):
        return self.phis.shape[0]

    @property
    def times(self):
        return self.t0 + self.dt * np.arange(self.n_snapshots)

    @property
    def horizon(self):
        return float(self.dt * (self.n_snapshots - 1))

    def phi(self, k):
        return ScalarField(self.grid, self.phis[k])

    def vel(self, k):
        return VectorField(self.grid, self.us[k], self.vs[k], bc="noslip")


def translate(traj, t_shift, tol=1e-9):
    """Drop the first t_shift of the trajectory and restart the clock at 0.

    t_shift must align with the snapshot grid; shifting to or beyond the
    final snapshot is an error.  Times are regenerated as k * dt, so
    translate(a) then translate(b) equals translate(a + b) bitwise."""
    if t_shift < -tol * traj.dt:
        raise DiagnosticsError("translation must be forward in time")
    steps = int(round(t_shift / traj.dt))
    if abs(steps * traj.dt - t_shift) > tol * max(traj.dt, 1.0):
        raise DiagnosticsError(
            f"shift {t_shift} is not a multiple of dt = {traj.dt}")
    if steps >= traj.n_snapshots:
        raise DiagnosticsError("translation exceeds the trajectory horizon")
    return Trajectory(traj.grid, traj.dt, traj.phis[steps:].copy(),
                      traj.us[steps:].copy(), traj.vs[steps:].copy(), t0=0.0)


# ------------------------------------------------------- energy identity

def energy_identity_residuals(traj, kernel, feps, visc, forcings=None,
                              mus=None):
    """Residual series r_n, n = 0 .. n_snapshots - 2, per the module
    docstring.  mus overrides the chemical potentials (list of arrays);
    otherwise they are recomputed from phi, matching the stepper.
    forcings: optional list of VectorFields at the step starts."""
    from .ch_step import chemical_potential

    n = traj.n_snapshots
    if n < 2:
        raise DiagnosticsError("need at least two snapshots for residuals")
    energies = np.empty(n)
    for k in range(n):
        energies[k] = total_energy(traj.phi(k), traj.vel(k), kernel, feps)
    out = np.empty(n - 1)
    for k in range(n - 1):
        phi_next = traj.phi(k + 1)
        if mus is not None:
            mu_next = ScalarField(traj.grid, mus[k + 1])
        else:
            mu_next = chemical_potential(phi_next, kernel, feps)
        nu_c, nu_n = ns_step.viscosity_fields(traj.grid, traj.phis[k], visc)
        diss_v = ns_step.dissipation(traj.grid, nu_c, nu_n,
                                     traj.us[k + 1], traj.vs[k + 1])
        diss_m = go.h1_seminorm(mu_next) ** 2
        power = 0.0
        if forcings is not None and forcings[k] is not None:
            power = go.inner_vec(forcings[k], traj.vel(k + 1))
        out[k] = (energies[k + 1] - energies[k]) / traj.dt \
            + diss_v + diss_m - power
    return out


def cumulative_residual(residuals, dt):
    return float(np.sum(residuals) * dt)


def running_cumulative(residuals, dt):
    """Prefix sums of r_n dt.  The continuum energy balance caps these at
    zero (energy is never gained beyond the forcing account); an implicit
    scheme sits on the negative side by its numerical dissipation, so the
    meaningful audit is that no prefix climbs above roundoff tolerance."""
    return np.cumsum(np.asarray(residuals, dtype=float)) * dt


def observed_order(dts, values):
    """Least-squares slope of log(value) against log(dt)."""
    dts = np.asarray(dts, dtype=float)
    values = np.asarray(values, dtype=float)
    if np.any(values <= 0.0):
        raise DiagnosticsError("order estimate needs positive values")
    slope = np.polyfit(np.log(dts), np.log(values), 1)[0]
    return float(slope)


# --------------------------------------------------- dissipative estimate

def dissipative_estimate_check(times, energies, k, floor, fit_time=None,
                               slack=1e-12):
    """Check E(t) <= E(0) exp(-k t) + floor + K with K fitted once.

    K is the largest deficit over the fit window [0, fit_time] (default
    min(2/k, a quarter of the horizon)) and is then frozen; every later
    snapshot must sit under the bound.  A horizon shorter than 5/k cannot
    distinguish the decay from its transient, so the status is
    "inconclusive" rather than pass or fail."""
    times = np.asarray(times, dtype=float)
    energies = np.asarray(energies, dtype=float)
    if times.shape != energies.shape or times.ndim != 1 or times.size < 2:
        raise DiagnosticsError("times/energies must be matching 1d arrays")
    if not (k > 0.0):
        raise DiagnosticsError("decay rate k must be positive")
    horizon = times[-1] - times[0]
    result = {"k": k, "floor": floor, "horizon": float(horizon),
              "required_horizon": 5.0 / k}
    if horizon < 5.0 / k:
        result.update(status="inconclusive", K=None, first_violation=None)
        return result
    t = times - times[0]
    bound_core = energies[0] * np.exp(-k * t) + floor
    if fit_time is None:
        fit_time = min(2.0 / k, horizon / 4.0)
    fit_mask = t <= fit_time
    K = max(0.0, float(np.max(energies[fit_mask] - bound_core[fit_mask])))
    scale = max(abs(energies[0]), abs(floor), 1.0)
    margin = energies - (bound_core + K)
    check_mask = ~fit_mask
    bad = np.flatnonzero(check_mask & (margin > slack * scale))
    result.update(K=K, fit_time=float(fit_time),
                  max_margin=float(np.max(margin[check_mask])) if
                  np.any(check_mask) else None)
    if bad.size:
        result.update(status="violated", first_violation=float(times[bad[0]]))
    else:
        result.update(status="satisfied", first_violation=None)
    return result


# -------------------------------------------------- chemical lower bound

def gradient_bound_check(phi, mu, kernel, c0):
    """||grad mu||^2 >= (c0^2/4) ||grad phi||^2 - 2 ||grad J||_{L1}^2 ||phi||^2.

    Returns both sides; satisfied means lhs >= rhs - roundoff slack."""
    lhs = go.h1_seminorm(mu) ** 2
    rhs = 0.25 * c0**2 * go.h1_seminorm(phi) ** 2 \
        - 2.0 * kernel.grad_j_l1**2 * go.norm_l2(phi) ** 2
    scale = max(abs(lhs), abs(rhs), 1.0)
    return {"lhs": lhs, "rhs": rhs,
            "satisfied": bool(lhs >= rhs - 1e-12 * scale)}


def fprime_l1_series(traj, feps):
    """||F'(phi(t))||_{L1} along the trajectory; boundedness of this series
    is the practical sign that the singular derivative stays integrable."""
    out = np.empty(traj.n_snapshots)
    for k in range(traj.n_snapshots):
        out[k] = float(np.sum(np.abs(feps.fprime(traj.phis[k])))) \
            * traj.grid.cell_volume
    return out


# ------------------------------------------------------ trajectory metric

def _window_starts(times, width, tol=1e-12):
    """Indices s such that [t_s, t_s + width] fits inside the horizon;
    degenerate horizons yield the single full window."""
    horizon = times[-1] - times[0]
    if horizon <= width + tol:
        return [0]
    starts = [s for s in range(len(times))
              if times[s] + width <= times[-1] + tol]
    return starts


def _windowed_norm(times, values, dt, power, width=WINDOW_WIDTH):
    """sup over unit windows of (sum values^power dt)^(1/power)."""
    values = np.asarray(values, dtype=float)
    best = 0.0
    for s in _window_starts(times, width):
        mask = (times >= times[s] - 1e-12) & (times <= times[s] + width + 1e-12)
        val = float(np.sum(values[mask] ** power) * dt) ** (1.0 / power)
        best = max(best, val)
    return best


def trajectory_metric(a, b, feps):
    """Distance between two runs; see the module docstring for the terms.
    Requires matching grids, step sizes, and horizons."""
    if a.grid.key() != b.grid.key():
        raise DiagnosticsError("trajectory grids do not match")
    if a.dt != b.dt or a.n_snapshots != b.n_snapshots:
        raise DiagnosticsError("trajectory samplings do not match")
    grid = a.grid
    dt = a.dt
    n = a.n_snapshots
    p_exp = 2.0 + 2.0 * feps.spec.q

    du = a.us - b.us
    dv = a.vs - b.vs
    dphi = a.phis - b.phis
    vol = grid.cell_volume

    sup_state = 0.0
    vnorm_sq = np.empty(n)
    pot_gap = 0.0
    for k in range(n):
        u_l2 = np.sqrt((np.sum(du[k] ** 2) + np.sum(dv[k] ** 2)) * vol)
        phi_lp = float((np.sum(np.abs(dphi[k]) ** p_exp) * vol)
                       ** (1.0 / p_exp))
        sup_state = max(sup_state, u_l2 + phi_lp)
        w = VectorField(grid, du[k], dv[k], bc="noslip")
        f = ScalarField(grid, dphi[k], bc="neumann")
        vnorm_sq[k] = (u_l2**2 + go.vector_h1_seminorm(w) ** 2
                       + go.norm_l2(f) ** 2 + go.h1_seminorm(f) ** 2)
        gap = abs(potential_energy(a.phi(k), feps)
                  - potential_energy(b.phi(k), feps))
        pot_gap = max(pot_gap, gap)

    times = a.times - a.times[0]
    d_window_v = _windowed_norm(times, np.sqrt(vnorm_sq), dt, 2.0)

    d_quot_u = 0.0
    d_quot_phi = 0.0
    if n >= 2:
        qu_norms = np.empty(n - 1)
        qphi_norms = np.empty(n - 1)
        for k in range(n - 1):
            qu = (du[k + 1] - du[k]) / dt
            qv = (dv[k + 1] - dv[k]) / dt
            qu_norms[k] = ns_step.stiffness_dual_norm(grid, qu, qv)
            qp = (dphi[k + 1] - dphi[k]) / dt
            qp = qp - qp.mean()  # means cancel exactly up to roundoff
            qphi_norms[k] = go.v0prime_norm(ScalarField(grid, qp))
        d_quot_u = _windowed_norm(times[:-1], qu_norms, dt, 4.0 / 3.0)
        d_quot_phi = _windowed_norm(times[:-1], qphi_norms, dt, 2.0)

    return float(sup_state + d_window_v + d_quot_u + d_quot_phi
                 + np.sqrt(pot_gap))
