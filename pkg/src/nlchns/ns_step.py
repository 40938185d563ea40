"""Incompressible flow step with concentration-dependent viscosity,
capillary forcing, and pressure projection on the MAC staggering.

The viscous term is built variationally: the dissipation form

    R(u) = int 2 nu |Du|^2
         = sum_cells 2 nu_c (ux^2 + vy^2) + sum_corners nu_n (uy + vx)^2

(uniform cell weights, no-slip wall ghosts folded into the corner shears
as 2 u / h) defines the operator A through exact transposes of the
difference stencils.  That makes <A u, u> = R(u) hold to roundoff, so the
flow's energy bookkeeping closes discretely, and I + dt A is symmetric
positive definite for the conjugate-gradient momentum solve with frozen
coefficients nu(phi^n).

Advection is the conservative divergence-form MAC interpolation of
div(u x u); no skew correction (the advective energy residual is part of
the O(dt) identity residual, not hidden).  The capillary force is the
-phi grad(mu) form, interpolated with the same face averaging as the
scalar transport flux, which makes <-phi grad mu, v> = <mu, div(phi v)>
an exact discrete integration by parts.

Projection is incremental pressure-correction: the Neumann Poisson solve
uses the cached pinned LU, so the post-step divergence sits at the LU
roundoff floor (audited against 1e-10, observed around 1e-13).
"""

from dataclasses import dataclass

import numpy as np

from . import grid_ops as go
from .grid_ops import ScalarField, VectorField

DIV_TOLERANCE = 1e-10
MOMENTUM_RTOL = 1e-11
MOMENTUM_MAXITER = 4000


class NSError(Exception):
    pass


class NSStepRejection(NSError):
    def __init__(self, message, suggested_dt):
        super().__init__(f"{message}; suggest retrying with dt = {suggested_dt:.6g}")
        self.suggested_dt = suggested_dt


@dataclass(frozen=True)
class ViscositySpec:
    nu1: float
    nu2: float
    profile: object = None  # optional callable s -> nu(s), clipped to bounds

    def __post_init__(self):
        if not (0.0 < self.nu1 <= self.nu2):
            raise NSError(
                f"need 0 < nu1 <= nu2, got nu1 = {self.nu1}, nu2 = {self.nu2}"
            )

    def at(self, s):
        """nu(s), clipped into [nu1, nu2]; default affine blend in s."""
        s = np.asarray(s, dtype=float)
        if self.profile is None:
            vals = self.nu1 + (self.nu2 - self.nu1) * 0.5 * (1.0 + s)
        else:
            vals = np.asarray(self.profile(s), dtype=float)
        if not np.all(np.isfinite(vals)):
            raise NSError("viscosity profile produced non-finite values")
        return np.clip(vals, self.nu1, self.nu2)


@dataclass
class NSState:
    u: VectorField
    pressure: ScalarField
    t: float


def init_ns_state(u, t=0.0):
    return NSState(u=u, pressure=go.zeros(u.grid, bc="none"), t=float(t))


def kinetic_energy(w):
    return 0.5 * go.vector_l2(w) ** 2


# ------------------------------------------------------- viscous operator

def cell_to_corner(grid, c):
    """Arithmetic 4-point average onto corners, edges replicated outward."""
    padded = np.pad(c, 1, mode="edge")
    return 0.25 * (padded[:-1, :-1] + padded[1:, :-1]
                   + padded[:-1, 1:] + padded[1:, 1:])


def strain_forward(grid, u, v):
    """ux, vy at cells; shear s = uy + vx at corners (no-slip ghosts)."""
    ux = (u[1:, :] - u[:-1, :]) / grid.hx
    vy = (v[:, 1:] - v[:, :-1]) / grid.hy
    uy = _forward_uy(grid, u)
    vx = _forward_vx(grid, v)
    return ux, vy, uy + vx


def _forward_uy(grid, u):
    uy = np.zeros((grid.nx + 1, grid.ny + 1))
    uy[:, 1:-1] = (u[:, 1:] - u[:, :-1]) / grid.hy
    uy[:, 0] = 2.0 * u[:, 0] / grid.hy
    uy[:, -1] = -2.0 * u[:, -1] / grid.hy
    return uy


def _forward_vx(grid, v):
    vx = np.zeros((grid.nx + 1, grid.ny + 1))
    vx[1:-1, :] = (v[1:, :] - v[:-1, :]) / grid.hx
    vx[0, :] = 2.0 * v[0, :] / grid.hx
    vx[-1, :] = -2.0 * v[-1, :] / grid.hx
    return vx


def _scatter_uy(grid, r):
    """Exact transpose of _forward_uy (corner field r back to u faces)."""
    au = np.zeros((grid.nx + 1, grid.ny))
    au[:, 1:] += r[:, 1:-1] / grid.hy
    au[:, :-1] -= r[:, 1:-1] / grid.hy
    au[:, 0] += 2.0 * r[:, 0] / grid.hy
    au[:, -1] -= 2.0 * r[:, -1] / grid.hy
    return au


def _scatter_vx(grid, r):
    av = np.zeros((grid.nx, grid.ny + 1))
    av[1:, :] += r[1:-1, :] / grid.hx
    av[:-1, :] -= r[1:-1, :] / grid.hx
    av[0, :] += 2.0 * r[0, :] / grid.hx
    av[-1, :] -= 2.0 * r[-1, :] / grid.hx
    return av


def _scatter_ux(grid, q):
    au = np.zeros((grid.nx + 1, grid.ny))
    au[1:, :] += q / grid.hx
    au[:-1, :] -= q / grid.hx
    return au


def _scatter_vy(grid, q):
    av = np.zeros((grid.nx, grid.ny + 1))
    av[:, 1:] += q / grid.hy
    av[:, :-1] -= q / grid.hy
    return av


def _zero_normal(u, v):
    u[0, :] = 0.0
    u[-1, :] = 0.0
    v[:, 0] = 0.0
    v[:, -1] = 0.0
    return u, v


def viscous_apply(grid, nu_c, nu_n, u, v):
    """Discrete -div(2 nu Du) as the exact gradient of R(u)/2.

    <A u, w> * vol equals the polarization of R, so the operator is
    symmetric and <A u, u> = R(u) = dissipation(...) to roundoff.  Output
    boundary normal faces are zeroed (constrained, not unknowns)."""
    ux, vy, s = strain_forward(grid, u, v)
    qx = 2.0 * nu_c * ux
    qy = 2.0 * nu_c * vy
    r = nu_n * s
    au = _scatter_ux(grid, qx) + _scatter_uy(grid, r)
    av = _scatter_vy(grid, qy) + _scatter_vx(grid, r)
    return _zero_normal(au, av)


def dissipation(grid, nu_c, nu_n, u, v):
    """int 2 nu |Du|^2 with the same quadrature the operator derives from."""
    ux, vy, s = strain_forward(grid, u, v)
    total = 2.0 * np.sum(nu_c * (ux**2 + vy**2)) + np.sum(nu_n * s**2)
    return float(total * grid.cell_volume)


def viscosity_fields(grid, phi_values, visc):
    """nu(phi) at cells and corners (corner values by 4-point averaging,
    which keeps them inside [nu1, nu2])."""
    nu_c = visc.at(phi_values)
    return nu_c, cell_to_corner(grid, nu_c)


def grad_form_apply(grid, u, v):
    """Componentwise stiffness with the same wall convention as the strain:
    <A w, w> = sum(ux^2 + uy^2 + vx^2 + vy^2) vol exactly (the squared
    velocity gradient seminorm).  Used for the Stokes eigenvalue."""
    ux = (u[1:, :] - u[:-1, :]) / grid.hx
    vy = (v[:, 1:] - v[:, :-1]) / grid.hy
    uy = _forward_uy(grid, u)
    vx = _forward_vx(grid, v)
    au = _scatter_ux(grid, ux) + _scatter_uy(grid, uy)
    av = _scatter_vy(grid, vy) + _scatter_vx(grid, vx)
    return _zero_normal(au, av)


# ------------------------------------------------------------- advection

def advective_tendency(grid, u, v):
    """Conservative div(u x u) on interior faces: products interpolated to
    cells and corners, then differenced back to faces.  Wall corner fluxes
    vanish because the stored normal faces are exactly zero."""
    uc = 0.5 * (u[1:, :] + u[:-1, :])       # u at cells
    vc = 0.5 * (v[:, 1:] + v[:, :-1])       # v at cells
    # corner interpolants; tangential wall values average to the no-slip 0
    u_corner = np.zeros((grid.nx + 1, grid.ny + 1))
    u_corner[:, 1:-1] = 0.5 * (u[:, 1:] + u[:, :-1])
    v_corner = np.zeros((grid.nx + 1, grid.ny + 1))
    v_corner[1:-1, :] = 0.5 * (v[1:, :] + v[:-1, :])
    uv = u_corner * v_corner

    adv_u = np.zeros_like(u)
    adv_u[1:-1, :] = (uc[1:, :] ** 2 - uc[:-1, :] ** 2) / grid.hx
    adv_u[:, :] += (uv[:, 1:] - uv[:, :-1]) / grid.hy
    adv_v = np.zeros_like(v)
    adv_v[:, 1:-1] = (vc[:, 1:] ** 2 - vc[:, :-1] ** 2) / grid.hy
    adv_v[:, :] += (uv[1:, :] - uv[:-1, :]) / grid.hx
    return _zero_normal(adv_u, adv_v)


# ------------------------------------------------------- capillary force

def capillary_force(phi, mu):
    """-phi grad(mu) at faces, with phi face-averaged exactly as in the
    transport flux, so <force, v> = <mu, div(phi_face v)> discretely."""
    grid = phi.grid
    gx, gy = go.grad_arrays(grid, mu.values)
    fx = np.zeros_like(gx)
    fy = np.zeros_like(gy)
    fx[1:-1, :] = -0.5 * (phi.values[1:, :] + phi.values[:-1, :]) * gx[1:-1, :]
    fy[:, 1:-1] = -0.5 * (phi.values[:, 1:] + phi.values[:, :-1]) * gy[:, 1:-1]
    return VectorField(grid, fx, fy, bc="none")


# ------------------------------------------------------------ projection

def project(grid, u, v, dt, pressure):
    """Incremental pressure correction.  Solves the Neumann Poisson problem
    for the increment q, updates u <- u - dt grad q and p <- p + q, and
    returns (u, v, new_pressure, div_inf)."""
    div = go.div_arrays(grid, u, v)
    rhs = -div / dt  # solver convention is -lap, so -div makes div(u1) = 0
    rhs = rhs - rhs.mean()  # compatibility shift, roundoff-sized by no-slip
    q = go.solve_neumann_direct(grid, rhs)
    gx, gy = go.grad_arrays(grid, q)
    u = u - dt * gx
    v = v - dt * gy
    _zero_normal(u, v)
    div_after = go.div_arrays(grid, u, v)
    return u, v, pressure + q, float(np.max(np.abs(div_after)))


# --------------------------------------------------------------- CG solve

def _solve_momentum(grid, nu_c, nu_n, dt, bu, bv, u0, v0):
    """CG on the coupled SPD system (I + dt A) w = b, warm-started at the
    previous velocity.  Returns (u, v, iterations) or None on stall."""

    def mv(pu, pv):
        au, av = viscous_apply(grid, nu_c, nu_n, pu, pv)
        return pu + dt * au, pv + dt * av

    bu = bu.copy()
    bv = bv.copy()
    _zero_normal(bu, bv)
    u = u0.copy()
    v = v0.copy()
    au, av = mv(u, v)
    ru = bu - au
    rv = bv - av
    bnorm = np.sqrt(np.sum(bu**2) + np.sum(bv**2))
    tol = MOMENTUM_RTOL * max(bnorm, 1e-300)
    rs = np.sum(ru**2) + np.sum(rv**2)
    if np.sqrt(rs) <= tol:
        return u, v, 0
    pu = ru.copy()
    pv = rv.copy()
    for it in range(1, MOMENTUM_MAXITER + 1):
        apu, apv = mv(pu, pv)
        denom = np.sum(pu * apu) + np.sum(pv * apv)
        if denom <= 0.0:
            return None
        alpha = rs / denom
        u += alpha * pu
        v += alpha * pv
        ru -= alpha * apu
        rv -= alpha * apv
        rs_new = np.sum(ru**2) + np.sum(rv**2)
        if np.sqrt(rs_new) <= tol:
            return u, v, it
        pu = ru + (rs_new / rs) * pu
        pv = rv + (rs_new / rs) * pv
        rs = rs_new
    return None


# -------------------------------------------------------------- the step

def ns_step(ns, phi, mu, forcing, visc, dt):
    """One semi-implicit momentum step with incremental projection.

    ns       : NSState at time t
    phi, mu  : ScalarFields at time t (mu drives the capillary force)
    forcing  : VectorField body force, or None
    visc     : ViscositySpec; coefficients frozen at nu(phi(t))
    dt       : time step, > 0

    Explicit advection and capillary force, implicit viscous solve with
    the SPD frozen-coefficient operator, then pressure correction.  Raises
    NSStepRejection when the momentum CG stalls and NSError on non-finite
    data.  The post-projection divergence is audited against DIV_TOLERANCE.
    """
    if not (dt > 0.0):
        raise NSError(f"dt must be positive, got {dt}")
    grid = ns.u.grid
    if phi.grid.key() != grid.key() or mu.grid.key() != grid.key():
        raise NSError("phi/mu grid does not match the velocity grid")
    if not (np.all(np.isfinite(phi.values)) and np.all(np.isfinite(mu.values))):
        raise NSError("non-finite phi or mu input")
    u0, v0 = ns.u.u, ns.u.v

    nu_c, nu_n = viscosity_fields(grid, phi.values, visc)
    adv_u, adv_v = advective_tendency(grid, u0, v0)
    cap = capillary_force(phi, mu)
    gpx, gpy = go.grad_arrays(grid, ns.pressure.values)

    bu = u0 + dt * (cap.u - adv_u - gpx)
    bv = v0 + dt * (cap.v - adv_v - gpy)
    if forcing is not None:
        bu = bu + dt * forcing.u
        bv = bv + dt * forcing.v
    if not (np.all(np.isfinite(bu)) and np.all(np.isfinite(bv))):
        raise NSError("non-finite momentum right-hand side")

    sol = _solve_momentum(grid, nu_c, nu_n, dt, bu, bv, u0, v0)
    if sol is None:
        raise NSStepRejection("momentum solve did not converge", 0.5 * dt)
    us, vs, _ = sol
    if not (np.all(np.isfinite(us)) and np.all(np.isfinite(vs))):
        raise NSError("non-finite velocity after momentum solve")

    u1, v1, p1, div_inf = project(grid, us, vs, dt, ns.pressure.values)
    if div_inf > DIV_TOLERANCE * max(1.0, float(np.max(np.abs(u1))),
                                     float(np.max(np.abs(v1)))):
        raise NSError(f"projection left divergence {div_inf:.3e}")
    p1 = p1 - p1.mean()

    vel = VectorField(grid, u1, v1, bc="noslip")
    return NSState(u=vel, pressure=ScalarField(grid, p1, bc="none"),
                   t=ns.t + dt)


# ------------------------------------------------- momentum weak residual

def momentum_residual(grid, ns0, ns1, phi, mu, forcing, visc):
    """Dual norm of the momentum residual over divergence-free test fields.

    r(w) = <(u1 - u0)/dt + adv(u0) - cap - h, w> + <2 nu Du1, Dw>
    for solenoidal w (the pressure gradient drops out).  The splitting
    error makes this O(dt).  Returned in the gradient-seminorm dual norm,
    computed by a projected stiffness solve."""
    dt = ns1.t - ns0.t
    u0, v0 = ns0.u.u, ns0.u.v
    u1, v1 = ns1.u.u, ns1.u.v
    nu_c, nu_n = viscosity_fields(grid, phi.values, visc)
    adv_u, adv_v = advective_tendency(grid, u0, v0)
    cap = capillary_force(phi, mu)
    au, av = viscous_apply(grid, nu_c, nu_n, u1, v1)
    ru = (u1 - u0) / dt + adv_u - cap.u + au
    rv = (v1 - v0) / dt + adv_v - cap.v + av
    if forcing is not None:
        ru = ru - forcing.u
        rv = rv - forcing.v
    _zero_normal(ru, rv)
    return stiffness_dual_norm(grid, ru, rv)


def project_divfree(grid, u, v):
    """Leray projection: remove the gradient part of the Helmholtz split."""
    div = go.div_arrays(grid, u, v)
    q = go.solve_neumann_direct(grid, -(div - div.mean()))
    gx, gy = go.grad_arrays(grid, q)
    out_u = u - gx
    out_v = v - gy
    return _zero_normal(out_u, out_v)


def _stiffness_solve(grid, bu, bv, rtol=1e-10, maxiter=20000):
    """CG for the projected componentwise stiffness: P A P z = P b.
    Iterates are re-projected each step to hold the div-free constraint."""

    def mv(pu, pv):
        au, av = grad_form_apply(grid, pu, pv)
        return project_divfree(grid, au, av)

    bu, bv = project_divfree(grid, bu.copy(), bv.copy())
    zu = np.zeros_like(bu)
    zv = np.zeros_like(bv)
    ru = bu.copy()
    rv = bv.copy()
    bnorm = np.sqrt(np.sum(bu**2) + np.sum(bv**2))
    if bnorm == 0.0:
        return zu, zv
    rs = np.sum(ru**2) + np.sum(rv**2)
    pu = ru.copy()
    pv = rv.copy()
    for _ in range(maxiter):
        apu, apv = mv(pu, pv)
        denom = np.sum(pu * apu) + np.sum(pv * apv)
        if denom <= 0.0:
            break
        alpha = rs / denom
        zu += alpha * pu
        zv += alpha * pv
        ru -= alpha * apu
        rv -= alpha * apv
        rs_new = np.sum(ru**2) + np.sum(rv**2)
        if np.sqrt(rs_new) <= rtol * bnorm:
            return zu, zv
        pu = ru + (rs_new / rs) * pu
        pv = rv + (rs_new / rs) * pv
        rs = rs_new
    raise NSError("projected stiffness solve did not converge")


def stiffness_dual_norm(grid, wu, wv):
    """Dual gradient-seminorm of (wu, wv) over solenoidal test fields:
    sqrt(<P w, S^-1 P w>) with S the projected componentwise stiffness."""
    ru, rv = project_divfree(grid, wu.copy(), wv.copy())
    zu, zv = _stiffness_solve(grid, ru, rv)
    val = (np.sum(ru * zu) + np.sum(rv * zv)) * grid.cell_volume
    return float(np.sqrt(max(val, 0.0)))


# ------------------------------------------------------ Stokes eigenvalue

def stokes_lambda1(grid, tol=1e-10, maxiter=200):
    """Smallest eigenvalue of the divergence-free constrained stiffness:
    the best constant in ||grad u||^2 >= lambda1 ||u||^2 over solenoidal
    no-slip fields.  Inverse power iteration; each inverse application is
    a projected CG solve."""
    rng = np.random.default_rng(1234)
    u = rng.standard_normal((grid.nx + 1, grid.ny))
    v = rng.standard_normal((grid.nx, grid.ny + 1))
    _zero_normal(u, v)
    u, v = project_divfree(grid, u, v)
    lam = None
    for _ in range(maxiter):
        nrm = np.sqrt(np.sum(u**2) + np.sum(v**2))
        if nrm == 0.0:
            raise NSError("eigen iteration collapsed to zero")
        u /= nrm
        v /= nrm
        zu, zv = _stiffness_solve(grid, u, v, rtol=1e-12)
        au, av = grad_form_apply(grid, zu, zv)
        num = np.sum(zu * au) + np.sum(zv * av)
        den = np.sum(zu**2) + np.sum(zv**2)
        lam_new = num / den
        if lam is not None and abs(lam_new - lam) <= tol * abs(lam_new):
            return float(lam_new)
        lam = lam_new
        u, v = zu, zv
    return float(lam)
