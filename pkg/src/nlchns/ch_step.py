"""Time integration of the convective nonlocal Cahn-Hilliard equation

    phi_t + u . grad phi = lap mu,   mu = a phi - J*phi + F'(phi),

with no-flux mu and a prescribed (or coupled) divergence-free velocity.

Scheme
------
The default step is first-order semi-implicit with a convex/concave split
of the free energy

    E(phi) = 1/2 <a phi, phi> + int F(phi)  -  1/2 <phi, J*phi>.

The first group is convex in phi thanks to the surplus a + F'' >= c0 > 0,
and is treated implicitly through the pointwise monotone map

    m(s; x) = a(x) s + F'(s),

while the nonlocal term J*phi (whose energy is concave for positive
semidefinite J) and the advective flux are explicit:

    phi1 - dt lap m(phi1) = phi0 - dt div(u phibar0) - dt lap(J*phi0).

Substituting psi = m(phi1) turns the update into W(psi) - dt lap psi = b
with W = m^{-1}, whose Newton systems diag(W') + dt A are symmetric
positive definite and solved by preconditioned conjugate gradients.  This
makes the energy non-increasing for u = 0 at any dt (up to the kernel's
departure from positive semidefiniteness, which is roundoff-level for the
gaussian family), keeps constant states exact fixed points, and conserves
the mean exactly: the mean of b equals the mean of phi0 because both the
advective divergence and the Laplacian telescope, and the leftover Newton
defect (checked below 1e-12) is removed by a uniform shift so the mass
never drifts across steps.

An explicit forward-Euler variant is kept as a cross-check oracle; it
refuses to run when dt exceeds the diffusive stability bound
h^2 / (4 (a_inf + max F'')) evaluated on the currently reachable range of
phi.

Running with the true singular potential (no regularization) is allowed
for diagnostics; any node reaching |phi| >= 1 - 1e-10 is a hard error
rather than a silent clamp.
"""

import logging
from dataclasses import dataclass

import numpy as np
from scipy import fft as sfft

from . import grid_ops as go
from .grid_ops import ScalarField
from .potential import SingularPotential

log = logging.getLogger(__name__)

SCHEMES = ("semi-implicit-convex-split", "explicit")

SATURATION_GUARD = 1.0 - 1e-10
MASS_DEFECT_LIMIT = 1e-12
NEWTON_MAX_OUTER = 50
NEWTON_MAX_POINTWISE = 80


class CHError(Exception):
    pass


class StepRejection(CHError):
    """The implicit solve did not converge; retry with a smaller step."""

    def __init__(self, message, suggested_dt):
        super().__init__(f"{message}; suggest retrying with dt = {suggested_dt:.6g}")
        self.suggested_dt = suggested_dt


class StabilityError(CHError):
    """Explicit step requested above its diffusive stability bound."""


@dataclass
class CHState:
    phi: ScalarField
    mu: ScalarField
    t: float
    mass0: float
    saturated: bool = False  # |phi| reached 1 somewhere (monitor, not error)


def init_state(phi, kd, pot, t=0.0):
    mass = phi.mean()
    if abs(mass) >= 1.0:
        raise CHError(f"mean of phi must lie strictly inside (-1, 1), got {mass:.6g}")
    mu = chemical_potential(phi, kd, pot)
    sat = bool(np.max(np.abs(phi.values)) >= 1.0)
    return CHState(phi=phi, mu=mu, t=t, mass0=mass, saturated=sat)


def chemical_potential(phi, kd, pot):
    """mu = a phi - J*phi + F'(phi), nodewise on the cells."""
    p = phi.values
    if not np.all(np.isfinite(p)):
        raise CHError("phi contains non-finite entries")
    vals = kd.a_field.values * p - kd.convolve_raw(p) + pot.fprime(p)
    return ScalarField(phi.grid, vals, bc="neumann")


def ch_energy(phi, kd, pot):
    """1/2 <a phi, phi> - 1/2 <phi, J*phi> + int F(phi)."""
    p = phi.values
    vol = phi.grid.cell_volume
    nonlocal_part = 0.5 * np.sum(kd.a_field.values * p * p - p * kd.convolve_raw(p))
    return float((nonlocal_part + np.sum(pot.f(p))) * vol)


def face_phi(grid, p):
    """Centered interpolation of a cell field onto faces.  Boundary faces
    are left at zero: they only multiply the (zero) wall-normal velocity."""
    fx = np.zeros((grid.nx + 1, grid.ny))
    fy = np.zeros((grid.nx, grid.ny + 1))
    fx[1:-1, :] = 0.5 * (p[1:, :] + p[:-1, :])
    fy[:, 1:-1] = 0.5 * (p[:, 1:] + p[:, :-1])
    return fx, fy


def convective_divergence(u, p):
    """div(u phibar) at cells; conservative, so its mean telescopes to zero."""
    fx, fy = face_phi(u.grid, p)
    return go.div_arrays(u.grid, u.u * fx, u.v * fy)


def convective_power(u, p, mu_vals):
    """<u phibar, grad mu>, the advective work term of the energy balance."""
    fx, fy = face_phi(u.grid, p)
    gx, gy = go.grad_arrays(u.grid, mu_vals)
    return float((np.sum(u.u * fx * gx) + np.sum(u.v * fy * gy)) * u.grid.cell_volume)


class ImplicitMap:
    """m(s) = a(x) s + F'(s) and its pointwise inverse W.

    m is strictly increasing with margin c0 = min(a + F'') > 0, so W is well
    defined: on all of R for the regularized potential (polynomial growth),
    on the preimage of (-1, 1) for the singular one.
    """

    def __init__(self, a_vals, pot):
        self.a = a_vals
        self.pot = pot
        self.singular = isinstance(pot, SingularPotential)

    def m(self, x):
        return self.a * x + self.pot.fprime(x)

    def mprime(self, x):
        return self.a + self.pot.fsecond(x)

    def invert(self, psi, x0, dt_for_reject):
        """Safeguarded vectorized Newton for m(x) = psi, warm started at x0.

        Keeps a bracket per node and falls back to bisection whenever a
        Newton step leaves it, so monotonicity of m guarantees convergence.
        """
        if self.singular:
            lo = np.full(psi.shape, -1.0 + 1e-14)
            hi = np.full(psi.shape, 1.0 - 1e-14)
            if np.any(self.m(hi) < psi) or np.any(self.m(lo) > psi):
                raise CHError(
                    "singular-potential saturation guard: implicit update "
                    "requires |phi| >= 1 - 1e-14 somewhere"
                )
            x = np.clip(x0, lo, hi)
        else:
            rad = np.maximum(1.0, np.abs(x0))
            lo = x0 - rad
            hi = x0 + rad
            for _ in range(64):
                bad_lo = self.m(lo) > psi
                bad_hi = self.m(hi) < psi
                if not (bad_lo.any() or bad_hi.any()):
                    break
                lo = np.where(bad_lo, lo - (hi - lo), lo)
                hi = np.where(bad_hi, hi + (hi - lo), hi)
            else:
                raise StepRejection("could not bracket the implicit map inverse",
                                    dt_for_reject / 2.0)
            x = np.clip(x0, lo, hi)

        tol = 1e-13 * (1.0 + np.abs(psi))
        for _ in range(NEWTON_MAX_POINTWISE):
            f = self.m(x) - psi
            if np.all(np.abs(f) <= tol):
                return x
            hi = np.where(f > 0, np.minimum(hi, x), hi)
            lo = np.where(f < 0, np.maximum(lo, x), lo)
            step = f / self.mprime(x)
            xn = x - step
            outside = (xn <= lo) | (xn >= hi)
            x = np.where(outside, 0.5 * (lo + hi), xn)
        raise StepRejection("pointwise Newton for the implicit map stalled",
                            dt_for_reject / 2.0)


_dct_eig_cache = {}


def _dct_eigenvalues(grid):
    """Eigenvalues of the discrete Neumann Laplacian A on the DCT-II basis,
    which diagonalizes the cell-centered no-flux stencil exactly."""
    lam = _dct_eig_cache.get(grid.key())
    if lam is None:
        kx = np.arange(grid.nx)
        ky = np.arange(grid.ny)
        lx = (4.0 / grid.hx**2) * np.sin(kx * np.pi / (2 * grid.nx)) ** 2
        ly = (4.0 / grid.hy**2) * np.sin(ky * np.pi / (2 * grid.ny)) ** 2
        lam = lx[:, None] + ly[None, :]
        _dct_eig_cache[grid.key()] = lam
    return lam


def _cg_spd(apply_op, b, precond, rtol=1e-12, maxiter=2000):
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return np.zeros_like(b)
    x = np.zeros_like(b)
    r = b.copy()
    z = precond(r)
    p = z.copy()
    rz = float(np.vdot(r, z))
    for _ in range(maxiter):
        ap = apply_op(p)
        alpha = rz / float(np.vdot(p, ap))
        x += alpha * p
        r -= alpha * ap
        if np.linalg.norm(r) <= rtol * bnorm:
            return x
        z = precond(r)
        rz_new = float(np.vdot(r, z))
        p = z + (rz_new / rz) * p
        rz = rz_new
    return None


def ch_step(state, u, dt, kd, pot, scheme="semi-implicit-convex-split"):
    """Advance one step.  u is a divergence-free VectorField or None."""
    if dt <= 0:
        raise CHError(f"dt must be positive, got {dt}")
    if scheme not in SCHEMES:
        raise CHError(f"unknown scheme {scheme!r}, expected one of {SCHEMES}")
    grid = state.phi.grid
    p0 = state.phi.values
    if not np.all(np.isfinite(p0)):
        raise CHError("phi contains non-finite entries")

    conv0 = kd.convolve_raw(p0)
    adv = convective_divergence(u, p0) if u is not None else 0.0

    if scheme == "explicit":
        bound = explicit_dt_bound(grid, kd, pot, float(np.max(np.abs(p0))))
        if dt > bound:
            raise StabilityError(
                f"explicit step dt = {dt:.3g} exceeds diffusive bound {bound:.3g}"
            )
        mu0 = kd.a_field.values * p0 - conv0 + pot.fprime(p0)
        p1 = p0 - dt * adv + dt * go.laplace_arrays(grid, mu0)
    else:
        b = p0 - dt * adv - dt * go.laplace_arrays(grid, conv0)
        imap = ImplicitMap(kd.a_field.values, pot)
        lam = _dct_eigenvalues(grid)
        scale = max(1.0, float(np.max(np.abs(b))))
        tol = 1e-13 * np.sqrt(b.size) * scale

        psi = imap.m(p0)
        phi = imap.invert(psi, p0, dt)
        converged = False
        for _ in range(NEWTON_MAX_OUTER):
            residual = phi - dt * go.laplace_arrays(grid, psi) - b
            rnorm = np.linalg.norm(residual)
            if rnorm <= tol:
                converged = True
                break
            w = 1.0 / imap.mprime(phi)
            shift = float(np.median(w))
            denom = shift + dt * lam

            def mv(x, w=w):
                return w * x + dt * (-go.laplace_arrays(grid, x))

            def precond(r, denom=denom):
                rh = sfft.dctn(r, type=2, norm="ortho")
                return sfft.idctn(rh / denom, type=2, norm="ortho")

            # inexact Newton: only resolve the linear model down to what the
            # outer tolerance actually needs this sweep
            rtol_cg = min(1e-2, max(0.3 * tol / rnorm, 1e-13))
            delta = _cg_spd(mv, -residual, precond, rtol=rtol_cg)
            if delta is None:
                raise StepRejection("inner CG for the implicit update stalled",
                                    dt / 2.0)
            psi = psi + delta
            phi = imap.invert(psi, phi, dt)
        if not converged:
            raise StepRejection(
                f"implicit Newton did not converge in {NEWTON_MAX_OUTER} iterations",
                dt / 2.0,
            )
        p1 = phi

    if not np.all(np.isfinite(p1)):
        raise CHError("step produced non-finite phi")

    if isinstance(pot, SingularPotential):
        peak = float(np.max(np.abs(p1)))
        if peak >= SATURATION_GUARD:
            raise CHError(
                f"singular-potential saturation guard tripped: max|phi| = {peak:.17g}"
            )

    defect = state.mass0 - float(p1.mean())
    if abs(defect) > MASS_DEFECT_LIMIT:
        raise CHError(
            f"mass defect {defect:.3g} exceeds {MASS_DEFECT_LIMIT:.0e}; "
            "conservation broken before correction"
        )
    p1 = p1 + defect

    saturated = bool(np.max(np.abs(p1)) >= 1.0)
    if saturated and not state.saturated and not isinstance(pot, SingularPotential):
        log.warning("phi reached |phi| >= 1 at t = %.6g (monitor flag set)",
                    state.t + dt)

    phi1 = ScalarField(grid, p1, bc="neumann")
    mu1 = chemical_potential(phi1, kd, pot)
    return CHState(phi=phi1, mu=mu1, t=state.t + dt, mass0=state.mass0,
                   saturated=saturated or state.saturated)


def explicit_dt_bound(grid, kd, pot, phi_peak):
    """Diffusive bound dt <= h^2 / (4 (a_inf + max F'')) over the reachable
    range of phi, padded a little so near-threshold states stay honest."""
    span = phi_peak * 1.05 + 0.05
    if isinstance(pot, SingularPotential):
        span = min(span, 1.0 - 1e-12)
    s = np.linspace(-span, span, 2001)
    fpp_max = float(np.max(pot.fsecond(s)))
    h = min(grid.hx, grid.hy)
    return h * h / (4.0 * (kd.a_inf + max(fpp_max, 0.0)))


def ch_energy_identity_residual(states, u, kd, pot, dt):
    """Per-step residuals of the standalone energy balance

        [E(phi1) - E(phi0)]/dt + ||grad mu1||^2 - <u phibar1, grad mu1>.

    First order in dt for the semi-implicit scheme; identically zero on
    constant states.
    """
    energies = [ch_energy(s.phi, kd, pot) for s in states]
    out = np.empty(len(states) - 1)
    for n in range(len(states) - 1):
        s1 = states[n + 1]
        gx, gy = go.grad_arrays(s1.phi.grid, s1.mu.values)
        gnorm2 = (np.sum(gx**2) + np.sum(gy**2)) * s1.phi.grid.cell_volume
        power = convective_power(u, s1.phi.values, s1.mu.values) if u is not None else 0.0
        out[n] = (energies[n + 1] - energies[n]) / dt + gnorm2 - power
    return out


def fprime_l1(phi, pot):
    """Integral of |F'(phi)|, the boundedness diagnostic for the series."""
    return float(np.sum(np.abs(pot.fprime(phi.values))) * phi.grid.cell_volume)
