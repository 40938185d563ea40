"""Flow step: operator identities, projection, decay against an
independent single-phase reference, and the Stokes eigenvalue."""

import numpy as np
import pytest
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from nlchns import grid_ops as go
from nlchns import ns_step as ns
from nlchns.ch_step import face_phi
from nlchns.grid_ops import Grid, ScalarField, VectorField


def swirl(grid, amplitude=1.0):
    xc, yc = grid.corner_mesh()
    psi = amplitude * np.sin(np.pi * xc / grid.lx) ** 2 \
        * np.sin(np.pi * yc / grid.ly) ** 2
    return go.velocity_from_streamfunction(grid, psi)


def random_interior(grid, seed):
    rng = np.random.default_rng(seed)
    u = rng.standard_normal((grid.nx + 1, grid.ny))
    v = rng.standard_normal((grid.nx, grid.ny + 1))
    u[0, :] = u[-1, :] = 0.0
    v[:, 0] = v[:, -1] = 0.0
    return u, v


def smooth_scalar(grid, amplitude, kx=1, ky=2):
    x, y = grid.cell_mesh()
    vals = amplitude * np.cos(kx * np.pi * x / grid.lx) \
        * np.cos(ky * np.pi * y / grid.ly)
    return ScalarField(grid, vals)


GRID = Grid(24, 24, 1.0, 1.0)


class TestViscositySpec:
    def test_validation(self):
        with pytest.raises(ns.NSError):
            ns.ViscositySpec(0.0, 1.0)
        with pytest.raises(ns.NSError):
            ns.ViscositySpec(2.0, 1.0)

    def test_affine_endpoints(self):
        visc = ns.ViscositySpec(0.5, 1.5)
        assert visc.at(-1.0) == pytest.approx(0.5)
        assert visc.at(1.0) == pytest.approx(1.5)
        assert visc.at(0.0) == pytest.approx(1.0)

    def test_clipping_out_of_range_states(self):
        visc = ns.ViscositySpec(0.5, 1.5)
        assert visc.at(-3.0) == 0.5
        assert visc.at(3.0) == 1.5

    def test_custom_profile_clipped_to_bounds(self):
        visc = ns.ViscositySpec(0.5, 1.5, profile=lambda s: 10.0 * s)
        s = np.linspace(-1.0, 1.0, 41)
        vals = visc.at(s)
        assert np.all(vals >= 0.5) and np.all(vals <= 1.5)

    def test_nonfinite_profile_rejected(self):
        visc = ns.ViscositySpec(0.5, 1.5,
                                profile=lambda s: np.full_like(s, np.nan))
        with pytest.raises(ns.NSError):
            visc.at(np.array([1.0]))


class TestViscousOperator:
    def _nu(self, grid, seed=3):
        rng = np.random.default_rng(seed)
        nu_c = 0.5 + 0.4 * rng.random((grid.nx, grid.ny))
        return nu_c, ns.cell_to_corner(grid, nu_c)

    def test_forward_scatter_adjoint_pairs(self):
        grid = GRID
        rng = np.random.default_rng(7)
        u, v = random_interior(grid, 7)
        q_cell = rng.standard_normal((grid.nx, grid.ny))
        r_corner = rng.standard_normal((grid.nx + 1, grid.ny + 1))
        ux, vy, s = ns.strain_forward(grid, u, v)
        uy = ns._forward_uy(grid, u)
        vx = ns._forward_vx(grid, v)
        pairs = [
            (np.sum(ns._scatter_ux(grid, q_cell) * u), np.sum(q_cell * ux)),
            (np.sum(ns._scatter_vy(grid, q_cell) * v), np.sum(q_cell * vy)),
            (np.sum(ns._scatter_uy(grid, r_corner) * u), np.sum(r_corner * uy)),
            (np.sum(ns._scatter_vx(grid, r_corner) * v), np.sum(r_corner * vx)),
        ]
        for left, right in pairs:
            assert abs(left - right) <= 1e-12 * max(abs(left), abs(right), 1.0)

    def test_operator_symmetry(self):
        grid = GRID
        nu_c, nu_n = self._nu(grid)
        u1, v1 = random_interior(grid, 11)
        u2, v2 = random_interior(grid, 12)
        a1u, a1v = ns.viscous_apply(grid, nu_c, nu_n, u1, v1)
        a2u, a2v = ns.viscous_apply(grid, nu_c, nu_n, u2, v2)
        left = np.sum(a1u * u2) + np.sum(a1v * v2)
        right = np.sum(a2u * u1) + np.sum(a2v * v1)
        assert abs(left - right) <= 1e-12 * max(abs(left), 1.0)

    def test_quadratic_form_matches_dissipation(self):
        grid = GRID
        nu_c, nu_n = self._nu(grid)
        u, v = random_interior(grid, 13)
        au, av = ns.viscous_apply(grid, nu_c, nu_n, u, v)
        form = (np.sum(au * u) + np.sum(av * v)) * grid.cell_volume
        diss = ns.dissipation(grid, nu_c, nu_n, u, v)
        assert diss > 0.0
        assert abs(form - diss) <= 1e-12 * diss

    def test_dissipation_positive_on_constant_tangential_flow(self):
        # uniform tangential u is not a discrete rigid motion here: the
        # no-slip wall shear 2u/h keeps the form positive definite
        grid = GRID
        u = np.ones((grid.nx + 1, grid.ny))
        u[0, :] = u[-1, :] = 0.0
        v = np.zeros((grid.nx, grid.ny + 1))
        nu_c = np.ones((grid.nx, grid.ny))
        assert ns.dissipation(grid, nu_c, ns.cell_to_corner(grid, nu_c),
                              u, v) > 0.0

    def test_grad_form_matches_h1_seminorm(self):
        grid = GRID
        u, v = random_interior(grid, 17)
        au, av = ns.grad_form_apply(grid, u, v)
        form = (np.sum(au * u) + np.sum(av * v)) * grid.cell_volume
        w = VectorField(grid, u, v, bc="noslip")
        ref = go.vector_h1_seminorm(w) ** 2
        assert abs(form - ref) <= 1e-12 * ref

    def test_corner_viscosity_stays_in_bounds(self):
        grid = GRID
        rng = np.random.default_rng(23)
        phi = rng.uniform(-1.2, 1.2, (grid.nx, grid.ny))
        visc = ns.ViscositySpec(0.3, 0.9)
        nu_c, nu_n = ns.viscosity_fields(grid, phi, visc)
        for arr in (nu_c, nu_n):
            assert np.all(arr >= 0.3 - 1e-15) and np.all(arr <= 0.9 + 1e-15)


class TestCapillaryForce:
    def test_zero_for_constant_mu(self):
        grid = GRID
        phi = smooth_scalar(grid, 0.5)
        mu = ScalarField(grid, np.full((grid.nx, grid.ny), 2.5))
        force = ns.capillary_force(phi, mu)
        assert np.all(force.u == 0.0) and np.all(force.v == 0.0)

    def test_constant_phi_gives_scaled_gradient(self):
        grid = GRID
        phi = ScalarField(grid, np.full((grid.nx, grid.ny), 0.3))
        mu = smooth_scalar(grid, 1.0)
        force = ns.capillary_force(phi, mu)
        gx, gy = go.grad_arrays(grid, mu.values)
        assert np.allclose(force.u, -0.3 * gx, rtol=0, atol=1e-14)
        assert np.allclose(force.v, -0.3 * gy, rtol=0, atol=1e-14)

    def test_discrete_integration_by_parts(self):
        # <-phi grad mu, v> = <mu, div(phi_face v)> for solenoidal-or-not v
        grid = GRID
        rng = np.random.default_rng(29)
        phi = ScalarField(grid, rng.uniform(-0.8, 0.8, (grid.nx, grid.ny)))
        mu = ScalarField(grid, rng.standard_normal((grid.nx, grid.ny)))
        u, v = random_interior(grid, 31)
        vel = VectorField(grid, u, v, bc="noslip")
        force = ns.capillary_force(phi, mu)
        left = go.inner_vec(force, vel)
        px, py = face_phi(grid, phi.values)
        flux = VectorField(grid, px * u, py * v, bc="none")
        right = go.inner(mu, ScalarField(grid, go.div_arrays(grid, flux.u,
                                                             flux.v), "none"))
        scale = max(abs(left), abs(right), 1.0)
        assert abs(left - right) <= 1e-10 * scale


class TestProjection:
    def test_kills_gradients_and_keeps_solenoidal_fields(self):
        grid = GRID
        psi = smooth_scalar(grid, 1.0, kx=2, ky=1)
        gx, gy = go.grad_arrays(grid, psi.values)
        pu, pv = ns.project_divfree(grid, gx, gy)
        scale = max(np.abs(gx).max(), np.abs(gy).max())
        assert max(np.abs(pu).max(), np.abs(pv).max()) <= 1e-11 * scale

        w = swirl(grid, 1.0)
        su, sv = ns.project_divfree(grid, w.u.copy(), w.v.copy())
        assert np.abs(su - w.u).max() <= 1e-11
        assert np.abs(sv - w.v).max() <= 1e-11

    def test_idempotent(self):
        grid = GRID
        u, v = random_interior(grid, 37)
        pu, pv = ns.project_divfree(grid, u, v)
        ppu, ppv = ns.project_divfree(grid, pu.copy(), pv.copy())
        scale = max(np.abs(pu).max(), 1.0)
        assert np.abs(ppu - pu).max() <= 1e-11 * scale
        assert np.abs(ppv - pv).max() <= 1e-11 * scale


class TestStepContract:
    def _setup(self, grid=GRID, amplitude=0.1):
        state = ns.init_ns_state(swirl(grid, amplitude))
        phi = smooth_scalar(grid, 0.4)
        mu = smooth_scalar(grid, 0.2, kx=2, ky=1)
        visc = ns.ViscositySpec(0.05, 0.2)
        return state, phi, mu, visc

    def test_rest_state_is_bitwise_fixed_point(self):
        grid = GRID
        state = ns.init_ns_state(go.zero_vector(grid))
        phi = ScalarField(grid, np.full((grid.nx, grid.ny), 0.2))
        mu = ScalarField(grid, np.full((grid.nx, grid.ny), 1.7))
        visc = ns.ViscositySpec(0.1, 0.3)
        for _ in range(5):
            state = ns.ns_step(state, phi, mu, None, visc, 1e-2)
        assert np.all(state.u.u == 0.0) and np.all(state.u.v == 0.0)
        assert np.all(state.pressure.values == 0.0)
        assert state.t == pytest.approx(5e-2)

    def test_divergence_audit_and_pressure_mean(self):
        state, phi, mu, visc = self._setup()
        grid = state.u.grid
        for _ in range(10):
            state = ns.ns_step(state, phi, mu, None, visc, 2e-3)
            div = go.div_arrays(grid, state.u.u, state.u.v)
            umax = max(np.abs(state.u.u).max(), np.abs(state.u.v).max(), 1.0)
            assert np.abs(div).max() <= 1e-10 * umax
            assert np.abs(div).max() <= 1e-9
            assert abs(state.pressure.mean()) <= 1e-13 * (
                1.0 + np.abs(state.pressure.values).max())

    def test_noslip_walls_preserved(self):
        state, phi, mu, visc = self._setup()
        forcing = None
        for _ in range(3):
            state = ns.ns_step(state, phi, mu, forcing, visc, 2e-3)
        assert np.all(state.u.u[0, :] == 0.0)
        assert np.all(state.u.u[-1, :] == 0.0)
        assert np.all(state.u.v[:, 0] == 0.0)
        assert np.all(state.u.v[:, -1] == 0.0)

    def test_kinetic_energy_decays_without_forcing(self):
        state, phi, mu0, visc = self._setup()
        grid = state.u.grid
        mu = ScalarField(grid, np.zeros((grid.nx, grid.ny)))
        energies = [ns.kinetic_energy(state.u)]
        for _ in range(20):
            state = ns.ns_step(state, phi, mu, None, visc, 2e-3)
            energies.append(ns.kinetic_energy(state.u))
        for e_prev, e_next in zip(energies, energies[1:]):
            assert e_next < e_prev

    def test_bad_dt_and_grid_mismatch(self):
        state, phi, mu, visc = self._setup()
        with pytest.raises(ns.NSError):
            ns.ns_step(state, phi, mu, None, visc, 0.0)
        other = Grid(32, 32, 1.0, 1.0)
        phi_other = smooth_scalar(other, 0.4)
        with pytest.raises(ns.NSError):
            ns.ns_step(state, phi_other, mu, None, visc, 1e-3)

    def test_nan_input_is_hard_error(self):
        state, phi, mu, visc = self._setup()
        mu.values[0, 0] = np.nan  # mutate after construction-time checks
        with pytest.raises(ns.NSError):
            ns.ns_step(state, phi, mu, None, visc, 1e-3)

    def test_solver_stall_raises_rejection(self, monkeypatch):
        state, phi, mu, visc = self._setup()
        monkeypatch.setattr(ns, "MOMENTUM_MAXITER", 0)
        with pytest.raises(ns.NSStepRejection) as err:
            ns.ns_step(state, phi, mu, None, visc, 4e-3)
        assert err.value.suggested_dt == pytest.approx(2e-3)


def reference_single_phase_decay(grid, u0, v0, nu, dt, nsteps):
    """Independent constant-viscosity solver: componentwise 5-point
    Laplacian with reflection wall ghosts, backward Euler, and its own
    assembled pinned Neumann projection.  Deliberately a different
    discretization of the same flow for a decay-rate cross-check."""
    nx, ny, hx, hy = grid.nx, grid.ny, grid.hx, grid.hy

    def dirichlet_1d(m, h):
        return sp.diags([np.full(m - 1, 1.0), np.full(m, -2.0),
                         np.full(m - 1, 1.0)], [-1, 0, 1]) / h**2

    def reflect_1d(m, h):
        main = np.full(m, -2.0)
        main[0] = main[-1] = -3.0
        return sp.diags([np.full(m - 1, 1.0), main,
                         np.full(m - 1, 1.0)], [-1, 0, 1]) / h**2

    lap_u = sp.kronsum(reflect_1d(ny, hy), dirichlet_1d(nx - 1, hx)).tocsc()
    lap_v = sp.kronsum(dirichlet_1d(ny - 1, hy), reflect_1d(nx, hx)).tocsc()
    mu_lu = spla.splu((sp.identity(lap_u.shape[0], format="csc")
                       - dt * nu * lap_u).tocsc())
    mv_lu = spla.splu((sp.identity(lap_v.shape[0], format="csc")
                       - dt * nu * lap_v).tocsc())

    def neumann_1d(m, h):
        main = np.full(m, -2.0)
        main[0] = main[-1] = -1.0
        return sp.diags([np.full(m - 1, 1.0), main,
                         np.full(m - 1, 1.0)], [-1, 0, 1]) / h**2

    poisson = (-sp.kronsum(neumann_1d(ny, hy), neumann_1d(nx, hx))).tolil()
    poisson[0, :] = 0.0
    poisson[0, 0] = 1.0
    poisson_lu = spla.splu(poisson.tocsc())

    u = u0.copy()
    v = v0.copy()
    for _ in range(nsteps):
        u_int = mu_lu.solve(u[1:-1, :].ravel()).reshape(nx - 1, ny)
        v_int = mv_lu.solve(v[:, 1:-1].ravel()).reshape(nx, ny - 1)
        u = np.zeros_like(u)
        v = np.zeros_like(v)
        u[1:-1, :] = u_int
        v[:, 1:-1] = v_int
        div = (u[1:, :] - u[:-1, :]) / hx + (v[:, 1:] - v[:, :-1]) / hy
        rhs = -(div - div.mean()).ravel() / dt
        rhs[0] = 0.0
        q = poisson_lu.solve(rhs).reshape(nx, ny)
        u[1:-1, :] -= dt * (q[1:, :] - q[:-1, :]) / hx
        v[:, 1:-1] -= dt * (q[:, 1:] - q[:, :-1]) / hy
    return u, v


class TestSinglePhaseDecay:
    def test_decay_rate_matches_reference_within_ten_percent(self):
        grid = Grid(32, 32, 1.0, 1.0)
        nu = 0.08
        dt = 2e-3
        nsteps = 50
        w0 = swirl(grid, 0.05)

        visc = ns.ViscositySpec(nu, nu)
        phi = ScalarField(grid, np.zeros((grid.nx, grid.ny)))
        mu = ScalarField(grid, np.zeros((grid.nx, grid.ny)))
        state = ns.init_ns_state(w0.copy())
        ke0 = ns.kinetic_energy(state.u)
        for _ in range(nsteps):
            state = ns.ns_step(state, phi, mu, None, visc, dt)
        rate_ours = np.log(ke0 / ns.kinetic_energy(state.u))

        ur, vr = reference_single_phase_decay(grid, w0.u, w0.v, nu, dt, nsteps)
        ke_ref0 = 0.5 * (np.sum(w0.u**2) + np.sum(w0.v**2)) * grid.cell_volume
        ke_ref = 0.5 * (np.sum(ur**2) + np.sum(vr**2)) * grid.cell_volume
        rate_ref = np.log(ke_ref0 / ke_ref)

        assert rate_ours > 0.0 and rate_ref > 0.0
        assert abs(rate_ours - rate_ref) <= 0.10 * rate_ref


class TestMomentumResidual:
    def test_first_order_in_dt(self):
        grid = GRID
        phi = smooth_scalar(grid, 0.3)
        mu = smooth_scalar(grid, 0.2, kx=2, ky=1)
        visc = ns.ViscositySpec(0.05, 0.2)
        state0 = ns.init_ns_state(swirl(grid, 0.1))

        res = {}
        for dt in (4e-3, 2e-3, 1e-3):
            state1 = ns.ns_step(state0, phi, mu, None, visc, dt)
            res[dt] = ns.momentum_residual(grid, state0, state1, phi, mu,
                                           None, visc)
        assert res[4e-3] > res[2e-3] > res[1e-3] > 0.0
        ratio = res[4e-3] / res[2e-3]
        assert 1.5 <= ratio <= 2.6
        ratio2 = res[2e-3] / res[1e-3]
        assert 1.5 <= ratio2 <= 2.6


def assembled_stokes_lambda1(grid):
    """Dense oracle from scratch: build the gradient quadratic form and the
    divergence constraint by explicit slicing, restrict to the divergence
    null space, and take the smallest generalized eigenvalue."""
    nx, ny, hx, hy = grid.nx, grid.ny, grid.hx, grid.hy
    nu = (nx - 1) * ny  # interior u faces
    nv = nx * (ny - 1)
    ndof = nu + nv

    def embed(x):
        u = np.zeros((nx + 1, ny))
        v = np.zeros((nx, ny + 1))
        u[1:-1, :] = x[:nu].reshape(nx - 1, ny)
        v[:, 1:-1] = x[nu:].reshape(nx, ny - 1)
        return u, v

    divm = np.zeros((nx * ny, ndof))
    images = None
    for k in range(ndof):
        u, v = embed(np.eye(ndof)[k])
        ux = (u[1:, :] - u[:-1, :]) / hx
        vy = (v[:, 1:] - v[:, :-1]) / hy
        uy = np.zeros((nx + 1, ny + 1))
        uy[:, 1:-1] = (u[:, 1:] - u[:, :-1]) / hy
        uy[:, 0] = 2.0 * u[:, 0] / hy
        uy[:, -1] = -2.0 * u[:, -1] / hy
        vx = np.zeros((nx + 1, ny + 1))
        vx[1:-1, :] = (v[1:, :] - v[:-1, :]) / hx
        vx[0, :] = 2.0 * v[0, :] / hx
        vx[-1, :] = -2.0 * v[-1, :] / hx
        grads = (ux, uy, vx, vy)
        if images is None:
            images = [np.zeros((g.size, ndof)) for g in grads]
        for g, store in zip(grads, images):
            store[:, k] = g.ravel()
        divm[:, k] = (ux + vy).ravel()
    # quadratic form sum |grad|^2 as sum of squared forward maps
    quad = sum(store.T @ store for store in images)

    null = scipy.linalg.null_space(divm)
    reduced = null.T @ quad @ null
    vals = scipy.linalg.eigvalsh(reduced)
    return float(vals[0])


class TestStokesEigenvalue:
    def test_matches_assembled_oracle_on_coarse_grid(self):
        grid = Grid(10, 10, 1.0, 1.0)
        oracle = assembled_stokes_lambda1(grid)
        computed = ns.stokes_lambda1(grid, tol=1e-11)
        assert computed == pytest.approx(oracle, rel=1e-6)

    def test_continuum_square_value(self):
        # first Stokes eigenvalue of the unit square is about 52.3447
        grid = Grid(32, 32, 1.0, 1.0)
        lam = ns.stokes_lambda1(grid, tol=1e-9)
        assert lam == pytest.approx(52.3447, rel=0.05)
