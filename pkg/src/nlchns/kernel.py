"""Interaction kernels, the coefficient field a(x), and restricted convolution.

Two even, nonnegative families are shipped, both parametrized by a width and
an amplitude normalization fixing the whole-plane L1 mass:

  - gaussian:          J(r) = m / (2 pi s^2) exp(-r^2 / (2 s^2)), cut at 6s
  - compact-mollifier: J(r) = 4 m / (pi R^2) (1 - r^2/R^2)^3 on r < R, C^2

The convolution is restricted to the domain: (J*phi)(x) = sum_y h^2
J(x - y) phi(y) over cells y, no periodic wraparound.  It is evaluated with
zero-padded real FFTs against a tabulated displacement table J(x_i - y_k),
which makes the fast path bit-identical to a fixed-quadrature direct sum up
to FFT roundoff.  The coefficient field a(x) = (J * 1)(x) is produced by the
same code path at build time, so the constant-state identity

    a c - J * c + F'(c) = F'(c)

holds to machine precision by construction.  Both the minimum beta = min a
(which must exceed theta_c - theta for the convex split to have a positive
surplus) and directional discrete total variations of J (which majorize the
face differences of J * phi, giving a grid-level Young inequality) are
computed here once and frozen into the kernel data.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy import fft as sfft

from .grid_ops import Grid, ScalarField

FAMILIES = ("gaussian", "compact-mollifier")

GAUSSIAN_CUTOFF_SIGMAS = 6.0


class KernelError(Exception):
    pass


class KernelResolutionError(KernelError):
    """Grid spacing does not resolve the kernel width."""


class KernelAssumptionError(KernelError):
    """Coefficient floor beta incompatible with the paired potential."""


@dataclass(frozen=True)
class KernelSpec:
    family: str
    width: float
    j_l1: float = 1.0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise KernelError(
                f"unknown kernel family {self.family!r}, expected one of {FAMILIES}"
            )
        if not (self.width > 0):
            raise KernelError(f"kernel width must be positive, got {self.width}")
        if not (self.j_l1 > 0):
            raise KernelError(f"L1 normalization must be positive, got {self.j_l1}")

    @property
    def support_radius(self):
        if self.family == "gaussian":
            return GAUSSIAN_CUTOFF_SIGMAS * self.width
        return self.width

    def profile(self, r):
        """Radial profile J(r), vectorized, zero outside the support."""
        r = np.asarray(r, dtype=float)
        if self.family == "gaussian":
            s2 = self.width**2
            vals = (self.j_l1 / (2.0 * np.pi * s2)) * np.exp(-0.5 * r**2 / s2)
            return np.where(r <= self.support_radius, vals, 0.0)
        rr = self.width
        core = 1.0 - (r / rr) ** 2
        vals = (4.0 * self.j_l1 / (np.pi * rr**2)) * np.maximum(core, 0.0) ** 3
        return vals

    def grad_l1_continuum(self):
        """Closed-form L1 norm of the kernel gradient over the plane."""
        if self.family == "gaussian":
            return self.j_l1 * np.sqrt(np.pi / 2.0) / self.width
        return 128.0 * self.j_l1 / (35.0 * self.width)

    def grad_directional_l1_continuum(self):
        """Closed-form integral of |dJ/dx| (one direction); equals
        (2/pi) times the full gradient L1 norm for radial kernels."""
        return (2.0 / np.pi) * self.grad_l1_continuum()


@dataclass
class KernelData:
    spec: KernelSpec
    grid: Grid
    Jtab: np.ndarray
    a_field: ScalarField
    beta: float
    a_inf: float
    j_l1_discrete: float
    grad_j_l1: float
    tv_x: float
    tv_y: float
    _fshape: tuple = field(repr=False, default=None)
    _jhat: np.ndarray = field(repr=False, default=None)

    def convolve_raw(self, arr):
        f = sfft.rfft2(arr, self._fshape)
        full = sfft.irfft2(f * self._jhat, self._fshape)
        nx, ny = self.grid.nx, self.grid.ny
        out = full[nx - 1: 2 * nx - 1, ny - 1: 2 * ny - 1]
        return out * self.grid.cell_volume

    def convolve(self, phi):
        if phi.grid.key() != self.grid.key():
            raise KernelError(
                f"grid mismatch: kernel built on {self.grid.key()}, "
                f"field lives on {phi.grid.key()}"
            )
        return ScalarField(self.grid, self.convolve_raw(phi.values), bc="none")

    def report(self, potential_spec=None):
        out = {
            "family": self.spec.family,
            "width": self.spec.width,
            "j_l1_configured": self.spec.j_l1,
            "j_l1_discrete": self.j_l1_discrete,
            "beta": self.beta,
            "a_inf": self.a_inf,
            "grad_j_l1_discrete": self.grad_j_l1,
            "grad_j_l1_continuum": self.spec.grad_l1_continuum(),
        }
        if potential_spec is not None:
            out["beta_margin"] = self.beta - (
                potential_spec.theta_c - potential_spec.theta
            )
        return out


def _displacements(n, h):
    return np.arange(-(n - 1), n) * h


def build_kernel(spec, grid, potential_spec=None):
    """Tabulate J on the displacement lattice, build the FFT plan, compute
    a(x) = (J * 1)(x) through that plan, and freeze the derived scalars.

    potential_spec, when given, gates the pairing requirement
    beta > theta_c - theta and raises with the offending margin.
    """
    h = max(grid.hx, grid.hy)
    if spec.width < 2.0 * h:
        raise KernelResolutionError(
            f"kernel width {spec.width:.6g} under-resolved: need width >= 2h "
            f"= {2.0 * h:.6g}"
        )
    dx = _displacements(grid.nx, grid.hx)
    dy = _displacements(grid.ny, grid.hy)
    rad = np.hypot(dx[:, None], dy[None, :])
    jtab = spec.profile(rad)

    fshape = (
        sfft.next_fast_len(3 * grid.nx - 2),
        sfft.next_fast_len(3 * grid.ny - 2),
    )
    jhat = sfft.rfft2(jtab, fshape)

    kd = KernelData(
        spec=spec, grid=grid, Jtab=jtab, a_field=None,
        beta=np.nan, a_inf=np.nan,
        j_l1_discrete=float(jtab.sum() * grid.cell_volume),
        grad_j_l1=np.nan, tv_x=np.nan, tv_y=np.nan,
        _fshape=fshape, _jhat=jhat,
    )

    ones = np.ones((grid.nx, grid.ny))
    a_vals = kd.convolve_raw(ones)
    kd.a_field = ScalarField(grid, a_vals, bc="none")
    kd.beta = float(a_vals.min())
    kd.a_inf = float(a_vals.max())
    if kd.beta <= 0.0:
        raise KernelAssumptionError(
            f"coefficient field must stay positive, got min a = {kd.beta:.3g}"
        )

    kd.tv_x = _directional_tv(spec, grid, axis=0)
    kd.tv_y = _directional_tv(spec, grid, axis=1)
    kd.grad_j_l1 = max(kd.tv_x, kd.tv_y)

    if potential_spec is not None:
        margin = kd.beta - (potential_spec.theta_c - potential_spec.theta)
        if margin <= 0.0:
            raise KernelAssumptionError(
                f"kernel floor beta = {kd.beta:.6g} must exceed theta_c - theta "
                f"= {potential_spec.theta_c - potential_spec.theta:.6g} "
                f"(margin {margin:.6g})"
            )
    return kd


def _directional_tv(spec, grid, axis):
    """sum_z h^2 |J(z + h e) - J(z)| / h over a lattice padded by one row,
    so every displacement difference occurring in a face gradient of J*phi
    is covered.  This majorizes ||grad_axis (J*phi)||_L2 / ||phi||_L2."""
    if axis == 0:
        dx = np.arange(-grid.nx, grid.nx + 1) * grid.hx
        dy = _displacements(grid.ny, grid.hy)
        step = grid.hx
    else:
        dx = _displacements(grid.nx, grid.hx)
        dy = np.arange(-grid.ny, grid.ny + 1) * grid.hy
        step = grid.hy
    vals = spec.profile(np.hypot(dx[:, None], dy[None, :]))
    diffs = np.abs(np.diff(vals, axis=axis))
    return float(diffs.sum() * grid.cell_volume / step)
