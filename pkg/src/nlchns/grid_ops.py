"""Cell-centered grids, no-flux operators, Neumann inverse, norms, field IO.

Layout
------
Scalar unknowns (phi, mu, pressure) live at cell centers of a uniform
rectangular grid: values[i, j] sits at x_i = (i + 1/2) hx, y_j = (j + 1/2) hy,
x index first.  The quadrature weight of every cell is hx*hy, so cell volumes
sum to |Omega| exactly and the mean is a plain numpy mean.

Velocities use the MAC staggering: the x component u[i, j] sits on the
vertical face (i hx, (j + 1/2) hy), shape (nx+1, ny); the y component
v[i, j] on the horizontal face ((i + 1/2) hx, j hy), shape (nx, ny+1).
Boundary faces carry the no-penetration value 0.

With mirror-ghost no-flux for scalars, the discrete identities

    <laplace_neumann(f), g> = -<grad f, grad g>        (summation by parts)
    <grad f, v>             = -<f, div v>              (v normal = 0 on walls)

hold exactly in floating point up to roundoff, which is what the energy
bookkeeping downstream relies on.  The Neumann Laplacian A = -laplace is
assembled sparse once per grid and shared: the zero-mean inverse N uses
conjugate gradients with mean re-projection every iteration (tolerance
1e-12 by default, contract 1e-10), and the pressure projection uses a
cached LU factorization of the pinned singular system, which is exact.
"""

import io
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import splu


class GridError(Exception):
    pass


class MeanError(GridError):
    """Zero-mean contract violated (Neumann inverse / V0' norm)."""


@dataclass(frozen=True)
class Grid:
    nx: int
    ny: int
    lx: float = 1.0
    ly: float = 1.0

    def __post_init__(self):
        if self.nx < 8 or self.ny < 8:
            raise GridError(f"grid must be at least 8x8, got {self.nx}x{self.ny}")
        if self.lx <= 0 or self.ly <= 0:
            raise GridError("domain extents must be positive")

    @property
    def hx(self):
        return self.lx / self.nx

    @property
    def hy(self):
        return self.ly / self.ny

    @property
    def area(self):
        return self.lx * self.ly

    @property
    def cell_volume(self):
        return self.hx * self.hy

    def cell_x(self):
        return (np.arange(self.nx) + 0.5) * self.hx

    def cell_y(self):
        return (np.arange(self.ny) + 0.5) * self.hy

    def cell_mesh(self):
        return np.meshgrid(self.cell_x(), self.cell_y(), indexing="ij")

    def corner_mesh(self):
        x = np.arange(self.nx + 1) * self.hx
        y = np.arange(self.ny + 1) * self.hy
        return np.meshgrid(x, y, indexing="ij")

    def key(self):
        return (self.nx, self.ny, self.lx, self.ly)


@dataclass
class ScalarField:
    grid: Grid
    values: np.ndarray
    bc: str = "neumann"  # {"neumann", "none"}

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.grid.nx, self.grid.ny):
            raise GridError(
                f"scalar field shape {self.values.shape} does not match grid "
                f"{(self.grid.nx, self.grid.ny)}"
            )
        if not np.all(np.isfinite(self.values)):
            raise GridError("scalar field contains non-finite entries")

    def mean(self):
        return float(self.values.mean())

    def integral(self):
        return float(self.values.sum() * self.grid.cell_volume)

    def copy(self):
        return ScalarField(self.grid, self.values.copy(), self.bc)


@dataclass
class VectorField:
    """MAC-staggered vector field; boundary normal faces must vanish."""

    grid: Grid
    u: np.ndarray
    v: np.ndarray
    bc: str = "noslip"  # {"noslip", "noflux", "none"}

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=float)
        self.v = np.asarray(self.v, dtype=float)
        nx, ny = self.grid.nx, self.grid.ny
        if self.u.shape != (nx + 1, ny) or self.v.shape != (nx, ny + 1):
            raise GridError(
                f"MAC shapes must be {(nx + 1, ny)} and {(nx, ny + 1)}, got "
                f"{self.u.shape} and {self.v.shape}"
            )
        if not (np.all(np.isfinite(self.u)) and np.all(np.isfinite(self.v))):
            raise GridError("vector field contains non-finite entries")
        if self.bc in ("noslip", "noflux"):
            wall = max(
                np.abs(self.u[0]).max(), np.abs(self.u[-1]).max(),
                np.abs(self.v[:, 0]).max(), np.abs(self.v[:, -1]).max(),
            )
            if wall > 0.0:
                raise GridError(
                    f"boundary normal faces must be zero for bc={self.bc!r}, "
                    f"max |normal| = {wall:.3g}"
                )

    def copy(self):
        return VectorField(self.grid, self.u.copy(), self.v.copy(), self.bc)


def zeros(grid, bc="neumann"):
    return ScalarField(grid, np.zeros((grid.nx, grid.ny)), bc)


def zero_vector(grid, bc="noslip"):
    return VectorField(grid, np.zeros((grid.nx + 1, grid.ny)),
                       np.zeros((grid.nx, grid.ny + 1)), bc)


# ----------------------------------------------------------------- operators

def grad_arrays(grid, f):
    """Gradient of a cell array onto faces, zero at boundary faces (no flux)."""
    gx = np.zeros((grid.nx + 1, grid.ny))
    gy = np.zeros((grid.nx, grid.ny + 1))
    gx[1:-1, :] = (f[1:, :] - f[:-1, :]) / grid.hx
    gy[:, 1:-1] = (f[:, 1:] - f[:, :-1]) / grid.hy
    return gx, gy


def div_arrays(grid, u, v):
    """Divergence of face arrays at cell centers."""
    return (u[1:, :] - u[:-1, :]) / grid.hx + (v[:, 1:] - v[:, :-1]) / grid.hy


def laplace_arrays(grid, f):
    gx, gy = grad_arrays(grid, f)
    return div_arrays(grid, gx, gy)


def gradient(f):
    gx, gy = grad_arrays(f.grid, f.values)
    return VectorField(f.grid, gx, gy, bc="noflux")


def divergence(v):
    return ScalarField(v.grid, div_arrays(v.grid, v.u, v.v), bc="none")


def laplace_neumann(f):
    return ScalarField(f.grid, laplace_arrays(f.grid, f.values), bc="none")


def inner(f, g):
    fa = f.values if isinstance(f, ScalarField) else f
    ga = g.values if isinstance(g, ScalarField) else g
    return float(np.sum(fa * ga)) * _grid_of(f, g).cell_volume


def _grid_of(*fields):
    for f in fields:
        if isinstance(f, (ScalarField, VectorField)):
            return f.grid
    raise GridError("need at least one field carrying a grid")


def inner_vec(a, b):
    return (float(np.sum(a.u * b.u)) + float(np.sum(a.v * b.v))) * a.grid.cell_volume


# --------------------------------------------------- Neumann Laplacian and N

class _NeumannWorkspace:
    """Per-grid sparse A = -laplace, pinned LU, scratch for solvers."""

    def __init__(self, grid):
        self.grid = grid
        nx, ny = grid.nx, grid.ny
        ax = _neumann_1d(nx, grid.hx)
        ay = _neumann_1d(ny, grid.hy)
        ix = sparse.identity(nx, format="csr")
        iy = sparse.identity(ny, format="csr")
        self.A = (sparse.kron(ax, iy) + sparse.kron(ix, ay)).tocsr()
        self.diag = self.A.diagonal().reshape(nx, ny)
        pinned = self.A.tolil()
        pinned[0, :] = 0.0
        pinned[0, 0] = 1.0
        self.lu = splu(pinned.tocsc())

    def apply_A(self, f):
        nx, ny = self.grid.nx, self.grid.ny
        return (self.A @ f.reshape(nx * ny)).reshape(nx, ny)


def _neumann_1d(n, h):
    main = np.full(n, 2.0)
    main[0] = main[-1] = 1.0
    return sparse.diags(
        [np.full(n - 1, -1.0), main, np.full(n - 1, -1.0)], [-1, 0, 1]
    ) / h**2


_workspaces = {}


def workspace(grid):
    ws = _workspaces.get(grid.key())
    if ws is None:
        ws = _NeumannWorkspace(grid)
        _workspaces[grid.key()] = ws
    return ws


def solve_neumann_direct(grid, rhs):
    """Particular solution of -laplace p = rhs (compatible rhs), zero mean.

    Exact up to LU roundoff: the pinned row's equation is implied by the
    others because both the row sums of A and the rhs sum vanish.
    """
    ws = workspace(grid)
    b = np.asarray(rhs, dtype=float).reshape(grid.nx * grid.ny).copy()
    b[0] = 0.0
    p = ws.lu.solve(b).reshape(grid.nx, grid.ny)
    return p - p.mean()


def cg_zero_mean(apply_op, b, rtol=1e-12, maxiter=None, x0=None):
    """Conjugate gradients on the zero-mean subspace.

    The operator must be SPD on that subspace; iterates, residuals and the
    right-hand side are re-projected (mean subtracted) every iteration so
    float drift cannot leak into the constant kernel direction.
    """
    b = b - b.mean()
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return np.zeros_like(b), 0
    x = np.zeros_like(b) if x0 is None else x0 - x0.mean()
    r = b - apply_op(x)
    r -= r.mean()
    p = r.copy()
    rs = float(np.vdot(r, r))
    if maxiter is None:
        maxiter = 20 * b.size
    for it in range(1, maxiter + 1):
        ap = apply_op(p)
        ap -= ap.mean()
        alpha = rs / float(np.vdot(p, ap))
        x += alpha * p
        r -= alpha * ap
        r -= r.mean()
        rs_new = float(np.vdot(r, r))
        if np.sqrt(rs_new) <= rtol * bnorm:
            x -= x.mean()
            return x, it
        p = r + (rs_new / rs) * p
        rs = rs_new
    raise GridError(
        f"zero-mean CG failed to reach rtol={rtol} in {maxiter} iterations "
        f"(residual {np.sqrt(rs) / bnorm:.3g} relative)"
    )


def inverse_neumann(f, rtol=1e-12):
    """N f: the zero-mean solution of -laplace(Nf) = f for zero-mean f."""
    grid = f.grid
    vals = f.values
    scale = np.linalg.norm(vals) / np.sqrt(vals.size)
    if abs(vals.mean()) > 1e-10 * max(scale, 1e-300):
        raise MeanError(
            f"inverse_neumann needs zero-mean input, got mean {vals.mean():.3g}"
        )
    ws = workspace(grid)
    x, _ = cg_zero_mean(ws.apply_A, vals, rtol=rtol)
    return ScalarField(grid, x, bc="neumann")


# ------------------------------------------------------------------- norms

def norm_l2(f):
    if isinstance(f, VectorField):
        return vector_l2(f)
    return float(np.sqrt(np.sum(f.values**2) * f.grid.cell_volume))


def norm_lp(f, p):
    return float((np.sum(np.abs(f.values) ** p) * f.grid.cell_volume) ** (1.0 / p))


def norm_linf(f):
    return float(np.max(np.abs(f.values)))


def h1_seminorm(f):
    gx, gy = grad_arrays(f.grid, f.values)
    return float(np.sqrt((np.sum(gx**2) + np.sum(gy**2)) * f.grid.cell_volume))


def v0prime_norm(f, rtol=1e-12):
    nf = inverse_neumann(f, rtol=rtol)
    val = inner(f, nf)
    return float(np.sqrt(max(val, 0.0)))


def mac_component_gradients(grid, u, v):
    """Gradients of MAC components with linear no-slip wall ghosts.

    Returns (ux, uy, vx, vy): ux, vy at cell centers; uy, vx at corners.
    """
    nx, ny = grid.nx, grid.ny
    ux = (u[1:, :] - u[:-1, :]) / grid.hx
    vy = (v[:, 1:] - v[:, :-1]) / grid.hy
    uy = np.zeros((nx + 1, ny + 1))
    uy[:, 1:-1] = (u[:, 1:] - u[:, :-1]) / grid.hy
    uy[:, 0] = 2.0 * u[:, 0] / grid.hy       # ghost u(-) = -u(0)
    uy[:, -1] = -2.0 * u[:, -1] / grid.hy
    vx = np.zeros((nx + 1, ny + 1))
    vx[1:-1, :] = (v[1:, :] - v[:-1, :]) / grid.hx
    vx[0, :] = 2.0 * v[0, :] / grid.hx
    vx[-1, :] = -2.0 * v[-1, :] / grid.hx
    return ux, uy, vx, vy


def vector_l2(w):
    vol = w.grid.cell_volume
    return float(np.sqrt((np.sum(w.u**2) + np.sum(w.v**2)) * vol))


def vector_h1_seminorm(w):
    ux, uy, vx, vy = mac_component_gradients(w.grid, w.u, w.v)
    vol = w.grid.cell_volume
    total = np.sum(ux**2) + np.sum(uy**2) + np.sum(vx**2) + np.sum(vy**2)
    return float(np.sqrt(total * vol))


def norms(f, p=4):
    """Norm bundle used by the diagnostics; V0' included when f is zero-mean."""
    if isinstance(f, VectorField):
        return {
            "L2": vector_l2(f),
            "H1_seminorm": vector_h1_seminorm(f),
            "Linf": float(max(np.abs(f.u).max(), np.abs(f.v).max())),
        }
    out = {
        "L2": float(np.sqrt(np.sum(f.values**2) * f.grid.cell_volume)),
        "H1_seminorm": h1_seminorm(f),
        "Lp": norm_lp(f, p),
        "Linf": norm_linf(f),
    }
    scale = out["L2"] / np.sqrt(f.grid.area) if out["L2"] > 0 else 0.0
    if abs(f.values.mean()) <= 1e-10 * max(scale, 1e-300):
        out["V0prime"] = v0prime_norm(f)
    return out


def poincare_constant(grid, n_iter=60, seed=0, rtol=1e-10):
    """Estimate the Poincare-Wirtinger constant sup ||f|| / ||grad f|| over
    zero-mean f: power iteration on N gives 1/lambda_2 of the Neumann
    Laplacian, and C_P = lambda_2^(-1/2)."""
    rng = np.random.default_rng(seed)
    ws = workspace(grid)
    x = rng.standard_normal((grid.nx, grid.ny))
    x -= x.mean()
    lam = 0.0
    for _ in range(n_iter):
        y, _ = cg_zero_mean(ws.apply_A, x, rtol=rtol)
        lam = np.linalg.norm(y) / np.linalg.norm(x)
        x = y / np.linalg.norm(y)
    return float(np.sqrt(lam))


# ------------------------------------------------------------------ field IO

_MAGIC = b"NLCHFLD1"


def write_snapshot(path, arr, grid, time=0.0):
    """Flat binary snapshot: magic, shape, spacings, time, row-major float64."""
    arr = np.ascontiguousarray(arr, dtype=float)
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<qqddd", arr.shape[0], arr.shape[1],
                             grid.hx, grid.hy, time))
        fh.write(arr.tobytes())


def read_snapshot(path):
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != _MAGIC:
            raise GridError(f"not a field snapshot: {path}")
        n0, n1, hx, hy, time = struct.unpack("<qqddd", fh.read(40))
        data = np.frombuffer(fh.read(8 * n0 * n1), dtype=float).reshape(n0, n1)
    return data.copy(), {"hx": hx, "hy": hy, "time": time}


def write_field_csv(path, f):
    x, y = f.grid.cell_mesh()
    out = np.column_stack([x.ravel(), y.ravel(), f.values.ravel()])
    np.savetxt(path, out, delimiter=",", header="x,y,value", comments="")


def velocity_from_streamfunction(grid, psi):
    """Discretely divergence-free MAC field from corner stream values.

    u = d(psi)/dy, v = -d(psi)/dx; if psi is constant along each wall the
    normal faces vanish exactly and div u = 0 to roundoff by construction.
    """
    psi = np.asarray(psi, dtype=float)
    if psi.shape != (grid.nx + 1, grid.ny + 1):
        raise GridError("stream values must live on corners")
    u = (psi[:, 1:] - psi[:, :-1]) / grid.hy
    v = -(psi[1:, :] - psi[:-1, :]) / grid.hx
    scale = max(np.abs(u).max(), np.abs(v).max(), 1e-300)
    wall = max(np.abs(u[0]).max(), np.abs(u[-1]).max(),
               np.abs(v[:, 0]).max(), np.abs(v[:, -1]).max())
    if wall > 1e-12 * scale:
        raise GridError(
            "stream values must be constant along each wall "
            f"(normal leak {wall:.3g} vs interior scale {scale:.3g})"
        )
    # wall faces are constrained, pin the roundoff leftovers to exact zero
    u[0] = u[-1] = 0.0
    v[:, 0] = v[:, -1] = 0.0
    return VectorField(grid, u, v, bc="noslip")
