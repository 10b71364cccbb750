"""Uniform space-time grids on the flat torus and the discrete calculus on them.

The spatial domain is the unit torus [0,1)^d (d = 1 or 2) with N points per
axis, dx = 1/N, and periodic index arithmetic.  Time lives on [t0, T] with K
steps of size dt = (T - t0)/K; fields are stored time-major, one contiguous
spatial slice per time node t_k = t0 + k*dt, k = 0..K.

The three stencil operators are built as an exact adjoint pair plus their
composition:

* ``gradient``    -- centered periodic difference per axis, O(dx^2);
* ``divergence``  -- the exact negative adjoint of ``gradient`` under the
  discrete inner product dx^d * sum(u*v), so summation by parts
  <grad u, w> = -<u, div w> holds at machine precision;
* ``laplacian``   -- divergence(gradient(u)) as a fused stencil
  (u[i+2] - 2u[i] + u[i-2])/(4 dx^2) per axis, again O(dx^2).

The energy identities used by the stability and variational machinery depend
on the adjointness being exact, not merely second order; do not replace these
stencils with one-sided or limited variants.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "TorusGrid",
    "ScalarField",
    "DensityField",
    "FluxField",
    "gradient",
    "divergence",
    "laplacian",
    "integrate",
    "inner",
    "l2_norm",
    "sup_norm",
    "h1_norm",
    "c10_norm",
    "field_to_csv",
    "scalar_field_from_csv",
    "write_field_binary",
    "read_field_binary",
]

# container tolerances: mass is conserved exactly by the schemes, negativity
# slack covers roundoff; solver outputs under valid step sizes stay >= -1e-12
MASS_TOL = 1e-12
NEG_TOL = 1e-10


class GridError(ValueError):
    """Raised when grid/field invariants are violated."""


@dataclass(frozen=True)
class TorusGrid:
    """Uniform discretization of T^d x [t0, T].

    dx*N == 1 by construction: node coordinates are i/N, never accumulated
    sums of dx.
    """

    dim: int
    n_space: int
    n_time: int
    t0: float = 0.0
    T: float = 1.0

    def __post_init__(self):
        if self.dim not in (1, 2):
            raise GridError(f"dim must be 1 or 2, got {self.dim}")
        if self.n_space < 4:
            raise GridError(f"n_space must be >= 4, got {self.n_space}")
        if self.n_time < 2:
            raise GridError(f"n_time must be >= 2, got {self.n_time}")
        if not self.T > self.t0:
            raise GridError(f"need T > t0, got t0={self.t0}, T={self.T}")

    @property
    def dx(self) -> float:
        return 1.0 / self.n_space

    @property
    def dt(self) -> float:
        return (self.T - self.t0) / self.n_time

    @property
    def cell_volume(self) -> float:
        return self.dx**self.dim

    @property
    def spatial_shape(self) -> tuple[int, ...]:
        return (self.n_space,) * self.dim

    @property
    def n_nodes(self) -> int:
        return self.n_space**self.dim

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.n_time + 1)

    def axis_coordinates(self) -> np.ndarray:
        return np.arange(self.n_space) / self.n_space

    def coordinates(self) -> tuple[np.ndarray, ...]:
        """Meshgrid node coordinates, one array of spatial_shape per axis."""
        x = self.axis_coordinates()
        if self.dim == 1:
            return (x,)
        return tuple(np.meshgrid(x, x, indexing="ij"))

    def time_index(self, t: float) -> int:
        """Index of a grid-aligned time; raises if t is off-grid."""
        k = (t - self.t0) / self.dt
        ki = int(round(k))
        if ki < 0 or ki > self.n_time or abs(k - ki) > 1e-9 * max(1, self.n_time):
            raise GridError(f"time {t} is not aligned to the grid")
        return ki

    def restrict(self, t1_index: int) -> "TorusGrid":
        """Sub-grid on [t_{t1_index}, T] sharing nodes and dt with self."""
        if not 0 <= t1_index < self.n_time:
            raise GridError(f"t1_index {t1_index} out of range")
        return TorusGrid(
            dim=self.dim,
            n_space=self.n_space,
            n_time=self.n_time - t1_index,
            t0=self.t0 + t1_index * self.dt,
            T=self.T,
        )

    def compatible(self, other: "TorusGrid") -> bool:
        return (
            self.dim == other.dim
            and self.n_space == other.n_space
            and self.n_time == other.n_time
            and abs(self.t0 - other.t0) < 1e-12
            and abs(self.T - other.T) < 1e-12
        )


# ---------------------------------------------------------------------------
# field containers
# ---------------------------------------------------------------------------


@dataclass
class ScalarField:
    """Real grid function, shape (K+1, N) in 1D or (K+1, N, N) in 2D."""

    grid: TorusGrid
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        expected = (self.grid.n_time + 1, *self.grid.spatial_shape)
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != expected:
            raise GridError(
                f"scalar field shape {self.values.shape} != expected {expected}"
            )
        if not np.all(np.isfinite(self.values)):
            raise GridError("scalar field contains non-finite values")

    @classmethod
    def zeros(cls, grid: TorusGrid) -> "ScalarField":
        return cls(grid, np.zeros((grid.n_time + 1, *grid.spatial_shape)))

    @classmethod
    def from_slices(cls, grid: TorusGrid, slices: np.ndarray) -> "ScalarField":
        return cls(grid, np.array(slices, dtype=float))

    def slice(self, k: int) -> np.ndarray:
        return self.values[k]

    def copy(self) -> "ScalarField":
        return ScalarField(self.grid, self.values.copy())


@dataclass
class DensityField(ScalarField):
    """Probability density per time slice: nonnegative, unit discrete mass."""

    def __post_init__(self):
        super().__post_init__()
        self.validate()

    def validate(self):
        vol = self.grid.cell_volume
        masses = vol * self.values.reshape(self.grid.n_time + 1, -1).sum(axis=1)
        worst = np.max(np.abs(masses - 1.0))
        if worst > MASS_TOL:
            raise GridError(
                f"density mass invariant violated: max |mass-1| = {worst:.3e}"
            )
        low = self.values.min()
        if low < -NEG_TOL:
            raise GridError(f"density nonnegativity violated: min = {low:.3e}")

    def mass(self) -> np.ndarray:
        vol = self.grid.cell_volume
        return vol * self.values.reshape(self.grid.n_time + 1, -1).sum(axis=1)

    def copy(self) -> "DensityField":
        return DensityField(self.grid, self.values.copy())


@dataclass
class FluxField:
    """Vector field per node, shape (K+1, *spatial, d)."""

    grid: TorusGrid
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        expected = (self.grid.n_time + 1, *self.grid.spatial_shape, self.grid.dim)
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != expected:
            raise GridError(
                f"flux field shape {self.values.shape} != expected {expected}"
            )
        if not np.all(np.isfinite(self.values)):
            raise GridError("flux field contains non-finite values")

    @classmethod
    def zeros(cls, grid: TorusGrid) -> "FluxField":
        return cls(
            grid, np.zeros((grid.n_time + 1, *grid.spatial_shape, grid.dim))
        )

    def slice(self, k: int) -> np.ndarray:
        return self.values[k]

    def copy(self) -> "FluxField":
        return FluxField(self.grid, self.values.copy())


# ---------------------------------------------------------------------------
# stencil operators (per spatial slice)
# ---------------------------------------------------------------------------


def _centered_diff(u: np.ndarray, axis: int, dx: float) -> np.ndarray:
    return (np.roll(u, -1, axis=axis) - np.roll(u, 1, axis=axis)) / (2.0 * dx)


def gradient(grid: TorusGrid, u_slice: np.ndarray) -> np.ndarray:
    """Centered periodic gradient of a spatial slice; output (*spatial, d)."""
    u = np.asarray(u_slice)
    out = np.empty((*u.shape, grid.dim))
    for a in range(grid.dim):
        out[..., a] = _centered_diff(u, a, grid.dx)
    return out


def divergence(grid: TorusGrid, w_slice: np.ndarray) -> np.ndarray:
    """Exact negative adjoint of ``gradient``: sum of centered differences.

    Telescoping of the periodic stencil makes integrate(divergence(w)) = 0
    to roundoff for every w.
    """
    w = np.asarray(w_slice)
    out = np.zeros(w.shape[:-1])
    for a in range(grid.dim):
        out += _centered_diff(w[..., a], a, grid.dx)
    return out


def laplacian(grid: TorusGrid, u_slice: np.ndarray) -> np.ndarray:
    """divergence(gradient(u)): the width-2 centered stencil per axis.

    Implemented as the literal composition so the stencil identity
    div(grad u) == laplacian(u) holds bitwise, not merely to roundoff.
    """
    return divergence(grid, gradient(grid, u_slice))


def laplacian_symbol(grid: TorusGrid) -> np.ndarray:
    """Fourier multiplier of ``laplacian`` on spatial_shape (real, <= 0)."""
    n = grid.n_space
    k = np.fft.fftfreq(n, d=grid.dx)  # integer wavenumbers / 1
    lam1 = -np.sin(2.0 * np.pi * k * grid.dx) ** 2 / grid.dx**2
    if grid.dim == 1:
        return lam1
    return lam1[:, None] + lam1[None, :]


# ---------------------------------------------------------------------------
# quadrature and norms
# ---------------------------------------------------------------------------


def integrate(grid: TorusGrid, u_slice: np.ndarray) -> float:
    return float(grid.cell_volume * np.sum(u_slice))


def inner(grid: TorusGrid, a: np.ndarray, b: np.ndarray) -> float:
    """Discrete L2 inner product dx^d * sum(a*b) over one slice."""
    return float(grid.cell_volume * np.sum(a * b))


def l2_norm(grid: TorusGrid, u_slice: np.ndarray) -> float:
    return float(np.sqrt(grid.cell_volume * np.sum(np.asarray(u_slice) ** 2)))


def sup_norm(u: np.ndarray) -> float:
    return float(np.max(np.abs(u)))


def h1_norm(grid: TorusGrid, u_slice: np.ndarray) -> float:
    g = gradient(grid, u_slice)
    return float(
        np.sqrt(
            grid.cell_volume * np.sum(u_slice**2)
            + grid.cell_volume * np.sum(g**2)
        )
    )


def c10_norm(grid: TorusGrid, u_slice: np.ndarray) -> float:
    """sup|u| + sup|Du| on one slice (Du in the Euclidean norm over axes)."""
    g = gradient(grid, u_slice)
    gmag = np.sqrt(np.sum(g**2, axis=-1))
    return float(np.max(np.abs(u_slice)) + np.max(gmag))


def c10_norm_field(grid: TorusGrid, values: np.ndarray) -> float:
    return max(c10_norm(grid, values[k]) for k in range(values.shape[0]))


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

_MAGIC = b"MFGL"
_VERSION = 1
_KIND = {"scalar": 0, "density": 1, "flux": 2}
_KIND_INV = {v: k for k, v in _KIND.items()}


def _field_kind(f) -> str:
    if isinstance(f, DensityField):
        return "density"
    if isinstance(f, ScalarField):
        return "scalar"
    if isinstance(f, FluxField):
        return "flux"
    raise TypeError(f"not a field: {type(f)!r}")


def field_to_csv(f, path) -> None:
    """One row per node: time index, spatial indices, coordinates, value(s)."""
    grid = f.grid
    kind = _field_kind(f)
    ncomp = grid.dim if kind == "flux" else 1
    xcols = ["x"] if grid.dim == 1 else ["x1", "x2"]
    icols = ["i"] if grid.dim == 1 else ["i1", "i2"]
    vcols = ["value"] if ncomp == 1 else [f"value{a+1}" for a in range(ncomp)]
    header = ",".join(["k", "t", *icols, *xcols, *vcols])
    coords = grid.axis_coordinates()
    lines = [header]
    for k in range(grid.n_time + 1):
        t = grid.t0 + k * grid.dt
        sl = f.values[k].reshape(grid.n_nodes, ncomp)
        for flat in range(grid.n_nodes):
            if grid.dim == 1:
                idx = (flat,)
            else:
                idx = (flat // grid.n_space, flat % grid.n_space)
            parts = [str(k), repr(float(t))]
            parts += [str(i) for i in idx]
            parts += [repr(float(coords[i])) for i in idx]
            parts += [repr(float(v)) for v in sl[flat]]
            lines.append(",".join(parts))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def scalar_field_from_csv(grid: TorusGrid, path) -> ScalarField:
    values = np.zeros((grid.n_time + 1, *grid.spatial_shape))
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
        ncols = len(header)
        for line in fh:
            parts = line.strip().split(",")
            if len(parts) != ncols:
                raise GridError("malformed field CSV row")
            k = int(parts[0])
            if grid.dim == 1:
                values[k, int(parts[2])] = float(parts[-1])
            else:
                values[k, int(parts[2]), int(parts[3])] = float(parts[-1])
    return ScalarField(grid, values)


def write_field_binary(f, path) -> None:
    """Self-describing binary layout; round-trips bit-exactly."""
    grid = f.grid
    kind = _field_kind(f)
    ncomp = grid.dim if kind == "flux" else 1
    header = struct.pack(
        "<4sIIIIIddI",
        _MAGIC,
        _VERSION,
        _KIND[kind],
        grid.dim,
        grid.n_space,
        grid.n_time,
        grid.t0,
        grid.T,
        ncomp,
    )
    buf = io.BytesIO()
    buf.write(header)
    buf.write(np.ascontiguousarray(f.values, dtype="<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def read_field_binary(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    hsize = struct.calcsize("<4sIIIIIddI")
    magic, version, kind_id, dim, n_space, n_time, t0, T, ncomp = struct.unpack(
        "<4sIIIIIddI", raw[:hsize]
    )
    if magic != _MAGIC or version != _VERSION:
        raise GridError("not an mfg-lab field file")
    grid = TorusGrid(dim=dim, n_space=n_space, n_time=n_time, t0=t0, T=T)
    kind = _KIND_INV[kind_id]
    shape = (n_time + 1, *grid.spatial_shape)
    if kind == "flux":
        shape = (*shape, ncomp)
    values = np.frombuffer(raw[hsize:], dtype="<f8").reshape(shape).copy()
    if kind == "density":
        return DensityField(grid, values)
    if kind == "scalar":
        return ScalarField(grid, values)
    return FluxField(grid, values)
