"""Uniform interior grids on [0, 1]^dim and the finite-difference operators on them.

Only interior values are unknowns. Boundary data live in a separate
:class:`Boundary` and are folded into stencil applications by padding.
2D fields are stored row-major with axis 0 running along x.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from newtonop.errors import BadMagicError, GridMismatchError, TruncatedFileError

NORM_KINDS = ("L2", "H1", "H2", "Linf")


@dataclass(frozen=True)
class Grid:
    dim: int
    n_interior: int

    def __post_init__(self):
        if self.dim not in (1, 2):
            raise ValueError(f"dim must be 1 or 2, got {self.dim}")
        if self.n_interior < 1:
            raise ValueError("n_interior must be positive")

    @property
    def h(self) -> float:
        return 1.0 / (self.n_interior + 1)

    @property
    def size(self) -> int:
        return self.n_interior ** self.dim

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.n_interior,) * self.dim

    @property
    def cell_volume(self) -> float:
        return self.h ** self.dim

    def axis(self) -> np.ndarray:
        return np.arange(1, self.n_interior + 1) * self.h

    def mesh(self) -> tuple[np.ndarray, ...]:
        """Coordinate arrays shaped like :attr:`shape` (``indexing='ij'``)."""
        if self.dim == 1:
            return (self.axis(),)
        return tuple(np.meshgrid(self.axis(), self.axis(), indexing="ij"))

    def coords(self) -> np.ndarray:
        """Interior points as an array of shape (size, dim), storage order."""
        return np.stack([m.ravel() for m in self.mesh()], axis=1)


class Boundary:
    """Dirichlet boundary trace.

    Three flavours: ``zero()``, ``constant(values)`` with one value per side
    (1D: left, right; 2D: x=0, x=1, y=0, y=1) and ``function(fn)`` where
    ``fn`` takes the coordinate arrays of the boundary points.
    """

    __slots__ = ("kind", "values", "fn")

    def __init__(self, kind, values=(), fn=None):
        self.kind = kind
        self.values = tuple(float(v) for v in values)
        self.fn = fn

    @classmethod
    def zero(cls):
        return cls("zero")

    @classmethod
    def constant(cls, values):
        vals = tuple(values)
        if len(vals) not in (2, 4):
            raise ValueError("constant boundary needs 2 (1D) or 4 (2D) side values")
        return cls("constant", vals)

    @classmethod
    def function(cls, fn: Callable):
        return cls("function", fn=fn)

    @property
    def is_zero(self):
        return self.kind == "zero" or (self.kind == "constant" and not any(self.values))

    def check(self, grid: Grid):
        if self.kind == "constant" and len(self.values) != 2 * grid.dim:
            raise GridMismatchError(
                f"{len(self.values)} boundary values for a {grid.dim}D grid"
            )

    def pad(self, grid: Grid, arr: np.ndarray) -> np.ndarray:
        """Return ``arr`` (shape ``grid.shape``) padded by one layer of boundary values."""
        self.check(grid)
        out = np.pad(arr, 1)
        if self.kind == "zero":
            return out
        n = grid.n_interior
        full = np.linspace(0.0, 1.0, n + 2)
        if grid.dim == 1:
            if self.kind == "constant":
                out[0], out[-1] = self.values
            else:
                out[0], out[-1] = self.fn(np.array(0.0)), self.fn(np.array(1.0))
            return out
        if self.kind == "constant":
            x0, x1, y0, y1 = self.values
            out[0, :], out[-1, :] = x0, x1
            out[:, 0], out[:, -1] = y0, y1
            return out
        zeros, ones = np.zeros(n + 2), np.ones(n + 2)
        out[0, :] = self.fn(zeros, full)
        out[-1, :] = self.fn(ones, full)
        out[:, 0] = self.fn(full, zeros)
        out[:, -1] = self.fn(full, ones)
        return out

    def __eq__(self, other):
        if not isinstance(other, Boundary):
            return NotImplemented
        if self.is_zero and other.is_zero:
            return True
        return (self.kind, self.values, self.fn) == (other.kind, other.values, other.fn)

    def __hash__(self):
        return hash((self.kind, self.values))

    def __repr__(self):
        if self.kind == "constant":
            return f"Boundary.constant({self.values})"
        return f"Boundary.{self.kind}()"


@dataclass(frozen=True, eq=False)
class GridFunction:
    grid: Grid
    values: np.ndarray
    boundary: Boundary = field(default_factory=Boundary.zero)

    def __post_init__(self):
        vals = np.array(self.values, dtype=np.float64).ravel()
        if vals.size != self.grid.size:
            raise GridMismatchError(
                f"{vals.size} values for a grid with {self.grid.size} interior points"
            )
        if not np.all(np.isfinite(vals)):
            raise ValueError("GridFunction values must be finite")
        self.boundary.check(self.grid)
        vals.flags.writeable = False
        object.__setattr__(self, "values", vals)

    @classmethod
    def zeros(cls, grid, boundary=None):
        return cls(grid, np.zeros(grid.size), boundary or Boundary.zero())

    @classmethod
    def from_function(cls, grid, fn, boundary=None):
        return cls(grid, np.asarray(fn(*grid.mesh()), dtype=float).ravel(), boundary or Boundary.zero())

    @property
    def array(self) -> np.ndarray:
        return self.values.reshape(self.grid.shape)

    def padded(self) -> np.ndarray:
        return self.boundary.pad(self.grid, self.array)

    def with_values(self, values) -> GridFunction:
        return GridFunction(self.grid, values, self.boundary)

    def __repr__(self):
        return f"GridFunction(dim={self.grid.dim}, n={self.grid.n_interior}, {self.boundary!r})"


def _stencil(padded: np.ndarray, h: float, dim: int) -> np.ndarray:
    # neighbour differences first: exact for close values, keeps rounding at the
    # level of the stored data rather than of the absolute magnitude
    h2 = h * h
    if dim == 1:
        c = padded[..., 1:-1]
        return ((padded[..., :-2] - c) + (padded[..., 2:] - c)) / h2
    c = padded[..., 1:-1, 1:-1]
    return (
        ((padded[..., :-2, 1:-1] - c) + (padded[..., 2:, 1:-1] - c))
        + ((padded[..., 1:-1, :-2] - c) + (padded[..., 1:-1, 2:] - c))
    ) / h2


def laplacian(u: GridFunction) -> GridFunction:
    """Discrete Laplacian at interior points; boundary values enter the stencil."""
    lap = _stencil(u.padded(), u.grid.h, u.grid.dim)
    return GridFunction(u.grid, lap.ravel(), Boundary.zero())


def boundary_frame(grid: Grid, boundary: Boundary) -> np.ndarray:
    """Padded array that is zero inside and carries the boundary values outside."""
    return boundary.pad(grid, np.zeros(grid.shape))


def laplacian_values(grid: Grid, values, mode: str = "zero", frame=None) -> np.ndarray:
    """Laplacian of raw storage-order values, batched over leading axes.

    ``mode='zero'`` pads with zeros (Dirichlet) or with ``frame`` when given,
    ``'replicate'`` copies the edge values (homogeneous Neumann).
    """
    v = np.asarray(values, dtype=np.float64)
    lead = v.shape[:-1]
    if v.shape[-1] != grid.size:
        raise GridMismatchError(f"expected {grid.size} values, got {v.shape[-1]}")
    arr = v.reshape(lead + grid.shape)
    if mode == "replicate":
        pad = [(0, 0)] * len(lead) + [(1, 1)] * grid.dim
        padded = np.pad(arr, pad, mode="edge")
    elif mode == "zero":
        padded = np.zeros(lead + tuple(n + 2 for n in grid.shape))
        if frame is not None:
            padded[...] = frame
        padded[(Ellipsis,) + (slice(1, -1),) * grid.dim] = arr
    else:
        raise ValueError(f"unknown padding mode {mode!r}")
    return _stencil(padded, grid.h, grid.dim).reshape(v.shape)


def _forward_diffs(grid, arr):
    out = []
    for ax in range(grid.dim):
        ax_full = arr.ndim - grid.dim + ax
        ext = np.concatenate([arr, np.zeros_like(np.take(arr, [0], axis=ax_full))], axis=ax_full)
        out.append(np.diff(ext, axis=ax_full) / grid.h)
    return out


def norm_values(grid: Grid, values, kind: str = "L2"):
    """Discrete norms of zero-extended storage-order values (batched over leading axes)."""
    kind = _norm_kind(kind)
    v = np.asarray(values, dtype=np.float64)
    vol = grid.cell_volume
    red = tuple(range(-grid.dim, 0))
    if kind == "Linf":
        return np.max(np.abs(v), axis=-1)
    sq = vol * np.sum(v * v, axis=-1)
    if kind == "L2":
        return np.sqrt(sq)
    arr = v.reshape(v.shape[:-1] + grid.shape)
    for d in _forward_diffs(grid, arr):
        sq = sq + vol * np.sum(d * d, axis=red)
    if kind == "H2":
        lap = laplacian_values(grid, v)
        sq = sq + vol * np.sum(lap * lap, axis=-1)
    return np.sqrt(sq)


def _norm_kind(kind):
    for k in NORM_KINDS:
        if str(kind).lower() == k.lower():
            return k
    raise ValueError(f"unknown norm kind {kind!r}; expected one of {NORM_KINDS}")


def norm(u: GridFunction, kind: str = "L2") -> float:
    """L2, H1, H2 or Linf norm of the interior values (zero extension outside)."""
    return float(norm_values(u.grid, u.values, kind))


def sensor_indices(grid: Grid, stride: int) -> np.ndarray:
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if stride >= grid.n_interior and grid.n_interior > 1:
        raise ValueError(f"stride {stride} leaves a degenerate sensor set on n={grid.n_interior}")
    idx = np.arange(grid.size).reshape(grid.shape)
    sl = (slice(None, None, stride),) * grid.dim
    return idx[sl].ravel()


def sample_sensors(u: GridFunction, stride: int = 1) -> np.ndarray:
    """Every ``stride``-th interior value per axis, row-major; the branch input."""
    return u.values[sensor_indices(u.grid, stride)].copy()


# binary layout: "NOGF", u8 dim, u32 n, n^dim f64 LE, u8 boundary tag [+ 2*dim f64]

_GF_MAGIC = b"NOGF"


def _read_exact(fh, n):
    data = fh.read(n)
    if len(data) != n:
        raise TruncatedFileError(f"expected {n} bytes, got {len(data)}")
    return data


def write_gridfunction(fh, u: GridFunction):
    if u.boundary.kind == "function":
        raise ValueError("function boundaries cannot be serialised")
    fh.write(_GF_MAGIC)
    fh.write(struct.pack("<BI", u.grid.dim, u.grid.n_interior))
    fh.write(u.values.astype("<f8").tobytes())
    if u.boundary.is_zero:
        fh.write(struct.pack("<B", 0))
    else:
        fh.write(struct.pack("<B", 1))
        fh.write(struct.pack(f"<{len(u.boundary.values)}d", *u.boundary.values))


def read_gridfunction(fh) -> GridFunction:
    if _read_exact(fh, 4) != _GF_MAGIC:
        raise BadMagicError("not a GridFunction file")
    dim, n = struct.unpack("<BI", _read_exact(fh, 5))
    grid = Grid(dim, n)
    vals = np.frombuffer(_read_exact(fh, 8 * grid.size), dtype="<f8").astype(np.float64)
    (tag,) = struct.unpack("<B", _read_exact(fh, 1))
    if tag == 0:
        bc = Boundary.zero()
    elif tag == 1:
        bc = Boundary.constant(struct.unpack(f"<{2 * dim}d", _read_exact(fh, 16 * dim)))
    else:
        raise BadMagicError(f"unknown boundary tag {tag}")
    return GridFunction(grid, vals, bc)


def save_gridfunction(path, u: GridFunction):
    with open(path, "wb") as fh:
        write_gridfunction(fh, u)


def load_gridfunction(path) -> GridFunction:
    with open(path, "rb") as fh:
        return read_gridfunction(fh)
