"""Perturbed initial states, their Newton-step labels, and the dataset file format."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from newtonop.errors import (
    BadMagicError,
    FormatError,
    NumericalError,
    SingularJacobianError,
    TruncatedFileError,
    VersionMismatchError,
)
from newtonop.grid import Grid, GridFunction, norm_values
from newtonop.newton import _pmap, newton_step_vec
from newtonop.problems import GrayScottProblem, problem_descriptor, problem_from_descriptor
from newtonop.rng import Rng

RECIPES = {"polynomial": 0, "spectral": 1, "gaussian3": 2, "uniform01": 3}
SPLITS = {"train": 0, "test": 1}
DATASET_VERSION = 1


class DataGenerationError(NumericalError):
    pass


def random_polynomial_field(rng: Rng, K: int = 3, L: float = 1.0, grid: Grid | None = None) -> GridFunction:
    """sum_{i<=K} a_i x^i with a_i ~ U[-L, L], evaluated at the interior points."""
    if grid is None or grid.dim != 1:
        raise ValueError("polynomial perturbations are defined on 1D grids only")
    if K < 0 or not L > 0:
        raise ValueError("need K >= 0 and L > 0")
    a = rng.uniform_range(-L, L, K + 1)
    return GridFunction(grid, np.polynomial.polynomial.polyval(grid.axis(), a))


def _sine_basis(grid, modes):
    k = np.arange(1, modes + 1)
    return np.sin(np.pi * np.outer(k, grid.axis()))


def spectral_gaussian_field(rng: Rng, grid: Grid, delta: float = 1.0, modes: int = 16, decay_power: float = 2.0) -> GridFunction:
    """Truncated sine series with N(0, delta) coefficients damped by (i^2 + j^2)^-decay_power.

    Zero on the boundary by construction. Coefficients are drawn i-major.
    """
    if modes < 1 or not delta > 0:
        raise ValueError("need modes >= 1 and delta > 0")
    basis = _sine_basis(grid, modes)
    k = np.arange(1, modes + 1, dtype=np.float64)
    if grid.dim == 1:
        xi = np.sqrt(delta) * rng.normal(modes)
        return GridFunction(grid, (xi * (k * k) ** -decay_power) @ basis)
    xi = np.sqrt(delta) * rng.normal(modes * modes).reshape(modes, modes)
    w = (k[:, None] ** 2 + k[None, :] ** 2) ** -decay_power
    return GridFunction(grid, (basis.T @ (xi * w) @ basis).ravel())


def uniform01_field(rng: Rng, grid: Grid) -> GridFunction:
    return GridFunction(grid, np.clip(rng.uniform(grid.size), 0.0, 1.0))


@dataclass
class RecipeParams:
    K: int = 3
    L: float = 1.0
    delta: float = 1.0
    modes: int = 16
    decay_power: float = 2.0


@dataclass
class OperatorDataset:
    problem: object
    stride: int
    U: np.ndarray
    DU: np.ndarray
    split: str = "train"
    seed: int = 0
    recipe: str = "spectral"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.U = np.ascontiguousarray(self.U, dtype=np.float64)
        self.DU = np.ascontiguousarray(self.DU, dtype=np.float64)
        if self.U.shape != self.DU.shape or self.U.ndim != 2:
            raise ValueError("U and DU must be equally shaped 2D arrays")
        if self.U.shape[0] == 0:
            raise ValueError("a dataset needs at least one sample")
        if self.U.shape[1] != self.problem.n_unknowns:
            raise ValueError("sample length does not match the problem")

    @property
    def grid(self):
        return self.problem.grid

    def __len__(self):
        return self.U.shape[0]

    def subset(self, idx):
        idx = np.asarray(idx)
        return OperatorDataset(self.problem, self.stride, self.U[idx], self.DU[idx], self.split, self.seed, self.recipe, dict(self.meta))


def _perturbation(problem, recipe, rng, rp: RecipeParams):
    grid = problem.grid
    if recipe == "polynomial":
        return random_polynomial_field(rng, rp.K, rp.L, grid).values
    if recipe in ("spectral", "gaussian3"):
        power = rp.decay_power if recipe == "spectral" else 3.0
        if isinstance(problem, GrayScottProblem):
            a = spectral_gaussian_field(rng, grid, rp.delta, rp.modes, power).values
            s = spectral_gaussian_field(rng, grid, rp.delta, rp.modes, power).values
            return problem._merge(a, s)
        return spectral_gaussian_field(rng, grid, rp.delta, rp.modes, power).values
    if recipe == "uniform01":
        if not isinstance(problem, GrayScottProblem):
            raise ValueError("uniform01 is the Gray-Scott recipe")
        return problem._merge(uniform01_field(rng, grid).values, uniform01_field(rng, grid).values)
    raise ValueError(f"unknown recipe {recipe!r}")


def _series(problem, x0, depth, cap):
    xs, dxs = [], []
    x = x0
    for _ in range(depth):
        try:
            dx = newton_step_vec(problem, x)
        except SingularJacobianError:
            return None
        if not np.all(np.isfinite(dx)):
            return None
        r = problem.residual_vec(x)
        check = np.max(np.abs(problem.jvp(x, dx) + r))
        if check > 1e-8 * (1.0 + np.max(np.abs(r))):
            return None
        xs.append(x)
        dxs.append(dx)
        x = x + dx
        if np.max(np.abs(x)) > cap:
            return None
    return xs, dxs


def make_dataset(
    problem,
    base,
    recipe: str,
    count: int,
    newton_depth: int = 3,
    seed: int = 0,
    params: RecipeParams | None = None,
    stride: int = 1,
    split: str = "train",
    divergence_cap: float = 1e6,
    threads: int = 1,
) -> OperatorDataset:
    """Generate ``count`` Newton series and flatten them into (u, du) pairs.

    Series are spread round-robin over the base states (``count // len(base)``
    each, remainder to the first ones). Draw j for base b uses the substream
    ``seed ^ (b << 40 | j)``, so the bytes depend only on the arguments and
    not on ``threads``. A series whose steps fail is dropped and redrawn; at
    most ``10 * count`` draws are attempted.
    """
    if count < 1 or newton_depth < 1:
        raise ValueError("need count >= 1 and newton_depth >= 1")
    if recipe not in RECIPES:
        raise ValueError(f"unknown recipe {recipe!r}")
    if split not in SPLITS:
        raise ValueError(f"unknown split {split!r}")
    rp = params or RecipeParams()
    if recipe in ("gaussian3", "uniform01") or base is None:
        # raw recipes start from the boundary lift (zero for the 2D catalog)
        bases = [np.zeros(problem.n_unknowns)]
        if recipe != "uniform01" and not isinstance(problem, GrayScottProblem):
            bases = [problem.to_vector(problem.initial_lift())]
    else:
        # a list means several base states; anything else is one state
        seq = base if isinstance(base, list) else [base]
        bases = [problem.to_vector(b) for b in seq]
    root = Rng(seed)
    per_base = [count // len(bases) + (1 if b < count % len(bases) else 0) for b in range(len(bases))]
    budget = 10 * count
    draws = dropped = 0
    U, DU, pert_l2, pert_h2 = [], [], [], []
    chunk = max(1, threads)
    for b, need in enumerate(per_base):
        got, j = 0, 0
        while got < need:
            if draws >= budget:
                raise DataGenerationError(f"only {len(U) // newton_depth} of {count} series after {draws} draws")
            todo = list(range(j, j + min(chunk, budget - draws)))

            def run(jj, b=b):
                rng = root.substream((b << 40) | jj)
                v = _perturbation(problem, recipe, rng, rp)
                return v, _series(problem, bases[b] + v, newton_depth, divergence_cap)

            results = _pmap(run, todo, threads)
            for v, res in results:
                j += 1
                draws += 1
                if res is None:
                    dropped += 1
                    continue
                U.extend(res[0])
                DU.extend(res[1])
                comps = v.reshape(-1, problem.grid.size) if v.size == problem.grid.size else np.stack(problem.split(v))
                pert_l2.append(float(np.sqrt(np.sum(norm_values(problem.grid, comps, "L2") ** 2))))
                pert_h2.append(float(np.sqrt(np.sum(norm_values(problem.grid, comps, "H2") ** 2))))
                got += 1
                if got == need:
                    break
    meta = {
        "series": count,
        "newton_depth": newton_depth,
        "draws": draws,
        "dropped": dropped,
        "bases": len(bases),
        "perturbation_l2_mean": float(np.mean(pert_l2)),
        "perturbation_l2_std": float(np.std(pert_l2)),
        "perturbation_h2_mean": float(np.mean(pert_h2)),
        "perturbation_h2_std": float(np.std(pert_h2)),
        "K": rp.K,
        "L": rp.L,
        "delta": rp.delta,
        "modes": rp.modes,
        "decay_power": rp.decay_power,
    }
    return OperatorDataset(problem, stride, np.array(U), np.array(DU), split, seed, recipe, meta)


def label_residuals(ds: OperatorDataset, idx=None):
    """Relative step residual ||J(u) du + F(u)||_inf / (1 + ||F(u)||_inf) per sample."""
    idx = np.arange(len(ds)) if idx is None else np.asarray(idx)
    out = []
    for i in idx:
        r = ds.problem.residual_vec(ds.U[i])
        out.append(np.max(np.abs(ds.problem.jvp(ds.U[i], ds.DU[i]) + r)) / (1.0 + np.max(np.abs(r))))
    return np.array(out)


# -- file format -------------------------------------------------------------
# "NODS" | u16 version | u8 problem tag, u8 nparams, f64[nparams] | u8 dim, u32 n
# | u8 stride | u32 sample count | u64 seed | u8 recipe | u8 split
# | per sample: u f64[m], du f64[m]   (little endian, interior storage order)

_DS_MAGIC = b"NODS"


def _read(fh, n):
    data = fh.read(n)
    if len(data) != n:
        raise TruncatedFileError(f"dataset truncated: wanted {n} bytes, got {len(data)}")
    return data


def dataset_bytes(ds: OperatorDataset) -> bytes:
    tag, params = problem_descriptor(ds.problem)
    parts = [
        _DS_MAGIC,
        struct.pack("<H", DATASET_VERSION),
        struct.pack("<BB", tag, len(params)),
        struct.pack(f"<{len(params)}d", *params),
        struct.pack("<BI", ds.grid.dim, ds.grid.n_interior),
        struct.pack("<B", ds.stride),
        struct.pack("<I", len(ds)),
        struct.pack("<Q", ds.seed & 0xFFFFFFFFFFFFFFFF),
        struct.pack("<BB", RECIPES[ds.recipe], SPLITS[ds.split]),
        np.stack([ds.U, ds.DU], axis=1).astype("<f8").tobytes(),
    ]
    return b"".join(parts)


def save_dataset(path, ds: OperatorDataset, sidecar: bool = True):
    with open(path, "wb") as fh:
        fh.write(dataset_bytes(ds))
    if sidecar:
        with open(str(path) + ".meta", "w") as fh:
            for k in sorted(ds.meta):
                fh.write(f"{k}={ds.meta[k]}\n")


def load_dataset(path) -> OperatorDataset:
    with open(path, "rb") as fh:
        if _read(fh, 4) != _DS_MAGIC:
            raise BadMagicError(f"{path}: not a dataset file")
        (version,) = struct.unpack("<H", _read(fh, 2))
        if version != DATASET_VERSION:
            raise VersionMismatchError(f"{path}: dataset version {version}, expected {DATASET_VERSION}")
        tag, npar = struct.unpack("<BB", _read(fh, 2))
        params = struct.unpack(f"<{npar}d", _read(fh, 8 * npar))
        dim, n = struct.unpack("<BI", _read(fh, 5))
        (stride,) = struct.unpack("<B", _read(fh, 1))
        (count,) = struct.unpack("<I", _read(fh, 4))
        (seed,) = struct.unpack("<Q", _read(fh, 8))
        rtag, stag = struct.unpack("<BB", _read(fh, 2))
        problem = problem_from_descriptor(tag, params, Grid(dim, n))
        m = problem.n_unknowns
        body = np.frombuffer(_read(fh, 16 * m * count), dtype="<f8").reshape(count, 2, m)
        if fh.read(1):
            raise FormatError(f"{path}: trailing bytes after {count} samples")
    recipe = {v: k for k, v in RECIPES.items()}[rtag]
    split = {v: k for k, v in SPLITS.items()}[stag]
    meta = {}
    try:
        with open(str(path) + ".meta") as fh:
            for line in fh:
                if "=" in line:
                    k, v = line.rstrip("\n").split("=", 1)
                    meta[k] = v
    except FileNotFoundError:
        pass
    return OperatorDataset(problem, stride, body[:, 0].astype(np.float64), body[:, 1].astype(np.float64), split, seed, recipe, meta)
