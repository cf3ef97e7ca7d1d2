"""Dense DeepONet with hand-written reverse mode, Adam, and a frozen POD trunk.

The operator is

    N(u)(y) = bias0 + sum_k branch_k(sensors(u)) * trunk_k(y)

with tanh hidden layers and linear output layers in both sub-networks.
Arrays are float64 throughout; batches run along the leading axis.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from newtonop import kernels
from newtonop.errors import BadMagicError, FormatError, NewtonOpError, TruncatedFileError, VersionMismatchError
from newtonop.grid import Grid, sensor_indices
from newtonop.rng import Rng


class RankError(NewtonOpError, ValueError):
    """Requested more POD modes than the snapshots support."""


@dataclass
class Mlp:
    weights: list
    biases: list

    def __post_init__(self):
        for a, b in zip(self.weights, self.weights[1:]):
            if b.shape[1] != a.shape[0]:
                raise ValueError("layer dimensions do not chain")
        for w, b in zip(self.weights, self.biases):
            if b.shape != (w.shape[0],):
                raise ValueError("bias does not match its weight matrix")

    @classmethod
    def glorot(cls, sizes, rng: Rng):
        """Glorot-uniform weights, zero biases; draws layer by layer, row-major."""
        ws, bs = [], []
        for fan_in, fan_out in zip(sizes, sizes[1:]):
            lim = np.sqrt(6.0 / (fan_in + fan_out))
            ws.append(rng.uniform_range(-lim, lim, fan_in * fan_out).reshape(fan_out, fan_in))
            bs.append(np.zeros(fan_out))
        return cls(ws, bs)

    @property
    def sizes(self):
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    @property
    def in_dim(self):
        return self.weights[0].shape[1]

    @property
    def out_dim(self):
        return self.weights[-1].shape[0]

    def arrays(self):
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self):
        return Mlp([w.copy() for w in self.weights], [b.copy() for b in self.biases])


def mlp_forward(m: Mlp, x):
    """Affine-tanh chain; returns (output, cache of layer inputs)."""
    h = np.asarray(x, dtype=np.float64)
    if h.shape[-1] != m.in_dim:
        raise ValueError(f"input of width {h.shape[-1]} for an MLP expecting {m.in_dim}")
    cache = [h]
    last = len(m.weights) - 1
    for i, (w, b) in enumerate(zip(m.weights, m.biases)):
        h = h @ w.T + b
        if i < last:
            h = np.tanh(h)
        cache.append(h)
    return h, cache


def mlp_backward(m: Mlp, cache, dout):
    """Gradients [dW0, db0, dW1, ...] of <dout, output>, and the input cotangent."""
    g = np.asarray(dout, dtype=np.float64)
    grads = [None] * (2 * len(m.weights))
    last = len(m.weights) - 1
    for i in range(last, -1, -1):
        if i < last:
            g = g * (1.0 - cache[i + 1] ** 2)
        inp = cache[i]
        if g.ndim == 1:
            grads[2 * i] = np.outer(g, inp)
            grads[2 * i + 1] = g.copy()
        else:
            grads[2 * i] = g.T @ inp
            grads[2 * i + 1] = g.sum(axis=0)
        g = g @ m.weights[i]
    return grads, g


@dataclass
class PodBasis:
    modes: np.ndarray  # (p, N), orthonormal in the cell-volume weighted inner product
    mean: np.ndarray  # (N,)
    eigenvalues: np.ndarray  # (p,)
    total_energy: float
    cell_volume: float

    @property
    def p(self):
        return self.modes.shape[0]

    def project(self, samples):
        """Coefficients of (samples - mean) on the modes."""
        d = np.atleast_2d(samples) - self.mean
        return self.cell_volume * d @ self.modes.T

    def reconstruct(self, coeffs):
        return self.mean + np.atleast_2d(coeffs) @ self.modes


def compute_pod_basis(samples, p: int, cell_volume: float = 1.0) -> PodBasis:
    """POD by the method of snapshots.

    Gram matrix G_ab = h^dim <s_a - mean, s_b - mean>, eigenpairs by cyclic
    Jacobi, modes = normalised snapshot combinations.
    """
    S = np.array([getattr(s, "values", s) for s in samples], dtype=np.float64)
    if S.ndim != 2 or S.shape[0] < p:
        raise ValueError(f"need at least p={p} snapshots, got {S.shape[0]}")
    mean = S.mean(axis=0)
    D = S - mean
    G = cell_volume * (D @ D.T)
    lam, V = kernels.jacobi_eigh(G)
    order = np.argsort(-lam, kind="stable")
    lam, V = lam[order], V[:, order]
    lam_max = lam[0] if lam.size else 0.0
    if p < 1 or lam_max <= 0 or lam[p - 1] < 1e-12 * lam_max:
        raise RankError(f"p={p} exceeds the numerical rank of the snapshots")
    modes = (V[:, :p].T @ D) / np.sqrt(lam[:p])[:, None]
    return PodBasis(modes, mean, lam[:p].copy(), float(np.sum(np.clip(lam, 0.0, None))), cell_volume)


@dataclass
class DeepONetParams:
    branch: Mlp
    trunk: object  # Mlp or PodBasis
    bias0: np.ndarray = field(default_factory=lambda: np.zeros(1))
    bias0_trainable: bool = True

    def __post_init__(self):
        self.bias0 = np.asarray(self.bias0, dtype=np.float64).reshape(1)
        tp = self.trunk.p if isinstance(self.trunk, PodBasis) else self.trunk.out_dim
        if tp != self.branch.out_dim:
            raise ValueError(f"branch rank {self.branch.out_dim} != trunk rank {tp}")

    @property
    def p(self):
        return self.branch.out_dim

    @property
    def pod(self):
        return isinstance(self.trunk, PodBasis)

    def trainable(self):
        """Trainable arrays in a fixed order: branch, trunk (MLP only), bias0."""
        out = self.branch.arrays()
        if not self.pod:
            out += self.trunk.arrays()
        if self.bias0_trainable:
            out.append(self.bias0)
        return out

    def copy(self):
        trunk = self.trunk if self.pod else self.trunk.copy()
        return DeepONetParams(self.branch.copy(), trunk, self.bias0.copy(), self.bias0_trainable)


def deeponet_forward(P: DeepONetParams, sensors, coords=None, return_cache=False):
    """Outputs of shape (batch, n_points), or (n_points,) for a single sensor vector.

    With a POD trunk the output lives on the basis' own points: ``coords``
    must be None (or have one row per mode entry).
    """
    s = np.asarray(sensors, dtype=np.float64)
    single = s.ndim == 1
    s2 = s[None, :] if single else s
    if s2.shape[1] != P.branch.in_dim:
        raise ValueError(f"{s2.shape[1]} sensors for a branch expecting {P.branch.in_dim}")
    b, bcache = mlp_forward(P.branch, s2)
    if P.pod:
        if coords is not None and np.shape(coords)[0] != P.trunk.modes.shape[1]:
            raise ValueError("a POD trunk only evaluates at its own grid points")
        t, tcache = P.trunk.modes.T, None
        out = b @ P.trunk.modes + P.trunk.mean + P.bias0[0]
    else:
        if coords is None:
            raise ValueError("an MLP trunk needs query coordinates")
        t, tcache = mlp_forward(P.trunk, coords)
        out = b @ t.T + P.bias0[0]
    out = out[0] if single else out
    if return_cache:
        return out, (s2, b, bcache, t, tcache, single)
    return out


def deeponet_backward(P: DeepONetParams, cache, cotangent):
    """Gradient of sum(cotangent * output) w.r.t. ``P.trainable()``, in that order."""
    s2, b, bcache, t, tcache, single = cache
    c = np.asarray(cotangent, dtype=np.float64)
    c = c[None, :] if single else c
    if c.shape != (b.shape[0], t.shape[0]):
        raise ValueError(f"cotangent shape {c.shape} does not match output {(b.shape[0], t.shape[0])}")
    db = c @ t
    grads, _ = mlp_backward(P.branch, bcache, db)
    if not P.pod:
        dt = c.T @ b
        tg, _ = mlp_backward(P.trunk, tcache, dt)
        grads += tg
    if P.bias0_trainable:
        grads.append(np.array([c.sum()]))
    return grads


def init_deeponet(n_sensors, coord_dim, p=40, width=40, depth=2, trunk_depth=None, seed=0, pod=None, bias0_trainable=True):
    """Glorot-initialised DeepONet; ``pod`` replaces the trunk MLP when given."""
    rng = Rng(seed)
    branch = Mlp.glorot([n_sensors] + [width] * depth + [p], rng)
    if pod is not None:
        trunk = pod
    else:
        td = depth if trunk_depth is None else trunk_depth
        trunk = Mlp.glorot([coord_dim] + [width] * td + [p], rng)
    return DeepONetParams(branch, trunk, np.zeros(1), bias0_trainable)


@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0

    @classmethod
    def for_params(cls, params, lr=1e-4, weight_decay=0.0, beta1=0.9, beta2=0.999, eps=1e-8):
        return cls([np.zeros_like(a) for a in params], [np.zeros_like(a) for a in params], 0, lr, beta1, beta2, eps, weight_decay)


def adam_step(state: AdamState, params, grads):
    """Decoupled weight decay, then the bias-corrected Adam update; updates in place."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("parameter, gradient and moment lists differ in length")
    state.step += 1
    c1 = 1.0 - state.beta1 ** state.step
    c2 = 1.0 - state.beta2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if state.weight_decay:
            p -= state.lr * state.weight_decay * p
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


class NeuralOperator:
    """A DeepONet bound to a problem layout: sensors in, full Newton step out.

    Output points are the interior grid nodes in storage order; systems with
    several species append a species index to the trunk coordinates.
    """

    def __init__(self, params: DeepONetParams, grid: Grid, ncomp: int = 1, stride: int = 1):
        self.params = params
        self.grid = grid
        self.ncomp = ncomp
        self.stride = stride
        idx = sensor_indices(grid, stride)
        self.sensor_idx = (idx[:, None] * ncomp + np.arange(ncomp)[None, :]).ravel()
        self.points = output_points(grid, ncomp)
        # frozen affine map applied to sensor values before the branch
        self.in_shift = np.zeros(self.sensor_idx.size)
        self.in_scale = np.ones(self.sensor_idx.size)

    @classmethod
    def create(cls, problem, stride=1, p=40, width=40, depth=2, trunk_depth=None, seed=0, pod=None, bias0_trainable=True):
        ncomp = problem.n_unknowns // problem.grid.size
        n_sens = sensor_indices(problem.grid, stride).size * ncomp
        coord_dim = problem.grid.dim + (1 if ncomp > 1 else 0)
        P = init_deeponet(n_sens, coord_dim, p, width, depth, trunk_depth, seed, pod, bias0_trainable)
        return cls(P, problem.grid, ncomp, stride)

    @property
    def n_outputs(self):
        return self.grid.size * self.ncomp

    def trainable(self):
        return self.params.trainable()

    def sensors(self, U):
        s = np.asarray(U, dtype=np.float64)[..., self.sensor_idx]
        return (s - self.in_shift) / self.in_scale

    def fit_input_normalization(self, U, floor=1e-3):
        """Standardise each sensor by its mean and std over ``U`` (std floored)."""
        s = np.asarray(U, dtype=np.float64)[..., self.sensor_idx]
        self.in_shift = s.mean(axis=0)
        self.in_scale = np.maximum(s.std(axis=0), floor)

    def forward(self, U, return_cache=False):
        coords = None if self.params.pod else self.points
        return deeponet_forward(self.params, self.sensors(U), coords, return_cache)

    def backward(self, cache, cotangent):
        return deeponet_backward(self.params, cache, cotangent)

    def predict(self, U):
        return self.forward(U)

    def copy(self):
        out = NeuralOperator(self.params.copy(), self.grid, self.ncomp, self.stride)
        out.in_shift, out.in_scale = self.in_shift.copy(), self.in_scale.copy()
        return out


def output_points(grid: Grid, ncomp: int = 1):
    pts = grid.coords()
    if ncomp == 1:
        return pts
    rep = np.repeat(pts, ncomp, axis=0)
    comp = np.tile(np.arange(ncomp, dtype=np.float64), grid.size)[:, None]
    return np.hstack([rep, comp])


# -- checkpoint file -----------------------------------------------------------
# "NONN" | u16 version | u8 dim, u32 n, u8 ncomp, u8 stride | u8 trunk kind (0 mlp, 1 pod)
# | u8 bias0 trainable | branch sizes (u8 count, u32[count]) | trunk: sizes or (u32 p, u32 N)
# | f64 sensor shift and scale | f64 parameters | u8 adam flag [u64 step, f64 lr b1 b2 eps wd, m arrays, v arrays]

_NN_MAGIC = b"NONN"
CHECKPOINT_VERSION = 1


def _pack_arrays(arrays):
    return b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays)


def checkpoint_bytes(model: NeuralOperator, adam: AdamState | None = None) -> bytes:
    P = model.params
    out = [_NN_MAGIC, struct.pack("<H", CHECKPOINT_VERSION)]
    out.append(struct.pack("<BIBB", model.grid.dim, model.grid.n_interior, model.ncomp, model.stride))
    out.append(struct.pack("<BB", 1 if P.pod else 0, 1 if P.bias0_trainable else 0))
    bs = P.branch.sizes
    out.append(struct.pack(f"<B{len(bs)}I", len(bs), *bs))
    if P.pod:
        out.append(struct.pack("<II", P.trunk.p, P.trunk.modes.shape[1]))
        out.append(struct.pack("<dd", P.trunk.total_energy, P.trunk.cell_volume))
    else:
        ts = P.trunk.sizes
        out.append(struct.pack(f"<B{len(ts)}I", len(ts), *ts))
    arrays = [model.in_shift, model.in_scale] + P.branch.arrays()
    if P.pod:
        arrays += [P.trunk.modes, P.trunk.mean, P.trunk.eigenvalues]
    else:
        arrays += P.trunk.arrays()
    arrays.append(P.bias0)
    out.append(_pack_arrays(arrays))
    if adam is None:
        out.append(struct.pack("<B", 0))
    else:
        out.append(struct.pack("<B", 1))
        out.append(struct.pack("<Q5d", adam.step, adam.lr, adam.beta1, adam.beta2, adam.eps, adam.weight_decay))
        out.append(_pack_arrays(adam.m + adam.v))
    return b"".join(out)


def save_checkpoint(path, model, adam=None):
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(model, adam))


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.data):
            raise TruncatedFileError("checkpoint truncated")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self, shape):
        n = int(np.prod(shape))
        return np.frombuffer(self.take(8 * n), dtype="<f8").astype(np.float64).reshape(shape)

    def sizes(self):
        (k,) = self.unpack("<B")
        return list(self.unpack(f"<{k}I"))


def _mlp_from(reader, sizes):
    ws, bs = [], []
    for a, b in zip(sizes, sizes[1:]):
        ws.append(reader.array((b, a)))
        bs.append(reader.array((b,)))
    return Mlp(ws, bs)


def load_checkpoint(path):
    """Returns (NeuralOperator, AdamState or None)."""
    with open(path, "rb") as fh:
        r = _Reader(fh.read())
    if r.take(4) != _NN_MAGIC:
        raise BadMagicError(f"{path}: not a checkpoint")
    (version,) = r.unpack("<H")
    if version != CHECKPOINT_VERSION:
        raise VersionMismatchError(f"{path}: checkpoint version {version}")
    dim, n, ncomp, stride = r.unpack("<BIBB")
    pod_flag, b0_flag = r.unpack("<BB")
    bsizes = r.sizes()
    if pod_flag:
        p, npts = r.unpack("<II")
        total, vol = r.unpack("<dd")
    else:
        tsizes = r.sizes()
    shift = r.array((bsizes[0],))
    scale = r.array((bsizes[0],))
    branch = _mlp_from(r, bsizes)
    if pod_flag:
        modes = r.array((p, npts))
        mean = r.array((npts,))
        eig = r.array((p,))
        trunk = PodBasis(modes, mean, eig, total, vol)
    else:
        trunk = _mlp_from(r, tsizes)
    bias0 = r.array((1,))
    P = DeepONetParams(branch, trunk, bias0, bool(b0_flag))
    model = NeuralOperator(P, Grid(dim, n), ncomp, stride)
    model.in_shift, model.in_scale = shift, scale
    (flag,) = r.unpack("<B")
    adam = None
    if flag:
        step, lr, b1, b2, eps, wd = r.unpack("<Q5d")
        shapes = [a.shape for a in P.trainable()]
        m = [r.array(s) for s in shapes]
        v = [r.array(s) for s in shapes]
        adam = AdamState(m, v, step, lr, b1, b2, eps, wd)
    if r.pos != len(r.data):
        raise FormatError(f"{path}: trailing bytes in checkpoint")
    return model, adam
