"""Loss functions, the minibatch training loop and evaluation metrics.

All losses return ``(value, grads)`` with ``grads`` aligned to
``model.trainable()``. Model outputs live on interior nodes only, so the
zero-boundary condition on a Newton step holds by construction.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from newtonop.errors import ConfigError, TrainingDivergedError
from newtonop.grid import norm_values
from newtonop.neural import AdamState, adam_step
from newtonop.rng import Rng

LOSS_MODES = ("supervised", "unsupervised", "combined")


@dataclass
class TrainConfig:
    loss_mode: str = "combined"
    lam: float = 0.01
    lr: float = 1e-4
    weight_decay: float = 1e-6
    batch_size: int = 50
    epochs: int = 10
    max_steps: int | None = None
    seed: int = 0
    eval_every: int = 1
    # divide the combined loss by two (the equal-weight variant uses lam=1 and halve=True)
    halve: bool = False

    def __post_init__(self):
        if self.loss_mode not in LOSS_MODES:
            raise ConfigError(f"loss_mode must be one of {LOSS_MODES}, got {self.loss_mode!r}")
        if not self.lam >= 0:
            raise ConfigError("lambda must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.epochs < 0 or self.eval_every < 1:
            raise ConfigError("epochs must be >= 0 and eval_every >= 1")
        if self.max_steps is not None and self.max_steps < 0:
            raise ConfigError("max_steps must be >= 0")


@dataclass
class Physics:
    """Residuals and reaction derivatives of a set of inputs, computed once."""

    U: np.ndarray
    F: np.ndarray
    diag: np.ndarray

    @classmethod
    def of(cls, problem, U):
        U = np.asarray(U, dtype=np.float64)
        return cls(U, problem.residual_vec(U), problem.jacobian_diag_vec(U))

    def take(self, idx):
        return Physics(self.U[idx], self.F[idx], self.diag[..., idx, :])

    def __len__(self):
        return self.U.shape[0]


def mse_loss(model, U, DU):
    U = np.atleast_2d(U)
    DU = np.atleast_2d(DU)
    if DU.shape != U.shape:
        raise ValueError("labels missing or misshapen")
    out, cache = model.forward(U, return_cache=True)
    diff = out - DU
    denom = diff.size
    loss = float(np.sum(diff * diff) / denom)
    return loss, model.backward(cache, (2.0 / denom) * diff)


def newton_loss(model, phys: Physics, problem):
    """Mean of |J(u) N(u) + F(u)|^2 over samples and grid points."""
    out, cache = model.forward(phys.U, return_cache=True)
    r = problem.jvp(phys.U, out, phys.diag) + phys.F
    denom = r.size
    loss = float(np.sum(r * r) / denom)
    cot = (2.0 / denom) * problem.jtvp(phys.U, r, phys.diag)
    return loss, model.backward(cache, cot)


def combined_loss(model, sup, phys: Physics | None, problem, lam=0.01, halve=False):
    """lam * mse(sup stream) + newton(unsupervised stream), optionally halved.

    ``sup`` is a ``(U, DU)`` pair or None; either stream may be empty but not both.
    """
    has_sup = sup is not None and len(sup[0]) > 0
    has_uns = phys is not None and len(phys) > 0
    if not (has_sup or has_uns):
        raise ValueError("both loss streams are empty")
    total, grads = 0.0, None
    if has_sup:
        l, g = mse_loss(model, *sup)
        total, grads = lam * l, [lam * a for a in g]
    if has_uns:
        l, g = newton_loss(model, phys, problem)
        total += l
        grads = g if grads is None else [a + b for a, b in zip(grads, g)]
    if halve:
        total *= 0.5
        grads = [0.5 * a for a in grads]
    return total, grads


@dataclass
class Metrics:
    l2_abs: float
    l2_rel: float
    h1_abs: float
    h1_rel: float
    h2_abs: float
    h2_rel: float
    mse: float
    newton: float


def _field_norms(problem, V, kind):
    """Per-sample norms of storage vectors; species combine in l2."""
    size = problem.grid.size
    if V.shape[-1] == size:
        return norm_values(problem.grid, V, kind)
    comps = np.stack(problem.split(V))
    return np.sqrt(np.sum(norm_values(problem.grid, comps, kind) ** 2, axis=0))


def _predict_chunks(model, U, chunk=1000):
    return np.concatenate([model.forward(U[i:i + chunk]) for i in range(0, len(U), chunk)])


def evaluate(model, dataset, problem=None, phys: Physics | None = None) -> Metrics:
    """Mean per-sample absolute and relative L2/H1/H2 step errors plus both losses."""
    problem = problem or dataset.problem
    U, DU = dataset.U, dataset.DU
    pred = _predict_chunks(model, U)
    err = pred - DU
    vals = {}
    tiny = np.finfo(float).tiny
    for kind in ("L2", "H1", "H2"):
        e = _field_norms(problem, err, kind)
        ref = _field_norms(problem, DU, kind)
        vals[kind.lower() + "_abs"] = float(np.mean(e))
        vals[kind.lower() + "_rel"] = float(np.mean(e / np.maximum(ref, tiny)))
    phys = phys or Physics.of(problem, U)
    r = problem.jvp(U, pred, phys.diag) + phys.F
    return Metrics(mse=float(np.mean(err * err)), newton=float(np.mean(r * r)), **vals)


@dataclass
class History:
    rows: list = field(default_factory=list)

    COLUMNS = ("epoch", "step", "train_mse", "train_newton", "test_l2_rel", "test_h1_rel", "test_h2_rel", "test_mse", "test_newton")

    def column(self, name):
        return np.array([r[name] for r in self.rows])

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.COLUMNS)
            for r in self.rows:
                w.writerow([r["epoch"], r["step"]] + [repr(float(r[c])) for c in self.COLUMNS[2:]])


def _permutation(rng: Rng, n):
    return np.argsort(rng.uniform(n), kind="stable")


def _batches(n, k, perm):
    """Split ``perm`` (length n) into k consecutive chunks of size ceil(n/k)."""
    size = math.ceil(n / k) if n else 0
    return [perm[i * size:(i + 1) * size] for i in range(k)]


def train(model, problem, cfg: TrainConfig, sup=None, unsup=None, test=None, on_eval=None, adam=None):
    """Adam minibatch training; returns ``(model, history, adam_state)``.

    ``sup`` and ``test`` are labelled datasets; ``unsup`` is any dataset whose
    labels are ignored. In unsupervised mode without ``unsup`` the inputs of
    ``sup`` are used. ``on_eval(epoch, model, adam)`` runs after each record.
    """
    mode = cfg.loss_mode
    if mode in ("supervised", "combined") and sup is None:
        raise ConfigError(f"{mode} training needs a labelled dataset")
    if mode == "unsupervised" and unsup is None:
        unsup = sup
    if mode == "supervised":
        unsup = None
    if unsup is None and sup is None:
        raise ConfigError("no training data")
    for ds in (sup, unsup, test):
        if ds is not None and ds.U.shape[1] != problem.n_unknowns:
            raise ConfigError("dataset does not match the problem grid")

    params = model.trainable()
    adam = adam or AdamState.for_params(params, cfg.lr, cfg.weight_decay)
    phys_u = Physics.of(problem, unsup.U) if unsup is not None else None
    phys_eval = phys_u if phys_u is not None else Physics.of(problem, sup.U)
    phys_test = Physics.of(problem, test.U) if test is not None else None
    use_sup = sup if mode != "unsupervised" else None
    n_s = len(use_sup) if use_sup is not None else 0
    n_u = len(phys_u) if phys_u is not None else 0
    steps_per_epoch = max(1, math.ceil((n_s + n_u) / cfg.batch_size))
    rng = Rng(cfg.seed)
    hist = History()
    step = 0

    def record(epoch):
        row = {"epoch": epoch, "step": step}
        row["train_mse"] = float(np.mean((_predict_chunks(model, sup.U) - sup.DU) ** 2)) if sup is not None else math.nan
        pred = _predict_chunks(model, phys_eval.U)
        r = problem.jvp(phys_eval.U, pred, phys_eval.diag) + phys_eval.F
        row["train_newton"] = float(np.mean(r * r))
        if test is not None:
            m = evaluate(model, test, problem, phys_test)
            row.update(test_l2_rel=m.l2_rel, test_h1_rel=m.h1_rel, test_h2_rel=m.h2_rel, test_mse=m.mse, test_newton=m.newton)
        else:
            row.update({c: math.nan for c in History.COLUMNS[4:]})
        hist.rows.append(row)
        if on_eval is not None:
            on_eval(epoch, model, adam)

    record(0)
    done = cfg.max_steps is not None and cfg.max_steps == 0
    epoch = 0
    while not done and epoch < cfg.epochs:
        epoch += 1
        sb = _batches(n_s, steps_per_epoch, _permutation(rng, n_s)) if n_s else [None] * steps_per_epoch
        ub = _batches(n_u, steps_per_epoch, _permutation(rng, n_u)) if n_u else [None] * steps_per_epoch
        for bs, bu in zip(sb, ub):
            s_stream = (use_sup.U[bs], use_sup.DU[bs]) if bs is not None else None
            u_stream = phys_u.take(bu) if bu is not None else None
            if mode == "supervised":
                loss, grads = mse_loss(model, *s_stream)
            elif mode == "unsupervised":
                loss, grads = newton_loss(model, u_stream, problem)
            else:
                loss, grads = combined_loss(model, s_stream, u_stream, problem, cfg.lam, cfg.halve)
            if not (math.isfinite(loss) and all(np.all(np.isfinite(g)) for g in grads)):
                raise TrainingDivergedError(f"non-finite loss at step {step}", last_good=model.copy(), history=hist)
            adam_step(adam, params, grads)
            step += 1
            if cfg.max_steps is not None and step >= cfg.max_steps:
                done = True
                break
        if done or epoch % cfg.eval_every == 0 or epoch == cfg.epochs:
            record(epoch)
    return model, hist, adam


def config_dict(cfg: TrainConfig):
    return asdict(cfg)
