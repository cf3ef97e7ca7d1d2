"""Command-line entry point: solve, gen-data, train, eval, iterate, bench.

Exit codes: 0 ok, 2 config error, 3 I/O or file-format error, 4 numerical
failure. Errors are reported on stderr as one ``ClassName: message`` line.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import os
import platform
import sys

import numpy as np

from newtonop import __version__, kernels
from newtonop.config import load_config, override
from newtonop.datagen import RecipeParams, load_dataset, make_dataset, save_dataset, uniform01_field
from newtonop.errors import ConfigError, GridMismatchError, NumericalError, TrainingDivergedError
from newtonop.grid import load_gridfunction, save_gridfunction
from newtonop.neural import NeuralOperator, compute_pod_basis, load_checkpoint, save_checkpoint
from newtonop.newton import NewtonConfig, state_norm, sweep, write_pgm, write_trajectory_csv
from newtonop.problems import GrayScottProblem, make_problem
from newtonop.rng import Rng
from newtonop.surrogate import bench, operator_iterate, write_bench_csv
from newtonop.training import History, TrainConfig, evaluate, train


# -- config to objects ---------------------------------------------------------


def problem_from_config(cfg):
    n = cfg["n"] or None
    params = {k: cfg[k] for k in ("s", "D_A", "D_S", "mu", "rho")}
    return make_problem(cfg["problem"], n, **params)


def _bump(problem, coeff_i=1, coeff_j=1):
    """sin(i pi x) [sin(j pi y)] as a storage vector (first species only)."""
    g = problem.grid
    if g.dim == 1:
        v = np.sin(coeff_i * np.pi * g.axis())
    else:
        x, y = g.mesh()
        v = (np.sin(coeff_i * np.pi * x) * np.sin(coeff_j * np.pi * y)).ravel()
    if isinstance(problem, GrayScottProblem):
        return problem._merge(v, np.zeros_like(v))
    return v


def parse_guesses(problem, spec):
    """Initial guesses from a '+'-joined spec.

    Terms: ``lift``; ``sine:lo:hi:step`` (lift + a * sine bump for a in lo..hi);
    ``modes:M:amp`` (lift +- amp * mode (i, j), 1 <= i, j <= M);
    ``random01:N:seed`` (fields uniform in [0, 1]).
    """
    lift = problem.to_vector(problem.initial_lift())
    out = []
    for term in spec.split("+"):
        parts = term.strip().split(":")
        kind, args = parts[0], parts[1:]
        try:
            if kind == "lift" and not args:
                out.append(lift)
            elif kind == "sine" and len(args) == 3:
                lo, hi, step = (float(a) for a in args)
                if step <= 0:
                    raise ValueError
                bump = _bump(problem)
                for a in np.arange(lo, hi + 0.5 * step, step):
                    out.append(lift + a * bump)
            elif kind == "modes" and len(args) == 2:
                M, amp = int(args[0]), float(args[1])
                js = range(1, M + 1) if problem.grid.dim == 2 else [1]
                for i in range(1, M + 1):
                    for j in js:
                        for sign in (1.0, -1.0):
                            out.append(lift + sign * amp * _bump(problem, i, j))
            elif kind == "random01" and len(args) == 2:
                count, seed = int(args[0]), int(args[1])
                root = Rng(seed)
                for k in range(count):
                    rng = root.substream(k)
                    if isinstance(problem, GrayScottProblem):
                        a = uniform01_field(rng, problem.grid).values
                        out.append(problem._merge(a, uniform01_field(rng, problem.grid).values))
                    else:
                        out.append(uniform01_field(rng, problem.grid).values)
            else:
                raise ValueError
        except ValueError:
            raise ConfigError(f"bad guess term {term!r}") from None
    if not out:
        raise ConfigError("no initial guesses")
    return [problem.from_vector(v) for v in out]


def newton_config(cfg):
    return NewtonConfig(cfg["tol_residual"], cfg["max_iter"], cfg["divergence_cap"], cfg["damping"])


def run_sweep(problem, cfg, threads):
    return sweep(problem, parse_guesses(problem, cfg["guesses"]), newton_config(cfg), cfg["dedup_tol"], threads)


def resolve_bases(problem, cfg, threads):
    """``lift``, ``sweep`` (all solutions), ``sweep:K``, or comma-separated state files."""
    spec = cfg["base"]
    if spec == "lift":
        return None
    if spec == "sweep" or spec.startswith("sweep:"):
        sols = run_sweep(problem, cfg, threads).solutions
        if not sols:
            raise NumericalError("no guess converged; cannot build dataset bases")
        if spec == "sweep":
            return list(sols)
        try:
            k = int(spec.split(":", 1)[1])
        except ValueError:
            raise ConfigError(f"bad base {spec!r}") from None
        if not 0 <= k < len(sols):
            raise NumericalError(f"base index {k} but only {len(sols)} solutions found")
        return sols[k]
    states = []
    for path in spec.split(","):
        u = load_gridfunction(path.strip())
        if u.grid != problem.grid:
            raise GridMismatchError(f"{path}: state on {u.grid}, problem on {problem.grid}")
        states.append(problem.from_vector(u.values))
    return states


def recipe_params(cfg):
    return RecipeParams(cfg["K"], cfg["L"], cfg["delta"], cfg["modes"], cfg["decay_power"])


def train_config(cfg):
    return TrainConfig(
        loss_mode=cfg["mode"],
        lam=cfg["lambda"],
        lr=cfg["lr"],
        weight_decay=cfg["weight_decay"],
        batch_size=cfg["batch_size"],
        epochs=cfg["epochs"],
        max_steps=cfg["max_steps"] or None,
        seed=cfg["seed"],
        eval_every=cfg["eval_every"],
        halve=cfg["halve"],
    )


def build_model(problem, cfg, stride, sup, unsup=None):
    pod = None
    if cfg["trunk"] == "pod":
        pod = compute_pod_basis(sup.DU, cfg["p"], problem.grid.cell_volume)
    elif cfg["trunk"] != "mlp":
        raise ConfigError(f"trunk must be mlp or pod, got {cfg['trunk']!r}")
    model = NeuralOperator.create(
        problem, stride, cfg["p"], cfg["width"], cfg["depth"], cfg["trunk_depth"], cfg["model_seed"], pod, cfg["bias0_trainable"]
    )
    if cfg["normalize_inputs"]:
        U = sup.U if unsup is None else np.vstack([sup.U, unsup.U])
        model.fit_input_normalization(U)
    return model


def check_model_grid(model, problem):
    if model.grid != problem.grid or model.n_outputs != problem.n_unknowns:
        raise GridMismatchError(f"model on {model.grid}, problem on {problem.grid}")


# -- artifacts -----------------------------------------------------------------


def sha256(path):
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def write_manifest(path, command, cfg, results=None):
    """Config echo, versions and results; no timestamps so reruns compare equal."""
    lines = [
        f"command={command}",
        f"newtonop={__version__}",
        f"numpy={np.__version__}",
        f"python={platform.python_version()}",
        f"backend={kernels.BACKEND}",
        "[config]",
    ]
    text = "\n".join(lines) + "\n" + (cfg.echo() if cfg is not None else "")
    if results:
        text += "[results]\n" + "".join(f"{k}={v}\n" for k, v in results.items())
    with open(path, "w") as fh:
        fh.write(text)


def _state_csv(path, problem, state):
    g = problem.grid
    cols = ["x"] if g.dim == 1 else ["x", "y"]
    coords = g.coords()
    if isinstance(problem, GrayScottProblem):
        a, s = state
        vals = np.stack([a.values, s.values], axis=1)
        cols += ["A", "S"]
    else:
        vals = state.values[:, None]
        cols += ["u"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for c, v in zip(coords, vals):
            w.writerow([repr(float(t)) for t in c] + [repr(float(t)) for t in v])


def _save_state(out, stem, problem, state):
    if isinstance(problem, GrayScottProblem):
        save_gridfunction(os.path.join(out, f"{stem}_A.nogf"), state[0])
        save_gridfunction(os.path.join(out, f"{stem}_S.nogf"), state[1])
        first = state[0]
    else:
        save_gridfunction(os.path.join(out, f"{stem}.nogf"), state)
        first = state
    _state_csv(os.path.join(out, f"{stem}.csv"), problem, state)
    if problem.grid.dim == 2:
        write_pgm(os.path.join(out, f"{stem}.pgm"), first.values.reshape(problem.grid.shape))


# -- subcommands ---------------------------------------------------------------


def cmd_solve(args, cfg):
    problem = problem_from_config(cfg)
    res = run_sweep(problem, cfg, args.threads)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "sweep_report.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["guess", "status", "iterations", "residual_linf", "tol_effective", "solution"])
        for i, (t, a) in enumerate(zip(res.trajectories, res.assignment)):
            w.writerow([i, t.status.value, t.iterations, repr(t.residual_norms[-1]) if t.residual_norms else "", repr(t.tol_effective), "" if a is None else a])
    results = {"guesses": len(res.trajectories), "solutions": len(res.solutions)}
    for k, sol in enumerate(res.solutions):
        _save_state(args.out, f"solution_{k}", problem, sol)
        first = next(t for t, a in zip(res.trajectories, res.assignment) if a == k)
        write_trajectory_csv(os.path.join(args.out, f"trajectory_{k}.csv"), problem, first)
        results[f"solution_{k}_l2"] = repr(state_norm(problem, sol))
        results[f"solution_{k}_residual_linf"] = repr(first.residual_norms[-1])
    write_manifest(os.path.join(args.out, "manifest.txt"), "solve", cfg, results)
    print(f"{len(res.solutions)} distinct solutions from {len(res.trajectories)} guesses")
    if not res.solutions:
        raise NumericalError("no guess converged")


def cmd_gen_data(args, cfg):
    if args.count is None and args.role != "sup":
        cfg["count"] = cfg[f"{args.role}_count"]
        if cfg["count"] < 1:
            raise ConfigError(f"{args.role}_count is not set")
    if args.role == "test" and args.split is None:
        cfg["split"] = "test"
    problem = problem_from_config(cfg)
    bases = resolve_bases(problem, cfg, args.threads)
    ds = make_dataset(
        problem, bases, cfg["recipe"], cfg["count"], cfg["newton_depth"], cfg["seed"], recipe_params(cfg),
        cfg["stride"], cfg["split"], cfg["divergence_cap"], args.threads,
    )
    out_dir = os.path.dirname(os.path.abspath(args.out))
    os.makedirs(out_dir, exist_ok=True)
    save_dataset(args.out, ds)
    results = {"samples": len(ds), "sha256": sha256(args.out)}
    results.update({k: ds.meta[k] for k in ("draws", "dropped")})
    write_manifest(args.out + ".manifest", "gen-data", cfg, results)
    print(f"{len(ds)} samples -> {args.out}")


def cmd_train(args, cfg):
    sup = load_dataset(args.data)
    problem = sup.problem
    unsup = load_dataset(args.data_unsup) if args.data_unsup else None
    test = load_dataset(args.test) if args.test else None
    for ds in (unsup, test):
        if ds is not None and ds.U.shape[1] != problem.n_unknowns:
            raise GridMismatchError("datasets live on different grids")
    tc = train_config(cfg)
    model = build_model(problem, cfg, sup.stride, sup, unsup)
    os.makedirs(args.out, exist_ok=True)

    def on_eval(epoch, m, adam):
        save_checkpoint(os.path.join(args.out, f"checkpoint_{epoch:05d}.nn"), m, adam)

    try:
        model, hist, adam = train(model, problem, tc, sup=sup, unsup=unsup, test=test, on_eval=on_eval)
    except TrainingDivergedError as e:
        if e.last_good is not None:
            save_checkpoint(os.path.join(args.out, "model_last_good.nn"), e.last_good)
        if isinstance(e.history, History):
            e.history.write_csv(os.path.join(args.out, "history.csv"))
        raise
    save_checkpoint(os.path.join(args.out, "model.nn"), model, adam)
    hist.write_csv(os.path.join(args.out, "history.csv"))
    last = hist.rows[-1]
    results = {k: repr(float(last[k])) for k in History.COLUMNS[2:]}
    results["steps"] = last["step"]
    results["model_sha256"] = sha256(os.path.join(args.out, "model.nn"))
    write_manifest(os.path.join(args.out, "manifest.txt"), "train", cfg, results)
    print(f"trained {last['step']} steps; test_l2_rel={last['test_l2_rel']:.4g}")


def cmd_eval(args, cfg):
    model, _ = load_checkpoint(args.model)
    ds = load_dataset(args.data)
    check_model_grid(model, ds.problem)
    m = evaluate(model, ds, ds.problem)
    text = "".join(f"{k}={v!r}\n" for k, v in vars(m).items())
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    sys.stdout.write(text)


def _initial_states(ds):
    depth = int(float(ds.meta.get("newton_depth", 1)))
    return ds.U[::depth]


def cmd_iterate(args, cfg):
    problem = problem_from_config(cfg)
    model, _ = load_checkpoint(args.model)
    check_model_grid(model, problem)
    if args.data:
        U0 = _initial_states(load_dataset(args.data))
    elif args.init:
        U0 = np.array([problem.to_vector(problem.from_vector(load_gridfunction(p).values)) for p in args.init.split(",")])
    else:
        raise ConfigError("iterate needs --data or --init")
    U0 = U0[: args.count]
    sols = run_sweep(problem, cfg, args.threads).solutions if cfg["guesses"] != "lift" else []
    tail = cfg["hybrid_tail"]
    os.makedirs(args.out, exist_ok=True)
    trajs = []
    for k, u0 in enumerate(U0):
        tr = operator_iterate(model, problem, u0, cfg["steps"], tail, sols, cfg["divergence_cap"])
        tr.write_csv(os.path.join(args.out, f"trajectory_{k:04d}.csv"))
        trajs.append(tr)
    width = cfg["steps"] + 1
    R = np.full((len(trajs), width), np.inf)
    for i, tr in enumerate(trajs):
        R[i, : len(tr.residual_linf)] = tr.residual_linf
    med = np.median(R, axis=0)
    with open(os.path.join(args.out, "summary.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "median_residual_linf"])
        for k, v in enumerate(med):
            w.writerow([k, repr(float(v))])
    results = {"trajectories": len(trajs), "median_residual_linf": " ".join(f"{v:.6g}" for v in med)}
    write_manifest(os.path.join(args.out, "manifest.txt"), "iterate", cfg, results)
    print("median residual per step: " + results["median_residual_linf"])


def cmd_bench(args, cfg):
    problem = problem_from_config(cfg)
    model, _ = load_checkpoint(args.model)
    check_model_grid(model, problem)
    try:
        counts = [int(c) for c in cfg["counts"].split(",")]
    except ValueError:
        raise ConfigError(f"bad counts {cfg['counts']!r}") from None
    rows = bench(problem, model, counts, cfg["reps"], threads=args.threads)
    os.makedirs(args.out, exist_ok=True)
    write_bench_csv(os.path.join(args.out, "bench.csv"), rows)
    results = {"threads": args.threads}
    for r in rows:
        results[f"n{r.n_systems}_solver_min"] = repr(r.solver_min)
        results[f"n{r.n_systems}_operator_min"] = repr(r.operator_min)
        results[f"n{r.n_systems}_speedup"] = repr(r.speedup)
    write_manifest(os.path.join(args.out, "manifest.txt"), "bench", cfg, results)
    for r in rows:
        print(f"n={r.n_systems}: solver {r.solver_median:.4g}s, operator {r.operator_median:.4g}s, speedup {r.speedup:.1f}x")


# -- argument parsing ----------------------------------------------------------


def build_parser():
    ap = argparse.ArgumentParser(prog="newtonop", description="Newton solver and learned Newton-step operators.")
    ap.add_argument("--threads", type=int, help="worker threads for batched solves (default 1)")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("solve", help="multi-start Newton sweep")
    p.add_argument("--config")
    p.add_argument("--out", default="solve_out")
    p.add_argument("--guesses")

    p = sub.add_parser("gen-data", help="generate a Newton-step dataset")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--count", type=int)
    p.add_argument("--split", choices=["train", "test"])
    p.add_argument(
        "--role",
        choices=["sup", "unsup", "test"],
        default="sup",
        help="take the sample count from count, unsup_count or test_count (test also sets split=test)",
    )
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train a DeepONet on Newton steps")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--data-unsup")
    p.add_argument("--test")
    p.add_argument("--mode", choices=["supervised", "unsupervised", "combined"])
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--max-steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", default="train_out")

    p = sub.add_parser("eval", help="metrics of a checkpoint on a dataset")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out")

    p = sub.add_parser("iterate", help="surrogate Newton iteration with a trained model")
    p.add_argument("--model", required=True)
    p.add_argument("--config")
    p.add_argument("--data")
    p.add_argument("--init", help="comma-separated state files")
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--steps", type=int)
    p.add_argument("--hybrid-tail", type=float)
    p.add_argument("--out", default="iterate_out")

    p = sub.add_parser("bench", help="time batched Newton steps against the operator")
    p.add_argument("--model", required=True)
    p.add_argument("--config")
    p.add_argument("--counts")
    p.add_argument("--reps", type=int)
    p.add_argument("--out", default="bench_out")
    return ap


COMMANDS = {
    "solve": cmd_solve,
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "iterate": cmd_iterate,
    "bench": cmd_bench,
}


def _resolve_config(args):
    cfg = load_config(getattr(args, "config", None))
    over = {
        "guesses": getattr(args, "guesses", None),
        "seed": getattr(args, "seed", None),
        "count": getattr(args, "count", None) if args.command == "gen-data" else None,
        "split": getattr(args, "split", None),
        "mode": getattr(args, "mode", None),
        "lambda": getattr(args, "lam", None),
        "epochs": getattr(args, "epochs", None),
        "max_steps": getattr(args, "max_steps", None),
        "steps": getattr(args, "steps", None),
        "hybrid_tail": getattr(args, "hybrid_tail", None),
        "counts": getattr(args, "counts", None),
        "reps": getattr(args, "reps", None),
        "threads": args.threads,
    }
    return override(cfg, **over)


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = _resolve_config(args)
        if cfg["threads"] < 1:
            raise ConfigError("threads must be >= 1")
        args.threads = cfg["threads"]
        COMMANDS[args.command](args, cfg)
    except NumericalError as e:
        print(f"{type(e).__name__}: {e}", file=sys.stderr)
        return 4
    except ValueError as e:
        print(f"{type(e).__name__}: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"{type(e).__name__}: {e}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
