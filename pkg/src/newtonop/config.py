"""Flat key=value experiment configs.

One key per line, ``#`` starts a comment, later lines win. Every key must be
known; values are parsed by the type of its default.
"""

from __future__ import annotations

from newtonop.errors import ConfigError

# key -> default; the default's type drives parsing (None means optional float)
DEFAULTS = {
    # problem
    "problem": "example1d",
    "n": 0,
    "s": 1600.0,
    "D_A": 2.5e-4,
    "D_S": 5.0e-4,
    "mu": 0.065,
    "rho": 0.04,
    # solve
    "guesses": "lift",
    "dedup_tol": 1e-4,
    "tol_residual": 1e-10,
    "max_iter": 50,
    "divergence_cap": 1e6,
    "damping": 1.0,
    # data
    "base": "lift",
    "recipe": "spectral",
    "count": 100,
    "unsup_count": 0,
    "test_count": 0,
    "newton_depth": 3,
    "seed": 0,
    "split": "train",
    "stride": 1,
    "K": 3,
    "L": 1.0,
    "delta": 1.0,
    "modes": 16,
    "decay_power": 2.0,
    # model
    "trunk": "mlp",
    "width": 40,
    "depth": 2,
    "trunk_depth": 2,
    "p": 40,
    "bias0_trainable": True,
    "normalize_inputs": False,
    "model_seed": 0,
    # training
    "mode": "combined",
    "lambda": 0.01,
    "halve": False,
    "lr": 1e-4,
    "weight_decay": 1e-6,
    "batch_size": 50,
    "epochs": 10,
    "max_steps": 0,
    "eval_every": 1,
    # surrogate
    "steps": 5,
    "hybrid_tail": None,
    "counts": "500,5000",
    "reps": 3,
    "threads": 1,
}

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _parse(key, text):
    default = DEFAULTS[key]
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float) or default is None:
            return None if text.lower() in ("", "none", "off") else float(text)
        return text
    except ValueError:
        raise ConfigError(f"bad value for {key}: {text!r}") from None


class Config(dict):
    """Dict of resolved settings; ``echo()`` renders it back to file form."""

    def echo(self):
        return "".join(f"{k}={_fmt(self[k])}\n" for k in sorted(self))


def _fmt(v):
    if isinstance(v, bool):
        return "1" if v else "0"
    if v is None:
        return "none"
    return repr(v) if isinstance(v, float) else str(v)


def parse_config(text, source="<config>"):
    cfg = Config(DEFAULTS)
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value")
        key, val = (t.strip() for t in line.split("=", 1))
        if key not in DEFAULTS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        cfg[key] = _parse(key, val)
    return cfg


def load_config(path=None):
    if path is None:
        return Config(DEFAULTS)
    with open(path) as fh:
        return parse_config(fh.read(), str(path))


def override(cfg: Config, **values):
    """Apply command-line overrides; None means 'not given'."""
    for key, val in values.items():
        if val is None:
            continue
        if key not in DEFAULTS:
            raise ConfigError(f"unknown key {key!r}")
        cfg[key] = _parse(key, val) if isinstance(val, str) else val
    return cfg
