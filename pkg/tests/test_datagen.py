import os

import numpy as np
import pytest

from newtonop.datagen import (
    DataGenerationError,
    OperatorDataset,
    RecipeParams,
    dataset_bytes,
    label_residuals,
    load_dataset,
    make_dataset,
    random_polynomial_field,
    save_dataset,
    spectral_gaussian_field,
    uniform01_field,
)
from newtonop.errors import BadMagicError, TruncatedFileError, VersionMismatchError
from newtonop.grid import Grid
from newtonop.newton import newton_step_vec
from newtonop.problems import convex2d, example1d, grayscott, nonconvex2d
from newtonop.rng import Rng

GOLDEN = os.path.join(os.path.dirname(__file__), "golden")


def test_polynomial_field_limits():
    g = Grid(1, 50)
    tiny = random_polynomial_field(Rng(1), 3, 1e-300, g)
    assert np.max(np.abs(tiny.values)) < 1e-299
    c = random_polynomial_field(Rng(2), 0, 1.0, g)
    assert np.all(c.values == c.values[0]) and -1 <= c.values[0] <= 1
    with pytest.raises(ValueError):
        random_polynomial_field(Rng(1), 3, 1.0, Grid(2, 5))
    with pytest.raises(ValueError):
        random_polynomial_field(Rng(1), 3, 0.0, g)


def test_polynomial_field_golden():
    v = random_polynomial_field(Rng(42), 3, 1.0, Grid(1, 100)).values
    assert v.astype("<f8").tobytes() == open(os.path.join(GOLDEN, "poly_seed42_n100.f64"), "rb").read()
    np.testing.assert_array_equal(v, random_polynomial_field(Rng(42), 3, 1.0, Grid(1, 100)).values)


def test_spectral_field_zero_trace_and_limits():
    g = Grid(2, 15)
    u = spectral_gaussian_field(Rng(3), g)
    pad = u.padded()
    assert np.all(pad[0] == 0) and np.all(pad[-1] == 0) and np.all(pad[:, 0] == 0) and np.all(pad[:, -1] == 0)
    tiny = spectral_gaussian_field(Rng(3), g, delta=1e-300)
    assert np.max(np.abs(tiny.values)) < 1e-140
    with pytest.raises(ValueError):
        spectral_gaussian_field(Rng(3), g, modes=0)


def test_spectral_coefficient_variance():
    # the (1,1) coefficient is xi / 2^p; recover it by projection on sin(pi x) sin(pi y)
    g = Grid(2, 15)
    x, y = g.mesh()
    phi = (np.sin(np.pi * x) * np.sin(np.pi * y)).ravel()
    root = Rng(7)
    coef = []
    for k in range(10000):
        u = spectral_gaussian_field(root.substream(k), g, delta=1.0, modes=16)
        coef.append(4 * g.cell_volume * np.dot(u.values, phi) * 2.0**2)
    assert abs(np.var(coef) - 1.0) < 0.05


def test_uniform01_range():
    u = uniform01_field(Rng(0), Grid(2, 9))
    assert u.values.min() >= 0 and u.values.max() <= 1


def test_single_pair_dataset():
    p = example1d(31)
    ds = make_dataset(p, p.initial_lift(), "polynomial", 1, newton_depth=1, seed=4)
    assert len(ds) == 1
    assert label_residuals(ds)[0] <= 1e-8


def test_two_base_dataset_counts_and_labels(sols1d):
    p = sols1d[0].grid and example1d(1023)
    ds = make_dataset(p, list(sols1d), "polynomial", 20, newton_depth=3, seed=1)
    assert len(ds) == 60
    assert ds.meta["bases"] == 2 and ds.meta["series"] == 20
    assert np.all(label_residuals(ds) <= 1e-8)
    # series structure: u_{i+1} = u_i + du_i inside each triple
    np.testing.assert_allclose(ds.U[1], ds.U[0] + ds.DU[0], rtol=0, atol=1e-12)


def test_label_audit_resolve():
    p = convex2d(15)
    ds = make_dataset(p, None, "gaussian3", 5, seed=2)
    for i in range(0, len(ds), 4):
        np.testing.assert_allclose(newton_step_vec(p, ds.U[i]), ds.DU[i], atol=1e-8)


def test_determinism_and_thread_independence():
    p = nonconvex2d(15)
    a = make_dataset(p, None, "spectral", 6, seed=9)
    b = make_dataset(p, None, "spectral", 6, seed=9, threads=3)
    assert dataset_bytes(a) == dataset_bytes(b)
    c = make_dataset(p, None, "spectral", 6, seed=10)
    assert dataset_bytes(a) != dataset_bytes(c)


def test_redraw_budget_exhausted():
    p = nonconvex2d(15)
    with pytest.raises(DataGenerationError):
        make_dataset(p, None, "spectral", 2, params=RecipeParams(delta=1e12), divergence_cap=1.0)


def test_grayscott_uniform_recipe():
    p = grayscott(5)
    ds = make_dataset(p, None, "uniform01", 2, newton_depth=2, seed=0)
    assert ds.U.shape == (4, 50)
    assert np.all(label_residuals(ds) <= 1e-8)
    with pytest.raises(ValueError):
        make_dataset(example1d(9), None, "uniform01", 1)


def test_dataset_validation():
    p = example1d(9)
    with pytest.raises(ValueError):
        OperatorDataset(p, 1, np.zeros((0, 9)), np.zeros((0, 9)))
    with pytest.raises(ValueError):
        OperatorDataset(p, 1, np.zeros((2, 8)), np.zeros((2, 8)))
    with pytest.raises(ValueError):
        make_dataset(p, None, "polynomial", 0)
    with pytest.raises(ValueError):
        make_dataset(p, None, "fourier", 1)


def test_save_load_round_trip(tmp_path):
    p = nonconvex2d(7, s=900.0)
    ds = make_dataset(p, None, "spectral", 3, seed=5, stride=2, split="test")
    path = tmp_path / "d.nods"
    save_dataset(path, ds)
    back = load_dataset(path)
    assert back.problem.params == (900.0,)
    assert (back.stride, back.split, back.seed, back.recipe) == (2, "test", 5, "spectral")
    save_dataset(tmp_path / "e.nods", back, sidecar=False)
    assert (tmp_path / "e.nods").read_bytes() == path.read_bytes()
    assert "draws=3" in (tmp_path / "d.nods.meta").read_text()


def test_load_errors(tmp_path):
    p = example1d(9)
    raw = dataset_bytes(make_dataset(p, None, "polynomial", 2, newton_depth=1))
    cases = {
        "trunc": (raw[:-5], TruncatedFileError),
        "magic": (b"NOPE" + raw[4:], BadMagicError),
        "version": (raw[:4] + b"\x02\x00" + raw[6:], VersionMismatchError),
    }
    for name, (data, exc) in cases.items():
        f = tmp_path / name
        f.write_bytes(data)
        with pytest.raises(exc):
            load_dataset(f)
