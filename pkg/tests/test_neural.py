import os

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from newtonop.errors import BadMagicError, FormatError, TruncatedFileError, VersionMismatchError
from newtonop.grid import Grid
from newtonop.neural import (
    AdamState,
    Mlp,
    NeuralOperator,
    RankError,
    adam_step,
    checkpoint_bytes,
    compute_pod_basis,
    deeponet_backward,
    deeponet_forward,
    init_deeponet,
    load_checkpoint,
    mlp_backward,
    mlp_forward,
    save_checkpoint,
)
from newtonop.problems import example1d, grayscott, nonconvex2d
from newtonop.rng import Rng

GOLDEN = os.path.join(os.path.dirname(__file__), "golden")


def _fd_check(params, loss, grads, picks, rtol):
    """Central differences on selected (array, flat index) entries."""
    for a, k in picks:
        arr = params[a]
        flat = arr.reshape(-1)
        old = flat[k]
        h = 1e-6 * max(1.0, abs(old))
        flat[k] = old + h
        lp = loss()
        flat[k] = old - h
        lm = loss()
        flat[k] = old
        fd = (lp - lm) / (2 * h)
        g = grads[a].reshape(-1)[k]
        assert abs(fd - g) <= rtol * max(abs(fd), abs(g), 1e-8), (a, k, fd, g)


def _picks(params, n, seed):
    rng = np.random.default_rng(seed)
    sizes = np.array([a.size for a in params])
    out = []
    for _ in range(n):
        a = int(rng.choice(len(params), p=sizes / sizes.sum()))
        out.append((a, int(rng.integers(params[a].size))))
    return out


def test_zero_weights_give_zero():
    m = Mlp.glorot([3, 5, 2], Rng(0))
    for w in m.weights:
        w[:] = 0
    out, _ = mlp_forward(m, np.ones((4, 3)))
    assert np.all(out == 0)


def test_mlp_identity_last_layer():
    m = Mlp([np.eye(2)], [np.array([1.0, -1.0])])
    out, _ = mlp_forward(m, np.array([[0.5, 2.0]]))
    np.testing.assert_array_equal(out, [[1.5, 1.0]])


def test_mlp_shape_mismatch():
    with pytest.raises(ValueError):
        Mlp([np.zeros((3, 2)), np.zeros((2, 4))], [np.zeros(3), np.zeros(2)])


def test_mlp_gradient_fd():
    m = Mlp.glorot([4, 6, 6, 3], Rng(1))
    x = np.random.default_rng(0).normal(size=(5, 4))
    c = np.random.default_rng(1).normal(size=(5, 3))
    params = m.arrays()

    def loss():
        return float(np.sum(c * mlp_forward(m, x)[0]))

    out, cache = mlp_forward(m, x)
    grads, dx = mlp_backward(m, cache, c)
    _fd_check(params, loss, grads, [(a, k) for a in range(len(params)) for k in range(params[a].size)], 1e-6)
    # input gradient too
    h = 1e-6
    x2 = x.copy()
    x2[2, 1] += h
    x3 = x.copy()
    x3[2, 1] -= h
    fd = (np.sum(c * mlp_forward(m, x2)[0]) - np.sum(c * mlp_forward(m, x3)[0])) / (2 * h)
    assert abs(fd - dx[2, 1]) < 1e-6 * max(1, abs(fd))


@pytest.mark.parametrize("bias0_trainable", [True, False])
def test_deeponet_gradient_fd(bias0_trainable):
    P = init_deeponet(6, 2, p=5, width=7, depth=2, seed=3, bias0_trainable=bias0_trainable)
    P.bias0[0] = 0.3
    s = np.random.default_rng(2).normal(size=(4, 6))
    y = np.random.default_rng(3).uniform(size=(9, 2))
    c = np.random.default_rng(4).normal(size=(4, 9))
    params = P.trainable()

    def loss():
        return float(np.sum(c * deeponet_forward(P, s, y)))

    _, cache = deeponet_forward(P, s, y, return_cache=True)
    grads = deeponet_backward(P, cache, c)
    assert [g.shape for g in grads] == [a.shape for a in params]
    _fd_check(params, loss, grads, _picks(params, 20, 5), 1e-5)
    if bias0_trainable:
        assert grads[-1][0] == pytest.approx(c.sum())


def test_branch_zero_gives_bias0():
    P = init_deeponet(3, 1, p=4, width=5, seed=0)
    for w in P.branch.weights:
        w[:] = 0
    P.bias0[0] = 0.7
    out = deeponet_forward(P, np.ones(3), np.linspace(0, 1, 6)[:, None])
    np.testing.assert_array_equal(out, np.full(6, 0.7))


def test_rank_one_product():
    branch = Mlp([np.array([[2.0]])], [np.zeros(1)])
    trunk = Mlp([np.array([[1.0]])], [np.zeros(1)])
    from newtonop.neural import DeepONetParams

    P = DeepONetParams(branch, trunk, np.zeros(1))
    y = np.array([[0.5], [-1.0]])
    np.testing.assert_allclose(deeponet_forward(P, np.array([3.0]), y), [3.0, -6.0])


def test_rank_mismatch():
    from newtonop.neural import DeepONetParams

    with pytest.raises(ValueError):
        DeepONetParams(Mlp.glorot([2, 3], Rng(0)), Mlp.glorot([1, 4], Rng(0)))


def test_zero_cotangent_zero_gradient():
    P = init_deeponet(4, 1, p=3, width=5, seed=1)
    _, cache = deeponet_forward(P, np.ones((2, 4)), np.zeros((5, 1)), return_cache=True)
    assert all(np.all(g == 0) for g in deeponet_backward(P, cache, np.zeros((2, 5))))


def test_deeponet_golden():
    model = NeuralOperator.create(nonconvex2d(7), seed=0)
    U = np.random.default_rng(0).normal(size=(3, 49))
    out = model.forward(U)
    ref = np.frombuffer(open(os.path.join(GOLDEN, "deeponet_seed0_n7.f64"), "rb").read(), dtype="<f8").reshape(out.shape)
    np.testing.assert_array_equal(out, ref)


def test_single_and_batch_agree():
    model = NeuralOperator.create(example1d(15), p=6, width=8)
    U = np.random.default_rng(1).normal(size=(3, 15))
    np.testing.assert_allclose(model.forward(U[1]), model.forward(U)[1], rtol=0, atol=1e-14)


def test_stride_sensors_and_normalisation():
    model = NeuralOperator.create(example1d(15), stride=4, p=3, width=4)
    assert model.sensor_idx.tolist() == [0, 4, 8, 12]
    U = np.random.default_rng(2).normal(size=(50, 15)) * 3 + 1
    model.fit_input_normalization(U)
    s = model.sensors(U)
    np.testing.assert_allclose(s.mean(axis=0), 0, atol=1e-12)
    np.testing.assert_allclose(s.std(axis=0), 1, atol=1e-12)


def test_multispecies_layout():
    model = NeuralOperator.create(grayscott(3), stride=2, p=3, width=4)
    assert model.sensor_idx.tolist() == [0, 1, 4, 5, 12, 13, 16, 17]
    assert model.points.shape == (18, 3)
    assert model.forward(np.zeros((2, 18))).shape == (2, 18)


# -- Adam ------------------------------------------------------------------


def test_adam_zero_gradient_no_move():
    p = [np.array([1.0, -2.0])]
    st_ = AdamState.for_params(p, lr=0.1)
    adam_step(st_, p, [np.zeros(2)])
    np.testing.assert_array_equal(p[0], [1.0, -2.0])


def test_adam_constant_gradient_moves_lr_per_step():
    p = [np.array([0.0])]
    st_ = AdamState.for_params(p, lr=0.01)
    for _ in range(5):
        adam_step(st_, p, [np.array([3.0])])
    assert p[0][0] == pytest.approx(-0.05, rel=1e-6)


def test_adam_lr_zero_and_decay():
    p = [np.array([2.0])]
    st_ = AdamState.for_params(p, lr=0.0, weight_decay=0.5)
    adam_step(st_, p, [np.array([1.0])])
    assert p[0][0] == 2.0
    p = [np.array([2.0])]
    st_ = AdamState.for_params(p, lr=0.1, weight_decay=0.5)
    adam_step(st_, p, [np.array([0.0])])
    assert p[0][0] == pytest.approx(2.0 * (1 - 0.05))


def test_adam_length_mismatch():
    with pytest.raises(ValueError):
        adam_step(AdamState.for_params([np.zeros(1)]), [np.zeros(1)], [])


# -- POD -------------------------------------------------------------------


def test_pod_equal_samples_rank_error():
    with pytest.raises(RankError):
        compute_pod_basis([np.ones(10)] * 5, 1)
    with pytest.raises(ValueError):
        compute_pod_basis([np.ones(10)] * 2, 3)


def test_pod_two_sines():
    x = np.linspace(0, 1, 41)[1:-1]
    h = x[1] - x[0]
    a, b = np.sin(np.pi * x), np.sin(2 * np.pi * x)
    rng = np.random.default_rng(0)
    S = [c1 * a + c2 * b for c1, c2 in rng.normal(size=(20, 2))]
    B = compute_pod_basis(S, 2, h)
    gram = h * B.modes @ B.modes.T
    np.testing.assert_allclose(gram, np.eye(2), atol=1e-8)
    # each mode lies in span{a, b} (the sample mean does too)
    Q, _ = np.linalg.qr(np.stack([a, b]).T)
    for m in B.modes:
        assert np.linalg.norm(m - Q @ (Q.T @ m)) < 1e-8 * np.linalg.norm(m)
    with pytest.raises(RankError):
        compute_pod_basis(S, 3, h)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**31), p=st.integers(1, 4))
def test_pod_parseval(seed, p):
    rng = np.random.default_rng(seed)
    S = rng.normal(size=(6, 12))
    B = compute_pod_basis(S, p, 0.5)
    coeff = B.project(S)
    # energy captured by the projection equals the retained eigenvalues
    assert np.sum(coeff**2) == pytest.approx(np.sum(B.eigenvalues), rel=1e-8)
    assert np.sum(B.eigenvalues) <= B.total_energy * (1 + 1e-12)
    np.testing.assert_allclose(0.5 * B.modes @ B.modes.T, np.eye(p), atol=1e-8)


def test_pod_full_rank_reconstructs():
    rng = np.random.default_rng(3)
    S = rng.normal(size=(5, 8))
    B = compute_pod_basis(S, 4)
    np.testing.assert_allclose(B.reconstruct(B.project(S)), S, atol=1e-10)


def test_pod_trunk_forward_and_no_gradient():
    g = Grid(1, 15)
    S = np.random.default_rng(4).normal(size=(10, 15))
    B = compute_pod_basis(S, 4, g.cell_volume)
    model = NeuralOperator.create(example1d(15), p=4, width=6, pod=B)
    assert len(model.trainable()) == len(model.params.branch.arrays()) + 1
    U = np.random.default_rng(5).normal(size=(2, 15))
    out, cache = model.forward(U, return_cache=True)
    b, _ = mlp_forward(model.params.branch, model.sensors(U))
    np.testing.assert_allclose(out, b @ B.modes + B.mean, atol=1e-12)
    grads = model.backward(cache, np.ones_like(out))
    assert len(grads) == len(model.trainable())
    with pytest.raises(ValueError):
        deeponet_forward(model.params, model.sensors(U), np.zeros((3, 1)))


# -- checkpoints -------------------------------------------------------------


def _models():
    g = Grid(1, 15)
    S = np.random.default_rng(4).normal(size=(10, 15))
    pod = compute_pod_basis(S, 3, g.cell_volume)
    m1 = NeuralOperator.create(nonconvex2d(7), stride=2, p=4, width=5, seed=2)
    m1.fit_input_normalization(np.random.default_rng(0).normal(size=(8, 49)))
    m2 = NeuralOperator.create(example1d(15), p=3, width=5, pod=pod, bias0_trainable=False)
    return [m1, m2]


@pytest.mark.parametrize("with_adam", [False, True])
def test_checkpoint_round_trip(tmp_path, with_adam):
    for i, model in enumerate(_models()):
        adam = None
        if with_adam:
            adam = AdamState.for_params(model.trainable(), lr=1e-3, weight_decay=1e-6)
            adam_step(adam, model.trainable(), [np.ones_like(a) for a in model.trainable()])
        path = tmp_path / f"m{i}.nn"
        save_checkpoint(path, model, adam)
        back, badam = load_checkpoint(path)
        U = np.random.default_rng(9).normal(size=(3, model.n_outputs))
        np.testing.assert_array_equal(back.forward(U), model.forward(U))
        assert checkpoint_bytes(back, badam) == path.read_bytes()
        assert (badam is None) == (not with_adam)
        if with_adam:
            assert badam.step == 1 and badam.lr == 1e-3


def test_checkpoint_errors(tmp_path):
    raw = checkpoint_bytes(_models()[0])
    cases = {
        "trunc": (raw[:-3], TruncatedFileError),
        "magic": (b"XXXX" + raw[4:], BadMagicError),
        "version": (raw[:4] + b"\x09\x00" + raw[6:], VersionMismatchError),
        "trailing": (raw + b"\x00", FormatError),
    }
    for name, (data, exc) in cases.items():
        f = tmp_path / name
        f.write_bytes(data)
        with pytest.raises(exc):
            load_checkpoint(f)


def test_wrong_sensor_count():
    model = NeuralOperator.create(example1d(15), p=3, width=4)
    with pytest.raises(ValueError):
        deeponet_forward(model.params, np.zeros(7), model.points)
    _, cache = model.forward(np.zeros((2, 15)), return_cache=True)
    with pytest.raises(ValueError):
        model.backward(cache, np.zeros((2, 14)))
