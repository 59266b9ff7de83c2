import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stable_manifold import nn
from stable_manifold.sampling import TrajectorySample


class Batch:
    def __init__(self, x, p):
        self.x, self.p = np.asarray(x, float), np.asarray(p, float)


def random_net(rng, L, M, n, scale=0.5):
    th = nn.init_params(L, M, n, n, seed=int(rng.integers(1 << 30)))
    for k in th.params:
        th.params[k] = th.params[k] + scale * rng.standard_normal(th.params[k].shape)
    return th


def fd_grad(theta, batch, nu, h=1e-5):
    v = theta.to_vector()
    out = np.empty_like(v)
    for i in range(v.size):
        e = np.zeros_like(v)
        e[i] = h
        out[i] = (nn.loss(theta.from_vector(v + e), batch, nu)
                  - nn.loss(theta.from_vector(v - e), batch, nu)) / (2 * h)
    return out


def test_param_count():
    th = nn.init_params(2, 50, 3, 3, seed=0)
    assert th.size == nn.param_count(2, 50, 3, 3) == 21953
    assert set(th.params) == set(nn.param_names(2))


def test_init_deterministic():
    a, b = nn.init_params(2, 8, 3, 3, seed=4), nn.init_params(2, 8, 3, 3, seed=4)
    assert np.array_equal(a.to_vector(), b.to_vector())
    for name, arr in a.params.items():
        if name.startswith("b"):
            assert not arr.any()
        else:
            assert np.max(np.abs(arr)) <= math.sqrt(1.0 / arr.shape[1])


def test_zero_net_outputs_zero():
    th = nn.init_params(2, 6, 3, 3)
    th = th.from_vector(np.zeros(th.size))
    np.testing.assert_array_equal(nn.forward(th, np.random.default_rng(0).normal(size=(5, 3))), 0.0)


def scalar_recurrence(x, w=1.0):
    """Hand evaluation of the L=1, M=1, n=1 net with all weights w and zero biases."""
    s1 = math.sin(w * x)
    z = g = r = math.sin(w * x + w * s1)
    h = math.sin(w * x + w * s1 * r)
    s2 = (1 - g) * h + z * s1
    return w * s2


def ones_net():
    th = nn.init_params(1, 1, 1, 1)
    return th.from_vector(np.array([0.0 if n.startswith("b") else 1.0
                                    for n in nn.param_names(1) for _ in range(th.params[n].size)]))


@pytest.mark.parametrize("x", [0.0, math.pi / 2, -0.7, 2.3])
def test_forward_scalar_recurrence(x):
    th = ones_net()
    assert nn.forward(th, [x])[0] == pytest.approx(scalar_recurrence(x), abs=1e-15)


def test_forward_scalar_values():
    th = ones_net()
    assert nn.forward(th, [0.0])[0] == 0.0
    # S1 = 1, Z = G = R = sin(pi/2 + 1), H = sin(pi/2 + Z)
    z = math.sin(math.pi / 2 + 1)
    h = math.sin(math.pi / 2 + z)
    assert nn.forward(th, [math.pi / 2])[0] == pytest.approx((1 - z) * h + z, abs=1e-15)
    assert nn.forward(th, [math.pi / 2])[0] == pytest.approx(0.93457, abs=1e-4)


def test_forward_batch_matches_single():
    rng = np.random.default_rng(0)
    th = random_net(rng, 2, 5, 3)
    X = rng.normal(size=(4, 3))
    B = nn.forward(th, X)
    for i in range(4):
        np.testing.assert_allclose(nn.forward(th, X[i]), B[i], atol=1e-14)
    with pytest.raises(ValueError):
        nn.forward(th, np.zeros(2))


def test_loss_examples():
    th = nn.init_params(1, 2, 3, 3)
    th = th.from_vector(np.zeros(th.size))
    batch = [TrajectorySample(0.0, np.zeros(3), np.ones(3), 0)]
    assert nn.loss(th, batch, 1) == pytest.approx(math.sqrt(3), abs=1e-12)
    assert nn.loss(th, batch, 2) == pytest.approx(3.0, abs=1e-12)
    perfect = [TrajectorySample(0.0, np.zeros(3), np.zeros(3), 0)]
    assert nn.loss(th, perfect, 1) == 0.0
    with pytest.raises(nn.EmptyBatch):
        nn.loss(th, [], 1)
    with pytest.raises(nn.EmptyBatch):
        nn.loss_and_grad(th, Batch(np.zeros((0, 3)), np.zeros((0, 3))), 2)


def test_zero_residual_zero_grad():
    rng = np.random.default_rng(3)
    th = random_net(rng, 1, 4, 2)
    X = rng.normal(size=(5, 2))
    batch = Batch(X, nn.forward(th, X))
    for nu in (1, 2):
        _, g = nn.loss_and_grad(th, batch, nu)
        assert max(np.max(np.abs(v)) for v in g.values()) == 0.0


def test_grad_linear_hand_value():
    # only the output bias is free: model b, sample p = 2, loss (2 - b)^2
    th = nn.init_params(1, 1, 1, 1)
    th = th.from_vector(np.zeros(th.size))
    _, g = nn.loss_and_grad(th, Batch([[1.0]], [[2.0]]), 2)
    assert g["b"][0] == pytest.approx(-4.0)


@pytest.mark.parametrize("nu", [1, 2])
def test_grad_matches_finite_differences(nu):
    rng = np.random.default_rng(10 + nu)
    for _ in range(5):
        L, M, n = int(rng.integers(1, 3)), int(rng.integers(1, 6)), int(rng.integers(1, 4))
        th = random_net(rng, L, M, n)
        batch = Batch(rng.normal(size=(6, n)), rng.normal(size=(6, n)))
        g = nn.grad(th, batch, nu).to_vector()
        ref = fd_grad(th, batch, nu)
        assert np.max(np.abs(g - ref)) <= 1e-5 * max(1.0, np.max(np.abs(ref)))


@settings(max_examples=10)
@given(seed=st.integers(0, 2**31 - 1))
def test_permutation_invariance(seed):
    rng = np.random.default_rng(seed)
    th = random_net(rng, 2, 4, 3)
    X, P = rng.normal(size=(9, 3)), rng.normal(size=(9, 3))
    perm = rng.permutation(9)
    for nu in (1, 2):
        l1, g1 = nn.loss_and_grad(th, Batch(X, P), nu)
        l2, g2 = nn.loss_and_grad(th, Batch(X[perm], P[perm]), nu)
        assert abs(l1 - l2) <= 1e-12
        for k in g1:
            np.testing.assert_allclose(g1[k], g2[k], atol=1e-12)


def test_mse_nonnegative_zero_iff_exact():
    rng = np.random.default_rng(5)
    th = random_net(rng, 1, 3, 2)
    X = rng.normal(size=(4, 2))
    exact = nn.forward(th, X)
    assert nn.loss(th, Batch(X, exact), 2) == 0.0
    assert nn.loss(th, Batch(X, exact + 1e-3), 2) > 0.0


def _scalar_state(theta):
    return nn.AdamState.zeros_like(theta)


def test_adam_first_steps():
    th = nn.NetParams(1, 1, 1, 1, {"w": np.array([1.0])})
    st_ = nn.AdamState.zeros_like(th)
    th1, st1 = nn.adam_step(st_, th, {"w": np.array([2.0])}, 1e-3)
    assert th1.params["w"][0] == pytest.approx(0.999, abs=1e-9)
    assert st1.step == 1
    th2, st2 = nn.adam_step(st1, th1, {"w": np.array([2.0])}, 1e-3)
    assert th2.params["w"][0] == pytest.approx(0.998, abs=1e-6)
    assert st2.step == 2


def test_adam_zero_gradient():
    th = nn.NetParams(1, 1, 1, 1, {"w": np.array([1.0])})
    st_ = nn.AdamState({"w": np.array([0.5])}, {"w": np.array([0.1])}, step=3)
    th1, st1 = nn.adam_step(st_, th, {"w": np.array([0.0])}, 0.0)
    assert th1.params["w"][0] == 1.0
    assert abs(st1.m["w"][0]) < 0.5 and st1.v["w"][0] < 0.1


def test_weights_round_trip(tmp_path):
    rng = np.random.default_rng(6)
    th = random_net(rng, 2, 5, 3)
    path = tmp_path / "w.txt"
    nn.save_weights(th, path)
    back = nn.load_weights(path)
    assert (back.L, back.M, back.n, back.n_out) == (2, 5, 3, 3)
    assert np.array_equal(back.to_vector(), th.to_vector())
    nn.save_weights(th, path, header='{"seed": 3}\nsecond line')
    assert path.read_text().splitlines()[1] == '# {"seed": 3}'
    assert np.array_equal(nn.load_weights(path).to_vector(), th.to_vector())
    path.write_text("garbage\n")
    with pytest.raises(ValueError):
        nn.load_weights(path)


def test_compiled_forward_matches():
    rng = np.random.default_rng(8)
    for L, M, n in ((1, 3, 1), (2, 7, 3)):
        th = random_net(rng, L, M, n)
        X = rng.normal(size=(5, n))
        np.testing.assert_allclose(nn.compile_forward(th)(X), nn.forward(th, X), rtol=1e-13, atol=1e-13)
