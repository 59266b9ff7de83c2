import pickle

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from stable_manifold.pendulum import (
    A_GRAV,
    B_P,
    B_R,
    FIXTURES,
    PENDULUM_DOMAIN,
    Rescaling,
    get_fixture,
    lq1,
    pendulum_rescaling,
    pendulum_scales,
    rescale,
)
from stable_manifold.problem import linearize
from stable_manifold.riccati import check_c2, hamiltonian_matrix, solve_riccati

coords = arrays(float, 3, elements=st.floats(-3, 3, allow_nan=False))


def test_paper_constants():
    _, l2, l3 = pendulum_scales()
    assert abs(l2 - 8.8544) < 1e-3
    assert abs(l3 - 1623.3) < 0.5
    sigma = B_P / l2
    assert abs(sigma - 0.12197) < 1e-4
    assert B_P / l2 == pytest.approx(B_R / l3, rel=1e-15)


def test_rescaled_pendulum_maps(pend):
    k = np.sqrt(A_GRAV)
    np.testing.assert_allclose(pend.f(np.array([np.pi / 2, 0.0, 0.0])), [0.0, k, 0.0], atol=1e-14)
    sigma = B_P / k
    for x in (np.zeros(3), np.array([1.0, -0.3, 2.0])):
        np.testing.assert_allclose(pend.g(x)[:, 0], [0.0, -sigma, sigma], rtol=1e-15)
    assert pend.r == 0.01
    lo, hi = pend.domain
    np.testing.assert_allclose(lo, [-0.4 * np.pi, -0.01, -0.1])
    np.testing.assert_allclose(hi, [1.1 * np.pi, 0.01, 0.1])


def test_raw_pendulum(pend_raw):
    np.testing.assert_allclose(pend_raw.f(np.array([np.pi, 0.0, 0.0])), 0.0, atol=1e-12)
    np.testing.assert_allclose(pend_raw.g(np.zeros(3))[:, 0], [0.0, -B_P, B_R])
    assert pend_raw.q(np.array([1.0, 2.0, 2.0])) == pytest.approx(9.0)


@pytest.mark.parametrize("name", ["pend", "pend_raw"])
def test_c2_both_models(name, request):
    prob = request.getfixturevalue(name)
    res = check_c2(hamiltonian_matrix(linearize(prob)))
    assert res.hyperbolic and res.complementary


def test_rescaled_stable_spectrum(pend):
    res = check_c2(hamiltonian_matrix(linearize(pend)))
    assert np.max(res.eigenvalues.real[res.eigenvalues.real < 0]) <= -1.2


def test_identity_rescaling(pend):
    same = rescale(pend, Rescaling(np.ones(3)))
    rng = np.random.default_rng(0)
    X = rng.uniform(-2, 2, (3, 7))
    np.testing.assert_array_equal(same.f(X), pend.f(X))
    np.testing.assert_array_equal(same.g(X), pend.g(X))
    np.testing.assert_array_equal(same.q(X), pend.q(X))
    np.testing.assert_array_equal(same.domain[0], pend.domain[0])


def test_lq1_rescaled():
    base = lq1()
    s = rescale(base, Rescaling(np.array([2.0])))
    xb = np.array([[0.7, -1.2]])
    np.testing.assert_array_equal(s.f(xb), 0.0)
    np.testing.assert_allclose(s.g(xb)[0, 0], 2.0)
    np.testing.assert_allclose(s.q(xb), xb[0] ** 2 / 4)
    P = solve_riccati(linearize(base)).P
    Pb = solve_riccati(linearize(s)).P
    assert Pb[0, 0] == pytest.approx(0.25, rel=1e-9)
    Li = np.diag([0.5])
    np.testing.assert_allclose(Pb, Li.T @ P @ Li, rtol=1e-9)
    np.testing.assert_allclose(s.domain[1], [4.0])


def test_raw_rescaled_matches_paper_form(pend, pend_raw):
    s = rescale(pend_raw, pendulum_rescaling())
    rng = np.random.default_rng(1)
    X = rng.uniform(-2, 2, (3, 11))
    np.testing.assert_allclose(s.f(X), pend.f(X), rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(s.g(X), pend.g(X), rtol=1e-12)
    np.testing.assert_allclose(s.jac_f(X), pend.jac_f(X), rtol=1e-12, atol=1e-12)


@given(x=coords)
def test_rescaling_chain_rule(pend_raw, x):
    # trajectories correspond under xbar = lam x: fbar(lam x) = lam f(x)
    s = pendulum_rescaling()
    sp = rescale(pend_raw, s)
    xb = s.lambdas * x
    np.testing.assert_allclose(sp.f(xb), s.lambdas * pend_raw.f(x), rtol=1e-10, atol=1e-10)
    assert sp.q(xb) == pytest.approx(pend_raw.q(x), rel=1e-12, abs=1e-14)
    np.testing.assert_allclose(sp.grad_q(xb), pend_raw.grad_q(x) / s.lambdas, rtol=1e-12, atol=1e-14)


def test_rescaling_validation(pend):
    with pytest.raises(ValueError):
        Rescaling(np.array([1.0, 0.0, 1.0]))
    with pytest.raises(ValueError):
        rescale(pend, Rescaling(np.ones(2)))


def test_fixtures_registry():
    assert set(FIXTURES) == {"lq1", "pendulum", "pendulum-raw"}
    assert get_fixture("pendulum").name == "pendulum"
    assert get_fixture("pendulum-raw").domain == PENDULUM_DOMAIN
    with pytest.raises(KeyError):
        get_fixture("cartpole")


def test_problems_pickle(pend):
    # worker pools ship problems to subprocesses
    back = pickle.loads(pickle.dumps(pend))
    x = np.array([0.3, 0.01, -0.05])
    np.testing.assert_array_equal(back.f(x), pend.f(x))
    s = pickle.loads(pickle.dumps(rescale(pend, Rescaling(np.full(3, 2.0)))))
    np.testing.assert_allclose(s.f(2 * x), 2 * pend.f(x))
