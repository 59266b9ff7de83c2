"""Benchmark problems: the scalar LQ fixture and the Reaction Wheel Pendulum.

Also provides the per-coordinate rescaling ``xbar = diag(lambdas) x``.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import partial

import numpy as np

from .problem import ControlProblem

# device constants of the reaction wheel pendulum
A_GRAV = 78.4
B_P = 1.08
B_R = 198.0
R_WEIGHT = 0.01
PENDULUM_DOMAIN = (
    np.array([-0.4 * np.pi, -0.01, -0.1]),
    np.array([1.1 * np.pi, 0.01, 0.1]),
)


def _bshape(v, x):
    # append singleton batch axes to v so it broadcasts against x
    return v.reshape(v.shape + (1,) * (np.ndim(x) - 1))


def _const_g(g0, x):
    x = np.asarray(x)
    return np.broadcast_to(_bshape(g0, x), g0.shape + x.shape[1:]).copy()


def _quad_q(x):
    return np.sum(np.asarray(x) ** 2, axis=0)


def _quad_grad_q(x):
    return 2.0 * np.asarray(x, dtype=float)


# scalar LQ: xdot = u, cost 1/2 (x^2 + u^2)

def _zero_f(x):
    return np.zeros_like(np.asarray(x, dtype=float))


def _zero_jac(x):
    x = np.asarray(x, dtype=float)
    return np.zeros((x.shape[0],) + x.shape)


def lq1() -> ControlProblem:
    return ControlProblem(
        n=1, m=1,
        f=_zero_f, jac_f=_zero_jac,
        g=partial(_const_g, np.ones((1, 1))),
        q=_quad_q, grad_q=_quad_grad_q,
        r=1.0,
        domain=(np.array([-2.0]), np.array([2.0])),
        name="lq1",
    )


def linear_problem(A, Bu, Q=None, r=1.0, box=1.0, name="linear") -> ControlProblem:
    """LQ problem ``xdot = A x + Bu u`` with state cost ``x^T Q x`` (so Q_eff = Q)."""
    A = np.asarray(A, dtype=float)
    Bu = np.asarray(Bu, dtype=float).reshape(A.shape[0], -1)
    n = A.shape[0]
    Q = np.eye(n) if Q is None else np.asarray(Q, dtype=float)
    return ControlProblem(
        n=n, m=Bu.shape[1],
        f=partial(_linear_f, A), jac_f=partial(_linear_jac, A),
        g=partial(_const_g, Bu),
        q=partial(_form_q, Q), grad_q=partial(_form_grad_q, Q),
        r=r,
        domain=(-box * np.ones(n), box * np.ones(n)),
        name=name,
    )


def _linear_f(A, x):
    return np.einsum("ab,b...->a...", A, x)


def _linear_jac(A, x):
    return _const_g(A, x)


def _form_q(Q, x):
    return np.einsum("a...,ab,b...->...", x, Q, x)


def _form_grad_q(Q, x):
    return np.einsum("ab,b...->a...", Q + Q.T, x)


# reaction wheel pendulum

def pendulum_scales() -> np.ndarray:
    """Unit changes ``raw = scale * rescaled``: (1, sqrt(a), (b_r/b_p) sqrt(a))."""
    l2 = np.sqrt(A_GRAV)
    return np.array([1.0, l2, B_R / B_P * l2])


def _pend_f(k, c, x):
    # rescaled: k = c = sqrt(a); raw: k = 1, c = a
    x = np.asarray(x, dtype=float)
    return np.stack([k * x[1], c * np.sin(x[0]), np.zeros_like(x[2])])


def _pend_jac(k, c, x):
    x = np.asarray(x, dtype=float)
    J = np.zeros((3,) + x.shape)
    J[0, 1] = k
    J[1, 0] = c * np.cos(x[0])
    return J


def pendulum_problem(rescaled: bool = True) -> ControlProblem:
    if rescaled:
        k = np.sqrt(A_GRAV)
        sigma = B_P / k
        f_args = (k, k)
        g0 = np.array([[0.0], [-sigma], [sigma]])
        name = "pendulum"
    else:
        f_args = (1.0, A_GRAV)
        g0 = np.array([[0.0], [-B_P], [B_R]])
        name = "pendulum-raw"
    return ControlProblem(
        n=3, m=1,
        f=partial(_pend_f, *f_args), jac_f=partial(_pend_jac, *f_args),
        g=partial(_const_g, g0),
        q=_quad_q, grad_q=_quad_grad_q,
        r=R_WEIGHT,
        domain=PENDULUM_DOMAIN,
        name=name,
    )


# rescaling

@dataclass(frozen=True)
class Rescaling:
    lambdas: np.ndarray

    def __post_init__(self):
        lam = np.asarray(self.lambdas, dtype=float)
        if lam.ndim != 1 or np.any(lam <= 0):
            raise ValueError("scale factors must be positive")
        object.__setattr__(self, "lambdas", lam)


def pendulum_rescaling() -> Rescaling:
    return Rescaling(1.0 / pendulum_scales())


class _RescaledMaps:
    """Maps of the problem in coordinates ``xbar = lam * x`` (picklable)."""

    def __init__(self, prob: ControlProblem, lam: np.ndarray):
        self.prob = prob
        self.lam = lam

    def _x(self, xb):
        xb = np.asarray(xb, dtype=float)
        return xb / _bshape(self.lam, xb)

    def f(self, xb):
        return _bshape(self.lam, xb) * self.prob.f(self._x(xb))

    def jac_f(self, xb):
        lam = self.lam
        J = self.prob.jac_f(self._x(xb))
        return J * _bshape(lam[:, None] / lam[None, :], xb)

    def g(self, xb):
        return self.prob.g(self._x(xb)) * _bshape(self.lam[:, None], xb)

    def jac_g(self, xb):
        lam = self.lam
        G = self.prob.jac_g(self._x(xb))
        return G * _bshape((lam[:, None] / lam[None, :])[None], xb)

    def q(self, xb):
        return self.prob.q(self._x(xb))

    def grad_q(self, xb):
        return self.prob.grad_q(self._x(xb)) / _bshape(self.lam, xb)


def rescale(prob: ControlProblem, s: Rescaling) -> ControlProblem:
    lam = s.lambdas
    if lam.shape != (prob.n,):
        raise ValueError("one scale factor per state coordinate required")
    maps = _RescaledMaps(prob, lam)
    lo, hi = prob.domain
    return ControlProblem(
        n=prob.n, m=prob.m,
        f=maps.f, jac_f=maps.jac_f, g=maps.g,
        jac_g=None if prob.jac_g is None else maps.jac_g,
        q=maps.q, grad_q=maps.grad_q,
        r=prob.r,
        domain=(lam * lo, lam * hi),
        name=f"{prob.name}-rescaled",
    )


FIXTURES = {
    "lq1": lq1,
    "pendulum": partial(pendulum_problem, True),
    "pendulum-raw": partial(pendulum_problem, False),
}


def get_fixture(name: str) -> ControlProblem:
    try:
        return FIXTURES[name]()
    except KeyError:
        raise KeyError(f"unknown problem {name!r}; choose from {sorted(FIXTURES)}") from None
