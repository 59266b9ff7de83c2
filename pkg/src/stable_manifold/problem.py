"""Control-affine optimal control problems and their Hamiltonian structure.

All problem callables are vectorized in the scipy ``solve_bvp`` style: a state
of shape ``(n,)`` gives the single-point result, a batch of shape ``(n, k)``
gives the result with a trailing batch axis.

    f(x)      -> (n,)      | (n, k)
    jac_f(x)  -> (n, n)    | (n, n, k)
    g(x)      -> (n, m)    | (n, m, k)
    jac_g(x)  -> (m, n, n) | (m, n, n, k)   jac_g[j, a, b] = d g[a, j] / d x[b]
    q(x)      -> ()        | (k,)
    grad_q(x) -> (n,)      | (n, k)

The Hamiltonian is ``H(x, p) = p.f(x) - 1/2 p.R(x)p + 1/2 q(x)`` with
``R = g g^T / r``, which matches the running cost ``1/2 (q + r u.u)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

Array = np.ndarray


class DimensionError(ValueError):
    """An argument has the wrong leading dimension."""


class ProblemError(ValueError):
    """A ControlProblem violates its construction invariants."""


@dataclass(frozen=True)
class Linearization:
    A: Array
    Q_eff: Array
    R0: Array


@dataclass(frozen=True, eq=False)
class ControlProblem:
    n: int
    m: int
    f: Callable[[Array], Array]
    jac_f: Callable[[Array], Array]
    g: Callable[[Array], Array]
    q: Callable[[Array], Array]
    grad_q: Callable[[Array], Array]
    r: float
    domain: tuple[Array, Array]
    jac_g: Optional[Callable[[Array], Array]] = None
    name: str = "problem"
    check: bool = field(default=True, repr=False)

    def __post_init__(self):
        lo, hi = (np.asarray(b, dtype=float) for b in self.domain)
        object.__setattr__(self, "domain", (lo, hi))
        if self.n < 1 or self.m < 1:
            raise ProblemError("state and input dimensions must be positive")
        if lo.shape != (self.n,) or hi.shape != (self.n,):
            raise ProblemError("domain bounds must have length n")
        if np.any(lo > 0) or np.any(hi < 0):
            raise ProblemError("domain must contain the origin")
        if not self.r > 0:
            raise ProblemError("control weight r must be positive")
        if self.check:
            self.self_check()

    @property
    def constant_g(self) -> bool:
        return self.jac_g is None

    def self_check(self, n_points: int = 5, rtol: float = 1e-5, seed: int = 0) -> None:
        """Check equilibrium conditions and analytic derivatives against finite differences."""
        zero = np.zeros(self.n)
        if np.max(np.abs(self.f(zero))) > 1e-12:
            raise ProblemError("f(0) must vanish")
        if abs(float(self.q(zero))) > 1e-12 or np.max(np.abs(self.grad_q(zero))) > 1e-12:
            raise ProblemError("q(0) and grad q(0) must vanish")
        lo, hi = self.domain
        rng = np.random.default_rng(seed)
        pts = lo + (hi - lo) * rng.random((n_points, self.n))
        for x in pts:
            J = self.jac_f(x)
            J_fd = _central_jacobian(self.f, x)
            if np.linalg.norm(J - J_fd) > rtol * max(1.0, np.linalg.norm(J)):
                raise ProblemError(f"jac_f disagrees with finite differences at {x}")
            dq = self.grad_q(x)
            dq_fd = _central_jacobian(lambda y: np.atleast_1d(self.q(y)), x)[0]
            if np.linalg.norm(dq - dq_fd) > rtol * max(1.0, np.linalg.norm(dq)):
                raise ProblemError(f"grad_q disagrees with finite differences at {x}")
            if self.jac_g is not None:
                G = self.jac_g(x)
                G_fd = _central_jacobian(lambda y: self.g(y).T.reshape(-1), x)
                G_fd = G_fd.reshape(self.m, self.n, self.n)
                if np.linalg.norm(G - G_fd) > rtol * max(1.0, np.linalg.norm(G)):
                    raise ProblemError(f"jac_g disagrees with finite differences at {x}")


def _central_jacobian(fun, x, h=1e-6):
    x = np.asarray(x, dtype=float)
    cols = []
    for i in range(x.size):
        step = h * max(1.0, abs(x[i]))
        e = np.zeros_like(x)
        e[i] = step
        cols.append((np.asarray(fun(x + e)) - np.asarray(fun(x - e))) / (2 * step))
    return np.stack(cols, axis=-1)


def _check(prob: ControlProblem, v: Array, dim: int, what: str) -> Array:
    v = np.asarray(v, dtype=float)
    if v.ndim not in (1, 2) or v.shape[0] != dim:
        raise DimensionError(f"{what} must have leading dimension {dim}, got shape {v.shape}")
    return v


def _gtp(prob: ControlProblem, x: Array, p: Array) -> Array:
    # g(x)^T p, shape (m,) or (m, k)
    return np.einsum("am...,a...->m...", prob.g(x), p)


def hamiltonian(prob: ControlProblem, x, p):
    x = _check(prob, x, prob.n, "x")
    p = _check(prob, p, prob.n, "p")
    gp = _gtp(prob, x, p)
    return (
        np.sum(p * prob.f(x), axis=0)
        - 0.5 * np.sum(gp * gp, axis=0) / prob.r
        + 0.5 * prob.q(x)
    )


def hamiltonian_dynamics(prob: ControlProblem, x, p) -> tuple[Array, Array]:
    """Characteristic field ``(dH/dp, -dH/dx)``."""
    x = _check(prob, x, prob.n, "x")
    p = _check(prob, p, prob.n, "p")
    gp = _gtp(prob, x, p)
    dx = prob.f(x) - np.einsum("am...,m...->a...", prob.g(x), gp) / prob.r
    dp = -np.einsum("ab...,a...->b...", prob.jac_f(x), p) - 0.5 * prob.grad_q(x)
    if prob.jac_g is not None:
        dp = dp + np.einsum("m...,a...,mab...->b...", gp, p, prob.jac_g(x)) / prob.r
    return dx, dp


def hamiltonian_field(prob: ControlProblem, y: Array) -> Array:
    """Stacked field on ``y = (x, p)`` of shape ``(2n,)`` or ``(2n, k)``."""
    n = prob.n
    dx, dp = hamiltonian_dynamics(prob, y[:n], y[n:])
    return np.concatenate([dx, dp], axis=0)


def hamiltonian_field_jacobian(prob: ControlProblem, y: Array, h: float = 1e-6) -> Array:
    """Jacobian of :func:`hamiltonian_field`, shape ``(2n, 2n, k)`` for ``y`` of shape ``(2n, k)``.

    The costate block is exact (the field is at most quadratic in p); the
    state block needs second derivatives of f, q and g, which are taken by
    central differences of the analytic first derivatives.
    """
    n = prob.n
    y = np.asarray(y, dtype=float)
    single = y.ndim == 1
    if single:
        y = y[:, None]
    x, p = y[:n], y[n:]
    k = y.shape[1]
    jac = np.empty((2 * n, 2 * n, k))

    G = prob.g(x)
    Rx = np.einsum("am...,bm...->ab...", G, G) / prob.r
    Jf = prob.jac_f(x)
    jac[:n, n:] = -Rx
    jac[n:, n:] = -np.transpose(Jf, (1, 0, 2))
    if prob.jac_g is not None:
        gp = _gtp(prob, x, p)
        dG = prob.jac_g(x)
        # d/dp of (1/r) sum_j (g_j.p) dG_j^T p
        t1 = np.einsum("mab...,a...,cm...->bc...", dG, p, G)
        t2 = np.einsum("m...,mcb...->bc...", gp, dG)
        jac[n:, n:] += (t1 + t2) / prob.r

    for i in range(n):
        step = h * np.maximum(1.0, np.abs(x[i]))
        e = np.zeros_like(x)
        e[i] = step
        fp = hamiltonian_field(prob, np.concatenate([x + e, p]))
        fm = hamiltonian_field(prob, np.concatenate([x - e, p]))
        jac[:, i] = (fp - fm) / (2 * step)
    return jac[:, :, 0] if single else jac


def feedback_control(prob: ControlProblem, x, p) -> Array:
    x = _check(prob, x, prob.n, "x")
    p = _check(prob, p, prob.n, "p")
    return -_gtp(prob, x, p) / prob.r


def running_cost(prob: ControlProblem, x, u):
    x = _check(prob, x, prob.n, "x")
    u = _check(prob, u, prob.m, "u")
    return 0.5 * (prob.q(x) + prob.r * np.sum(u * u, axis=0))


def linearize(prob: ControlProblem, h: float = 1e-5) -> Linearization:
    zero = np.zeros(prob.n)
    A = np.array(prob.jac_f(zero), dtype=float)
    # Hessian of q/2 from differences of grad q; exact for quadratic q
    hess = _central_jacobian(prob.grad_q, zero, h=h)
    Q_eff = 0.25 * (hess + hess.T)
    g0 = prob.g(zero)
    R0 = g0 @ g0.T / prob.r
    return Linearization(A=A, Q_eff=Q_eff, R0=0.5 * (R0 + R0.T))
