"""Two-point boundary value solver: 3-stage Lobatto IIIA collocation.

The discrete solution is a C1 piecewise cubic (Hermite-Simpson scheme, fourth
order at the nodes). The nonlinear collocation system is solved by damped
Newton with a sparse LU of the block-banded Jacobian; the mesh is refined by
halving every interval whose relative residual exceeds the tolerance.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.interpolate import CubicHermiteSpline

NEWTON_MAX_ITER = 12
LINE_SEARCH_HALVINGS = 8
ARMIJO = 0.2
MAX_REFINEMENTS = 30


class MeshOverflow(RuntimeError):
    pass


class SingularJacobian(RuntimeError):
    pass


class OutOfRange(ValueError):
    pass


@dataclass
class BvpProblem:
    rhs: Callable[[np.ndarray, np.ndarray], np.ndarray]
    bc: Callable[[np.ndarray, np.ndarray], np.ndarray]
    T: float
    mesh0: np.ndarray
    guess0: np.ndarray
    tol: float = 1e-5
    max_nodes: int = 5000
    jac: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = None
    bc_jac: Optional[Callable[[np.ndarray, np.ndarray], tuple[np.ndarray, np.ndarray]]] = None
    refine: bool = True

    def __post_init__(self):
        self.mesh0 = np.asarray(self.mesh0, dtype=float)
        self.guess0 = np.asarray(self.guess0, dtype=float)
        if self.mesh0.ndim != 1 or self.mesh0.size < 2:
            raise ValueError("mesh needs at least two nodes")
        if np.any(np.diff(self.mesh0) <= 0):
            raise ValueError("mesh must be strictly increasing")
        if self.guess0.ndim != 2 or self.guess0.shape[1] != self.mesh0.size:
            raise ValueError("guess0 must have shape (dim, len(mesh0))")


@dataclass
class BvpSolution:
    mesh: np.ndarray
    y_nodes: np.ndarray
    f_nodes: np.ndarray
    interval_residuals: np.ndarray
    rms_residual: float
    bc_residual: float
    converged: bool
    newton_iters: int
    status: str
    interpolant: CubicHermiteSpline = field(repr=False)

    @property
    def T(self) -> float:
        return float(self.mesh[-1])


def _fd_jac(rhs, t, y, h=1e-7):
    N, k = y.shape
    jac = np.empty((N, N, k))
    f0 = rhs(t, y)
    for i in range(N):
        step = h * np.maximum(1.0, np.abs(y[i]))
        yp = y.copy()
        yp[i] += step
        jac[:, i] = (rhs(t, yp) - f0) / step
    return jac


def _fd_bc_jac(bc, ya, yb, h=1e-7):
    r0 = np.asarray(bc(ya, yb))
    ja = np.empty((r0.size, ya.size))
    jb = np.empty((r0.size, yb.size))
    for i in range(ya.size):
        e = np.zeros_like(ya)
        e[i] = h * max(1.0, abs(ya[i]))
        ja[:, i] = (bc(ya + e, yb) - r0) / e[i]
        jb[:, i] = (bc(ya, yb + e) - r0) / e[i]
    return ja, jb


class _Collocation:
    """Collocation residual and Jacobian on a fixed mesh."""

    def __init__(self, bp: BvpProblem, mesh: np.ndarray):
        self.bp = bp
        self.mesh = mesh
        self.h = np.diff(mesh)
        self.mid = mesh[:-1] + 0.5 * self.h
        self.N = bp.guess0.shape[0]
        self._pattern()

    def _pattern(self):
        N, n_int = self.N, self.h.size
        blk = np.arange(N)
        # interval i: rows i*N.., columns of nodes i and i+1
        r = (np.arange(n_int)[:, None, None] * N + blk[None, :, None]) * np.ones((1, 1, N), int)
        c_left = (np.arange(n_int)[:, None, None] * N + blk[None, None, :]) * np.ones((1, N, 1), int)
        c_right = c_left + N
        nb = N * (n_int + 1)
        bc_rows = nb - N + blk[:, None] * np.ones((1, N), int)
        bc_left = np.ones((N, 1), int) * blk[None, :]
        bc_right = bc_left + n_int * N
        self.rows = np.concatenate([r.ravel(), r.ravel(), bc_rows.ravel(), bc_rows.ravel()])
        self.cols = np.concatenate([c_left.ravel(), c_right.ravel(), bc_left.ravel(), bc_right.ravel()])
        self.size = nb

    def rhs(self, t, y):
        return self.bp.rhs(t, y)

    def jac(self, t, y):
        if self.bp.jac is not None:
            return self.bp.jac(t, y)
        return _fd_jac(self.bp.rhs, t, y)

    def residual(self, y):
        f = self.rhs(self.mesh, y)
        h = self.h
        y_mid = 0.5 * (y[:, 1:] + y[:, :-1]) - 0.125 * h * (f[:, 1:] - f[:, :-1])
        f_mid = self.rhs(self.mid, y_mid)
        col = y[:, 1:] - y[:, :-1] - h / 6.0 * (f[:, :-1] + 4.0 * f_mid + f[:, 1:])
        bc = np.asarray(self.bp.bc(y[:, 0], y[:, -1]), dtype=float)
        return col, bc, f, y_mid, f_mid

    def flat(self, col, bc):
        return np.concatenate([col.T.ravel(), bc])

    def jacobian(self, y, f, y_mid):
        N, h = self.N, self.h
        J = self.jac(self.mesh, y)
        Jm = self.jac(self.mid, y_mid)
        # move batch axis first: (k, N, N)
        J = np.moveaxis(J, -1, 0)
        Jm = np.moveaxis(Jm, -1, 0)
        I = np.eye(N)
        hc = h[:, None, None]
        Ji, Jn = J[:-1], J[1:]
        dmid_left = 0.5 * I + 0.125 * hc * Ji
        dmid_right = 0.5 * I - 0.125 * hc * Jn
        left = -I - hc / 6.0 * (Ji + 4.0 * Jm @ dmid_left)
        right = I - hc / 6.0 * (Jn + 4.0 * Jm @ dmid_right)
        if self.bp.bc_jac is not None:
            ba, bb = self.bp.bc_jac(y[:, 0], y[:, -1])
        else:
            ba, bb = _fd_bc_jac(self.bp.bc, y[:, 0], y[:, -1])
        data = np.concatenate([left.ravel(), right.ravel(), np.ravel(ba), np.ravel(bb)])
        return sp.csc_matrix((data, (self.rows, self.cols)), shape=(self.size, self.size))


def _newton(coll: _Collocation, y: np.ndarray, tol: float):
    """Damped Newton on the collocation system. Returns (y, converged, iterations)."""
    col, bc, f, y_mid, f_mid = coll.residual(y)
    F = coll.flat(col, bc)
    norm = np.linalg.norm(F)
    for it in range(1, NEWTON_MAX_ITER + 1):
        jac = coll.jacobian(y, f, y_mid)
        try:
            lu = spla.splu(jac)
        except RuntimeError as exc:
            raise SingularJacobian(str(exc)) from exc
        step = lu.solve(F)
        if not np.all(np.isfinite(step)):
            raise SingularJacobian("non-finite Newton step")
        step = step.reshape(-1, coll.N).T
        alpha = 1.0
        for _ in range(LINE_SEARCH_HALVINGS + 1):
            y_try = y - alpha * step
            col_t, bc_t, f_t, ym_t, fm_t = coll.residual(y_try)
            F_try = coll.flat(col_t, bc_t)
            norm_try = np.linalg.norm(F_try)
            if np.isfinite(norm_try) and norm_try <= (1.0 - ARMIJO * alpha) * norm:
                break
            alpha *= 0.5
        else:
            return y, False, it
        y, col, bc, f, y_mid, f_mid, norm = y_try, col_t, bc_t, f_t, ym_t, fm_t, norm_try
        scale = coll.h * (1.0 + np.abs(f_mid))
        if np.max(np.abs(col) / scale) < 0.1 * tol and np.max(np.abs(bc), initial=0.0) < 0.1 * tol:
            return y, True, it
    return y, False, NEWTON_MAX_ITER


def _interpolant(mesh, y, f):
    return CubicHermiteSpline(mesh, y, f, axis=1)


def _rms_residuals(rhs, mesh, spline):
    """Relative residual of the collocation polynomial, RMS over each interval.

    Uses 5-point Lobatto quadrature; the end points carry zero residual.
    """
    h = np.diff(mesh)
    mid = mesh[:-1] + 0.5 * h
    s = 0.5 * h * np.sqrt(3.0 / 7.0)
    d = spline.derivative()
    out = []
    for t in (mid, mid + s, mid - s):
        yt = spline(t)
        ft = rhs(t, yt)
        r = (d(t) - ft) / (1.0 + np.abs(ft))
        out.append(np.sum(r * r, axis=0))
    r_mid, r1, r2 = out
    return np.sqrt(0.5 * (32.0 / 45.0 * r_mid + 49.0 / 90.0 * (r1 + r2)))


def solve_bvp(bp: BvpProblem) -> BvpSolution:
    mesh = bp.mesh0.copy()
    y = bp.guess0.copy()
    total_iters = 0
    status = "max_refinements"
    converged = False
    res = np.full(mesh.size - 1, np.inf)
    bc_res = np.inf
    for _ in range(MAX_REFINEMENTS):
        coll = _Collocation(bp, mesh)
        try:
            y, newton_ok, iters = _newton(coll, y, bp.tol)
        except SingularJacobian:
            status = "singular_jacobian"
            break
        total_iters += iters
        if not np.all(np.isfinite(y)):
            status = "diverged"
            break
        f = bp.rhs(mesh, y)
        spline = _interpolant(mesh, y, f)
        res = _rms_residuals(bp.rhs, mesh, spline)
        bc_res = float(np.max(np.abs(bp.bc(y[:, 0], y[:, -1])), initial=0.0))
        if newton_ok and np.max(res) <= bp.tol and bc_res <= bp.tol:
            converged = True
            status = "converged"
            break
        if not bp.refine:
            status = "newton_failed" if not newton_ok else "tolerance_not_met"
            break
        bad = np.flatnonzero(res > bp.tol)
        if bad.size == 0:
            # residual is fine but Newton stalled; refine everywhere once more
            bad = np.arange(mesh.size - 1)
        new_t = mesh[bad] + 0.5 * np.diff(mesh)[bad]
        if mesh.size + new_t.size > bp.max_nodes:
            status = "mesh_overflow"
            break
        new_mesh = np.sort(np.concatenate([mesh, new_t]))
        y_new = spline(new_mesh)
        y_new[:, np.searchsorted(new_mesh, mesh)] = y
        mesh, y = new_mesh, y_new
    f = bp.rhs(mesh, y)
    spline = _interpolant(mesh, y, f)
    if res.size != mesh.size - 1:
        res = _rms_residuals(bp.rhs, mesh, spline)
    return BvpSolution(
        mesh=mesh,
        y_nodes=y,
        f_nodes=f,
        interval_residuals=res,
        rms_residual=float(np.max(res)),
        bc_residual=bc_res,
        converged=converged,
        newton_iters=total_iters,
        status=status,
        interpolant=spline,
    )


def evaluate(sol: BvpSolution, t):
    """Dense output of the collocation polynomial; exact nodal values at mesh points."""
    t_arr = np.atleast_1d(np.asarray(t, dtype=float))
    T = sol.T
    slack = 1e-12 * max(1.0, T)
    if np.any(t_arr < -slack) or np.any(t_arr > T + slack):
        raise OutOfRange(f"t must lie in [0, {T}]")
    t_arr = np.clip(t_arr, 0.0, T)
    out = sol.interpolant(t_arr)
    idx = np.searchsorted(sol.mesh, t_arr)
    idx = np.minimum(idx, sol.mesh.size - 1)
    hit = sol.mesh[idx] == t_arr
    out[:, hit] = sol.y_nodes[:, idx[hit]]
    return out[:, 0] if np.ndim(t) == 0 else out


def residual_norm(sol: BvpSolution) -> float:
    return sol.rms_residual
