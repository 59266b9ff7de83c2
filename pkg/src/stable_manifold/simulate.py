"""Closed-loop simulation, cost evaluation and numerical checks of the decay
and perturbation estimates for learned feedback laws."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from scipy.integrate import trapezoid

from . import nn
from .problem import ControlProblem, running_cost

BLOWUP_FACTOR = 1e3


class GridMismatch(ValueError):
    pass


class NoSamplesInBall(ValueError):
    pass


class Blowup(RuntimeError):
    """Raised by callers that treat a diverging closed loop as an error."""


@dataclass
class Controller:
    """Costate map on row batches: (k, n) -> (k, n)."""

    costate_map: Callable[[np.ndarray], np.ndarray]
    label: str = "controller"


def nn_controller(theta: nn.NetParams, label: str = "nn") -> Controller:
    return Controller(nn.compile_forward(theta), label)


def linear_controller(P, label: str = "linear") -> Controller:
    P = np.asarray(P, dtype=float)
    return Controller(lambda X: X @ P.T, label)


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray  # (steps + 1, n)
    controls: np.ndarray  # (steps + 1, m)
    blowup: bool = False
    label: str = ""

    @property
    def terminal_norm(self) -> float:
        return float("inf") if self.blowup else float(np.linalg.norm(self.states[-1]))

    @property
    def norms(self) -> np.ndarray:
        return np.linalg.norm(self.states, axis=1)


def _closed_loop_field(prob: ControlProblem, ctrl: Controller, X: np.ndarray):
    # X: (k, n) rows; returns (xdot rows, u rows)
    Xt = X.T
    G = prob.g(Xt)
    u = -np.einsum("am...,a...->m...", G, ctrl.costate_map(X).T) / prob.r
    xdot = prob.f(Xt) + np.einsum("am...,m...->a...", G, u)
    return xdot.T, u.T


def closed_loop(prob: ControlProblem, ctrl: Controller, x0, T_sim: float = 20.0,
                dt: float = 1e-3):
    """Classical RK4 on ``xdot = f(x) - R(x) p(x)``.

    ``x0`` may be one state (n,) or a batch (k, n); the batch is integrated in
    lockstep and a list of trajectories is returned.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    X0 = np.atleast_2d(np.asarray(x0, dtype=float))
    single = np.ndim(x0) == 1
    if X0.shape[1] != prob.n:
        raise ValueError(f"x0 must have {prob.n} components")
    steps = int(round(T_sim / dt))
    times = dt * np.arange(steps + 1)
    lo, hi = prob.domain
    limit = BLOWUP_FACTOR * max(np.linalg.norm(hi - lo), 1.0)

    k = X0.shape[0]
    states = np.empty((steps + 1, k, prob.n))
    controls = np.empty((steps + 1, k, prob.m))
    alive = np.ones(k, dtype=bool)
    last = np.full(k, steps)
    X = X0.copy()
    states[0] = X
    for i in range(steps):
        k1, u = _closed_loop_field(prob, ctrl, X)
        controls[i] = u
        k2, _ = _closed_loop_field(prob, ctrl, X + 0.5 * dt * k1)
        k3, _ = _closed_loop_field(prob, ctrl, X + 0.5 * dt * k2)
        k4, _ = _closed_loop_field(prob, ctrl, X + dt * k3)
        X = X + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        states[i + 1] = X
        bad = alive & ~(np.all(np.isfinite(X), axis=1) & (np.linalg.norm(X, axis=1) <= limit))
        if bad.any():
            last[bad] = i + 1
            alive &= ~bad
            X[bad] = 0.0
            if not alive.any():
                break
    _, u = _closed_loop_field(prob, ctrl, X)
    controls[steps] = u

    out = []
    for j in range(k):
        end = last[j] + 1
        out.append(Trajectory(times[:end].copy(), states[:end, j].copy(), controls[:end, j].copy(),
                              blowup=not alive[j], label=ctrl.label))
    return out[0] if single else out


def cost(prob: ControlProblem, traj: Trajectory) -> float:
    """Trapezoid quadrature of the running cost along the trajectory."""
    L = running_cost(prob, traj.states.T, traj.controls.T)
    return float(trapezoid(L, traj.times))


@dataclass
class DecayFit:
    alpha_fit: float
    C_fit: float
    r2: float


def verify_decay(traj: Trajectory, window: Optional[tuple[float, float]] = None,
                 floor: float = 1e-250, x0_norm: Optional[float] = None) -> DecayFit:
    """Least-squares fit of ``log|x(t)| = log(C |x0|) - alpha t``.

    Default window is the last half of the trajectory. Points with norm at or
    below ``floor`` are excluded; if fewer than three remain the fit is
    degenerate and alpha is reported as +inf.
    """
    t, nrm = traj.times, traj.norms
    if window is None:
        window = (0.5 * t[-1], t[-1])
    mask = (t >= window[0]) & (t <= window[1]) & (nrm > floor)
    if mask.sum() < 3:
        return DecayFit(float("inf"), float("nan"), 1.0)
    tt, ly = t[mask], np.log(nrm[mask])
    slope, icpt = np.polyfit(tt, ly, 1)
    pred = icpt + slope * tt
    ss_res = float(np.sum((ly - pred) ** 2))
    ss_tot = float(np.sum((ly - ly.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    x0n = float(np.linalg.norm(traj.states[0])) if x0_norm is None else x0_norm
    C = float(np.exp(icpt) / x0n) if x0n > 0 else float("nan")
    return DecayFit(float(-slope), C, r2)


def decay_window(traj: Trajectory, entry: float = 0.1, floor_factor: float = 10.0
                 ) -> tuple[float, float]:
    """Fit window for learned controllers.

    Starts when |x| first drops below ``entry * |x0|`` and ends when it first
    drops below ``floor_factor`` times the terminal norm, which excludes the
    offset left by a model with p(0) != 0.
    """
    t, nrm = traj.times, traj.norms
    start_idx = np.flatnonzero(nrm < entry * nrm[0])
    start = t[start_idx[0]] if start_idx.size else t[0]
    floor = floor_factor * nrm[-1]
    end_idx = np.flatnonzero((t > start) & (nrm < floor))
    end = t[end_idx[0]] if end_idx.size else t[-1]
    return float(start), float(end)


def compare_trajectories(traj_a: Trajectory, traj_b: Trajectory, T_eps: float) -> float:
    """Sup over grid times in [0, T_eps] of |x_a(t) - x_b(t)|."""
    n = min(traj_a.times.size, traj_b.times.size)
    if traj_a.times.size != traj_b.times.size and not (traj_a.blowup or traj_b.blowup):
        raise GridMismatch("trajectories use different grids")
    if not np.array_equal(traj_a.times[:n], traj_b.times[:n]):
        raise GridMismatch("trajectories use different grids")
    sel = traj_a.times[:n] <= T_eps + 1e-12
    diff = np.linalg.norm(traj_a.states[:n][sel] - traj_b.states[:n][sel], axis=1)
    return float(np.max(diff))


def admissible_time(traj: Trajectory, eps: float = 1e-2) -> float:
    """First grid time after which |x(t)| stays below eps / 2 (inf if never)."""
    below = traj.norms < 0.5 * eps
    if not below[-1]:
        return float("inf")
    # last index that is not below, then the next grid time
    above = np.flatnonzero(~below)
    return float(traj.times[0] if above.size == 0 else traj.times[above[-1] + 1])


def quadratic_remainder_check(X, Pc, P, radius: float = 0.1, min_norm: float = 1e-6) -> float:
    """max |p - P x| / |x|^2 over samples with min_norm <= |x| <= radius."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Pc = np.atleast_2d(np.asarray(Pc, dtype=float))
    nrm = np.linalg.norm(X, axis=1)
    sel = (nrm <= radius) & (nrm >= min_norm)
    if not sel.any():
        raise NoSamplesInBall(f"no samples with {min_norm} <= |x| <= {radius}")
    rem = np.linalg.norm(Pc[sel] - X[sel] @ np.asarray(P, dtype=float).T, axis=1)
    return float(np.max(rem / nrm[sel] ** 2))


def save_trajectory(traj: Trajectory, path, header: str = "") -> None:
    n, m = traj.states.shape[1], traj.controls.shape[1]
    cols = ["t"] + [f"x{i}" for i in range(n)] + [f"u{j}" for j in range(m)]
    lines = []
    if header:
        lines.append("# " + header)
    lines.append("# " + " ".join(cols))
    data = np.column_stack([traj.times, traj.states, traj.controls])
    lines += [" ".join(format(v, ".17g") for v in row) for row in data]
    Path(path).write_text("\n".join(lines) + "\n")


def load_trajectory(path, m: int = 1) -> Trajectory:
    rows = [l for l in Path(path).read_text().splitlines() if l and not l.startswith("#")]
    data = np.array([[float(v) for v in r.split()] for r in rows])
    n = data.shape[1] - 1 - m
    return Trajectory(data[:, 0], data[:, 1:1 + n], data[:, 1 + n:])
