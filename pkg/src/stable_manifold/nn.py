"""Gated (DGM/LSTM-like) network with sine activation, in plain numpy.

Layer recurrence for a batch ``X`` of shape (N, n), row convention::

    S1      = sin(X W1^T + b1)
    Z, G, R = sin(X U^T + S W^T + b)              per gate
    Hc      = sin(X Uh^T + (S * R) Wh^T + bh)
    S'      = (1 - G) * Hc + Z * S
    out     = S_last W^T + b
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

GATES = ("z", "g", "r", "h")
WEIGHTS_MAGIC = "# stable_manifold weights v1"
RESIDUAL_FLOOR = 1e-12


class EmptyBatch(ValueError):
    pass


def param_names(L: int) -> list[str]:
    names = ["W1", "b1"]
    for gate in GATES:
        for i in range(1, L + 1):
            names += [f"U{gate}{i}", f"W{gate}{i}", f"b{gate}{i}"]
    return names + ["W", "b"]


def param_count(L: int, M: int, n: int, n_out: int) -> int:
    return M * n + M + 4 * L * (M * n + M * M + M) + n_out * M + n_out


@dataclass
class NetParams:
    L: int
    M: int
    n: int
    n_out: int
    params: dict[str, np.ndarray] = field(repr=False)

    def shapes(self) -> dict[str, tuple[int, ...]]:
        L, M, n = self.L, self.M, self.n
        out = {"W1": (M, n), "b1": (M,)}
        for gate in GATES:
            for i in range(1, L + 1):
                out[f"U{gate}{i}"] = (M, n)
                out[f"W{gate}{i}"] = (M, M)
                out[f"b{gate}{i}"] = (M,)
        out["W"] = (self.n_out, M)
        out["b"] = (self.n_out,)
        return out

    @property
    def size(self) -> int:
        return sum(v.size for v in self.params.values())

    def copy(self) -> "NetParams":
        return NetParams(self.L, self.M, self.n, self.n_out, {k: v.copy() for k, v in self.params.items()})

    def like(self, params: dict[str, np.ndarray]) -> "NetParams":
        return NetParams(self.L, self.M, self.n, self.n_out, params)

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.params[k].ravel() for k in param_names(self.L)])

    def from_vector(self, vec) -> "NetParams":
        out, pos = {}, 0
        for name, shape in self.shapes().items():
            size = int(np.prod(shape))
            out[name] = np.asarray(vec[pos:pos + size], dtype=float).reshape(shape).copy()
            pos += size
        return self.like(out)


def init_params(L: int, M: int, n: int, n_out: int, seed=0) -> NetParams:
    """Uniform fan-in initialization of weights, zero biases."""
    if L < 1 or M < 1 or n < 1 or n_out < 1:
        raise ValueError("L, M, n, n_out must be positive")
    rng = np.random.default_rng(seed)
    net = NetParams(L, M, n, n_out, {})
    params = {}
    for name, shape in net.shapes().items():
        if name.startswith("b"):
            params[name] = np.zeros(shape)
        else:
            bound = np.sqrt(1.0 / shape[1])
            params[name] = rng.uniform(-bound, bound, size=shape)
    net.params = params
    return net


def _forward(theta: NetParams, X: np.ndarray, keep: bool):
    P = theta.params
    a1 = X @ P["W1"].T + P["b1"]
    S = np.sin(a1)
    cache = [(a1,)] if keep else None
    for i in range(1, theta.L + 1):
        az = X @ P[f"Uz{i}"].T + S @ P[f"Wz{i}"].T + P[f"bz{i}"]
        ag = X @ P[f"Ug{i}"].T + S @ P[f"Wg{i}"].T + P[f"bg{i}"]
        ar = X @ P[f"Ur{i}"].T + S @ P[f"Wr{i}"].T + P[f"br{i}"]
        Z, G, R = np.sin(az), np.sin(ag), np.sin(ar)
        SR = S * R
        ah = X @ P[f"Uh{i}"].T + SR @ P[f"Wh{i}"].T + P[f"bh{i}"]
        Hc = np.sin(ah)
        if keep:
            cache.append((S, az, ag, ar, ah, Z, G, R, SR, Hc))
        S = (1.0 - G) * Hc + Z * S
    out = S @ P["W"].T + P["b"]
    if keep:
        cache.append((S,))
    return out, cache


def _as_batch(theta: NetParams, x) -> tuple[np.ndarray, bool]:
    X = np.asarray(x, dtype=float)
    single = X.ndim == 1
    X = np.atleast_2d(X)
    if X.shape[1] != theta.n:
        raise ValueError(f"input must have {theta.n} columns, got shape {np.shape(x)}")
    return X, single


def forward(theta: NetParams, x) -> np.ndarray:
    """Network output for one state (n,) or a batch (N, n)."""
    X, single = _as_batch(theta, x)
    out, _ = _forward(theta, X, keep=False)
    return out[0] if single else out


def compile_forward(theta: NetParams):
    """Inference-only forward on row batches with the z, g, r gates stacked.

    Same arithmetic as ``forward`` with fewer array operations, for the many
    small-batch calls of a closed-loop simulation.
    """
    P, M = theta.params, theta.M
    W1T, b1 = P["W1"].T.copy(), P["b1"]
    layers = []
    for i in range(1, theta.L + 1):
        UT = np.concatenate([P[f"U{g}{i}"] for g in "zgr"]).T.copy()
        WT = np.concatenate([P[f"W{g}{i}"] for g in "zgr"]).T.copy()
        b = np.concatenate([P[f"b{g}{i}"] for g in "zgr"])
        layers.append((UT, WT, b, P[f"Uh{i}"].T.copy(), P[f"Wh{i}"].T.copy(), P[f"bh{i}"]))
    WT_out, b_out = P["W"].T.copy(), P["b"]

    def run(X: np.ndarray) -> np.ndarray:
        S = np.sin(X @ W1T + b1)
        for UT, WT, b, UhT, WhT, bh in layers:
            A = np.sin(X @ UT + S @ WT + b)
            Z, G, R = A[:, :M], A[:, M:2 * M], A[:, 2 * M:]
            Hc = np.sin(X @ UhT + (S * R) @ WhT + bh)
            S = (1.0 - G) * Hc + Z * S
        return S @ WT_out + b_out

    return run


def _backward(theta: NetParams, X: np.ndarray, cache, d_out: np.ndarray) -> dict[str, np.ndarray]:
    P = theta.params
    grads = {}
    (S_last,) = cache[-1]
    grads["W"] = d_out.T @ S_last
    grads["b"] = d_out.sum(axis=0)
    dS = d_out @ P["W"]
    for i in range(theta.L, 0, -1):
        S, az, ag, ar, ah, Z, G, R, SR, Hc = cache[i]
        d_ah = dS * (1.0 - G) * np.cos(ah)
        d_ag = -dS * Hc * np.cos(ag)
        d_az = dS * S * np.cos(az)
        dS_prev = dS * Z
        d_SR = d_ah @ P[f"Wh{i}"]
        dS_prev += d_SR * R
        d_ar = d_SR * S * np.cos(ar)
        grads[f"Uh{i}"] = d_ah.T @ X
        grads[f"Wh{i}"] = d_ah.T @ SR
        grads[f"bh{i}"] = d_ah.sum(axis=0)
        for gate, d_a in (("z", d_az), ("g", d_ag), ("r", d_ar)):
            grads[f"U{gate}{i}"] = d_a.T @ X
            grads[f"W{gate}{i}"] = d_a.T @ S
            grads[f"b{gate}{i}"] = d_a.sum(axis=0)
            dS_prev += d_a @ P[f"W{gate}{i}"]
        dS = dS_prev
    (a1,) = cache[0]
    d_a1 = dS * np.cos(a1)
    grads["W1"] = d_a1.T @ X
    grads["b1"] = d_a1.sum(axis=0)
    return {k: grads[k] for k in param_names(theta.L)}


def batch_arrays(batch):
    """Accept a Dataset-like object with ``x``/``p`` arrays or a sequence of samples."""
    if hasattr(batch, "x") and hasattr(batch, "p") and np.ndim(batch.x) == 2:
        X, Pt = np.asarray(batch.x, dtype=float), np.asarray(batch.p, dtype=float)
    else:
        batch = list(batch)
        if not batch:
            raise EmptyBatch("empty batch")
        X = np.array([s.x for s in batch], dtype=float)
        Pt = np.array([s.p for s in batch], dtype=float)
    if X.shape[0] == 0:
        raise EmptyBatch("empty batch")
    return X, Pt


def sample_errors(theta: NetParams, batch) -> np.ndarray:
    """Euclidean norm of the prediction error per sample."""
    X, Pt = batch_arrays(batch)
    return np.linalg.norm(forward(theta, X) - Pt, axis=1)


def loss(theta: NetParams, batch, nu: int = 1) -> float:
    """Mean of ``|p_i - net(x_i)|^nu``."""
    return float(np.mean(sample_errors(theta, batch) ** nu))


def loss_and_grad(theta: NetParams, batch, nu: int = 1) -> tuple[float, dict[str, np.ndarray]]:
    if nu not in (1, 2):
        raise ValueError("nu must be 1 or 2")
    X, Pt = batch_arrays(batch)
    N = X.shape[0]
    out, cache = _forward(theta, X, keep=True)
    E = out - Pt
    e = np.linalg.norm(E, axis=1)
    if nu == 2:
        value = np.mean(e * e)
        d_out = 2.0 * E / N
    else:
        value = np.mean(e)
        # zero subgradient at a vanishing residual
        safe = np.where(e < RESIDUAL_FLOOR, np.inf, e)
        d_out = E / (safe[:, None] * N)
    return float(value), _backward(theta, X, cache, d_out)


def grad(theta: NetParams, batch, nu: int = 1) -> NetParams:
    return theta.like(loss_and_grad(theta, batch, nu)[1])


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, theta: NetParams, **kw) -> "AdamState":
        return cls(
            {k: np.zeros_like(a) for k, a in theta.params.items()},
            {k: np.zeros_like(a) for k, a in theta.params.items()},
            **kw,
        )


def adam_step(state: AdamState, theta: NetParams, gradient, lr: float) -> tuple[NetParams, AdamState]:
    """One bias-corrected Adam update; returns new parameters and state."""
    g = gradient.params if isinstance(gradient, NetParams) else gradient
    step = state.step + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** step
    c2 = 1.0 - b2 ** step
    new_p, new_m, new_v = {}, {}, {}
    for k, w in theta.params.items():
        m = b1 * state.m[k] + (1.0 - b1) * g[k]
        v = b2 * state.v[k] + (1.0 - b2) * g[k] * g[k]
        new_p[k] = w - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        new_m[k], new_v[k] = m, v
    return theta.like(new_p), AdamState(new_m, new_v, step, b1, b2, state.eps)


def save_weights(theta: NetParams, path, header: str = "") -> None:
    """Text dump; ``header`` lines are written as ``#`` comments after the magic line."""
    lines = [WEIGHTS_MAGIC] + ["# " + h for h in header.splitlines()]
    lines.append(f"{theta.L} {theta.M} {theta.n} {theta.n_out}")
    for name in param_names(theta.L):
        a = theta.params[name]
        lines.append(name + " " + " ".join(str(d) for d in a.shape))
        lines.append(" ".join(format(float(v), ".17g") for v in a.ravel()))
    Path(path).write_text("\n".join(lines) + "\n")


def load_weights(path) -> NetParams:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].strip() != WEIGHTS_MAGIC:
        raise ValueError(f"{path}: not a weights file")
    lines = lines[:1] + [l for l in lines[1:] if not l.startswith("#")]
    L, M, n, n_out = (int(v) for v in lines[1].split())
    net = NetParams(L, M, n, n_out, {})
    shapes = net.shapes()
    params, pos = {}, 2
    for name in param_names(L):
        head = lines[pos].split()
        if head[0] != name or tuple(int(d) for d in head[1:]) != shapes[name]:
            raise ValueError(f"{path}: unexpected block {lines[pos]!r}, wanted {name}")
        vals = np.array([float(v) for v in lines[pos + 1].split()])
        params[name] = vals.reshape(shapes[name])
        pos += 2
    net.params = params
    return net
