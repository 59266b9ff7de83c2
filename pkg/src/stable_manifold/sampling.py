"""Data generation on the stable manifold.

Initial states are drawn uniformly in the domain, each characteristic BVP
``x(0) = x0, p(T) = 0`` is solved by collocation, and samples are read off
the dense solution at exponentially distributed times. Refinement adds
trajectories started near the samples with the largest model errors.
"""
from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

from .bvp import BvpProblem, BvpSolution, evaluate, solve_bvp
from .problem import ControlProblem, hamiltonian, hamiltonian_field, hamiltonian_field_jacobian

log = logging.getLogger(__name__)

H_ADMISSION_TOL = 1e-3


class TooFewTrajectories(RuntimeError):
    pass


@dataclass(frozen=True)
class TrajectorySample:
    t: float
    x: np.ndarray
    p: np.ndarray
    traj_id: int


@dataclass(frozen=True)
class Diverged:
    x0: np.ndarray
    status: str
    traj_id: int


@dataclass
class SamplingConfig:
    K: int = 200
    M: int = 20
    lam: float = 0.6
    T: float = 20.0
    tol: float = 1e-5
    mesh_intervals: int = 150
    seed: int = 0
    max_nodes: int = 5000

    def __post_init__(self):
        if self.K < 1 or self.M < 1:
            raise ValueError("K and M must be at least 1")
        if not self.lam > 0 or not self.T > 0 or not self.tol > 0:
            raise ValueError("lambda, T and tol must be positive")
        if self.mesh_intervals < 1:
            raise ValueError("mesh_intervals must be positive")


@dataclass
class RefineConfig:
    mu: float = 0.05
    J: int = 4
    L_s: int = 3
    sigma_pert: float = 0.1
    seed: int = 1

    def __post_init__(self):
        if not 0 <= self.mu <= 1:
            raise ValueError("mu must lie in [0, 1]")
        if self.J < 0 or self.L_s < 1 or self.sigma_pert < 0:
            raise ValueError("invalid refinement parameters")


@dataclass
class Dataset:
    """Samples stored column-wise; ``samples`` gives the record view."""

    traj_id: np.ndarray
    t: np.ndarray
    x: np.ndarray
    p: np.ndarray
    rng_seed: int = 0
    provenance: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return self.t.size

    @property
    def n(self) -> int:
        return self.x.shape[1]

    @property
    def samples(self) -> Iterator[TrajectorySample]:
        for i in range(len(self)):
            yield TrajectorySample(float(self.t[i]), self.x[i], self.p[i], int(self.traj_id[i]))

    @classmethod
    def empty(cls, n: int, seed: int = 0) -> "Dataset":
        return cls(np.zeros(0, int), np.zeros(0), np.zeros((0, n)), np.zeros((0, n)), seed)

    @classmethod
    def from_samples(cls, samples: Sequence[TrajectorySample], n: int, seed: int = 0, provenance=None):
        if not samples:
            ds = cls.empty(n, seed)
        else:
            ds = cls(
                np.array([s.traj_id for s in samples], dtype=int),
                np.array([s.t for s in samples], dtype=float),
                np.array([s.x for s in samples], dtype=float).reshape(-1, n),
                np.array([s.p for s in samples], dtype=float).reshape(-1, n),
                seed,
            )
        ds.provenance = dict(provenance or {})
        return ds

    def union(self, other: "Dataset") -> "Dataset":
        return Dataset(
            np.concatenate([self.traj_id, other.traj_id]),
            np.concatenate([self.t, other.t]),
            np.concatenate([self.x, other.x]),
            np.concatenate([self.p, other.p]),
            self.rng_seed,
            dict(self.provenance),
        )


def sample_initial_conditions(domain, K: int, seed) -> np.ndarray:
    """K states i.i.d. uniform on the box, shape (K, n)."""
    if K < 1:
        raise ValueError("K must be at least 1")
    lo, hi = (np.asarray(b, dtype=float) for b in domain)
    rng = np.random.default_rng(seed)
    return lo + (hi - lo) * rng.random((K, lo.size))


def exponential_times(lam: float, M: int, T: float, seed) -> np.ndarray:
    """``0`` followed by M-1 exponential(mean lam) draws redrawn until below T, sorted."""
    if M < 1:
        raise ValueError("M must be at least 1")
    if not lam > 0:
        raise ValueError("lam must be positive")
    rng = np.random.default_rng(seed)
    times = [0.0]
    while len(times) < M:
        t = rng.exponential(lam)
        if t < T:
            times.append(t)
    return np.sort(np.array(times))


def characteristic_bvp(prob: ControlProblem, x0, T: float, intervals: int, tol: float,
                       max_nodes: int = 5000) -> BvpProblem:
    n = prob.n
    x0 = np.asarray(x0, dtype=float)
    mesh = np.linspace(0.0, T, intervals + 1)
    bc_a = np.zeros((2 * n, 2 * n))
    bc_a[:n, :n] = np.eye(n)
    bc_b = np.zeros((2 * n, 2 * n))
    bc_b[n:, n:] = np.eye(n)
    return BvpProblem(
        rhs=_Field(prob),
        bc=_Boundary(x0, n),
        T=T,
        mesh0=mesh,
        guess0=np.zeros((2 * n, mesh.size)),
        tol=tol,
        max_nodes=max_nodes,
        jac=_FieldJac(prob),
        bc_jac=lambda ya, yb: (bc_a, bc_b),
    )


class _Field:
    def __init__(self, prob):
        self.prob = prob

    def __call__(self, t, y):
        return hamiltonian_field(self.prob, y)


class _FieldJac(_Field):
    def __call__(self, t, y):
        return hamiltonian_field_jacobian(self.prob, y)


class _Boundary:
    def __init__(self, x0, n):
        self.x0, self.n = x0, n

    def __call__(self, ya, yb):
        return np.concatenate([ya[: self.n] - self.x0, yb[self.n:]])


def solve_characteristic(prob: ControlProblem, x0, cfg: SamplingConfig) -> BvpSolution:
    return solve_bvp(characteristic_bvp(prob, x0, cfg.T, cfg.mesh_intervals, cfg.tol, cfg.max_nodes))


def generate_trajectory_samples(prob: ControlProblem, x0, cfg: SamplingConfig, traj_id: int,
                                seed=None, M: Optional[int] = None):
    """Solve one characteristic BVP and sample it at exponential times.

    Returns a list of TrajectorySample, or Diverged when the solve fails.
    Samples violating the Hamiltonian admission check are dropped.
    """
    x0 = np.asarray(x0, dtype=float)
    M = cfg.M if M is None else M
    sol = solve_characteristic(prob, x0, cfg)
    if not sol.converged:
        return Diverged(x0, sol.status, traj_id)
    times = exponential_times(cfg.lam, M, cfg.T, seed)
    y = evaluate(sol, times)
    x, p = y[: prob.n], y[prob.n:]
    H = np.abs(hamiltonian(prob, x, p))
    return [
        TrajectorySample(float(times[j]), x[:, j].copy(), p[:, j].copy(), traj_id)
        for j in range(times.size)
        if H[j] <= H_ADMISSION_TOL
    ]


def _job(args):
    prob, x0, cfg, traj_id, seed, M = args
    return generate_trajectory_samples(prob, x0, cfg, traj_id, seed, M)


def _run_jobs(jobs, workers: int):
    if workers <= 1:
        return [_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        # map preserves submission order, so the merge is deterministic
        return list(pool.map(_job, jobs, chunksize=max(1, len(jobs) // (4 * workers))))


def _collect(results, n, seed, M, provenance):
    samples, diverged = [], 0
    for res in results:
        if isinstance(res, Diverged):
            diverged += 1
            log.debug("trajectory %d from %s diverged (%s)", res.traj_id, res.x0, res.status)
        else:
            samples.extend(res)
    solved = len(results) - diverged
    provenance = dict(provenance)
    provenance.update(
        trajectories=len(results),
        converged=solved,
        diverged=diverged,
        samples_per_trajectory=M,
        rejected_samples=solved * M - len(samples),
    )
    return Dataset.from_samples(samples, n, seed, provenance)


def build_dataset(prob: ControlProblem, cfg: SamplingConfig, workers: int = 1,
                  initial_conditions: Optional[np.ndarray] = None,
                  min_fraction: float = 0.5) -> Dataset:
    root = np.random.SeedSequence(cfg.seed)
    ic_seed, time_root = root.spawn(2)
    if initial_conditions is None:
        x0s = sample_initial_conditions(prob.domain, cfg.K, ic_seed)
    else:
        x0s = np.asarray(initial_conditions, dtype=float).reshape(-1, prob.n)
    time_seeds = time_root.spawn(len(x0s))
    jobs = [(prob, x0s[i], cfg, i, time_seeds[i], cfg.M) for i in range(len(x0s))]
    ds = _collect(_run_jobs(jobs, workers), prob.n, cfg.seed, cfg.M, {"config": asdict(cfg)})
    frac = ds.provenance["converged"] / max(1, ds.provenance["trajectories"])
    log.info("%s: %d/%d trajectories converged, %d samples", prob.name,
             ds.provenance["converged"], ds.provenance["trajectories"], len(ds))
    if frac < min_fraction:
        raise TooFewTrajectories(
            f"only {ds.provenance['converged']} of {ds.provenance['trajectories']} BVP solves converged"
        )
    return ds


def select_worst(errors, mu: float) -> np.ndarray:
    """Indices of the floor(mu * N) largest errors (stable order on ties)."""
    errors = np.asarray(errors, dtype=float)
    count = int(math.floor(mu * errors.size + 1e-9))
    if count == 0:
        return np.zeros(0, dtype=int)
    order = np.argsort(-errors, kind="stable")
    return np.sort(order[:count])


def adaptive_refine(dataset: Dataset, model_errors, prob: ControlProblem, rcfg: RefineConfig,
                    cfg: SamplingConfig, workers: int = 1) -> Dataset:
    """Add trajectories started from Gaussian perturbations of the worst-fit samples."""
    errors = np.asarray(model_errors, dtype=float)
    if errors.shape != (len(dataset),):
        raise ValueError("one model error per sample required")
    worst = select_worst(errors, rcfg.mu)
    if worst.size == 0 or rcfg.J == 0:
        return dataset.union(Dataset.empty(dataset.n))
    rng = np.random.default_rng(np.random.SeedSequence([rcfg.seed, cfg.seed]))
    centers = np.repeat(dataset.x[worst], rcfg.J, axis=0)
    starts = centers + rcfg.sigma_pert * rng.standard_normal(centers.shape)
    first_id = int(dataset.traj_id.max()) + 1 if len(dataset) else 0
    time_seeds = np.random.SeedSequence([rcfg.seed, cfg.seed, 1]).spawn(len(starts))
    jobs = [(prob, starts[i], cfg, first_id + i, time_seeds[i], rcfg.L_s) for i in range(len(starts))]
    added = _collect(_run_jobs(jobs, workers), prob.n, cfg.seed, rcfg.L_s, {})
    out = dataset.union(added)
    out.provenance["refinements"] = list(dataset.provenance.get("refinements", [])) + [
        dict(asdict(rcfg), selected=int(worst.size), **{k: v for k, v in added.provenance.items()})
    ]
    log.info("refinement: %d seeds, %d/%d new trajectories converged, +%d samples",
             worst.size, added.provenance["converged"], len(starts), len(added))
    return out


# text serialization: one record per line, 17 significant digits

def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def save_dataset(ds: Dataset, path) -> None:
    header = {"n": ds.n, "seed": ds.rng_seed, "provenance": ds.provenance}
    with open(path, "w") as fh:
        fh.write("# " + json.dumps(header, default=_json_default) + "\n")
        for i in range(len(ds)):
            fields = [str(int(ds.traj_id[i])), _fmt(ds.t[i])]
            fields += [_fmt(v) for v in ds.x[i]] + [_fmt(v) for v in ds.p[i]]
            fh.write(" ".join(fields) + "\n")


def load_dataset(path) -> Dataset:
    text = Path(path).read_text().splitlines()
    if not text or not text[0].startswith("# "):
        raise ValueError(f"{path}: missing dataset header")
    header = json.loads(text[0][2:])
    n = int(header["n"])
    rows = [line.split() for line in text[1:] if line.strip()]
    if any(len(r) != 2 + 2 * n for r in rows):
        raise ValueError(f"{path}: malformed record")
    if not rows:
        ds = Dataset.empty(n, header.get("seed", 0))
    else:
        ids = np.array([int(r[0]) for r in rows])
        vals = np.array([[float(v) for v in r[1:]] for r in rows])
        ds = Dataset(ids, vals[:, 0], vals[:, 1:1 + n], vals[:, 1 + n:], header.get("seed", 0))
    ds.provenance = header.get("provenance", {})
    return ds


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o))
