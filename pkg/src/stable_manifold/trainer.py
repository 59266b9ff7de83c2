"""Adaptive training loop: sample, fit, refine around large errors, refit, validate."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import nn
from .problem import ControlProblem, linearize
from .riccati import solve_riccati
from .sampling import (
    Dataset,
    RefineConfig,
    SamplingConfig,
    adaptive_refine,
    build_dataset,
    save_dataset,
)

log = logging.getLogger(__name__)


class TargetNotReached(RuntimeWarning):
    pass


@dataclass
class TrainConfig:
    epochs: int = 6000
    lr0: float = 1e-3
    decay: float = 0.5
    decay_every: int = 1000
    nu: int = 1
    target_mae: float = 4e-3
    max_rounds: int = 2
    min_rounds: int = 1
    L: int = 2
    M: int = 50
    seed: int = 0
    val_seed: int = 12345
    log_every: int = 500
    # None trains full batch; an integer shuffles and updates once per minibatch
    batch_size: Optional[int] = None

    def __post_init__(self):
        if self.epochs < 0 or not self.lr0 > 0:
            raise ValueError("epochs must be >= 0 and lr0 > 0")
        if self.nu not in (1, 2):
            raise ValueError("nu must be 1 or 2")
        if self.max_rounds < 0:
            raise ValueError("max_rounds must be >= 0")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be positive")


def learning_rate(cfg: TrainConfig, epoch: int) -> float:
    return cfg.lr0 * cfg.decay ** (epoch // cfg.decay_every)


@dataclass
class RoundReport:
    round: int
    train_mae: float
    val_mae: float
    dataset_size: int
    epochs: int
    initial_loss: float
    final_loss: float
    seconds: float
    errors: np.ndarray = field(repr=False)

    def record(self) -> dict:
        d = asdict(self)
        d.pop("errors")
        return d


class _Batch:
    def __init__(self, x, p):
        self.x, self.p = x, p


def train_round(theta: nn.NetParams, dataset, cfg: TrainConfig, round_index: int = 1,
                valset=None) -> tuple[nn.NetParams, RoundReport]:
    """Adam with the step-decayed learning rate, full batch unless ``cfg.batch_size`` is set."""
    start = time.perf_counter()
    state = nn.AdamState.zeros_like(theta)
    X, P = nn.batch_arrays(dataset)
    initial = nn.loss(theta, dataset, cfg.nu)
    N = X.shape[0]
    B = N if cfg.batch_size is None else min(cfg.batch_size, N)
    rng = np.random.default_rng([cfg.seed, round_index])
    for epoch in range(cfg.epochs):
        lr = learning_rate(cfg, epoch)
        if B == N:
            value, g = nn.loss_and_grad(theta, dataset, cfg.nu)
            theta, state = nn.adam_step(state, theta, g, lr)
        else:
            perm = rng.permutation(N)
            value = 0.0
            for s in range(0, N, B):
                idx = perm[s:s + B]
                v, g = nn.loss_and_grad(theta, _Batch(X[idx], P[idx]), cfg.nu)
                theta, state = nn.adam_step(state, theta, g, lr)
                value += v * idx.size / N
        if cfg.log_every and epoch % cfg.log_every == 0:
            log.info("round %d epoch %5d loss %.4e lr %.2e", round_index, epoch, value, lr)
    errors = nn.sample_errors(theta, dataset)
    final = float(np.mean(errors ** cfg.nu))
    report = RoundReport(
        round=round_index,
        train_mae=float(np.mean(errors)),
        val_mae=validate(theta, valset) if valset is not None else float("nan"),
        dataset_size=len(dataset),
        epochs=cfg.epochs,
        initial_loss=initial,
        final_loss=final,
        seconds=time.perf_counter() - start,
        errors=errors,
    )
    return theta, report


def validate(theta: nn.NetParams, valset) -> float:
    return nn.loss(theta, valset, 1)


@dataclass
class PipelineResult:
    theta: nn.NetParams
    reports: list[RoundReport]
    datasets: list[Dataset]
    valset: Dataset
    target_reached: bool


def run_pipeline(prob: ControlProblem, scfg: SamplingConfig, tcfg: TrainConfig,
                 rcfg: Optional[RefineConfig] = None, workers: int = 1,
                 out_dir=None, trainset: Optional[Dataset] = None,
                 valset: Optional[Dataset] = None) -> PipelineResult:
    rcfg = rcfg or RefineConfig()
    # fails loudly if the equilibrium linearization violates the C2 conditions
    ric = solve_riccati(linearize(prob))
    if not ric.beta <= scfg.lam <= ric.Gamma:
        log.warning("lambda=%g outside the suggested range [%.3g, %.3g]", scfg.lam, ric.beta, ric.Gamma)

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "rounds.jsonl").write_text("")

    data = trainset if trainset is not None else build_dataset(prob, scfg, workers)
    if valset is None:
        valset = build_dataset(prob, replace(scfg, seed=tcfg.val_seed), workers)
    if out is not None:
        save_dataset(data, out / "train_round1.txt")
        save_dataset(valset, out / "val.txt")

    theta = nn.init_params(tcfg.L, tcfg.M, prob.n, prob.n, seed=tcfg.seed)
    reports: list[RoundReport] = []
    datasets = [data]
    if tcfg.max_rounds == 0:
        errors = nn.sample_errors(theta, data)
        reports.append(RoundReport(0, float(np.mean(errors)), validate(theta, valset), len(data), 0,
                                   float(np.mean(errors ** tcfg.nu)), float(np.mean(errors ** tcfg.nu)),
                                   0.0, errors))
        _persist(out, theta, reports[-1], scfg, tcfg)
        return PipelineResult(theta, reports, datasets, valset, reports[-1].val_mae <= tcfg.target_mae)

    for rnd in range(1, tcfg.max_rounds + 1):
        if rnd > 1:
            data = adaptive_refine(data, reports[-1].errors, prob, replace(rcfg, seed=rcfg.seed + rnd),
                                   scfg, workers)
            datasets.append(data)
            if out is not None:
                save_dataset(data, out / f"train_round{rnd}.txt")
        theta, report = train_round(theta, data, tcfg, rnd, valset)
        reports.append(report)
        log.info("round %d: |D|=%d train MAE %.3e val MAE %.3e (%.0fs)", rnd, report.dataset_size,
                 report.train_mae, report.val_mae, report.seconds)
        _persist(out, theta, report, scfg, tcfg)
        if rnd >= tcfg.min_rounds and report.val_mae <= tcfg.target_mae:
            break
    reached = reports[-1].val_mae <= tcfg.target_mae
    if not reached:
        log.warning("target validation MAE %.3g not reached (%.3g)", tcfg.target_mae, reports[-1].val_mae)
    return PipelineResult(theta, reports, datasets, valset, reached)


def _persist(out, theta, report, scfg, tcfg):
    if out is None:
        return
    header = json.dumps({"sampling": asdict(scfg), "training": asdict(tcfg), "round": report.round})
    nn.save_weights(theta, out / "weights.txt", header)
    nn.save_weights(theta, out / f"weights_round{report.round}.txt", header)
    rec = dict(report.record(), sampling_seed=scfg.seed, val_seed=tcfg.val_seed, train_seed=tcfg.seed)
    with open(out / "rounds.jsonl", "a") as fh:
        fh.write(json.dumps(rec) + "\n")
