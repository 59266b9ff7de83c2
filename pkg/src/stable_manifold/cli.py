"""Command-line front end: ``generate``, ``train``, ``simulate`` and ``verify``.

Settings resolve as command-line flags over config-file values over the
per-problem defaults below. Every command ends with a one-line
``key=value`` summary.
"""
from __future__ import annotations

import argparse
import configparser
import json
import logging
import math
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import nn
from .pendulum import FIXTURES, get_fixture
from .problem import hamiltonian, linearize
from .riccati import riccati_residual, solve_riccati
from .sampling import (
    RefineConfig,
    SamplingConfig,
    TooFewTrajectories,
    build_dataset,
    load_dataset,
    save_dataset,
)
from .simulate import (
    Blowup,
    NoSamplesInBall,
    closed_loop,
    cost,
    decay_window,
    linear_controller,
    nn_controller,
    quadratic_remainder_check,
    save_trajectory,
    verify_decay,
)
from .trainer import TrainConfig, run_pipeline

log = logging.getLogger("stable_manifold")

EXIT_USAGE = 2
EXIT_TOO_FEW = 3
EXIT_BLOWUP = 4
EXIT_VERIFY = 5

FIGURE3_X0 = [
    (math.pi, 0.01, 0.1),
    (0.8 * math.pi, 0.01, 0.1),
    (0.7 * math.pi, -0.01, 0.1),
    (0.6 * math.pi, -0.01, 0.1),
]

_COMMON = dict(
    t=20.0, tol=1e-5, mesh=150, lr0=1e-3, mu=0.05, perturb_j=4, perturb_sigma=0.1,
    perturb_samples=3, min_rounds=1, seed=0, val_seed=12345, workers=1, batch_size=0,
    t_sim=20.0, dt=1e-3,
)
PENDULUM_DEFAULTS = dict(_COMMON, k=200, m=20, lam=0.6, epochs=6000, rounds=2, min_rounds=2, nu=1,
                         target_mae=4e-3, batch_size=256, x0=FIGURE3_X0)
DEFAULTS = {
    "lq1": dict(_COMMON, k=20, m=5, lam=1.0, mesh=60, epochs=2000, rounds=2, nu=2,
                target_mae=1e-3, x0=[(1.0,)]),
    "pendulum": PENDULUM_DEFAULTS,
    "pendulum-raw": PENDULUM_DEFAULTS,
}

# flag name -> (settings key, type)
_FLAGS = {
    "k": ("k", int), "m": ("m", int), "lambda": ("lam", float), "t": ("t", float),
    "tol": ("tol", float), "mesh": ("mesh", int), "epochs": ("epochs", int),
    "rounds": ("rounds", int), "min-rounds": ("min_rounds", int), "lr0": ("lr0", float),
    "nu": ("nu", int),
    "batch-size": ("batch_size", int), "target-mae": ("target_mae", float),
    "mu": ("mu", float), "perturb-j": ("perturb_j", int), "perturb-sigma": ("perturb_sigma", float),
    "perturb-samples": ("perturb_samples", int), "seed": ("seed", int),
    "val-seed": ("val_seed", int), "workers": ("workers", int),
    "t-sim": ("t_sim", float), "dt": ("dt", float),
}


class UsageError(ValueError):
    pass


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--problem", default=None, choices=sorted(FIXTURES))
    common.add_argument("--config", type=Path, help="key = value file mirroring the flag names")
    common.add_argument("--out", type=Path, default=None, help="output directory (default: runs/<problem>)")
    common.add_argument("-v", "--verbose", action="store_true")
    for flag, (dest, typ) in _FLAGS.items():
        common.add_argument(f"--{flag}", dest=dest, type=typ, default=None)

    p = argparse.ArgumentParser(prog="stable-manifold", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[common], help="build training and validation datasets")
    tr = sub.add_parser("train", parents=[common], help="run the adaptive training pipeline")
    tr.add_argument("--train", type=Path, help="existing training dataset")
    tr.add_argument("--val", type=Path, help="existing validation dataset")
    sim = sub.add_parser("simulate", parents=[common], help="closed-loop simulation")
    sim.add_argument("--weights", type=Path, help="network weights (default: Riccati linear feedback)")
    sim.add_argument("--x0", action="append", help="comma-separated initial state, repeatable; "
                                                   "use --x0=-1,0 for negative leading values")
    ver = sub.add_parser("verify", parents=[common], help="numerical checks of the learned or exact map")
    ver.add_argument("--weights", type=Path)
    ver.add_argument("--data", type=Path, help="dataset to check (default: generate one)")
    ver.add_argument("--x0", action="append")
    return p


def _read_config(path: Path) -> dict:
    text = path.read_text()
    if not text.lstrip().startswith("["):
        text = "[run]\n" + text
    cp = configparser.ConfigParser()
    cp.read_string(text)
    out = {}
    for section in cp.sections():
        for key, value in cp.items(section):
            key = key.replace("_", "-")
            if key == "problem":
                out["problem"] = value
            elif key in _FLAGS:
                dest, typ = _FLAGS[key]
                out[dest] = typ(value)
            else:
                raise UsageError(f"{path}: unknown key {key!r}")
    return out


def resolve(args: argparse.Namespace) -> dict:
    """Merge fixture defaults, config file and flags into one settings dict."""
    from_file = _read_config(args.config) if args.config else {}
    problem = args.problem or from_file.get("problem") or "pendulum"
    if problem not in DEFAULTS:
        raise UsageError(f"unknown problem {problem!r}")
    settings = dict(DEFAULTS[problem], problem=problem)
    settings.update(from_file)
    settings["problem"] = problem
    for dest, _ in _FLAGS.values():
        val = getattr(args, dest, None)
        if val is not None:
            settings[dest] = val
    return settings


def _configs(s: dict):
    try:
        scfg = SamplingConfig(K=s["k"], M=s["m"], lam=s["lam"], T=s["t"], tol=s["tol"],
                              mesh_intervals=s["mesh"], seed=s["seed"])
        tcfg = TrainConfig(epochs=s["epochs"], lr0=s["lr0"], nu=s["nu"], target_mae=s["target_mae"],
                           max_rounds=s["rounds"], min_rounds=s["min_rounds"], seed=s["seed"],
                           val_seed=s["val_seed"], batch_size=s["batch_size"] or None)
        rcfg = RefineConfig(mu=s["mu"], J=s["perturb_j"], L_s=s["perturb_samples"],
                            sigma_pert=s["perturb_sigma"], seed=s["seed"] + 1)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if s["workers"] < 1:
        raise UsageError("workers must be at least 1")
    if not s["dt"] > 0 or not s["t_sim"] > 0:
        raise UsageError("dt and t-sim must be positive")
    return scfg, tcfg, rcfg


def _echo(s: dict) -> str:
    return json.dumps({k: v for k, v in s.items() if k != "x0"}, sort_keys=True)


def _summary(command: str, **fields) -> None:
    def fmt(v):
        if isinstance(v, float):
            return format(v, ".6g")
        if isinstance(v, bool):
            return str(v).lower()
        return str(v)

    print(command + " " + " ".join(f"{k}={fmt(v)}" for k, v in fields.items()))


def _parse_states(items, n) -> list[np.ndarray]:
    out = []
    for item in items:
        try:
            x = np.array([float(v) for v in str(item).split(",")])
        except ValueError:
            raise UsageError(f"cannot parse state {item!r}") from None
        if x.size != n:
            raise UsageError(f"state {item!r} must have {n} components")
        out.append(x)
    return out


def _out_dir(args, s) -> Path:
    out = args.out or Path("runs") / s["problem"]
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_generate(args, s) -> int:
    scfg, tcfg, _ = _configs(s)
    prob = get_fixture(s["problem"])
    out = _out_dir(args, s)
    train = build_dataset(prob, scfg, s["workers"])
    val = build_dataset(prob, SamplingConfig(**dict(asdict(scfg), seed=tcfg.val_seed)), s["workers"])
    for ds, name in ((train, "train.txt"), (val, "val.txt")):
        ds.provenance["run_config"] = json.loads(_echo(s))
        save_dataset(ds, out / name)
    pv = train.provenance
    print(f"converged {pv['converged']}/{pv['trajectories']} trajectories "
          f"({pv['converged'] / pv['trajectories']:.1%}), {len(train)} training samples")
    _summary("generate", problem=s["problem"], train_samples=len(train), val_samples=len(val),
             converged=pv["converged"], diverged=pv["diverged"], out=out, status="ok")
    return 0


def cmd_train(args, s) -> int:
    scfg, tcfg, rcfg = _configs(s)
    prob = get_fixture(s["problem"])
    out = _out_dir(args, s)
    trainset = load_dataset(args.train) if args.train else None
    valset = load_dataset(args.val) if args.val else None
    res = run_pipeline(prob, scfg, tcfg, rcfg, s["workers"], out, trainset, valset)
    (out / "run_config.json").write_text(_echo(s) + "\n")
    for rep in res.reports:
        print(f"round {rep.round}: |D|={rep.dataset_size} train MAE {rep.train_mae:.3e} "
              f"val MAE {rep.val_mae:.3e}")
    last = res.reports[-1]
    if not res.target_reached:
        print(f"warning: target validation MAE {tcfg.target_mae:g} not reached")
    _summary("train", problem=s["problem"], rounds=len(res.reports), dataset_size=last.dataset_size,
             train_mae=last.train_mae, val_mae=last.val_mae, target_reached=res.target_reached,
             out=out, status="ok" if res.target_reached else "target_not_reached")
    return 0


def _controller(prob, weights):
    if weights is None:
        return linear_controller(solve_riccati(linearize(prob)).P, "riccati")
    theta = nn.load_weights(weights)
    if theta.n != prob.n:
        raise UsageError(f"weights expect n={theta.n}, problem has n={prob.n}")
    return nn_controller(theta)


def cmd_simulate(args, s) -> int:
    _configs(s)
    prob = get_fixture(s["problem"])
    out = _out_dir(args, s)
    ctrl = _controller(prob, args.weights)
    x0s = _parse_states(args.x0 or [",".join(map(str, x)) for x in s["x0"]], prob.n)
    trajs = closed_loop(prob, ctrl, np.array(x0s), T_sim=s["t_sim"], dt=s["dt"])
    blowups, worst = 0, 0.0
    for i, (x0, tr) in enumerate(zip(x0s, trajs)):
        header = _echo(dict(s, x0_used=x0.tolist(), controller=ctrl.label))
        save_trajectory(tr, out / f"trajectory_{i}.txt", header=header)
        J = cost(prob, tr)
        blowups += tr.blowup
        worst = max(worst, tr.terminal_norm)
        print(f"x0={np.array2string(x0, precision=4)} |x(T)|={tr.terminal_norm:.3e} J={J:.6g}"
              + (" BLOWUP" if tr.blowup else ""))
    _summary("simulate", problem=s["problem"], trajectories=len(trajs), blowups=blowups,
             max_terminal_norm=worst, out=out, status="blowup" if blowups else "ok")
    if blowups:
        raise Blowup(f"{blowups} closed-loop trajectories diverged")
    return 0


def cmd_verify(args, s) -> int:
    scfg, _, _ = _configs(s)
    prob = get_fixture(s["problem"])
    lin = linearize(prob)
    ric = solve_riccati(lin)
    checks = []

    res = riccati_residual(lin, ric.P)
    checks.append(("riccati_residual", res, res <= 1e-8 * max(1.0, np.linalg.norm(lin.Q_eff))))

    data = load_dataset(args.data) if args.data else build_dataset(prob, scfg, s["workers"])
    H = np.abs(hamiltonian(prob, data.x.T, data.p.T))
    checks.append(("hamiltonian_max", float(H.max()), bool(H.max() <= 1e-3)))

    ctrl = _controller(prob, args.weights)
    x0 = _parse_states(args.x0 or [",".join(map(str, s["x0"][0]))], prob.n)[0]
    tr = closed_loop(prob, ctrl, x0, T_sim=s["t_sim"], dt=s["dt"])
    fit = verify_decay(tr, window=decay_window(tr), floor=1e-12)
    checks.append(("decay_alpha", fit.alpha_fit, bool(not tr.blowup and fit.alpha_fit >= 0.5 * ric.beta)))

    try:
        k_hat = quadratic_remainder_check(data.x, data.p, ric.P)
        checks.append(("quadratic_remainder", k_hat, bool(np.isfinite(k_hat))))
    except NoSamplesInBall:
        print("quadratic_remainder: no samples near the origin, skipped")

    for name, value, ok in checks:
        print(f"{name}: {value:.4g} {'PASS' if ok else 'FAIL'}")
    passed = sum(ok for _, _, ok in checks)
    _summary("verify", problem=s["problem"], passed=f"{passed}/{len(checks)}",
             status="ok" if passed == len(checks) else "failed")
    return 0 if passed == len(checks) else EXIT_VERIFY


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "simulate": cmd_simulate, "verify": cmd_verify}


def main(argv=None) -> int:
    parser = _parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        settings = resolve(args)
        _configs(settings)
        return COMMANDS[args.command](args, settings)
    except UsageError as exc:
        parser.error(str(exc))
    except TooFewTrajectories as exc:
        print(f"error: {exc}", file=sys.stderr)
        _summary(args.command, status="too_few_trajectories")
        return EXIT_TOO_FEW
    except Blowup as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BLOWUP
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        _summary(args.command, status="error")
        return 1


if __name__ == "__main__":
    sys.exit(main())
