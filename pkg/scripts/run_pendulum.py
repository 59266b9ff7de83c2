"""Full reaction wheel pendulum experiment: rescaled model and the raw ablation.

Trains with the default protocol (K=200, M=20, lambda=0.6, two rounds of 6000
epochs) and simulates the four swing-up initial conditions. Artifacts land in
``<out>/<problem>/``; the acceptance suite reuses them when the echoed config
matches.

    python scripts/run_pendulum.py --out runs/acceptance
"""
import argparse
import sys
from pathlib import Path

from stable_manifold import cli


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, default=Path("runs/acceptance"))
    ap.add_argument("--problems", nargs="+", default=["pendulum", "pendulum-raw"])
    ap.add_argument("--workers", type=int, default=1)
    ap.add_argument("--skip-train", action="store_true", help="only rerun the simulations")
    args = ap.parse_args()
    for problem in args.problems:
        out = args.out / problem
        common = ["--problem", problem, "--out", str(out), "--workers", str(args.workers), "-v"]
        if not args.skip_train:
            cli.main(["train", *common])
        # a diverging controller is an expected outcome for the raw model
        code = cli.main(["simulate", *common, "--weights", str(out / "weights.txt")])
        print(f"{problem}: simulate exit code {code}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
