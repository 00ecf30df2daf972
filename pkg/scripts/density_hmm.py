"""Conditional density estimates on the Gaussian HMM, scored against P(Y_t | X_t).

    python3 scripts/density_hmm.py                     # no state delay, l = 3
    python3 scripts/density_hmm.py --delay 10 --memory 15

metrics.json also carries the scores of the exact Kalman predictive law on the
same contexts, which is the best any Y-history model can do.
"""
import argparse
import sys

from treet.cli import main

p = argparse.ArgumentParser()
p.add_argument("--delay", default="0")
p.add_argument("--beta", default=None)
p.add_argument("--memory", default="3")
p.add_argument("--epochs", default="60")
p.add_argument("--model", default="y", choices=("y", "xy"))
p.add_argument("--out", default=None)
args = p.parse_args()

beta = args.beta if args.beta is not None else ("0" if args.delay == "0" else "0.05")
out = args.out or f"runs/density_k{args.delay}_l{args.memory}"
sys.exit(main(["density", "--out", out, "--hmm-delay", args.delay, "--hmm-beta", beta,
               "--memory", args.memory, "--epochs", args.epochs, "--model", args.model,
               "--batch", "128", "--lr", "5e-3", "--set", "lr_final=0.1", "--set", 'norm="residual"',
               "--set", "n_contexts=512"]))
