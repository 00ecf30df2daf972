"""Capacity estimates over an SNR sweep, one optimize run per seed.

    python3 scripts/capacity_sweep.py --channel awgn --snr -10,-5,0,5,10 --memory 10
    python3 scripts/capacity_sweep.py --channel gma --alpha 0.5 --delay 10 --memory 15 \
        --epochs 60 --samples 100000

Writes <out>/seed<s>/sweep.csv next to the oracle value for each SNR.
"""
import argparse
import sys

from treet.cli import main

p = argparse.ArgumentParser()
p.add_argument("--channel", default="awgn", choices=("awgn", "gma", "gar"))
p.add_argument("--snr", default="0")
p.add_argument("--memory", default="10")
p.add_argument("--alpha", default="0.5")
p.add_argument("--delay", default="10")
p.add_argument("--seeds", default="0,1,2")
p.add_argument("--epochs", default="30")
p.add_argument("--samples", default="50000", help="samples per epoch")
p.add_argument("--feedback", action="store_true")
p.add_argument("--out", default="runs/capacity")
args = p.parse_args()

code = 0
for seed in args.seeds.split(","):
    argv = ["optimize", "--out", f"{args.out}/{args.channel}_l{args.memory}/seed{seed}", "--seed", seed,
            "--channel", args.channel, "--snr", args.snr, "--memory", args.memory,
            "--alpha", args.alpha, "--delay", args.delay, "--epochs", args.epochs,
            "--batch", "128", "--lr", "5e-3", "--set", "lr_final=0.1", "--set", 'norm="residual"',
            "--set", f"samples_per_epoch={args.samples}"]
    if args.feedback:
        argv.append("--feedback")
    code = max(code, main(argv))
sys.exit(code)
