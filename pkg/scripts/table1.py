"""Benchmark grid: TE estimates for rho = 0.9 against the closed-form values.

    python3 scripts/table1.py --out runs/table1 [--lams -1,0,1,3] [--ls 1,4,19]

Each cell trains a fresh pair of potentials (about 2 to 8 minutes per cell on
one CPU core).  Results land in <out>/table.csv and <out>/lam*_l*/.
"""
import argparse
import sys

from treet.cli import main

p = argparse.ArgumentParser()
p.add_argument("--out", default="runs/table1")
p.add_argument("--lams", default="-1,0,1,3")
p.add_argument("--ls", default="1,4,19")
p.add_argument("--epochs", default="60")
args = p.parse_args()

sys.exit(main(["bench", "--out", args.out, "--lams", args.lams, "--ls", args.ls, "--rho", "0.9",
               "--epochs", args.epochs, "--batch", "128", "--lr", "5e-3",
               "--set", "lr_final=0.1", "--set", 'norm="residual"']))
