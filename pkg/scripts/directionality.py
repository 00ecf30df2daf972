"""TE in both directions on the surrogate for a grid of Y history lengths.

    python3 scripts/directionality.py --csv surrogate.csv --k 3,6,9,12,15

Prints TE(X->Y) and TE(Y->X) per k and the Spearman correlation of TE(X->Y) with k.
"""
import argparse
import json
import sys
from pathlib import Path

from treet.cli import main

p = argparse.ArgumentParser()
p.add_argument("--csv", required=True)
p.add_argument("--k", default="3,6,9,12,15")
p.add_argument("--memory", default="2")
p.add_argument("--epochs", default="40")
p.add_argument("--out", default="runs/directionality")
args = p.parse_args()

code = main(["analyze", "--out", args.out, "--csv", args.csv, "--col-x", "x0", "--col-y", "y0",
             "--k", args.k, "--memory", args.memory, "--epochs", args.epochs, "--batch", "128",
             "--lr", "5e-3", "--set", "lr_final=0.1", "--set", 'norm="residual"'])
if code == 0:
    res = json.loads((Path(args.out) / "analysis.json").read_text())
    for k, a, b in zip(res["k"], res["te"]["x->y"], res["te"]["y->x"]):
        print(f"k={k:3d}  x->y {a:.4f}  y->x {b:.4f}")
    print("spearman(k, x->y):", res.get("spearman_x_to_y"))
sys.exit(code)
