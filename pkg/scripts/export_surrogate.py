"""Write the thresholded benchmark process to CSV as a directionality surrogate.

X is i.i.d. Gaussian and drives Y one step later, so information flows X -> Y only.

    python3 scripts/export_surrogate.py surrogate.csv --n 20000 --lam 0
"""
import argparse

from treet.processes import gen_benchmark

p = argparse.ArgumentParser()
p.add_argument("path")
p.add_argument("--n", type=int, default=20_000)
p.add_argument("--lam", type=float, default=0.0)
p.add_argument("--rho", type=float, default=0.9)
p.add_argument("--seed", type=int, default=0)
args = p.parse_args()

gen_benchmark(args.n, args.lam, args.rho, args.seed).to_csv(args.path)
print(f"wrote {args.n} rows to {args.path}")
