"""Acceptance criteria, each at its stated tolerance.

Every test prints one ``PASS``/``FAIL`` line (also collected in the terminal
summary).  Criteria 1, 3, 4, 5 and 7 train networks and take most of an hour
in total on one CPU core; 2 and 6 take well under a minute each, apart from
the property suites that 6 re-runs.
"""
import json
import statistics
import subprocess
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
from scipy.stats import spearmanr

from conftest import ACCEPTANCE_LINES
from treet.cli import main
from treet.density import evaluate_density, grid_from_samples, kalman_report
from treet.estimator import TrainConfig, estimate_te, train_estimator
from treet.ndg import NdgConfig, attention_heatmap, lag_profile, optimize_capacity
from treet.oracles import benchmark_te_closed_form, benchmark_te_oracle, channel_capacity
from treet.processes import ChannelSpec, HmmSpec, gen_benchmark, gen_hmm, split_seed

ROOT = Path(__file__).resolve().parents[1]

# shared training recipe; see the README for why it differs from the library defaults
RECIPE = dict(batch_size=128, learning_rate=5e-3, lr_final=0.1, norm="residual")


def report(name, passed, detail):
    line = f"{'PASS' if passed else 'FAIL'}  {name}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert passed, line


def test_1_benchmark_table():
    truth = {-1: 0.699, 0: 0.415, 1: 0.132, 3: 0.001}
    cells, worst, slowest = [], 0.0, 0.0
    for lam, t in truth.items():
        for l in (1, 4, 19):
            cfg = TrainConfig(memory=l, max_epochs=60, samples_per_epoch=100_000,
                              seed=split_seed(1, 50, l), **RECIPE)
            start = time.time()
            est, _ = estimate_te(lambda n, s, lam=lam: gen_benchmark(n, lam, 0.9, s), cfg)
            took = time.time() - start
            err = abs(est.te - t)
            worst, slowest = max(worst, err), max(slowest, took)
            cells.append(f"lam={lam:g} l={l}: {est.te:.3f} (truth {t}, {took:.0f}s)")
            print(cells[-1])
    report("1 benchmark table", worst <= 0.05 and slowest <= 600,
           f"max |error| {worst:.3f} (tol 0.05), slowest cell {slowest:.0f}s (budget 600s); "
           + "; ".join(cells))


def test_2_oracle_self_check():
    truth = {-3: 0.829, -2: 0.811, -1: 0.699, 0: 0.415, 1: 0.132, 2: 0.019, 3: 0.001}
    start = time.time()
    got = {lam: benchmark_te_oracle(lam, 0.9, n_mc=1_000_000, seed=0).value for lam in truth}
    took = time.time() - start
    worst = max(abs(got[lam] - t) for lam, t in truth.items())
    report("2 oracle self-check", worst <= 0.01 and took < 60,
           f"max |error| {worst:.4f} (tol 0.01) in {took:.1f}s; "
           + ", ".join(f"{lam}:{v:.3f}" for lam, v in got.items()))


def capacity_run(spec, memory, epochs, seed, samples=50_000):
    cfg = TrainConfig(memory=memory, max_epochs=epochs, samples_per_epoch=samples, seed=seed, **RECIPE)
    return optimize_capacity(spec, cfg, NdgConfig(memory=memory, seed=seed))


def test_3_awgn_capacity():
    spec = ChannelSpec("awgn", noise_var=1.0, power=1.0)
    oracle = channel_capacity(spec).value
    start = time.time()
    vals = [capacity_run(spec, 10, 30, s).te_star for s in range(3)]
    took = time.time() - start
    med = statistics.median(vals)
    rel = abs(med - oracle) / oracle
    report("3 AWGN capacity", rel <= 0.10 and took <= 900,
           f"median {med:.4f} of {[round(v, 4) for v in vals]} vs {oracle:.5f}, "
           f"relative error {rel:.3f} (tol 0.10), {took:.0f}s (budget 900s)")


def test_4_ma_channel_memory():
    spec = ChannelSpec("gma", noise_var=1.0, power=1.0, alpha=0.5, delay=10)
    oracle = channel_capacity(spec).value
    long = capacity_run(spec, 15, 60, 0, 100_000)
    short = capacity_run(spec, 5, 60, 0, 100_000)
    rel_long = abs(long.te_star - oracle) / oracle
    rel_short = abs(short.te_star - oracle) / oracle
    yw, xw = long.eval_windows
    prof = lag_profile(attention_heatmap(long.net_xy, np.concatenate([yw, xw], -1)[:512]))
    peak = int(np.argmax(prof[1:16])) + 1
    report("4 MA channel memory", rel_long <= 0.15 and rel_short >= 0.25 and peak == 10,
           f"oracle {oracle:.4f}; l=15 {long.te_star:.4f} (rel {rel_long:.3f}, tol 0.15); "
           f"l=5 {short.te_star:.4f} (rel {rel_short:.3f}, need >= 0.25); "
           f"attention peak over lags 1..15 at lag {peak} (need 10), "
           f"profile {np.round(prof, 3).tolist()}")


def density_run(spec, memory, seed=0):
    cfg = TrainConfig(memory=memory, max_epochs=60, samples_per_epoch=100_000, seed=seed, **RECIPE)
    res = train_estimator(lambda n, s: gen_hmm(n, spec, s), cfg)
    held = gen_hmm(200_000, spec, split_seed(seed, 60))
    grid = grid_from_samples(held.y)
    rep, _, _ = evaluate_density(res.net_y, spec, held, 512, split_seed(seed, 61), grid)
    kal = kalman_report(spec, held, memory, 512, split_seed(seed, 61), grid) if spec.delay == 0 else None
    return rep, kal


def test_5_density():
    plain, kal = density_run(HmmSpec(alpha=0.9, gamma=0.5, var_w=0.5, var_v=0.5), 3)
    delayed, _ = density_run(HmmSpec(alpha=0.001, beta=0.9, gamma=0.9, delay=10, var_w=0.5, var_v=0.5),
                             15)
    ok = (0.6 <= plain.kl_mean <= 1.0 and 0.4 <= plain.tv_mean <= 0.65 and plain.n_contexts >= 256
          and delayed.kl_mean <= 1.2)
    report("5 density", ok,
           f"no delay l=3: KL {plain.kl_mean:.3f} (window [0.6, 1.0]), TV {plain.tv_mean:.3f} "
           f"(window [0.4, 0.65]) over {plain.n_contexts} contexts, exact Kalman law scores "
           f"KL {kal.kl_mean:.3f} / TV {kal.tv_mean:.3f}; delayed k=10 l=15: KL {delayed.kl_mean:.3f} "
           f"(tol 1.2), TV {delayed.tv_mean:.3f}")


PROPERTY_TESTS = [
    "tests/test_nn.py::test_gradient_matches_finite_differences",
    "tests/test_nn.py::test_causality_and_window_locality",
    "tests/test_nn.py::test_forward_outputs_are_window_local",
    "tests/test_nn.py::test_modified_fpca_identity",
    "tests/test_estimator.py::test_dv_constant_shift_invariance",
    "tests/test_density.py::test_normalization_and_shift_invariance",
    "tests/test_density.py::test_plug_in_identity",
    "tests/test_processes.py::test_power_normalize_exact",
    "tests/test_estimator.py::test_training_is_deterministic",
    "tests/test_cli.py::test_reruns_are_byte_identical",
]


def test_6_property_suites():
    proc = subprocess.run([sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider", *PROPERTY_TESTS],
                          cwd=ROOT, capture_output=True, text=True)
    tail = proc.stdout.strip().splitlines()[-1] if proc.stdout.strip() else proc.stderr[-300:]
    report("6 property suites", proc.returncode == 0, f"{len(PROPERTY_TESTS)} suites: {tail}")


def test_7_directionality(tmp_path):
    csv = tmp_path / "surrogate.csv"
    gen_benchmark(20_000, 0.0, 0.9, 21).to_csv(csv)
    ks = [3, 6, 9, 12, 15]
    code = main(["analyze", "--out", str(tmp_path / "out"), "--csv", str(csv), "--col-x", "x0",
                 "--col-y", "y0", "--k", ",".join(map(str, ks)), "--memory", "2", "--epochs", "40",
                 "--batch", "128", "--lr", "5e-3", "--set", "lr_final=0.1", "--set", 'norm="residual"'])
    assert code == 0
    res = json.loads((tmp_path / "out" / "analysis.json").read_text())
    fwd, bwd = res["te"]["x->y"], res["te"]["y->x"]
    rho = spearmanr(ks, fwd).statistic
    report("7 directionality", all(a > b for a, b in zip(fwd, bwd)) and rho < 0,
           f"x->y {[round(v, 3) for v in fwd]}, y->x {[round(v, 3) for v in bwd]}, "
           f"Spearman(k, x->y) {rho:.2f} (need < 0)")
