"""Command-line front end.

Every run is described by a flat :class:`RunConfig` (TOML on disk).  Its hash
is stamped into each output file so results can be joined back to the run
that produced them.

Exit codes: 0 ok, 1 usage or configuration error, 2 divergence, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import tomli
import tomli_w
from scipy.stats import spearmanr

from .density import evaluate_density, grid_from_samples, kalman_report
from .estimator import (ReferenceSpec, TrainConfig, TrainingDiverged, estimate_te, evaluate,
                        fixed_source, train_estimator)
from .ndg import NdgConfig, attention_heatmap, lag_profile, optimize_capacity
from .nn import NumericError
from .oracles import benchmark_te_closed_form, benchmark_te_oracle, channel_capacity, write_oracle_table
from .processes import ChannelSpec, HmmSpec, TimeSeriesPair, gen_benchmark, gen_hmm, split_seed

log = logging.getLogger("treet")

EXIT_OK, EXIT_USAGE, EXIT_DIVERGED, EXIT_NUMERIC = 0, 1, 2, 3
UNDER_MEMORY_RATIO = 0.75
COMMANDS = ("estimate", "optimize", "density", "analyze", "bench", "oracle")


class UsageError(ValueError):
    pass


@dataclass
class RunConfig:
    command: str = "estimate"
    seed: int = 0
    out: str = "runs/out"
    # process
    process: str = "benchmark"  # benchmark | independent | hmm | csv
    lam: float = 0.0
    rho: float = 0.9
    channel: str = "awgn"
    snr_db: list[float] = field(default_factory=lambda: [0.0])
    power: float = 1.0
    alpha: float = 0.5
    delay: int = 1
    feedback: bool = False
    hmm_alpha: float = 0.9
    hmm_beta: float = 0.0
    hmm_gamma: float = 0.5
    hmm_delay: int = 0
    hmm_noise: str = "gaussian"
    var_w: float = 0.5
    var_v: float = 0.5
    # analyze
    csv_path: str = ""
    col_x: str = "x0"
    col_y: str = "y0"
    k_list: list[int] = field(default_factory=lambda: [1])
    both_directions: bool = True
    train_fraction: float = 0.8
    # bench
    lam_grid: list[float] = field(default_factory=lambda: [-1.0, 0.0, 1.0, 3.0])
    l_grid: list[int] = field(default_factory=lambda: [1, 4, 19])
    # density
    n_contexts: int = 512
    grid_points: int = 1601
    density_model: str = "y"
    zero_network: bool = False
    hmm_samples: int = 200_000
    # estimator
    memory: int = 30
    batch_size: int = 1024
    learning_rate: float = 8e-3
    lr_final: float = 1.0
    max_epochs: int = 200
    samples_per_epoch: int = 100_000
    parallel: int = 30
    tol: float = 1e-3
    patience: int = 10
    n_eval: int = 0  # 0 means samples_per_epoch
    embed_dim: int = 32
    head_dim: int = 32
    ff_dim: int = 64
    norm: str = "concat"
    positional: str = "sinusoidal"
    reference: str = "box"
    ref_low: float = -1.0
    ref_high: float = 1.0
    # generator
    ndg_learning_rate: float = 8e-4
    update_period: int = 4
    final_epochs: int = 4

    def __post_init__(self):
        if self.command not in COMMANDS:
            raise UsageError(f"unknown command {self.command!r}")
        if self.process not in ("benchmark", "independent", "hmm", "csv"):
            raise UsageError(f"unknown process {self.process!r}")
        if self.density_model not in ("y", "xy"):
            raise UsageError("density_model must be 'y' or 'xy'")
        self.snr_db = [float(v) for v in self.snr_db]
        self.lam_grid = [float(v) for v in self.lam_grid]
        self.k_list = [int(v) for v in self.k_list]
        self.l_grid = [int(v) for v in self.l_grid]

    # -- serialisation -------------------------------------------------------

    def to_dict(self) -> dict:
        return asdict(self)

    def to_toml(self) -> str:
        return tomli_w.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_toml(cls, text: str) -> "RunConfig":
        return cls.from_dict(tomli.loads(text))

    def save(self, path: str | Path):
        Path(path).write_text(self.to_toml())

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        return cls.from_toml(Path(path).read_text())

    def config_hash(self) -> str:
        """Hash of everything except the output location."""
        d = self.to_dict()
        d.pop("out")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    # -- derived objects -------------------------------------------------------

    def train_config(self, memory: int | None = None, seed: int | None = None, **kw) -> TrainConfig:
        return TrainConfig(batch_size=self.batch_size, learning_rate=self.learning_rate,
                           lr_final=self.lr_final, max_epochs=self.max_epochs,
                           samples_per_epoch=self.samples_per_epoch,
                           memory=self.memory if memory is None else memory,
                           parallel=self.parallel, tol=self.tol, patience=self.patience,
                           seed=self.seed if seed is None else seed,
                           n_eval=self.n_eval or None, embed_dim=self.embed_dim,
                           head_dim=self.head_dim, ff_dim=self.ff_dim, norm=self.norm,
                           positional=self.positional, **kw)

    def reference_spec(self) -> ReferenceSpec:
        return ReferenceSpec(self.reference, self.ref_low, self.ref_high)

    def hmm_spec(self) -> HmmSpec:
        return HmmSpec(self.hmm_alpha, self.hmm_beta, self.hmm_gamma, self.hmm_delay,
                       self.hmm_noise, self.var_w, self.var_v)

    def channel_spec(self, snr_db: float) -> ChannelSpec:
        return ChannelSpec(self.channel, noise_var=self.power / 10 ** (snr_db / 10), power=self.power,
                           feedback=self.feedback, alpha=self.alpha, delay=self.delay)


# -- data sources --------------------------------------------------------------


def independent_streams(n: int, seed: int) -> TimeSeriesPair:
    rng = np.random.default_rng(seed)
    return TimeSeriesPair(rng.standard_normal(n), rng.standard_normal(n), seed, {"kind": "independent"})


def make_source(cfg: RunConfig, lam: float | None = None):
    if cfg.process == "benchmark":
        lam = cfg.lam if lam is None else lam
        return lambda n, seed: gen_benchmark(n, lam, cfg.rho, seed)
    if cfg.process == "independent":
        return independent_streams
    if cfg.process == "hmm":
        spec = cfg.hmm_spec()
        return lambda n, seed: gen_hmm(n, spec, seed)
    raise UsageError(f"process {cfg.process!r} cannot be used with '{cfg.command}'")


# -- output helpers --------------------------------------------------------------


def write_json(path: Path, payload: dict, config_hash: str):
    path.write_text(json.dumps({**payload, "config_hash": config_hash}, indent=2, sort_keys=True) + "\n")


def write_csv(path: Path, header: list[str], rows, config_hash: str):
    with open(path, "w", newline="") as fh:
        fh.write(f"# config_hash={config_hash}\n")
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def write_history(path: Path, history: list[dict], config_hash: str):
    keys = ["epoch", "d_y", "d_xy", "te_raw", "te_ema"]
    write_csv(path, keys, ([h[k] for k in keys] for h in history if "d_y" in h), config_hash)


def prepare_out(cfg: RunConfig, force: bool) -> Path:
    """Create the output directory, refusing a directory stamped by another config."""
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    stamp = out / "config_hash"
    h = cfg.config_hash()
    if stamp.exists() and stamp.read_text().strip() != h and not force:
        raise UsageError(f"{out} holds results of config {stamp.read_text().strip()}; "
                         f"use --force to overwrite with {h}")
    stamp.write_text(h + "\n")
    cfg.save(out / "config.toml")
    return out


# -- commands --------------------------------------------------------------------


def cmd_estimate(cfg: RunConfig, out: Path) -> dict:
    h = cfg.config_hash()
    tcfg = cfg.train_config()
    est, res = estimate_te(make_source(cfg), tcfg, cfg.reference_spec())
    write_history(out / "history.csv", res.history, h)
    payload = {**est.to_json(), "converged": res.converged, "epochs": len(res.history)}
    write_json(out / "estimate.json", payload, h)
    return payload


def cmd_bench(cfg: RunConfig, out: Path) -> dict:
    h = cfg.config_hash()
    rows = []
    for lam in cfg.lam_grid:
        truth = benchmark_te_closed_form(lam, cfg.rho)
        for l in cfg.l_grid:
            cell = out / f"lam{lam:g}_l{l}"
            cell.mkdir(exist_ok=True)
            tcfg = cfg.train_config(memory=l, seed=split_seed(cfg.seed, 50, l))
            est, res = estimate_te(make_source(replace(cfg, process="benchmark"), lam), tcfg,
                                   cfg.reference_spec())
            write_history(cell / "history.csv", res.history, h)
            write_json(cell / "estimate.json", {**est.to_json(), "lam": lam, "truth": truth}, h)
            rows.append([lam, l, est.te, truth, abs(est.te - truth), est.stderr])
            log.info("lam=%g l=%d te=%.4f truth=%.4f", lam, l, est.te, truth)
    write_csv(out / "table.csv", ["lam", "l", "te", "truth", "abs_error", "stderr"], rows, h)
    return {"cells": len(rows), "max_abs_error": max(r[4] for r in rows)}


def cmd_optimize(cfg: RunConfig, out: Path) -> dict:
    h = cfg.config_hash()
    rows, points = [], []
    for snr in cfg.snr_db:
        spec = cfg.channel_spec(snr)
        tcfg = cfg.train_config()
        ndg_cfg = NdgConfig(memory=cfg.memory, feedback=cfg.feedback, seed=cfg.seed,
                            learning_rate=cfg.ndg_learning_rate, update_period=cfg.update_period)
        res = optimize_capacity(spec, tcfg, ndg_cfg, cfg.reference_spec(), cfg.final_epochs)
        oracle = channel_capacity(spec).value
        rel = abs(res.te_star - oracle) / oracle
        under = res.te_star < UNDER_MEMORY_RATIO * oracle
        rows.append([snr, res.te_star, oracle, rel, cfg.seed])
        yw, xw = res.eval_windows
        heat = attention_heatmap(res.net_xy, np.concatenate([yw, xw], -1)[:512])
        write_csv(out / f"heatmap_snr{snr:g}.csv", ["query"] + [f"lag{j}" for j in range(heat.shape[-1])],
                  ([q, *row] for q, row in enumerate(heat.mean(0).tolist())), h)
        write_history(out / f"history_snr{snr:g}.csv", res.history, h)
        points.append({"snr_db": snr, "te_star": res.te_star, "oracle": oracle, "rel_error": rel,
                       "stderr": res.estimate.stderr, "under_memory": under,
                       "lag_profile": lag_profile(heat).tolist()})
        if under:
            log.warning("UNDER_MEMORY: snr=%g dB estimate %.4f < %.0f%% of oracle %.4f",
                        snr, res.te_star, 100 * UNDER_MEMORY_RATIO, oracle)
    write_csv(out / "sweep.csv", ["snr_db", "te_star", "oracle", "rel_error", "seed"], rows, h)
    payload = {"channel": cfg.channel, "l": cfg.memory, "seed": cfg.seed, "points": points,
               "flags": ["UNDER_MEMORY"] if any(p["under_memory"] for p in points) else []}
    write_json(out / "capacity.json", payload, h)
    return payload


def cmd_density(cfg: RunConfig, out: Path) -> dict:
    h = cfg.config_hash()
    spec = cfg.hmm_spec()
    cfg = replace(cfg, process="hmm")
    tcfg = cfg.train_config()
    res = train_estimator(make_source(cfg), tcfg, cfg.reference_spec())
    held_out = gen_hmm(cfg.hmm_samples, spec, split_seed(cfg.seed, 60))
    grid = grid_from_samples(held_out.y, cfg.grid_points)
    net = res.net_y if cfg.density_model == "y" else res.net_xy
    report, est, refs = evaluate_density(net, spec, held_out, cfg.n_contexts, split_seed(cfg.seed, 61),
                                         grid, cfg.density_model, cfg.zero_network)
    payload = {**report.to_json()}
    if spec.delay == 0 and spec.noise == "gaussian":
        kal = kalman_report(spec, held_out, tcfg.memory, cfg.n_contexts, split_seed(cfg.seed, 61), grid)
        payload["kalman"] = kal.to_json()
    for i in range(min(4, len(est))):
        est[i].to_csv(out / f"density_{i}.csv")
        refs[i].to_csv(out / f"reference_{i}.csv")
    write_history(out / "history.csv", res.history, h)
    write_json(out / "metrics.json", payload, h)
    return payload


def load_columns(path: str, col_x: str, col_y: str) -> tuple[np.ndarray, np.ndarray, int]:
    """Numeric columns ``col_x`` and ``col_y``; rows with NaN in either are dropped."""
    with open(path, newline="") as fh:
        reader = csv.reader(line for line in fh if not line.startswith("#"))
        header = next(reader)
        rows = list(reader)
    for c in (col_x, col_y):
        if c not in header:
            raise UsageError(f"column {c!r} not in {path} (columns: {header})")
    ix, iy = header.index(col_x), header.index(col_y)

    def num(v):
        try:
            return float(v)
        except ValueError:
            return math.nan

    data = np.array([[num(r[ix]), num(r[iy])] for r in rows], dtype=np.float64)
    keep = np.isfinite(data).all(1)
    return data[keep, 0], data[keep, 1], int((~keep).sum())


def zscore(a: np.ndarray) -> np.ndarray:
    sd = a.std()
    return (a - a.mean()) / (sd if sd > 0 else 1.0)


def analyze_te(x: np.ndarray, y: np.ndarray, k: int, l: int, cfg: RunConfig, seed: int):
    """TE_{X->Y}(k, l): Y history of ``k`` steps, X window of ``l`` past steps plus present."""
    mem = max(k, l)
    pair = TimeSeriesPair(zscore(x), zscore(y))
    cut = int(len(pair) * cfg.train_fraction)
    train, test = TimeSeriesPair(pair.x[:cut], pair.y[:cut]), TimeSeriesPair(pair.x[cut:], pair.y[cut:])
    tcfg = replace(cfg.train_config(memory=mem, seed=seed), parallel=1)
    lags = (k, l)
    res = train_estimator(fixed_source(train, tcfg.window, mem), tcfg, cfg.reference_spec(), lags)
    est = evaluate(res.net_y, res.net_xy, fixed_source(test, tcfg.window, mem), len(test) - tcfg.window,
                   split_seed(seed, 71), cfg.reference_spec(), 1, lags)
    return est, res


def cmd_analyze(cfg: RunConfig, out: Path) -> dict:
    h = cfg.config_hash()
    if not cfg.csv_path:
        raise UsageError("analyze needs csv_path (--csv)")
    x, y, dropped = load_columns(cfg.csv_path, cfg.col_x, cfg.col_y)
    if dropped:
        log.warning("dropped %d rows with missing values", dropped)
    need = 10 * max(max(cfg.k_list), cfg.memory)
    if len(x) < need:
        raise UsageError(f"{len(x)} rows; at least {need} needed for k={max(cfg.k_list)}, l={cfg.memory}")
    directions = [("x->y", x, y)] + ([("y->x", y, x)] if cfg.both_directions else [])
    rows, table = [], {d: [] for d, *_ in directions}
    for k in cfg.k_list:
        for name, src, dst in directions:
            est, _ = analyze_te(src, dst, k, cfg.memory, cfg, split_seed(cfg.seed, 70, k))
            rows.append([k, cfg.memory, name, est.te, est.stderr])
            table[name].append(est.te)
            log.info("k=%d %s te=%.4f", k, name, est.te)
    write_csv(out / "te_table.csv", ["k", "l", "direction", "te", "stderr"], rows, h)
    payload = {"dropped_rows": dropped, "n_rows": len(x), "k": cfg.k_list, "l": cfg.memory,
               "te": table}
    if len(cfg.k_list) > 2:
        payload["spearman_x_to_y"] = float(spearmanr(cfg.k_list, table["x->y"]).statistic)
    write_json(out / "analysis.json", payload, h)
    return payload


def cmd_oracle(cfg: RunConfig, out: Path) -> dict:
    h = cfg.config_hash()
    rows = []
    for lam in cfg.lam_grid:
        r = benchmark_te_oracle(lam, cfg.rho, seed=cfg.seed)
        rows.append((f"benchmark(lam={lam:g},rho={cfg.rho:g})", r))
    for snr in cfg.snr_db:
        spec = cfg.channel_spec(snr)
        rows.append((f"{spec.kind}(alpha={spec.alpha:g},k={spec.delay},snr={snr:g}dB,"
                     f"feedback={spec.feedback})", channel_capacity(spec)))
    write_oracle_table(rows, out / "oracles.csv", h)
    return {name: {"value": r.value, "method": r.method, "error_bar": r.error_bar} for name, r in rows}


HANDLERS = {"estimate": cmd_estimate, "optimize": cmd_optimize, "density": cmd_density,
            "analyze": cmd_analyze, "bench": cmd_bench, "oracle": cmd_oracle}


# -- argument parsing ------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _floats(s: str) -> list[float]:
    return [float(v) for v in s.split(",") if v]


def _ints(s: str) -> list[int]:
    return [int(v) for v in s.split(",") if v]


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML run configuration")
    common.add_argument("--seed", type=int)
    common.add_argument("--out")
    common.add_argument("--epochs", type=int, dest="max_epochs")
    common.add_argument("--batch", type=int, dest="batch_size")
    common.add_argument("--lr", type=float, dest="learning_rate")
    common.add_argument("--memory", type=int)
    common.add_argument("--force", action="store_true", help="overwrite results of another config")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any config key (TOML value syntax)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="treet", description="Transfer-entropy estimation and capacity optimisation.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    est = sub.add_parser("estimate", parents=[common], help="train and evaluate a TE estimate")
    est.add_argument("--process", choices=("benchmark", "independent", "hmm"))
    est.add_argument("--lam", type=float)
    est.add_argument("--rho", type=float)
    opt = sub.add_parser("optimize", parents=[common], help="capacity estimation with a generator")
    opt.add_argument("--channel", choices=("awgn", "gma", "gar"))
    opt.add_argument("--snr", type=_floats, dest="snr_db", help="comma-separated SNRs in dB")
    opt.add_argument("--alpha", type=float)
    opt.add_argument("--delay", type=int)
    opt.add_argument("--feedback", action="store_true", default=None)
    den = sub.add_parser("density", parents=[common], help="conditional density on an HMM")
    den.add_argument("--hmm-delay", type=int, dest="hmm_delay")
    den.add_argument("--hmm-beta", type=float, dest="hmm_beta")
    den.add_argument("--noise", choices=("gaussian", "uniform"), dest="hmm_noise")
    den.add_argument("--model", choices=("y", "xy"), dest="density_model")
    den.add_argument("--zero-network", action="store_true", default=None, dest="zero_network")
    ana = sub.add_parser("analyze", parents=[common], help="TE table for two CSV columns")
    ana.add_argument("--csv", dest="csv_path")
    ana.add_argument("--col-x", dest="col_x")
    ana.add_argument("--col-y", dest="col_y")
    ana.add_argument("--k", type=_ints, dest="k_list", help="comma-separated Y history lengths")
    ana.add_argument("--one-direction", action="store_false", default=None, dest="both_directions")
    ben = sub.add_parser("bench", parents=[common], help="grid of benchmark estimates")
    ben.add_argument("--lams", type=_floats, dest="lam_grid")
    ben.add_argument("--ls", type=_ints, dest="l_grid")
    ben.add_argument("--rho", type=float)
    ora = sub.add_parser("oracle", parents=[common], help="table of ground-truth values")
    ora.add_argument("--lams", type=_floats, dest="lam_grid")
    ora.add_argument("--channel", choices=("awgn", "gma", "gar"))
    ora.add_argument("--snr", type=_floats, dest="snr_db")
    ora.add_argument("--alpha", type=float)
    ora.add_argument("--feedback", action="store_true", default=None)
    return p


NON_CONFIG = {"config", "force", "set", "verbose"}


def config_from_args(args: argparse.Namespace) -> RunConfig:
    base = RunConfig.load(args.config).to_dict() if args.config else {}
    base["command"] = args.command
    for item in args.set:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        base.update(tomli.loads(item))
    for k, v in vars(args).items():
        if k not in NON_CONFIG and k != "command" and v is not None:
            base[k] = v
    return RunConfig.from_dict(base)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = config_from_args(args)
        out = prepare_out(cfg, args.force)
        payload = HANDLERS[cfg.command](cfg, out)
    except (UsageError, tomli.TOMLDecodeError, FileNotFoundError) as exc:
        print(f"treet: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDiverged as exc:
        print(f"treet: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (NumericError, FloatingPointError) as exc:
        print(f"treet: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"treet: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    print(json.dumps(payload, indent=2, sort_keys=True, default=float))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
