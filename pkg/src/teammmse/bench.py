"""Multi-drop experiments, CDF tables and the command-line entry point."""

import argparse
import csv
import io
import json
import logging
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import _mc
from .alloc import SolverOptions, fractional_power, maxmin_uatf
from .beamform import CentralizedMMSE, LocalTeamMMSE, MixedTeamMMSE, MultiCellMMSE
from .duality import CouplingMatrices, check_feasibility, downlink_sinr, solve_power_pair, uplink_sinr
from .errors import ConfigError, NumericalError
from .fading import build_covariances
from .netgen import CsiRegime, load_config, place_network, select_clusters
from .pilots import PilotConfig, simulate
from .rates import Bank, evaluate_many

log = logging.getLogger(__name__)

SCHEMES = ("multicell", "local", "centralized", "mixed")
BOUNDS = ("uatf", "coh", "oer")
POWERS = ("full", "fractional", "maxmin")
COLUMNS = ("drop_id", "user_id", "scheme", "bound", "rate_bits_per_symbol", "std_err")


@dataclass
class ExperimentSpec:
    config: object
    schemes: tuple = ("multicell", "local", "centralized")
    bounds: tuple = BOUNDS
    power: str = "fractional"
    shared_aps: tuple = None
    out_dir: Path = Path(".")
    threads: int = 1
    diagnostics: bool = False
    solver: SolverOptions = field(default_factory=SolverOptions)

    def __post_init__(self):
        self.schemes = tuple(self.schemes)
        self.bounds = tuple(self.bounds)
        for s in self.schemes:
            if s not in SCHEMES:
                raise ConfigError(f"unknown scheme {s!r}", "schemes")
        for b in self.bounds:
            if b not in BOUNDS:
                raise ConfigError(f"unknown bound {b!r}", "bounds")
        if not self.schemes or not self.bounds:
            raise ConfigError("need at least one scheme and one bound")
        if self.power not in POWERS:
            raise ConfigError(f"unknown power policy {self.power!r}", "power")
        if self.threads < 1:
            raise ConfigError("must be >= 1", "threads")
        L = self.config.scenario.num_aps
        if self.shared_aps is not None:
            sh = tuple(int(l) for l in self.shared_aps)
            if any(l < 0 or l >= L for l in sh):
                raise ConfigError("AP index out of range", "shared_aps")
            self.shared_aps = sh
        self.out_dir = Path(self.out_dir)


def _make_scheme(name, dep, err_cov, clusters, stats_hhat, shared):
    if name == "multicell":
        return MultiCellMMSE(err_cov, np.argmax(dep.gains, axis=0))
    if name == "centralized":
        return CentralizedMMSE(err_cov, clusters)
    if name == "local":
        return LocalTeamMMSE(err_cov, clusters, stats_hhat)
    return MixedTeamMMSE(err_cov, clusters, shared, stats_hhat)


def run_drop(spec, drop_id):
    """Rows for one drop, ordered by scheme, bound, user."""
    cfg = spec.config
    sc = cfg.scenario
    seed = cfg.master_seed
    dep = place_network(sc, _mc.stream(seed, _mc.PLACEMENT, drop_id))
    cov = build_covariances(dep, sc)
    pilots = PilotConfig.from_deployment(dep, sc)
    bank = Bank(cov, pilots, cfg.num_samples, _mc.seed_of(_mc.stream(seed, _mc.FADING, drop_id)))
    stats_hhat = simulate(cov, pilots, cfg.num_samples, _mc.stream(seed, _mc.PI_STATS, drop_id), bank.stats)[1]
    cf_clusters = select_clusters(dep, sc, CsiRegime.CELL_FREE_CENTRALIZED)
    shared = spec.shared_aps if spec.shared_aps is not None else tuple(range(math.ceil(sc.num_aps / 2)))
    P = sc.max_user_power
    jobs = []
    for name in spec.schemes:
        scheme = _make_scheme(name, dep, bank.err_cov, cf_clusters, stats_hhat, shared)
        if spec.power == "full":
            p = np.full(sc.num_users, P)
        elif spec.power == "fractional":
            p = fractional_power(dep, P, "ul", scheme.clusters)
        else:
            opts = spec.solver
            if spec.diagnostics:
                trace = spec.out_dir / "diagnostics" / f"maxmin_drop{drop_id}_{name}.csv"
                opts = replace(opts, trace_path=str(trace))
            p = maxmin_uatf(scheme, bank, P, "inf", opts).p
        jobs.append((scheme, p))
    rows = []
    for name, rep in zip(spec.schemes, evaluate_many(jobs, bank)):
        for b in spec.bounds:
            est = rep.bound(b)
            for k in range(sc.num_users):
                rows.append((drop_id, k, name, b, float(est.value[k]), float(est.stderr[k])))
    return rows


def _run_one(args):
    spec, drop_id = args
    return run_drop(spec, drop_id)


def _write_rows(fh, rows):
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(COLUMNS)
    for r in rows:
        w.writerow((r[0], r[1], r[2], r[3], repr(r[4]), repr(r[5])))


def read_rows(path):
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or set(COLUMNS) - set(reader.fieldnames):
            raise ConfigError("rate CSV is missing required columns", str(path))
        return [(int(r["drop_id"]), int(r["user_id"]), r["scheme"], r["bound"],
                 float(r["rate_bits_per_symbol"]), float(r["std_err"])) for r in reader]


def summarize(rows):
    groups = {}
    for r in rows:
        groups.setdefault((r[2], r[3]), []).append(r[4])
    return {f"{s}/{b}": {"mean": float(np.mean(v)), "p5": float(np.percentile(v, 5)), "n": len(v)}
            for (s, b), v in sorted(groups.items())}


def cdf_table(rows):
    """Per (scheme, bound): sorted values with quantiles (i + 0.5) / n."""
    groups = {}
    for r in rows:
        groups.setdefault((r[2], r[3]), []).append(r[4])
    table = {}
    for key in sorted(groups):
        vals = np.sort(np.asarray(groups[key], dtype=float))
        if vals.size == 0:
            log.warning("empty group %s skipped", key)
            continue
        table[key] = (vals, (np.arange(vals.size) + 0.5) / vals.size)
    return table


def emit_cdf(rows, path):
    table = cdf_table(rows)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("scheme", "bound", "rate_bits_per_symbol", "quantile"))
        for (s, b), (vals, q) in table.items():
            for v, qi in zip(vals, q):
                w.writerow((s, b, repr(float(v)), repr(float(qi))))
    return table


def run_experiment(spec):
    """Run all drops and write rates.csv, summary.json and cdf.csv into ``spec.out_dir``.

    Drops are written in drop order regardless of which worker finishes first.
    Partial outputs are removed if anything fails.
    """
    out = spec.out_dir
    out.mkdir(parents=True, exist_ok=True)
    if spec.diagnostics:
        (out / "diagnostics").mkdir(exist_ok=True)
    paths = [out / "rates.csv", out / "summary.json", out / "cdf.csv"]
    drops = range(spec.config.num_drops)
    try:
        if spec.threads > 1:
            with ProcessPoolExecutor(spec.threads) as pool:
                results = list(pool.map(_run_one, [(spec, d) for d in drops]))
        else:
            results = [run_drop(spec, d) for d in drops]
        rows = [r for res in results for r in res]
        buf = io.StringIO()
        _write_rows(buf, rows)
        paths[0].write_text(buf.getvalue())
        summary = {"config": spec.config.to_dict(), "schemes": list(spec.schemes),
                   "bounds": list(spec.bounds), "power": spec.power, "groups": summarize(rows)}
        paths[1].write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
        emit_cdf(rows, paths[2])
    except BaseException:
        for p in paths:
            p.unlink(missing_ok=True)
        raise
    return rows


def duality_solve(coupling):
    C = coupling if isinstance(coupling, CouplingMatrices) else CouplingMatrices.load(coupling)
    rho = check_feasibility(C)
    p_ul, p_dl = solve_power_pair(C)
    return {"rho": rho, "p_ul": p_ul.tolist(), "p_dl": p_dl.tolist(),
            "sinr_ul": uplink_sinr(C, p_ul).tolist(), "sinr_dl": downlink_sinr(C, p_dl).tolist(),
            "sum_p_ul": float(p_ul.sum()), "weighted_sum_p_dl": float(C.Sigma @ p_dl)}


def _csv_list(text):
    return tuple(s.strip() for s in text.split(",") if s.strip())


def build_parser():
    ap = argparse.ArgumentParser(prog="teammmse", description="Cell-free beamforming experiments")
    ap.add_argument("--seed", type=int, help="override master_seed from the config")
    ap.add_argument("--threads", type=int, default=1, help="worker processes for drops")
    ap.add_argument("--out-dir", default=".", help="output directory")
    ap.add_argument("--diagnostics", action="store_true", help="write solver traces")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="verb", required=True)
    run = sub.add_parser("run", help="run a multi-drop experiment")
    run.add_argument("config")
    run.add_argument("--schemes", type=_csv_list, default=("multicell", "local", "centralized"))
    run.add_argument("--bounds", type=_csv_list, default=BOUNDS)
    run.add_argument("--power", default="fractional", choices=POWERS)
    run.add_argument("--shared-aps", type=lambda s: tuple(int(x) for x in _csv_list(s)), default=None)
    cdf = sub.add_parser("cdf", help="CDF table from a rates CSV")
    cdf.add_argument("rates")
    dual = sub.add_parser("duality-solve", help="solve the uplink/downlink power pair")
    dual.add_argument("coupling")
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    out = Path(args.out_dir)
    try:
        if args.verb == "run":
            cfg = load_config(args.config)
            if args.seed is not None:
                cfg = replace(cfg, master_seed=args.seed)
            spec = ExperimentSpec(cfg, args.schemes, args.bounds, args.power, args.shared_aps,
                                  out, args.threads, args.diagnostics)
            rows = run_experiment(spec)
            print(f"wrote {len(rows)} rows to {out / 'rates.csv'}")
        elif args.verb == "cdf":
            out.mkdir(parents=True, exist_ok=True)
            table = emit_cdf(read_rows(args.rates), out / "cdf.csv")
            print(f"wrote {len(table)} groups to {out / 'cdf.csv'}")
        else:
            result = duality_solve(args.coupling)
            text = json.dumps(result, indent=2)
            print(text)
            if args.out_dir != ".":
                out.mkdir(parents=True, exist_ok=True)
                (out / "duality.json").write_text(text + "\n")
    except (ConfigError, FileNotFoundError, json.JSONDecodeError, KeyError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    return 0
