"""Command-line entry point: ``regmkt {simulate,replay,shapley-audit,risk-report}``.

Exit codes: 0 success, 1 runtime or tolerance failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import hashlib
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from . import allocation as alloc
from . import experiments as ex
from .allocation import MarketDesign
from .bayes import Hypothesis
from .data_io import (
    DEFAULTS,
    ReplaySpec,
    build_lagged_dataset,
    ingest_csv,
    load_config,
    quarterly_summary,
    write_json,
    write_ledger,
    write_table,
)
from .errors import ConfigurationError, InvalidArgument, ParseError, RegMktError, ValidationError
from .market import IN_SAMPLE, MarketConfig, batch_cache, clear_cache, run_online, select_features
from .simulation import Setup, SetupSpec, generate, sample_shapley, shapley_moment_check

log = logging.getLogger("regmkt")

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2

EXPERIMENTS = ("traces", "calibration", "convergence", "risk", "tracking", "truthfulness", "moments")


class UsageError(Exception):
    pass


def _setup_logging(verbose: int):
    env = os.environ.get("REGMKT_LOG", "").strip().upper()
    level = getattr(logging, env, None) if env else None
    if not isinstance(level, int):
        level = logging.WARNING
    level = max(logging.DEBUG, level - 10 * verbose)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_manifest(out: Path, command: str, cfg: dict, files: list[Path]):
    write_json({
        "command": command,
        "version": __version__,
        "seed": cfg["seed"],
        "config": cfg,
        "files": {p.name: _sha256(p) for p in sorted(files)},
    }, out / "manifest.json")


def _resolve(args, defaults=None) -> dict:
    cfg = load_config(args.config, defaults)
    if args.seed is not None:
        if args.seed < 0:
            raise UsageError("--seed must be nonnegative")
        cfg["seed"] = args.seed
    if getattr(args, "design", None):
        try:
            cfg["design"] = MarketDesign.parse(args.design).value
        except InvalidArgument as exc:
            raise UsageError(str(exc)) from None
    if getattr(args, "setup", None):
        try:
            cfg["setup"] = Setup.parse(args.setup).value
        except InvalidArgument as exc:
            raise UsageError(str(exc)) from None
    return cfg


def _descriptor(cfg: dict, name: str, args) -> ex.ExperimentDescriptor:
    over = dict(cfg.get(name) or {})
    over.setdefault("seed", cfg["seed"])
    over.setdefault("alpha", cfg["alpha"])
    if cfg.get("setup"):
        over["setups"] = (cfg["setup"],)
    if getattr(args, "design", None):
        designs = over.get("designs", ex.PRESETS[name].designs)
        if name == "calibration":
            designs = tuple(dict.fromkeys(("mle_nll", "blr_nll")))
        else:
            designs = (cfg["design"],)
        over["designs"] = designs
    try:
        return ex.preset(name, **over)
    except TypeError as exc:
        raise ConfigurationError(f"invalid {name} settings: {exc}") from None


def _jobs(args) -> int:
    if args.jobs is None:
        return ex.default_jobs()
    if args.jobs < 1:
        raise UsageError("--jobs must be at least 1")
    return args.jobs


# ---------------------------------------------------------------------------
# simulate


def _traces(cfg, out: Path) -> Path:
    opts = dict(cfg.get("traces") or {})
    w = tuple(opts.get("true_w", (-0.11, 0.31, 0.08, 0.65)))
    xi = float(opts.get("xi", 1.23))
    lam = float(opts.get("lambda", 0.01))
    rows = []
    for n in opts.get("sample_sizes", (4, 10, 40)):
        spec = SetupSpec(cfg.get("setup") or "baseline", w, xi, int(n), seed=cfg["seed"])
        means, sds = ex.posterior_traces(spec, cfg["gamma"])
        for t in range(means.shape[0]):
            for j in range(means.shape[1]):
                rows.append(dict(n=n, kind="posterior", t=t + 1, name=f"w{j}",
                                 mean=means[t, j], sd=sds[t, j]))
        data = generate(spec)
        registry = ex.default_registry(len(w) - 1)
        hyp = Hypothesis.linear(len(w) - 1, noise_precision=xi, prior_precision=cfg["gamma"])
        for design in ("mle_nll", "blr_nll"):
            kind = "blr" if MarketDesign.parse(design).bayesian else "mle"
            cache = batch_cache(data, data, registry, hyp, kind)
            row = clear_cache(design, cache, registry, lam, IN_SAMPLE, int(n))
            for a, v in row.pi_a.items():
                rows.append(dict(n=n, kind=f"revenue_{design}", t=n, name=a, mean=v, sd=""))
    path = out / "posterior_traces.csv"
    write_table(rows, path)
    return path


def _calibration(cfg, out, args) -> Path:
    report = ex.monte_carlo(_descriptor(cfg, "calibration", args), _jobs(args))
    path = out / "nll_ratio_vs_n.csv"
    write_table(ex.calibration_table(report), path)
    return path


def _convergence(cfg, out, args) -> Path:
    report = ex.monte_carlo(_descriptor(cfg, "convergence", args), _jobs(args))
    path = out / "shapley_vs_n.csv"
    write_table(report.rows(), path)
    return path


def _risk(cfg, out, args) -> Path:
    report = ex.monte_carlo(_descriptor(cfg, "risk", args), _jobs(args))
    path = out / "risk_by_design.csv"
    write_table([r for r in report.rows() if r["quantity"] not in ("nll_grand", "nll_central")], path)
    return path


def _tracking(cfg, out) -> Path:
    opts = dict(cfg.get("tracking") or {})
    opts.setdefault("seed", cfg["seed"])
    opts.setdefault("gamma", cfg["gamma"])
    res = ex.tracking_experiment(**opts)
    rows = []
    for t in range(res.true_path.size):
        rec = dict(t=t + 1, true=res.true_path[t])
        for tau in res.taus:
            rec[f"mean_tau_{tau}"] = res.mean_trace[tau][t]
        rows.append(rec)
    path = out / "tracking_traces.csv"
    write_table(rows, path)
    write_table([dict(tau=tau, mae_after_change=res.mae_after_change[tau]) for tau in res.taus],
                out / "tracking_mae.csv")
    return path


def _truthfulness(cfg, out) -> Path:
    opts = dict(cfg.get("truthfulness") or {})
    opts.setdefault("seed", cfg["seed"])
    opts.setdefault("gamma", cfg["gamma"])
    res = ex.truthfulness_experiment(**opts)
    path = out / "truthfulness.csv"
    write_table([dict(noise_std=s, mean_revenue=v) for s, v in res.items()], path)
    return path


def _moments(cfg, out) -> Path:
    opts = dict(cfg.get("moments") or {})
    n = int(opts.get("samples", 100_000))
    w_var = float(opts.get("w_var", 1.0))
    x_var = float(opts.get("x_var", 1.0))
    rows = []
    for k, w_mean in enumerate(opts.get("w_means", (0.0, 0.25, 0.5, 0.75, 1.0))):
        s = sample_shapley(w_mean, w_var, x_var, n, seed=(cfg["seed"], k))
        rep = shapley_moment_check(w_mean, w_var, x_var, s)
        rows.append(dict(w_mean=w_mean, **asdict(rep)))
    path = out / "shapley_moments.csv"
    write_table(rows, path)
    return path


def cmd_simulate(args) -> int:
    cfg = _resolve(args)
    wanted = tuple(cfg.get("experiments") or EXPERIMENTS)
    bad = [e for e in wanted if e not in EXPERIMENTS]
    if bad:
        raise UsageError(f"unknown experiments {bad}")
    for name in ("calibration", "convergence", "risk"):
        if name in wanted and int((cfg.get(name) or {}).get("runs", 1)) < 1:
            raise UsageError(f"{name}: runs must be at least 1")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for name in wanted:
        log.info("running %s", name)
        if name == "traces":
            files.append(_traces(cfg, out))
        elif name == "calibration":
            files.append(_calibration(cfg, out, args))
        elif name == "convergence":
            files.append(_convergence(cfg, out, args))
        elif name == "risk":
            files.append(_risk(cfg, out, args))
        elif name == "tracking":
            files.append(_tracking(cfg, out))
            files.append(out / "tracking_mae.csv")
        elif name == "truthfulness":
            files.append(_truthfulness(cfg, out))
        elif name == "moments":
            files.append(_moments(cfg, out))
    _write_manifest(out, "simulate", cfg, files)
    print(f"wrote {len(files)} tables to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# replay


REPLAY_DEFAULTS = {"design": "blr_kl_v", "tau": 0.998, "lambda_in": 50.0, "lambda_out": 150.0}


def cmd_replay(args) -> int:
    cfg = _resolve(args, dict(DEFAULTS, **REPLAY_DEFAULTS))
    rcfg = dict(cfg.get("replay") or {})
    data_path = args.data or rcfg.get("data")
    if not data_path:
        raise UsageError("replay needs --data or replay.data")
    try:
        table = ingest_csv(data_path, rcfg.get("schema"))
    except OSError as exc:
        raise UsageError(f"cannot read {data_path}: {exc.strerror}") from None
    if table.dropped:
        log.warning("dropped %d rows with missing cells", table.dropped)
    targets = rcfg.get("targets")
    if targets is None:
        targets = list(table.entities) if rcfg.get("all_central", True) else [table.entities[0]]
    lag = int(rcfg.get("lag", 1))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    files, quarterly = [], []
    for target in targets:
        lagged = build_lagged_dataset(table, ReplaySpec(target, lag))
        p = lagged.data.inputs.shape[1]
        hyp = Hypothesis.linear(p, noise_precision=cfg["xi"], prior_precision=cfg["gamma"],
                                forgetting=cfg["tau"])
        registry = lagged.registry
        if rcfg.get("select", False):
            registry = select_features(lagged.data, registry, hyp,
                                       min_z=float(rcfg.get("min_z", 1.645)))
        config = MarketConfig(cfg["design"], hyp, cfg["lambda_in"], cfg["lambda_out"],
                              cfg["alpha"], cfg["seed"])
        result = run_online(lagged.data, config, registry)
        path = out / f"ledger_{target}.csv"
        write_ledger(result, path)
        files.append(path)
        quarterly += quarterly_summary(result, lagged.data.timestamps, target)
        totals = result.cumulative_revenues()
        print(f"{target}: payment {result.cumulative_payment():.6g}; "
              + ", ".join(f"{a} {v:.6g}" for a, v in totals.items()))
    qpath = out / "quarterly_summary.csv"
    write_table(quarterly, qpath, ["entity", "quarter", "stage", "n", "nll_central",
                                   "nll_grand", "improvement"])
    files.append(qpath)
    cfg["replay"] = dict(rcfg, data=str(data_path))
    _write_manifest(out, "replay", cfg, files)
    return EXIT_OK


# ---------------------------------------------------------------------------
# shapley-audit


def cmd_shapley_audit(args) -> int:
    cfg = _resolve(args)
    opts = dict(cfg.get("audit") or {})
    k = int(opts.get("k", 3))
    n = int(opts.get("n", 10))
    tol = float(opts.get("tolerance", 1e-12))
    if not 1 <= k <= alloc.MAX_ENUMERATION:
        raise UsageError(f"audit k must lie in [1, {alloc.MAX_ENUMERATION}]")
    rng = np.random.default_rng(cfg["seed"])
    w = tuple(rng.uniform(-1, 1, k + 2))
    spec = SetupSpec(cfg.get("setup") or "baseline", w, cfg["xi"], n, seed=cfg["seed"])
    data = generate(spec)
    registry = ex.default_registry(k + 1)
    hyp = Hypothesis.linear(k + 1, noise_precision=cfg["xi"], prior_precision=cfg["gamma"])
    designs = [MarketDesign.parse(args.design)] if args.design else list(MarketDesign)
    weights = alloc.shapley_weights(k)
    if args.tamper_weights:
        weights = weights.copy()
        weights[0] *= 1.0 + args.tamper_weights
    failed = False
    for design in designs:
        kind = "blr" if design.bayesian else "mle"
        cache = batch_cache(data, data, registry, hyp, kind)
        exact = alloc.shapley_series(design, cache, weights)
        oracle = alloc.permutation_shapley(design, cache)
        dev = float(np.max(np.abs(exact - oracle)))
        gap = alloc.budget_gap(design, None, cache, registry, 1.0)
        pay = alloc.central_payment(design, 1.0, None, cache)
        gap_ok = (design.budget_balanced and abs(gap) <= 1e-9 * max(1.0, abs(pay))) or (
            not design.budget_balanced and gap >= -1e-12)
        ok = dev <= tol and gap_ok
        failed |= not ok
        print(f"{design.value:9s} max|exact-oracle|={dev:.3e} budget_gap={gap:.6e} "
              f"{'ok' if ok else 'FAIL'}")
    return EXIT_FAILURE if failed else EXIT_OK


# ---------------------------------------------------------------------------
# risk-report


def cmd_risk_report(args) -> int:
    cfg = _resolve(args)
    desc = _descriptor(cfg, "risk", args)
    report = ex.monte_carlo(desc, _jobs(args))
    rows = []
    for key in sorted(report.cells, key=ex._cell_sort_key):
        design, setup, n, sweep, stage = key
        s = report.summary(design, setup, n, stage, sweep)
        for a, r in s.risk.items():
            rows.append(dict(design=design.value, setup=setup.value, n=n, stage=stage, agent=a,
                             expected_value=r.expected_value,
                             ev_ci_low=r.confidence_interval[0], ev_ci_high=r.confidence_interval[1],
                             expected_shortfall=r.expected_shortfall,
                             es_ci_low=r.shortfall_interval[0], es_ci_high=r.shortfall_interval[1],
                             runs=r.n))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "risk_report.csv"
    write_table(rows, path)
    cfg["risk"] = {k: (list(v) if isinstance(v, tuple) else v)
                   for k, v in asdict(desc).items()}
    _write_manifest(out, "risk-report", cfg, [path])
    for r in rows:
        print(f"{r['design']:9s} {r['setup']:18s} {r['stage']:3s} {r['agent']:4s} "
              f"EV={r['expected_value']:+.4e} ES={r['expected_shortfall']:+.4e}")
    return EXIT_OK


# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="regmkt", description="Bayesian regression market experiments.")
    p.add_argument("--version", action="version", version=f"regmkt {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, out=True, jobs=False):
        sp.add_argument("--config", metavar="PATH")
        if out:
            sp.add_argument("--out", metavar="DIR", default="regmkt_out")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--design")
        sp.add_argument("--setup")
        sp.add_argument("-v", "--verbose", action="count", default=0)
        if jobs:
            sp.add_argument("--jobs", type=int, metavar="N")

    common(sub.add_parser("simulate", help="run synthetic experiments"), jobs=True)
    sp = sub.add_parser("replay", help="replay a CSV time series through the online market")
    common(sp)
    sp.add_argument("--data", metavar="CSV")
    sp = sub.add_parser("shapley-audit", help="check exact Shapley values against permutations")
    common(sp, out=False)
    sp.add_argument("--tamper-weights", type=float, default=0.0, help=argparse.SUPPRESS)
    common(sub.add_parser("risk-report", help="revenue risk by design and setup"), jobs=True)
    return p


COMMANDS = {
    "simulate": cmd_simulate,
    "replay": cmd_replay,
    "shapley-audit": cmd_shapley_audit,
    "risk-report": cmd_risk_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    _setup_logging(args.verbose)
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigurationError) as exc:
        print(f"regmkt: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ParseError, ValidationError) as exc:
        print(f"regmkt: input error: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    except (RegMktError, OSError, ArithmeticError, ValueError) as exc:
        print(f"regmkt: error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
