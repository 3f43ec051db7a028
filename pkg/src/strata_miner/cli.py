"""Command line entry point: ``strata-miner <subcommand> ...``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 oracle mismatch. Every output directory receives a ``manifest.json``.
"""
from __future__ import annotations

import argparse
import csv
import datetime as dt
import hashlib
import io
import json
import logging
import os
import re
import sys
import time
from pathlib import Path

from . import __version__
from .cohort import (SchemaConfig, prepare_cohort, read_cohort, read_visits_csv,
                     write_cohort)
from .errors import CandidateBudgetExceeded, ConfigError, DataError, StrataMinerError
from .experiments import GridSpec, run_grid, run_stratified
from .importance import DEFAULT_TOP_K, ImportanceReport, score_features, top_features
from .miner import (DEFAULT_THRESHOLD, MinerConfig, RulePool, count_candidates, mine,
                    mine_beam, mine_exhaustive, top_k, usable_features)
from .rulecore import Rule
from .synth import PlantedRule, SynthSpec, generate

log = logging.getLogger("strata_miner")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_MISMATCH = 0, 1, 2, 3
LOG_ENV = "STRATA_MINER_LOG"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


class _Failure(Exception):
    def __init__(self, stage: str, exc: Exception, code: int):
        super().__init__(f"[{stage}] {exc}")
        self.code = code


def _dumps(obj) -> str:
    return json.dumps(obj, indent=2) + "\n"


def _digest(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class _Run:
    """Output directory bookkeeping; writes the manifest even on failure."""

    def __init__(self, command: str, out: str | None, config: dict, inputs=()):
        self.command = command
        self.out = Path(out) if out else None
        self.config = config
        self.inputs = [Path(p) for p in inputs if p]
        self.outputs: list[Path] = []
        self.extra: dict = {}
        self.started = time.time()

    def __enter__(self):
        if self.out is not None:
            self.out.mkdir(parents=True, exist_ok=True)
        return self

    def write_text(self, rel: str, text: str) -> Path:
        path = self.out / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
        self.outputs.append(path)
        return path

    def write_json(self, rel: str, obj) -> Path:
        return self.write_text(rel, _dumps(obj))

    def track(self, path: Path) -> None:
        self.outputs.append(Path(path))

    def __exit__(self, exc_type, exc, tb):
        if self.out is None:
            return False
        manifest = {
            "tool": "strata-miner", "version": __version__, "subcommand": self.command,
            "status": "ok" if exc is None else "failed",
            "config": self.config,
            "inputs": {str(p): _digest(p) for p in self.inputs if p.is_file()},
            "outputs": {str(p.relative_to(self.out)): _digest(p) for p in self.outputs
                        if p.is_file()},
            "started_at": dt.datetime.fromtimestamp(self.started, dt.timezone.utc).isoformat(),
            "wall_clock_seconds": round(time.time() - self.started, 3),
        }
        if exc is not None:
            manifest["error"] = str(exc)
        manifest.update(self.extra)
        (self.out / "manifest.json").write_text(_dumps(manifest))
        return False


def _stage(stage: str, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except (ConfigError, CandidateBudgetExceeded) as exc:
        raise _Failure(stage, exc, EXIT_CONFIG) from exc
    except DataError as exc:
        raise _Failure(stage, exc, EXIT_DATA) from exc


def _safe(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9._=-]+", "_", name) or "_"


def _miner_config(args, **overrides) -> MinerConfig:
    values = dict(beam_width=args.beam_width, max_rule_length=args.max_len,
                  wracc_threshold=args.threshold, min_coverage=args.min_coverage,
                  engine=getattr(args, "engine", "beam"),
                  seed_mode=getattr(args, "seed_mode", "all"), seed=args.seed,
                  expected_confidence=getattr(args, "expected_confidence", "prior"))
    if getattr(args, "budget", None) is not None:
        values["candidate_budget"] = args.budget
    values.update(overrides)
    return MinerConfig(**values)


def _grid_spec(args) -> GridSpec:
    return GridSpec(beam_widths=tuple(args.beam_width), max_lengths=tuple(args.max_len),
                    wracc_threshold=args.threshold, min_coverage=args.min_coverage,
                    strata=tuple(getattr(args, "variables", None) or ()),
                    absent=args.absent, top_n=args.top_n)


# -- subcommands -----------------------------------------------------------

def cmd_prepare(args) -> int:
    config = {"visits": args.visits, "schema": args.schema, "format": args.format}
    with _Run("prepare", args.out, config, [args.visits, args.schema]) as run:
        schema = _stage("schema", SchemaConfig.load, args.schema)
        records = _stage("ingest", read_visits_csv, args.visits, schema)
        prepared = _stage("label/aggregate", prepare_cohort, records, schema)
        path = run.out / f"cohort.{args.format}"
        write_cohort(prepared.table, path)
        run.track(path)
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["patient_id", "reason"])
        w.writerows(prepared.exclusions)
        run.write_text("exclusions.csv", buf.getvalue())
        t = prepared.table
        run.extra["cohort"] = {"patients": t.n_patients, "positives": t.n_positive,
                               "features": t.n_features,
                               "excluded": len(prepared.exclusions),
                               "dataset_fingerprint": t.fingerprint()}
    print(f"cohort: {t.n_patients} patients ({t.n_positive} positive), "
          f"{t.n_features} features, {len(prepared.exclusions)} excluded")
    return EXIT_OK


def cmd_synth(args) -> int:
    if args.spec:
        try:
            data = json.loads(Path(args.spec).read_text())
        except FileNotFoundError:
            raise _Failure("spec", ConfigError(f"spec file not found: {args.spec}"), EXIT_CONFIG)
        data.setdefault("seed", args.seed if args.seed is not None else 0)
        spec = _stage("spec", lambda: SynthSpec(**data))
    else:
        planted = ()
        if args.planted:
            planted = (PlantedRule(tuple(args.planted.split(",")), args.positive_rate,
                                   args.prevalence),)
        spec = _stage("spec", lambda: SynthSpec(
            n_patients=args.n_patients, n_features=args.n_features,
            n_medications=args.n_medications, background_rate=args.background_rate,
            planted=planted, seed=args.seed if args.seed is not None else 0))
    with _Run("synth", args.out, spec.to_dict(), [args.spec]) as run:
        table, truth = _stage("generate", generate, spec)
        path = run.out / f"cohort.{args.format}"
        write_cohort(table, path)
        run.track(path)
        run.write_json("truth.json", truth)
    print(f"synthetic cohort: {table.n_patients} patients, {table.n_features} features, "
          f"base rate {table.base_rate:.4f}")
    return EXIT_OK


def cmd_mine(args) -> int:
    cfg = _stage("config", _miner_config, args)
    with _Run("mine", args.out, {**cfg.to_dict(), "cohort": args.cohort},
              [args.cohort]) as run:
        table = _stage("load", read_cohort, args.cohort)
        pool = _stage("mine", mine, table, cfg, args.workers)
        run.write_json("rules.json", pool.to_json())
        run.extra["miner"] = pool.manifest()
    for r in top_k(pool, args.top_k):
        print(f"{r.stats.wracc:.6f}  n={r.stats.n:<7d} {r.describe(table.feature_names)}")
    return EXIT_OK


def _load_rules(path: str) -> tuple[list[Rule], list[str]]:
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise DataError(f"rules file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: not valid JSON: {exc}") from None
    if not isinstance(data, list):
        raise DataError(f"{path}: expected a JSON array of rules")
    names = sorted({name for d in data for name in d["selectors"]})
    return [Rule.from_dict(d, names) for d in data], names


def cmd_importance(args) -> int:
    config = {"rules": args.rules, "top_n": args.top_n, "top_k": args.top_k}
    with _Run("importance", args.out, config, [args.rules]) as run:
        rules, names = _stage("load", _load_rules, args.rules)
        report = score_features(rules, names, top_n=args.top_n)
        run.write_json("importance.json", report.to_json())
    for s in top_features(report, args.top_k):
        print(f"{s.a_w:.6f}  rules={s.rule_count:<6d} {s.feature}")
    return EXIT_OK


def _write_grid(run: _Run, prefix: str, result, top_rules: int) -> None:
    for s in result.settings:
        run.write_json(f"{prefix}settings/{s.name}/importance.json", s.report.to_json())
        run.write_json(f"{prefix}settings/{s.name}/rules.json", s.pool.to_json(top_rules))
    run.write_json(f"{prefix}grid.json", result.to_json())


def cmd_grid(args) -> int:
    spec = _stage("config", _grid_spec, args)
    with _Run("grid", args.out, {**spec.to_dict(), "cohort": args.cohort},
              [args.cohort]) as run:
        table = _stage("load", read_cohort, args.cohort)
        result = _stage("grid", run_grid, table, spec, args.workers)
        _write_grid(run, "", result, args.top_rules)
        run.extra["timings"] = result.timings()
    for a in result.scores[:args.top_k]:
        print(f"{a.mean:.6f}  [{a.ci_low:.6f}, {a.ci_high:.6f}]  {a.feature}")
    return EXIT_OK


def cmd_stratify(args) -> int:
    spec = _stage("config", _grid_spec, args)
    with _Run("stratify", args.out, {**spec.to_dict(), "cohort": args.cohort},
              [args.cohort]) as run:
        table = _stage("load", read_cohort, args.cohort)
        variables = args.variables or list(table.strata)
        result = _stage("stratify", run_stratified, table, spec, variables,
                        args.workers, args.top_k)
        _write_grid(run, "reference/", result.reference, args.top_rules)
        run.write_json("reference/importance.json", result.reference.report().to_json())
        for stratum, grid in result.strata:
            base = f"strata/{_safe(stratum.variable)}/{_safe(stratum.category)}/"
            run.write_json(base + "importance.json", grid.report().to_json())
            run.write_json(base + "rules.json", grid.settings[-1].pool.to_json(args.top_rules))
            run.write_json(base + "grid.json", grid.to_json())
        run.write_text("comparison.csv", result.comparison.to_csv())
        buf = io.StringIO()
        w = csv.DictWriter(buf, ["variable", "stratum", "positives", "negatives"],
                           lineterminator="\n")
        w.writeheader()
        w.writerows(result.counts)
        run.write_text("counts.csv", buf.getvalue())
        run.extra["skipped"] = [{"stratum": s.name, "reason": why} for s, why in result.skipped]
    print(f"{len(result.strata)} strata mined, {len(result.skipped)} skipped")
    return EXIT_OK


def cmd_oracle(args) -> int:
    with _Run("oracle", args.out, {"cohort": args.cohort}, [args.cohort]) as run:
        table = _stage("load", read_cohort, args.cohort)
        total = count_candidates(usable_features(table).size, args.max_len)
        width = args.beam_width if args.beam_width is not None else max(total, 1)
        cfg = _stage("config", _miner_config, args, beam_width=width)
        run.config = {**cfg.to_dict(), "cohort": args.cohort}
        exhaustive = _stage("exhaustive", mine_exhaustive, table, cfg)
        beam = _stage("beam", mine_beam, table, cfg, args.workers)
        if width >= total:
            ok = beam.same_rules(exhaustive)
            relation = "identical"
        else:
            ok = beam.selector_sets() <= exhaustive.selector_sets() and _stats_agree(beam, exhaustive)
            relation = "beam subset of exhaustive"
        run.extra["oracle"] = {"candidates": total, "beam_width": width, "relation": relation,
                               "ok": ok, "beam_pool": len(beam), "exhaustive_pool": len(exhaustive)}
    if ok:
        print(f"pools {relation}: {total} candidates")
        return EXIT_OK
    print(f"pools differ ({relation} expected): {total} candidates, beam {len(beam)} rules, "
          f"exhaustive {len(exhaustive)} rules", file=sys.stderr)
    return EXIT_MISMATCH


def _stats_agree(small: RulePool, big: RulePool) -> bool:
    ref = {r.selectors: (r.stats.n, r.stats.p) for r in big}
    return all(ref.get(r.selectors) == (r.stats.n, r.stats.p) for r in small)


def _plot_rows(figure, panel, stratum, scores, k):
    for rank, a in enumerate(scores[:k], 1):
        yield {"figure": figure, "panel": panel, "stratum": stratum, "rank": rank,
               "feature": a["feature"], "mean": a["mean"], "ci_low": a["ci_low"],
               "ci_high": a["ci_high"]}


def cmd_export_plot(args) -> int:
    rows = []
    inputs = []
    if args.grid:
        inputs.append(args.grid)
        grid = _stage("load", _read_json, args.grid)
        rows.extend(_plot_rows("top", "cohort", "all", grid["scores"], args.top_k))
    if args.strata:
        root = Path(args.strata)
        ref_path = root / "reference" / "grid.json"
        inputs.append(ref_path)
        ref = _stage("load", _read_json, ref_path)
        rows.extend(_plot_rows("top", "cohort", "all", ref["scores"], args.top_k))
        reference_top = [a["feature"] for a in ref["scores"][:args.top_k]]
        for path in sorted(root.glob("strata/*/*/grid.json")):
            inputs.append(path)
            variable, category = path.parent.parent.name, path.parent.name
            grid = _read_json(path)
            rows.extend(_plot_rows("top", variable, category, grid["scores"], args.top_k))
            by_feature = {a["feature"]: a for a in grid["scores"]}
            for rank, f in enumerate(reference_top, 1):
                a = by_feature.get(f, {"mean": 0.0, "ci_low": 0.0, "ci_high": 0.0})
                rows.append({"figure": "fixed", "panel": variable, "stratum": category,
                             "rank": rank, "feature": f, "mean": a["mean"],
                             "ci_low": a["ci_low"], "ci_high": a["ci_high"]})
    if not inputs:
        raise _Failure("config", ConfigError("give --grid and/or --strata"), EXIT_CONFIG)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    w = csv.DictWriter(buf, ["figure", "panel", "stratum", "rank", "feature", "mean",
                             "ci_low", "ci_high"], lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    out.write_text(buf.getvalue())
    manifest = {"tool": "strata-miner", "version": __version__, "subcommand": "export-plot",
                "config": {"grid": args.grid, "strata": args.strata, "top_k": args.top_k},
                "inputs": {str(p): _digest(Path(p)) for p in inputs},
                "outputs": {out.name: _digest(out)}}
    (out.parent / f"{out.stem}.manifest.json").write_text(_dumps(manifest))
    print(f"{len(rows)} rows written to {out}")
    return EXIT_OK


def _read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise DataError(f"file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: not valid JSON: {exc}") from None


# -- parser ----------------------------------------------------------------

def _shared(p, grid=False):
    if grid:
        p.add_argument("--beam-width", type=int, nargs="+", default=[2000, 5000, 10000])
        p.add_argument("--max-len", type=int, nargs="+", default=[3, 4, 5])
        p.add_argument("--absent", choices=["zero", "present"], default="zero",
                       help="how settings missing a feature enter its mean")
        p.add_argument("--top-n", type=int, default=None,
                       help="score only the top-n rules instead of all above threshold")
        p.add_argument("--top-rules", type=int, default=100,
                       help="rules written per setting")
    else:
        p.add_argument("--beam-width", type=int, default=2000)
        p.add_argument("--max-len", type=int, default=3)
    p.add_argument("--threshold", type=float, default=DEFAULT_THRESHOLD)
    p.add_argument("--min-coverage", type=int, default=0)
    p.add_argument("--top-k", type=int, default=DEFAULT_TOP_K)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--seed", type=int, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="strata-miner", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("prepare", help="visits CSV + schema JSON -> cohort")
    p.add_argument("--visits", required=True)
    p.add_argument("--schema", required=True)
    p.add_argument("--format", choices=["csv", "npz"], default="csv")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("synth", help="generate a synthetic cohort with planted rules")
    p.add_argument("--spec", help="SynthSpec JSON; overrides the flags below")
    p.add_argument("--n-patients", type=int, default=10_000)
    p.add_argument("--n-features", type=int, default=210)
    p.add_argument("--n-medications", type=int, default=128)
    p.add_argument("--background-rate", type=float, default=0.1)
    p.add_argument("--planted", help="comma-separated feature names of one planted rule")
    p.add_argument("--prevalence", type=float, default=0.3)
    p.add_argument("--positive-rate", type=float, default=0.6)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--format", choices=["csv", "npz"], default="csv")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("mine", help="mine rules with one configuration")
    p.add_argument("--cohort", required=True)
    _shared(p)
    p.add_argument("--engine", choices=["beam", "exhaustive"], default="beam")
    p.add_argument("--seed-mode", choices=["all", "random"], default="all")
    p.add_argument("--expected-confidence", choices=["prior", "subgroup"], default="prior")
    p.add_argument("--budget", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_mine)

    p = sub.add_parser("importance", help="feature scores from a rules.json")
    p.add_argument("--rules", required=True)
    p.add_argument("--top-n", type=int, default=None)
    p.add_argument("--top-k", type=int, default=DEFAULT_TOP_K)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_importance)

    p = sub.add_parser("grid", help="run the width x length grid and aggregate")
    p.add_argument("--cohort", required=True)
    _shared(p, grid=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("stratify", help="grid on the cohort and on every stratum")
    p.add_argument("--cohort", required=True)
    p.add_argument("--variables", nargs="+", default=None)
    _shared(p, grid=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_stratify)

    p = sub.add_parser("oracle", help="compare beam and exhaustive pools")
    p.add_argument("--cohort", required=True)
    p.add_argument("--beam-width", type=int, default=None,
                   help="defaults to the total candidate count (saturated beam)")
    p.add_argument("--max-len", type=int, default=3)
    p.add_argument("--threshold", type=float, default=DEFAULT_THRESHOLD)
    p.add_argument("--min-coverage", type=int, default=0)
    p.add_argument("--budget", type=int, default=None)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("export-plot", help="long-format CSV for external plotting")
    p.add_argument("--grid", help="grid.json from the grid subcommand")
    p.add_argument("--strata", help="output directory of the stratify subcommand")
    p.add_argument("--top-k", type=int, default=DEFAULT_TOP_K)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_plot)
    return parser


def _configure_logging() -> None:
    level = os.environ.get(LOG_ENV, "WARNING").upper()
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    log.handlers[:] = [handler]
    log.setLevel(getattr(logging, level, logging.WARNING))
    log.propagate = False


def main(argv=None) -> int:
    _configure_logging()
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:  # usage errors, --help and --version
        return exc.code if isinstance(exc.code, int) else EXIT_CONFIG
    try:
        return args.func(args)
    except _Failure as exc:
        print(f"strata-miner {args.command}: error {exc}", file=sys.stderr)
        return exc.code
    except ConfigError as exc:
        print(f"strata-miner {args.command}: error [config] {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"strata-miner {args.command}: error [data] {exc}", file=sys.stderr)
        return EXIT_DATA
    except StrataMinerError as exc:
        print(f"strata-miner {args.command}: error {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
