"""Command-line entry point.

::

    cosbo gen-scenarios --out scenarios/ --seed 0
    cosbo run --scenarios scenarios/ --scenario m0-low --parameter tilt --algorithm cosbo --out trace.csv
    cosbo bench --scenarios scenarios/ --out results/best --jobs 4
    cosbo bench --scenarios scenarios/ --out results/worst --collaborator-mode worst
    cosbo report results/best results/worst --out report/

Every command is deterministic given its arguments. Exit status is 0 on
success, 1 when some runs failed and 2 on usage or input errors.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

from . import bench, netsim

logger = logging.getLogger("cosbo.cli")

MANIFEST = "manifest.json"


class CliError(Exception):
    """Bad input; reported without a traceback."""


# -- helpers -----------------------------------------------------------------


def _parse_sets(items):
    out = {}
    for item in items or ():
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise CliError(f"--set expects key=value, got {item!r}")
        out[key.strip()] = value.strip()
    return out


def _config(args, **fixed) -> bench.ExperimentConfig:
    values = dict(fixed)
    for flag, key in (
        ("seed", "master_seed"),
        ("budget", "budget"),
        ("starts", "n_starts"),
        ("collaborator_mode", "collaborator_mode"),
        ("gp_profile", "gp_profile"),
    ):
        v = getattr(args, flag, None)
        if v is not None:
            values[key] = v
    algorithms = getattr(args, "algorithm", None)
    if algorithms and isinstance(algorithms, list):
        values["algorithms"] = tuple(dict.fromkeys(algorithms))
    parameter = getattr(args, "parameter", None)
    if parameter and isinstance(parameter, list):
        values["parameters"] = tuple(dict.fromkeys(parameter))
    sets = _parse_sets(getattr(args, "set", None))
    clash = set(sets) & set(values)
    if clash:
        raise CliError(f"--set duplicates a flag: {', '.join(sorted(clash))}")
    try:
        return bench.apply_overrides(bench.ExperimentConfig(), {**values, **sets})
    except KeyError as exc:
        raise CliError(exc.args[0]) from exc
    except ValueError as exc:
        raise CliError(str(exc)) from exc


def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_json(path, data):
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(data, indent=1, sort_keys=True, default=list) + "\n")
    tmp.replace(path)
    return path


def _out_dir(path):
    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(f"cannot create output directory {path}: {exc}") from exc
    return path


def load_corpus(source):
    """Scenarios from a directory (manifest order) or a single JSON file."""
    source = Path(source)
    if source.is_file():
        return [netsim.load_scenario(source)], None
    if not source.is_dir():
        raise CliError(f"no scenarios at {source}")
    manifest_path = source / MANIFEST
    if manifest_path.exists():
        manifest = json.loads(manifest_path.read_text())
        files = [source / entry["file"] for entry in manifest["scenarios"]]
        for entry, f in zip(manifest["scenarios"], files):
            if not f.exists():
                raise CliError(f"manifest lists missing scenario file {f}")
            if _sha256(f) != entry["sha256"]:
                raise CliError(f"scenario file {f} does not match its manifest checksum")
    else:
        manifest = None
        files = sorted(p for p in source.glob("*.json") if p.name != MANIFEST)
    if not files:
        raise CliError(f"no scenario files in {source}")
    return [netsim.load_scenario(f) for f in files], manifest


# -- commands ----------------------------------------------------------------


def cmd_gen_scenarios(args):
    config = _config(args)
    out = _out_dir(args.out)
    scenarios = bench.build_corpus(config)
    entries = []
    for s in scenarios:
        path = netsim.save_scenario(s, out / f"{s.id}.json")
        entries.append({"id": s.id, "file": path.name, "sha256": _sha256(path)})
    manifest = {
        "schema": netsim.SCHEMA,
        "seed": config.master_seed,
        "config_hash": config.digest(),
        "config": config.to_dict(),
        "scenarios": entries,
    }
    _write_json(out / MANIFEST, manifest)
    print(f"wrote {len(entries)} scenarios to {out} (config {config.digest()[:12]})")
    return 0


def _corpus_or_build(args, config):
    if args.scenarios:
        scenarios, manifest = load_corpus(args.scenarios)
        if manifest is not None and manifest.get("seed") != config.master_seed:
            logger.warning(
                "scenarios were generated with seed %s, runs use seed %s", manifest.get("seed"), config.master_seed
            )
        return scenarios
    return bench.build_corpus(config)


def cmd_run(args):
    config = _config(args, parameters=("tilt", "beamwidth"))
    scenarios, _ = load_corpus(args.scenarios)
    ids = [s.id for s in scenarios]
    if args.scenario is None:
        if len(scenarios) != 1:
            raise CliError(f"--scenario is required with several scenarios; choose from {ids}")
        pos = 0
    elif args.scenario in ids:
        pos = ids.index(args.scenario)
    else:
        raise CliError(f"unknown scenario {args.scenario!r}; choose from {ids}")
    if args.parameter not in scenarios[pos].tables:
        raise CliError(f"scenario {ids[pos]} has no table for {args.parameter}")
    if args.algorithm == "cosbo" and len(scenarios) < 2:
        logger.warning("no collaborators available; cosbo runs as plain safeopt_mc")
    try:
        trace = bench.run_single(scenarios, pos, args.parameter, args.algorithm, args.start, config)
    except ValueError as exc:
        raise CliError(str(exc)) from exc
    out = Path(args.out)
    _out_dir(out.parent)
    bench.write_results([trace], out)
    best = trace.best_so_far[-1] if trace.rows else float("nan")
    print(
        f"{trace.scenario_id} {trace.parameter} {trace.algorithm} start {trace.start_index}: "
        f"{len(trace.rows)} iterations, final best {best:.4f}, {trace.violations} violations"
    )
    return 0


def bench_summary(traces, curves, config):
    """Text summary: efficiency gaps and violation counts."""
    lines = [f"config {config.digest()[:12]}  seed {config.master_seed}  traces {len(traces)}"]
    for p in config.parameters:
        key = lambda a: (p, a, config.collaborator_mode, config.gp_profile)  # noqa: E731
        a, b = curves.get(key("cosbo")), curves.get(key("safeopt_mc"))
        gap = "n/a" if a is None or b is None else bench.efficiency_gap(a, b, config.plateau_epsilon)
        lines.append(f"{p} [{config.collaborator_mode}, {config.gp_profile}] efficiency_gap(cosbo vs safeopt_mc) = {gap}")
        sub = [t for t in traces if t.parameter == p]
        for alg, n in sorted(bench.violation_counts(sub).items()):
            line = f"  {alg:<11} true violations {n:>5}"
            if alg != "random":
                low = sum(1 for t in sub if t.algorithm == alg for r in t.rows if r.lower_g < config.hyper.threshold)
                line += f"  lower_g<h at selection {low}"
            lines.append(line)
    failed = [t for t in traces if t.error]
    lines.append(f"failed runs: {len(failed)}")
    for t in failed:
        lines.append(f"  {t.scenario_id} {t.parameter} {t.algorithm} start {t.start_index}: {t.error}")
    return "\n".join(lines)


def cmd_bench(args):
    config = _config(args)
    if args.jobs < 1:
        raise CliError("--jobs must be >= 1")
    out = _out_dir(args.out)
    scenarios = _corpus_or_build(args, config)
    traces = bench.run_matrix(config, scenarios, jobs=args.jobs)
    curves = bench.aggregate(traces, budget=config.budget)
    results = bench.write_results(traces, out / "results.csv")
    aggregate = bench.write_aggregate(curves, out / "aggregate.csv")
    summary = bench_summary(traces, curves, config)
    (out / "summary.txt").write_text(summary + "\n")
    _write_json(
        out / MANIFEST,
        {
            "seed": config.master_seed,
            "config_hash": config.digest(),
            "config": config.to_dict(),
            "scenarios": [s.id for s in scenarios],
            "n_traces": len(traces),
            "files": {p.name: _sha256(p) for p in (results, aggregate)},
        },
    )
    print(summary)
    return 1 if any(t.error for t in traces) else 0


def cmd_report(args):
    traces = []
    for src in args.results:
        src = Path(src)
        path = src / "results.csv" if src.is_dir() else src
        if not path.exists():
            raise CliError(f"no results file at {path}")
        traces.extend(bench.read_results(path))
    if not traces:
        raise CliError("results are empty")
    out = _out_dir(args.out)
    curves = bench.aggregate(traces)
    bench.write_aggregate(curves, out / "aggregate.csv")
    curve_dir = _out_dir(out / "curves")
    lines = [f"{'parameter':<10} {'algorithm':<11} {'mode':<6} {'profile':<8} {'runs':>5} "
             f"{'t=1':>6} {'t=5':>6} {'t=15':>6} {'final':>6} {'plateau':>7}"]
    for key, c in curves.items():
        name = "_".join(key) + ".csv"
        bench.write_aggregate({key: c}, curve_dir / name)
        med = c.median
        at = [med[min(t, len(med)) - 1] for t in (1, 5, 15)]
        lines.append(f"{key[0]:<10} {key[1]:<11} {key[2]:<6} {key[3]:<8} {c.n_runs:>5} "
                     f"{at[0]:6.3f} {at[1]:6.3f} {at[2]:6.3f} {med[-1]:6.3f} "
                     f"{bench.plateau_iteration(c, args.epsilon):>7}")
    for key in curves:
        if key[1] != "cosbo":
            continue
        ref = (key[0], "safeopt_mc", key[2], key[3])
        if ref in curves:
            gap = bench.efficiency_gap(curves[key], curves[ref], args.epsilon)
            lines.append(f"efficiency_gap {key[0]} [{key[2]}, {key[3]}] = {gap}")
    table = "\n".join(lines)
    (out / "summary.txt").write_text(table + "\n")
    print(table)
    return 0


# -- parser ------------------------------------------------------------------


def _common(p, out_help):
    p.add_argument("--seed", type=int, default=None, help="master seed (default 0)")
    p.add_argument("--out", required=True, help=out_help)
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any configuration field")


def build_parser():
    parser = argparse.ArgumentParser(prog="cosbo", description="Collaborative safe BO for antenna tuning.")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-scenarios", help="generate the scenario corpus")
    _common(g, "output directory")
    g.set_defaults(func=cmd_gen_scenarios)

    r = sub.add_parser("run", help="one optimization run")
    _common(r, "trace file (CSV)")
    r.add_argument("--scenarios", required=True, help="scenario directory or file")
    r.add_argument("--scenario", help="scenario id inside the directory")
    r.add_argument("--parameter", choices=("tilt", "beamwidth"), required=True)
    r.add_argument("--algorithm", choices=bench.ALGORITHMS, required=True)
    r.add_argument("--start", type=int, default=0, help="start number (default 0)")
    r.add_argument("--budget", type=int)
    r.add_argument("--starts", type=int, help="number of starts drawn per scenario")
    r.add_argument("--collaborator-mode", choices=("best", "worst"))
    r.add_argument("--gp-profile", choices=tuple(bench.GP_PROFILES))
    r.set_defaults(func=cmd_run)

    b = sub.add_parser("bench", help="run the benchmark matrix")
    _common(b, "output directory")
    b.add_argument("--scenarios", help="scenario directory (default: generate from --seed)")
    b.add_argument("--parameter", choices=("tilt", "beamwidth"), action="append")
    b.add_argument("--algorithm", choices=bench.ALGORITHMS, action="append")
    b.add_argument("--budget", type=int)
    b.add_argument("--starts", type=int)
    b.add_argument("--collaborator-mode", choices=("best", "worst"))
    b.add_argument("--gp-profile", choices=tuple(bench.GP_PROFILES))
    b.add_argument("--jobs", type=int, default=1)
    b.set_defaults(func=cmd_bench)

    p = sub.add_parser("report", help="plot data and summary table from bench results")
    p.add_argument("results", nargs="+", help="bench output directories or results files")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--epsilon", type=float, default=0.02, help="plateau tolerance (scaled units)")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING if args.verbose == 0 else logging.INFO if args.verbose == 1 else logging.DEBUG,
        format="%(levelname)s %(name)s: %(message)s",
    )
    if args.verbose == 0:
        # bound clamps are routine on coarse tables
        logging.getLogger("cosbo.safeopt").setLevel(logging.ERROR)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (OSError, bench.CorpusError, netsim.MapGenerationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
