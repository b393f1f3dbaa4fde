"""Command-line entry point: ``frugalmap convert|relevance|solve|bench``.

Exit codes: 0 success, 2 usage, 3 parse, 4 validation, 5 resource.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import fields, replace
from pathlib import Path

from . import __version__
from .bench import (
    Protocol,
    bundled_protocols,
    format_summary,
    load_protocol,
    report,
    resolve_variables,
    run_protocol,
    write_csv,
    write_summary_csv,
)
from .engine import DEFAULT_CELL_BUDGET
from .errors import ParseError, ResourceError, ValidationError
from .model import (
    BUNDLED_NETWORKS,
    DEFAULT_EPSILON,
    load_factor_graph,
    patch_determinism,
    read_network,
    to_factor_graph,
    write_fg,
)
from .query import MapQuery
from .relevance import DEFAULT_THRESHOLD, ON_THE_FLY_SAMPLES, precompute_table, read_table, write_table
from .solvers import SOLVERS, AnnealSchedule, default_schedule, solve

EXIT_OK, EXIT_USAGE, EXIT_PARSE, EXIT_VALIDATION, EXIT_RESOURCE = 0, 2, 3, 4, 5

# fixed so that bare invocations are reproducible
DEFAULT_SEED = 0

_SCHEDULE_FLAGS = [f.name for f in fields(AnnealSchedule)]


class _UsageError(Exception):
    pass


# --------------------------------------------------------------------------
# shared helpers
# --------------------------------------------------------------------------


def _model_path(ref: str) -> str:
    if ref in BUNDLED_NETWORKS or Path(ref).is_file():
        return ref
    raise _UsageError(f"no such network file or bundled network: {ref!r}")


def _split(text: str | None) -> list[str]:
    return [t.strip() for t in (text or "").split(",") if t.strip()]


def _variables(fg, net, spec: str, role: str) -> tuple[int, ...]:
    """Comma list of names/ids; with a BIF source also roots[:k], leaves[:k], natural."""
    if net is not None:
        return resolve_variables(net, spec, role)
    items = _split(spec)
    if not items:
        raise ValidationError(f"empty {role} list")
    return tuple(fg.resolve(x) for x in items)


def _evidence(fg, text: str | None) -> dict[int, int]:
    out = {}
    for item in _split(text):
        name, sep, value = item.partition("=")
        if not sep:
            raise _UsageError(f"evidence entries look like VAR=STATE, got {item!r}")
        var = fg.resolve(name.strip())
        if var in out:
            raise ValidationError(f"variable {name.strip()!r} observed twice")
        out[var] = fg.resolve_state(var, value.strip())
    return out


def _schedule(args, n_hypothesis: int) -> AnnealSchedule:
    given = {k: getattr(args, k) for k in _SCHEDULE_FLAGS if getattr(args, k) is not None}
    return replace(default_schedule(n_hypothesis), **given)


def _log_space(value: str):
    return {"auto": None, "on": True, "off": False}[value]


def _write(path: str | None, text: str) -> None:
    if path is None or path == "-":
        sys.stdout.write(text)
    else:
        Path(path).write_text(text, encoding="utf-8")


def _check_out(path: str | None) -> None:
    if path and path != "-" and not Path(path).resolve().parent.is_dir():
        raise _UsageError(f"output directory does not exist: {Path(path).parent}")


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (dict, list, tuple)):
        return json.dumps(value, sort_keys=True, separators=(",", ":"))
    return str(value)


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------


def cmd_convert(args) -> int:
    src = _model_path(args.bif)
    _check_out(args.fg)
    net = read_network(src)
    if args.patch_determinism:
        net = patch_determinism(net, args.epsilon)
    _write(args.fg, write_fg(to_factor_graph(net)))
    return EXIT_OK


def cmd_relevance(args) -> int:
    src = _model_path(args.network)
    _check_out(args.out)
    if bool(args.evidence_vars) == bool(args.evidence):
        raise _UsageError("give exactly one of --evidence-vars or --evidence")
    fg, net = load_factor_graph(src, patch=args.patch_determinism, epsilon=args.epsilon)
    hyp = _variables(fg, net, args.hypothesis, "hypothesis")
    evidence = _evidence(fg, args.evidence) if args.evidence else _variables(fg, net, args.evidence_vars, "evidence")
    table = precompute_table(fg, hyp, evidence, args.samples, args.seed, sampling=args.sampling, jobs=args.jobs)
    _write(args.out, write_table(table))
    if table.low_budget:
        print(f"note: {args.samples} samples per variable; table flagged low-budget", file=sys.stderr)
    return EXIT_OK


def cmd_solve(args) -> int:
    src = _model_path(args.network)
    if args.table and not Path(args.table).is_file():
        raise _UsageError(f"no such table file: {args.table!r}")
    if args.solver in ("mfe+", "mfe+a") and not args.table:
        raise _UsageError(f"--solver {args.solver} needs --table")
    fg, net = load_factor_graph(src, patch=args.patch_determinism, epsilon=args.epsilon)
    hyp = _variables(fg, net, args.hypothesis, "hypothesis")
    q = MapQuery.for_graph(fg, hyp, _evidence(fg, args.evidence))
    table = None
    if args.table:
        table = read_table(Path(args.table).read_text(encoding="utf-8"), fg)
    res = solve(
        fg, q, args.solver, seed=args.seed, table=table, threshold=args.threshold,
        n_samples=args.n_samples, onthefly_samples=args.onthefly_samples,
        schedule=_schedule(args, len(hyp)), sampling=args.sampling,
        cell_budget=args.cell_budget, log_space=_log_space(args.log_space),
    )
    lines = [
        f"network: {fg.content_hash}",
        f"solver: {res.solver}",
        "explanation: " + ";".join(f"{fg.names[v]}={fg.states[v][s]}" for v, s in res.explanation.items()),
        f"score: {res.score!r}",
        f"log_score: {res.log_score!r}",
        f"wall_time_s: {res.wall_time!r}",
    ]
    meta = dict(res.meta)
    if "relevant_vars" in meta:
        meta["relevant_vars"] = [fg.names[v] for v in meta["relevant_vars"]]
    lines += [f"meta.{k}: {_fmt(meta[k])}" for k in sorted(meta)]
    print("\n".join(lines))
    return EXIT_OK


_PROTOCOL_FLAGS = [
    "network", "hypothesis", "evidence", "draws", "repetitions", "solvers", "seed", "relevance_samples",
    "relevance_tables", "threshold", "n_samples", "onthefly_samples", "evidence_dist", "sampling",
    "epsilon", "cell_budget", *_SCHEDULE_FLAGS,
]


def cmd_bench(args) -> int:
    if args.list_protocols:
        print("\n".join(bundled_protocols()))
        return EXIT_OK
    for path in (args.out, args.summary):
        _check_out(path)
    overrides = {k: getattr(args, k) for k in _PROTOCOL_FLAGS if getattr(args, k) is not None}
    if "solvers" in overrides:
        overrides["solvers"] = tuple(s.lower() for s in _split(overrides["solvers"]))
    if args.log_space is not None:
        overrides["log_space"] = _log_space(args.log_space)
    if args.protocol:
        if not (Path(args.protocol).is_file() or args.protocol in bundled_protocols()):
            raise _UsageError(f"no protocol file or bundled protocol named {args.protocol!r}")
        proto = replace(load_protocol(args.protocol), **overrides)
    else:
        if "network" not in overrides:
            raise _UsageError("give --protocol or at least --network")
        proto = Protocol(**overrides)
    if proto.network not in BUNDLED_NETWORKS:
        _model_path(proto.network)

    say = (lambda m: print(m, file=sys.stderr)) if args.verbose else None
    records = run_protocol(proto, jobs=args.jobs, strict_timing=args.strict_timing, progress=say)
    net = read_network(proto.network)
    names = [v.name for v in net.variables]
    states = [v.states for v in net.variables]
    summary = report(records)
    if args.out:
        _write(args.out, write_csv(records, names=names, states=states))
    summary_path = args.summary
    if summary_path is None and args.out and args.out != "-":
        out = Path(args.out)
        summary_path = str(out.with_name(out.stem + ".summary.csv"))
    if summary_path:
        _write(summary_path, write_summary_csv(summary))
    print(format_summary(summary))
    failed = sum(r.error is not None for r in records)
    if failed:
        print(f"{failed} of {len(records)} runs failed; see the meta column", file=sys.stderr)
    return EXIT_OK


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------


def _add_patch(p, default_help="apply the determinism patch (zero CPT entries -> epsilon) first"):
    p.add_argument("--patch-determinism", action="store_true", help=default_help)
    p.add_argument("--epsilon", type=float, default=DEFAULT_EPSILON,
                   help=f"value replacing zero CPT entries when patching (default {DEFAULT_EPSILON:g})")


def _add_budget(p, default=DEFAULT_CELL_BUDGET):
    p.add_argument("--cell-budget", type=lambda s: int(float(s)), default=default,
                   help="largest intermediate factor (cells) exact elimination may build "
                        f"(default {DEFAULT_CELL_BUDGET:.0e})")
    p.add_argument("--log-space", choices=("auto", "on", "off"), default="auto" if default else None,
                   help="log-domain elimination; auto switches it on for large networks")


def _add_schedule(p):
    g = p.add_argument_group("annealing schedule (ann and mfe+a)")
    g.add_argument("--initial-temperature", type=float, help="starting temperature (default 2.0)")
    g.add_argument("--cooling-rate", type=float, help="geometric cooling factor in (0, 1) (default 0.9)")
    g.add_argument("--steps-per-temperature", type=int, help="proposals per level (default 10 x |H|)")
    g.add_argument("--min-temperature", type=float, help="stop below this temperature (default 0.02)")
    g.add_argument("--restarts", type=int, help="extra random restarts (default 2)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="frugalmap", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("convert", help="BIF network -> .fg factor graph")
    p.add_argument("bif", help="BIF file (.bif or .bif.gz) or bundled network name")
    p.add_argument("fg", nargs="?", default="-", help="output .fg path (default stdout)")
    _add_patch(p)
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("relevance", help="precompute an intrinsic-relevance table")
    p.add_argument("network", help=".fg, .bif[.gz] or bundled network name")
    p.add_argument("--hypothesis", required=True,
                   help="comma list of variables; with BIF input also roots[:k], leaves[:k], natural")
    p.add_argument("--evidence-vars", help="evidence variables; values are drawn from the prior per sample")
    p.add_argument("--evidence", help="fixed evidence VAR=STATE,... instead of --evidence-vars")
    p.add_argument("--samples", type=int, default=1000, help="samples per intermediate variable (default 1000)")
    p.add_argument("--seed", type=int, default=DEFAULT_SEED, help=f"random seed (default {DEFAULT_SEED})")
    p.add_argument("--sampling", choices=("uniform", "prior"), default="uniform",
                   help="distribution of the other intermediates' values (default uniform)")
    p.add_argument("--jobs", type=int, default=1, help="worker threads, one variable each (default 1)")
    p.add_argument("--out", default="-", help="table path (default stdout)")
    _add_patch(p)
    p.set_defaults(func=cmd_relevance)

    p = sub.add_parser("solve", help="answer one MAP query")
    p.add_argument("network", help=".fg, .bif[.gz] or bundled network name")
    p.add_argument("--solver", choices=SOLVERS, default="map")
    p.add_argument("--hypothesis", required=True, help="comma list of hypothesis variables")
    p.add_argument("--evidence", default="", help="observations VAR=STATE,...")
    p.add_argument("--table", help="relevance table (required by mfe+ and mfe+a)")
    p.add_argument("--threshold", type=float, default=DEFAULT_THRESHOLD,
                   help=f"relevance at or above which an intermediate is marginalised (default {DEFAULT_THRESHOLD})")
    p.add_argument("--n-samples", type=int, default=1, help="samples of the irrelevant intermediates (default 1)")
    p.add_argument("--onthefly-samples", type=int, default=ON_THE_FLY_SAMPLES,
                   help=f"relevance samples per variable for mfe (default {ON_THE_FLY_SAMPLES})")
    p.add_argument("--sampling", choices=("uniform", "prior"), default="uniform",
                   help="how irrelevant intermediates are drawn (default uniform)")
    p.add_argument("--seed", type=int, default=DEFAULT_SEED, help=f"random seed (default {DEFAULT_SEED})")
    _add_patch(p)
    _add_budget(p)
    _add_schedule(p)
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("bench", help="run a benchmark protocol; writes CSVs and prints a summary")
    p.add_argument("--protocol", help="protocol file or bundled name (" + ", ".join(bundled_protocols()) + ")")
    p.add_argument("--list-protocols", action="store_true", help="print the bundled protocol names")
    p.add_argument("--out", help="per-run CSV path")
    p.add_argument("--summary", help="summary CSV path (default <out>.summary.csv)")
    p.add_argument("--jobs", type=int, default=1, help="worker threads (default 1)")
    p.add_argument("--strict-timing", action=argparse.BooleanOptionalAction, default=True,
                   help="run timed sections one at a time even with --jobs > 1 (default on)")
    p.add_argument("-v", "--verbose", action="store_true", help="progress messages on stderr")
    g = p.add_argument_group("protocol fields (override the protocol file)")
    g.add_argument("--network")
    g.add_argument("--hypothesis", help="natural, roots[:k], leaves[:k] or a comma list")
    g.add_argument("--evidence", help="natural, roots[:k], leaves[:k] or a comma list")
    g.add_argument("--draws", type=int)
    g.add_argument("--repetitions", type=int)
    g.add_argument("--solvers", help="comma list from " + ", ".join(SOLVERS))
    g.add_argument("--seed", type=int)
    g.add_argument("--relevance-samples", type=int, help="samples per variable for mfe+ tables")
    g.add_argument("--relevance-tables", choices=("per-draw", "shared"))
    g.add_argument("--threshold", type=float, help="relevance threshold")
    g.add_argument("--n-samples", type=int)
    g.add_argument("--onthefly-samples", type=int)
    g.add_argument("--evidence-dist", choices=("ancestral", "uniform"),
                   help="how evidence values are drawn (default ancestral)")
    g.add_argument("--sampling", choices=("uniform", "prior"))
    g.add_argument("--epsilon", type=float, help="determinism patch value for the mfe family")
    _add_budget(g, default=None)
    _add_schedule(p)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except _UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"frugalmap: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ParseError as exc:
        print(f"frugalmap: parse error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except ValidationError as exc:
        print(f"frugalmap: invalid input: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (ResourceError, MemoryError) as exc:
        print(f"frugalmap: out of budget: {exc or type(exc).__name__}", file=sys.stderr)
        return EXIT_RESOURCE
    except OSError as exc:
        print(f"frugalmap: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
