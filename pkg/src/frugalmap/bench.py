"""Benchmark harness: evidence draws, timed solver runs, error measures, CSV.

A protocol names a network, a hypothesis/evidence split, how many evidence
draws and timing repetitions to run, and which solvers to compare. Every
record is scored against exact MAP computed once per draw.
"""

from __future__ import annotations

import csv
import io
import json
import math
import statistics
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields, replace
from importlib import resources
from pathlib import Path
from typing import Callable, Mapping, Sequence, TextIO

import numpy as np

from . import _kernels
from .engine import DEFAULT_CELL_BUDGET, JointTable, eliminate
from .errors import FrugalMapError, ParseError, ResourceError, ValidationError
from .model import (
    Network,
    forward_sample,
    patch_determinism,
    read_network,
    to_factor_graph,
)
from .query import MapQuery
from .relevance import DEFAULT_THRESHOLD, precompute_table
from .solvers import SOLVERS, AnnealSchedule, argmax_table, default_schedule, map_table, solve

CSV_HEADER = ["network", "solver", "draw", "rep", "wall_time_s", "hamming", "ratio", "rank", "explanation", "meta"]
SUMMARY_HEADER = [
    "network", "solver", "records", "scored", "failed", "mean_wall_time_s", "std_wall_time_s",
    "mean_hamming", "mean_ratio", "mean_rank", "mean_relevant_fraction",
]

# Alarm's diagnostic / observable / intermediate split
NATURAL_PARTITIONS = {
    "alarm": (
        ("HYPOVOLEMIA", "LVFAILURE", "INSUFFANESTH", "ANAPHYLAXIS", "KINKEDTUBE", "PULMEMBOLUS",
         "INTUBATION", "DISCONNECT"),
        ("HISTORY", "CVP", "PCWP", "HRBP", "HREKG", "HRSAT", "TPR", "EXPCO2", "MINVOL", "FIO2",
         "SAO2", "PAP", "PRESS", "MINVOLSET", "CO", "BP"),
    ),
}

# solvers that run on the determinism-patched network
_PATCHED = {"mfe", "mfe+", "mfe+a"}


# --------------------------------------------------------------------------
# protocols
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Protocol:
    network: str
    hypothesis: str = "natural"
    evidence: str = "natural"
    draws: int = 10
    repetitions: int = 5
    solvers: tuple[str, ...] = ("map", "ann", "mfe", "mfe+")
    seed: int = 0
    relevance_samples: int = 1000
    relevance_tables: str = "per-draw"
    threshold: float = DEFAULT_THRESHOLD
    n_samples: int = 1
    onthefly_samples: int = 3
    evidence_dist: str = "ancestral"
    sampling: str = "uniform"
    epsilon: float = 1e-9
    cell_budget: int = DEFAULT_CELL_BUDGET
    log_space: bool | None = None
    initial_temperature: float | None = None
    cooling_rate: float | None = None
    steps_per_temperature: int | None = None
    min_temperature: float | None = None
    restarts: int | None = None
    name: str = ""

    def __post_init__(self):
        if self.draws < 1 or self.repetitions < 1:
            raise ValidationError("draws and repetitions must be >= 1")
        if not self.solvers:
            raise ValidationError("solver list must not be empty")
        bad = [s for s in self.solvers if s not in SOLVERS]
        if bad:
            raise ValidationError(f"unknown solvers {bad}; choose from {', '.join(SOLVERS)}")
        if self.relevance_tables not in ("per-draw", "shared"):
            raise ValidationError("relevance_tables must be 'per-draw' or 'shared'")
        if self.evidence_dist not in ("ancestral", "uniform"):
            raise ValidationError("evidence_dist must be 'ancestral' or 'uniform'")
        if self.sampling not in ("uniform", "prior"):
            raise ValidationError("sampling must be 'uniform' or 'prior'")
        if not 0 <= self.threshold <= 1:
            raise ValidationError("threshold must lie in [0, 1]")
        if self.relevance_samples < 1 or self.n_samples < 1 or self.onthefly_samples < 1:
            raise ValidationError("sample counts must be >= 1")

    def schedule(self, n_hypothesis: int) -> AnnealSchedule:
        base = default_schedule(n_hypothesis)
        given = {
            k: getattr(self, k)
            for k in ("initial_temperature", "cooling_rate", "steps_per_temperature", "min_temperature", "restarts")
            if getattr(self, k) is not None
        }
        return replace(base, **given)


_FIELD_TYPES = {f.name: f.type for f in fields(Protocol)}


def _convert(key, raw, line):
    kind = _FIELD_TYPES[key]
    try:
        if key == "solvers":
            return tuple(s.strip().lower() for s in raw.split(",") if s.strip())
        if key == "log_space":
            low = raw.lower()
            if low in ("auto", "none"):
                return None
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        if kind.startswith("int"):
            return int(float(raw)) if "e" in raw.lower() else int(raw)
        if kind.startswith("float"):
            return float(raw)
        return raw
    except ValueError:
        raise ParseError(f"bad value {raw!r} for {key!r}", line, 1) from None


def parse_protocol(text: str, name: str = "") -> Protocol:
    """Parse ``key = value`` lines; ``#`` starts a comment, blank lines are skipped."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, raw = line.partition("=")
        key = key.strip().replace("-", "_")
        if not sep:
            raise ParseError(f"expected 'key = value', got {line!r}", lineno, 1)
        if key not in _FIELD_TYPES or key == "name":
            raise ParseError(f"unknown protocol key {key!r}", lineno, 1)
        if key in values:
            raise ParseError(f"duplicate protocol key {key!r}", lineno, 1)
        values[key] = _convert(key, raw.strip(), lineno)
    if "network" not in values:
        raise ParseError("protocol lacks a 'network' entry")
    return Protocol(name=name, **values)


def bundled_protocols() -> list[str]:
    root = resources.files("frugalmap.data.protocols")
    return sorted(p.name[:-len(".protocol")] for p in root.iterdir() if p.name.endswith(".protocol"))


def load_protocol(ref: str | Path) -> Protocol:
    """Load a protocol file, or a bundled protocol by name (e.g. ``alarm-paper``)."""
    path = Path(ref)
    if path.exists():
        return parse_protocol(path.read_text(encoding="utf-8"), path.stem)
    if str(ref) in bundled_protocols():
        text = resources.files("frugalmap.data.protocols").joinpath(f"{ref}.protocol").read_text(encoding="utf-8")
        return parse_protocol(text, str(ref))
    raise FileNotFoundError(f"no protocol file or bundled protocol named {ref!r}")


def resolve_variables(net: Network, spec: str, role: str) -> tuple[int, ...]:
    """Variable ids for a spec: ``natural``, ``roots[:k]``, ``leaves[:k]`` or a comma list."""
    spec = spec.strip()
    head, _, arg = spec.partition(":")
    if head in ("roots", "leaves"):
        pool = net.roots if head == "roots" else net.leaves
        if arg:
            k = int(arg)
            if not 1 <= k <= len(pool):
                raise ValidationError(f"{spec!r}: network has {len(pool)} {head}")
            pool = pool[:k]
        return tuple(pool)
    if spec == "natural":
        names = set(net.index)
        for key, preset in NATURAL_PARTITIONS.items():
            if key == net.name.lower() or names.issuperset(preset[0] + preset[1]):
                chosen = preset[0] if role == "hypothesis" else preset[1]
                return tuple(net.resolve(n) for n in chosen)
        raise ValidationError(f"no natural partition known for network {net.name!r}")
    return tuple(net.resolve(tok.strip()) for tok in spec.split(",") if tok.strip())


# --------------------------------------------------------------------------
# evidence and metrics
# --------------------------------------------------------------------------


def draw_evidence(net: Network, evidence_vars: Sequence[int], n: int, seed=0,
                  dist: str = "ancestral", max_tries: int = 1000) -> list[dict[int, int]]:
    """``n`` evidence assignments, each with Pr(e) > 0.

    ``ancestral`` restricts forward samples of the whole network; ``uniform``
    draws each evidence variable uniformly and rejects impossible
    combinations.
    """
    if n < 1:
        raise ValidationError("n must be >= 1")
    evidence_vars = tuple(int(v) for v in evidence_vars)
    fg = to_factor_graph(net)
    rng = np.random.default_rng(seed)
    if dist == "ancestral":
        rows = forward_sample(fg, rng, n)
        return [{v: int(r[v]) for v in evidence_vars} for r in rows]
    if dist != "uniform":
        raise ValidationError(f"unknown evidence distribution {dist!r}")
    out = []
    tries = 0
    while len(out) < n:
        tries += 1
        if tries > max_tries * n:
            raise ResourceError("could not draw possible evidence uniformly", tries, max_tries * n)
        e = {v: int(rng.integers(fg.cards[v])) for v in evidence_vars}
        if eliminate(fg, e).total > 0:
            out.append(e)
    return out


def hamming(a: Mapping[int, int], b: Mapping[int, int]) -> int:
    if set(a) != set(b):
        raise ValidationError("explanations cover different variables")
    return sum(1 for v in a if a[v] != b[v])


def ratio_and_rank(fg, q: MapQuery, explanation: Mapping[int, int],
                   table: JointTable | None = None) -> tuple[float, int]:
    """Pr(h, e) / Pr(map, e) and 1 + #{h' : Pr(h', e) > Pr(h, e)}.

    Scores within the tie tolerance of each other count as equal, so the
    MAP explanation (and anything tied with it) gets ratio 1 and rank 1.
    """
    if table is None:
        table = map_table(fg, q)
    idx = tuple(explanation[v] for v in q.hypothesis)
    values = table.values
    v = values[idx]
    rank = 1 + int(np.count_nonzero(values > v * math.exp(_kernels.TIE_TOL)))
    if rank == 1:
        return 1.0, 1
    best, _ = argmax_table(table)
    return float(v / values[best]), rank


# --------------------------------------------------------------------------
# running a protocol
# --------------------------------------------------------------------------


@dataclass
class BenchRecord:
    network: str
    solver: str
    draw: int
    rep: int
    wall_time: float
    hamming: int | None
    ratio: float | None
    rank: int | None
    explanation: dict[int, int] | None
    meta: dict = field(default_factory=dict)
    error: str | None = None


def _seed_for(seed: int, *key: int) -> int:
    return int(np.random.SeedSequence([seed, *key]).generate_state(1, np.uint64)[0] >> 1)


@dataclass
class _Draw:
    index: int
    query: MapQuery
    truth: JointTable | None
    truth_error: str | None
    table: object = None


def run_protocol(p: Protocol, jobs: int = 1, strict_timing: bool = True,
                 progress: Callable[[str], None] | None = None) -> list[BenchRecord]:
    """Run every (draw, repetition, solver) triple; records come back in that order.

    Solver seeds depend on (draw, solver) only, so repetitions differ just
    in timing. Relevance tables for MFE+ / MFE+A are built outside the
    timed section.
    """
    say = progress or (lambda msg: None)
    net = read_network(p.network)
    fg = to_factor_graph(net)
    pfg = to_factor_graph(patch_determinism(net, p.epsilon)) if set(p.solvers) & _PATCHED else fg
    hyp = resolve_variables(net, p.hypothesis, "hypothesis")
    ev_vars = resolve_variables(net, p.evidence, "evidence")
    MapQuery(hyp, dict.fromkeys(ev_vars, 0), fg.n_vars)  # validates the split
    schedule = p.schedule(len(hyp))
    _kernels.warmup()
    evidence = draw_evidence(net, ev_vars, p.draws, _seed_for(p.seed, 0), p.evidence_dist)
    needs_table = bool({"mfe+", "mfe+a"} & set(p.solvers))

    shared = None
    if needs_table and p.relevance_tables == "shared":
        say(f"relevance table (shared, {p.relevance_samples} samples/variable)")
        shared = precompute_table(pfg, hyp, ev_vars, p.relevance_samples, _seed_for(p.seed, 1),
                                  sampling=p.sampling, jobs=jobs)

    draws = []
    for d, e in enumerate(evidence):
        q = MapQuery(hyp, e, fg.n_vars)
        try:
            truth, err = map_table(fg, q, p.cell_budget, p.log_space), None
        except (ResourceError, MemoryError) as exc:
            truth, err = None, f"{type(exc).__name__}: {exc}"
        table = shared
        if needs_table and shared is None:
            say(f"draw {d}: relevance table ({p.relevance_samples} samples/variable)")
            table = precompute_table(pfg, hyp, e, p.relevance_samples, _seed_for(p.seed, 1, d),
                                     sampling=p.sampling, jobs=jobs)
        draws.append(_Draw(d, q, truth, err, table))

    tasks = [(dr, r, s) for dr in draws for r in range(p.repetitions) for s in p.solvers]

    def run(task):
        dr, rep, solver = task
        g = pfg if solver in _PATCHED else fg
        try:
            res = solve(
                g, dr.query, solver, seed=_seed_for(p.seed, 2, dr.index, SOLVERS.index(solver)),
                table=dr.table, threshold=p.threshold, n_samples=p.n_samples,
                onthefly_samples=p.onthefly_samples, schedule=schedule, sampling=p.sampling,
                cell_budget=p.cell_budget, log_space=p.log_space, report_score=False,
            )
        except (FrugalMapError, MemoryError) as exc:
            return BenchRecord(net.name, solver, dr.index, rep, math.nan, None, None, None, None,
                               {}, f"{type(exc).__name__}: {exc}")
        meta = dict(res.meta)
        if solver in ("mfe+", "mfe+a") and dr.table is not None:
            meta["table_time"] = dr.table.meta.get("seconds", 0.0)
        ham = ratio = rank = None
        if dr.truth is not None:
            best, _ = argmax_table(dr.truth)
            ham = hamming(res.explanation, dict(zip(hyp, best)))
            ratio, rank = ratio_and_rank(fg, dr.query, res.explanation, dr.truth)
        elif dr.truth_error:
            meta["unscored"] = dr.truth_error
        return BenchRecord(net.name, solver, dr.index, rep, res.wall_time, ham, ratio, rank,
                           dict(res.explanation), meta)

    if jobs > 1 and not strict_timing:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            records = list(pool.map(run, tasks))
    else:
        records = []
        for k, task in enumerate(tasks):
            records.append(run(task))
            if (k + 1) % len(p.solvers) == 0:
                say(f"draw {task[0].index} rep {task[1]} done")
    for rec in records:
        rec.meta.setdefault("n_intermediates", len(draws[0].query.intermediates))
        rec.meta.setdefault("network_hash", (pfg if rec.solver in _PATCHED else fg).content_hash)
    return records


# --------------------------------------------------------------------------
# reporting
# --------------------------------------------------------------------------


def _mean(xs):
    xs = [x for x in xs if x is not None and not (isinstance(x, float) and math.isnan(x))]
    return statistics.fmean(xs) if xs else None


def report(records: Sequence[BenchRecord]) -> list[dict]:
    """Per (network, solver) means in first-appearance order."""
    if not records:
        raise ValidationError("no records to summarise")
    groups: dict[tuple[str, str], list[BenchRecord]] = {}
    for r in records:
        groups.setdefault((r.network, r.solver), []).append(r)
    rows = []
    for (network, solver), recs in groups.items():
        ok = [r for r in recs if r.error is None]
        times = [r.wall_time for r in ok]
        scored = [r for r in ok if r.hamming is not None]
        fractions = [
            r.meta["relevant"] / (r.meta["relevant"] + r.meta["irrelevant"])
            for r in ok if "relevant" in r.meta and r.meta["relevant"] + r.meta["irrelevant"] > 0
        ]
        rows.append({
            "network": network,
            "solver": solver,
            "records": len(recs),
            "scored": len(scored),
            "failed": len(recs) - len(ok),
            "mean_wall_time_s": _mean(times),
            "std_wall_time_s": statistics.pstdev(times) if len(times) > 1 else (0.0 if times else None),
            "mean_hamming": _mean([r.hamming for r in scored]),
            "mean_ratio": _mean([r.ratio for r in scored]),
            "mean_rank": _mean([r.rank for r in scored]),
            "mean_relevant_fraction": _mean(fractions),
        })
    return rows


def _fmt(x):
    if x is None:
        return ""
    if isinstance(x, float):
        return "nan" if math.isnan(x) else repr(x)
    return str(x)


def explanation_text(explanation: Mapping[int, int] | None, names=None, states=None) -> str:
    if explanation is None:
        return ""
    parts = []
    for v, s in explanation.items():
        vn = names[v] if names else str(v)
        sn = states[v][s] if states else str(s)
        parts.append(f"{vn}={sn}")
    return ";".join(parts)


def write_csv(records: Sequence[BenchRecord], sink: TextIO | None = None, names=None, states=None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in records:
        meta = dict(r.meta)
        if r.error:
            meta["error"] = r.error
        w.writerow([
            r.network, r.solver, r.draw, r.rep, _fmt(r.wall_time), _fmt(r.hamming), _fmt(r.ratio),
            _fmt(r.rank), explanation_text(r.explanation, names, states),
            json.dumps(meta, sort_keys=True, separators=(",", ":"), default=_json_default),
        ])
    text = buf.getvalue()
    if sink is not None:
        sink.write(text)
    return text


def _json_default(x):
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, np.floating):
        return float(x)
    raise TypeError(type(x).__name__)


def write_summary_csv(summary: Sequence[dict], sink: TextIO | None = None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_HEADER)
    for row in summary:
        w.writerow([_fmt(row[k]) for k in SUMMARY_HEADER])
    text = buf.getvalue()
    if sink is not None:
        sink.write(text)
    return text


def format_summary(summary: Sequence[dict]) -> str:
    """Fixed-width text table: time and the three error measures per solver."""
    head = f"{'network':<12}{'solver':<8}{'n':>5}{'time(s)':>12}{'hamming':>10}{'ratio':>10}{'rank':>9}{'I+ frac':>9}"
    lines = [head, "-" * len(head)]

    def num(x, spec):
        return format(x, spec) if x is not None else format("-", ">" + spec.split(".")[0])

    for r in summary:
        lines.append(
            f"{r['network']:<12}{r['solver']:<8}{r['records']:>5}"
            f"{num(r['mean_wall_time_s'], '12.5f')}{num(r['mean_hamming'], '10.3f')}"
            f"{num(r['mean_ratio'], '10.4f')}{num(r['mean_rank'], '9.2f')}"
            f"{num(r['mean_relevant_fraction'], '9.3f')}"
        )
    return "\n".join(lines)
