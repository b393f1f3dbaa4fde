"""Intrinsic relevance of intermediate variables, estimated by sampling.

A sample fixes every intermediate except the target; the target is then
swept through its states and the MAP argmax over the hypothesis space is
recomputed for each. The sample counts as a flip when those argmaxes are
not all identical. Relevance is the fraction of flipping samples.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Sequence, TextIO

import numpy as np

from . import _kernels
from .engine import DEFAULT_CELL_BUDGET
from .errors import ParseError, ResourceError, StaleTableError, ValidationError
from .model import FactorGraph, forward_sample
from .query import MapQuery, Partition

DIRECT_MAX_HYPOTHESES = 4096
EXACT_MAX_STATES = 2**20
LOW_BUDGET = 100
DEFAULT_THRESHOLD = 0.1
ON_THE_FLY_SAMPLES = 3


@dataclass(frozen=True)
class RelevanceEstimate:
    variable: int
    samples: int
    flips: int

    def __post_init__(self):
        if not 0 <= self.flips <= self.samples or self.samples < 1:
            raise ValidationError("flips must lie in [0, samples] and samples >= 1")

    @property
    def relevance(self) -> float:
        return self.flips / self.samples


@dataclass(frozen=True)
class RelevanceTable:
    network_hash: str
    hypothesis: tuple[int, ...]
    evidence_vars: tuple[int, ...]
    evidence_values: tuple[int, ...] | None
    samples: int
    seed: int
    estimates: tuple[RelevanceEstimate, ...]
    sampling: str = "uniform"
    meta: dict = field(default_factory=dict, compare=False)

    @property
    def low_budget(self) -> bool:
        return self.samples < LOW_BUDGET

    @property
    def relevance(self) -> dict[int, float]:
        return {e.variable: e.relevance for e in self.estimates}

    @property
    def variables(self) -> tuple[int, ...]:
        return tuple(e.variable for e in self.estimates)


# --------------------------------------------------------------------------
# argmax machinery
# --------------------------------------------------------------------------


def seed_sequence(seed) -> np.random.SeedSequence:
    return seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)


def _h_factor_ids(fg: FactorGraph, hypothesis) -> list[int]:
    return sorted({k for v in hypothesis for k in fg.factors_of[v]})


def argmax_hypotheses(fg: FactorGraph, hypothesis: Sequence[int], rows: np.ndarray,
                      method: str = "auto", backend=None,
                      cell_budget: float = DEFAULT_CELL_BUDGET) -> np.ndarray:
    """Tie-broken argmax over Omega(H) for each full assignment in ``rows``.

    Returns linear indices over H in C order (first hypothesis variable most
    significant). Only factors touching H matter once everything else is
    fixed, so the rest are skipped.
    """
    hypothesis = list(hypothesis)
    hcards = [fg.cards[v] for v in hypothesis]
    n_h = math.prod(hcards)
    fids = _h_factor_ids(fg, hypothesis)
    if method == "auto":
        method = "direct" if n_h <= DIRECT_MAX_HYPOTHESES else "eliminate"
    if method == "direct":
        return _kernels.argmax_rows(fg.packed_log, fids, rows, hypothesis, hcards, backend=backend)
    if method != "eliminate":
        raise ValueError(f"unknown method {method!r}")
    return _argmax_max_product(fg, hypothesis, hcards, fids, np.asarray(rows, dtype=np.int64), cell_budget)


# rows x bucket cells processed per chunk in the batched max-product path
_BATCH_CELLS = 1 << 22


def _argmax_max_product(fg, hypothesis, hcards, fids, rows, cell_budget):
    """Batched max-product elimination over H, decoding the smallest maximiser.

    H variables are eliminated last-first; decoding then runs first-last and
    picks the lowest state attaining each conditional maximum, which yields
    the lowest C-order index among all global maxima.
    """
    hpos = {v: k for k, v in enumerate(hypothesis)}
    logs = []  # (H-scope, callable rows -> (R, *cards))
    for k in fids:
        f = fg.factors[k]
        hs = [v for v in f.scope if v in hpos]
        others = [v for v in f.scope if v not in hpos]
        perm = [f.scope.index(v) for v in others + hs]
        with np.errstate(divide="ignore"):
            table = np.log(np.transpose(f.values, perm))
        logs.append((tuple(hs), others, table))
    # plan the elimination symbolically: bucket scopes only depend on H
    order = list(reversed(hypothesis))
    plan = []
    scopes = [hs for hs, _, _ in logs]
    for var in order:
        members = [i for i, sc in enumerate(scopes) if sc is not None and var in sc]
        union = []
        for i in members:
            union.extend(v for v in scopes[i] if v not in union)
        union.sort(key=lambda v: hpos[v])
        cells = math.prod(fg.cards[v] for v in union)
        if cells > cell_budget:
            raise ResourceError(f"max-product bucket for variable {var} needs {cells} cells", cells, cell_budget)
        for i in members:
            scopes[i] = None
        scopes.append(tuple(v for v in union if v != var))
        plan.append((var, members, tuple(union)))
    worst = max((math.prod(fg.cards[v] for v in u) for _, _, u in plan), default=1)
    chunk = max(1, _BATCH_CELLS // worst)
    out = np.empty(len(rows), dtype=np.int64)
    for lo in range(0, len(rows), chunk):
        out[lo:lo + chunk] = _max_product_chunk(fg, hypothesis, hcards, hpos, logs, plan, rows[lo:lo + chunk])
    return out


def _max_product_chunk(fg, hypothesis, hcards, hpos, logs, plan, rows):
    n = len(rows)
    tables = []  # (scope, array of shape (n, *cards))
    for hs, others, table in logs:
        arr = table[tuple(rows[:, v] for v in others)] if others else np.broadcast_to(table, (n,) + table.shape)
        tables.append((hs, arr))
    n_leaves = len(tables)

    def aligned(sc, arr, union):
        src = [sc.index(v) + 1 for v in union if v in sc]
        shape = [n] + [fg.cards[v] if v in sc else 1 for v in union]
        return np.transpose(arr, [0] + src).reshape(shape)

    own = {}       # var -> (union, sum of original factors in its bucket)
    messages = []  # (source var, scope, array)
    for var, members, union in plan:
        base = np.zeros((n,) + tuple(fg.cards[v] for v in union))
        total = base
        for i in members:
            sc, arr = tables[i]
            if i < n_leaves:
                base = base + aligned(sc, arr, union)
            total = total + aligned(sc, arr, union)
        own[var] = (union, base)
        axis = union.index(var) + 1
        out_scope = tuple(v for v in union if v != var)
        msg = total.max(axis=axis)
        tables.append((out_scope, msg))
        messages.append((var, out_scope, msg))
    # Decode first-last. The best completion of a prefix is the sum of the
    # original factors already fully assigned plus every message whose
    # source is still undecided and whose scope lies inside the prefix.
    decoded = {}
    rix = np.arange(n)

    def at(scope, arr, var):
        index = [rix] + [slice(None) if v == var else decoded[v] for v in scope]
        res = arr[tuple(index)]
        return res if var in scope else res[:, None]

    acc = np.zeros((n, 1))
    cut = None
    for j, var in enumerate(hypothesis):
        union, base = own[var]
        vals = acc + at(union, base, var)
        for src, scope, msg in messages:
            if hpos[src] > j and all(hpos[v] <= j for v in scope):
                vals = vals + at(scope, msg, var)
        if cut is None:
            cut = vals.max(axis=1, keepdims=True) - _kernels.TIE_TOL
        choice = np.argmax(vals >= cut, axis=1)
        decoded[var] = choice
        acc = acc + at(union, base, None)
    out = np.zeros(n, dtype=np.int64)
    for var, c in zip(hypothesis, hcards):
        out = out * c + decoded[var]
    return out


def _flip_flags(fg, hypothesis, target, rows, method, backend) -> np.ndarray:
    tcard = fg.cards[target]
    full = np.repeat(rows, tcard, axis=0)
    full[:, target] = np.tile(np.arange(tcard), len(rows))
    best = argmax_hypotheses(fg, hypothesis, full, method=method, backend=backend).reshape(len(rows), tcard)
    return np.any(best != best[:, :1], axis=1)


def _sample_rows(fg, hypothesis, evidence, intermediates, target, n, rng, sampling):
    """``n`` full assignments with evidence and non-target intermediates filled in."""
    rows = np.zeros((n, fg.n_vars), dtype=np.int64)
    others = [v for v in intermediates if v != target]
    if isinstance(evidence, Mapping):
        for v, s in evidence.items():
            rows[:, v] = s
        need_prior = sampling == "prior"
    else:
        need_prior = True
    if need_prior:
        prior = forward_sample(fg, rng, n)
    if not isinstance(evidence, Mapping):
        for v in evidence:
            rows[:, v] = prior[:, v]
    for v in others:
        if sampling == "uniform":
            rows[:, v] = rng.integers(0, fg.cards[v], size=n)
        elif sampling == "prior":
            rows[:, v] = prior[:, v]
        else:
            raise ValueError(f"unknown sampling measure {sampling!r}")
    return rows


def _check_target(q_hyp, evidence_vars, n_vars, target):
    if target in q_hyp or target in evidence_vars or not 0 <= target < n_vars:
        raise ValidationError(f"variable {target} is not an intermediate of the query")


def estimate_relevance(fg: FactorGraph, q: MapQuery, target: int, samples: int, seed=0,
                       sampling: str = "uniform", method: str = "auto", backend=None) -> RelevanceEstimate:
    """Sampled intrinsic relevance of ``target`` for query ``q``."""
    return _estimate(fg, q.hypothesis, q.evidence, target, samples, np.random.default_rng(seed),
                     sampling, method, backend)


def _estimate(fg, hypothesis, evidence, target, samples, rng, sampling, method, backend):
    if samples < 1:
        raise ValidationError("samples must be >= 1")
    ev_vars = tuple(evidence)
    _check_target(hypothesis, ev_vars, fg.n_vars, target)
    taken = set(hypothesis) | set(ev_vars)
    intermediates = [v for v in range(fg.n_vars) if v not in taken]
    rows = _sample_rows(fg, hypothesis, evidence, intermediates, target, samples, rng, sampling)
    flips = int(_flip_flags(fg, hypothesis, target, rows, method, backend).sum())
    return RelevanceEstimate(target, samples, flips)


def exact_relevance(fg: FactorGraph, q: MapQuery, target: int, method: str = "auto",
                    backend=None) -> float:
    """Intrinsic relevance by enumerating every assignment of the other intermediates."""
    _check_target(q.hypothesis, tuple(q.evidence), fg.n_vars, target)
    others = [v for v in q.intermediates if v != target]
    space = math.prod(fg.cards[v] for v in others)
    if space > EXACT_MAX_STATES:
        raise ResourceError(f"{space} assignments exceed the exact-relevance guard", space, EXACT_MAX_STATES)
    rows = np.zeros((space, fg.n_vars), dtype=np.int64)
    for v, s in q.evidence.items():
        rows[:, v] = s
    if others:
        grid = np.unravel_index(np.arange(space), tuple(fg.cards[v] for v in others))
        for v, col in zip(others, grid):
            rows[:, v] = col
    return float(_flip_flags(fg, q.hypothesis, target, rows, method, backend).mean())


# --------------------------------------------------------------------------
# tables and partitions
# --------------------------------------------------------------------------


def precompute_table(fg: FactorGraph, hypothesis: Sequence[int], evidence, samples_per_variable: int,
                     seed: int = 0, sampling: str = "uniform", method: str = "auto",
                     jobs: int = 1, backend=None) -> RelevanceTable:
    """Relevance of every intermediate variable.

    ``evidence`` is either a mapping (fixed observation) or a sequence of
    evidence variable ids, in which case each sample also draws evidence
    values from the network prior. Every variable gets its own seed stream.
    """
    hypothesis = tuple(int(v) for v in hypothesis)
    if isinstance(evidence, Mapping):
        evidence = {int(k): int(v) for k, v in sorted(evidence.items())}
        ev_vars = tuple(evidence)
        ev_values = tuple(evidence.values())
    else:
        ev_vars = tuple(sorted(int(v) for v in evidence))
        evidence = ev_vars
        ev_values = None
    MapQuery(hypothesis, dict.fromkeys(ev_vars, 0), fg.n_vars)  # validates the partition
    taken = set(hypothesis) | set(ev_vars)
    intermediates = [v for v in range(fg.n_vars) if v not in taken]
    streams = np.random.SeedSequence(seed).spawn(len(intermediates))
    t0 = time.perf_counter()

    def one(args):
        target, ss = args
        return _estimate(fg, hypothesis, evidence, target, samples_per_variable,
                         np.random.default_rng(ss), sampling, method, backend)

    work = list(zip(intermediates, streams))
    if jobs > 1 and len(work) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            estimates = list(pool.map(one, work))
    else:
        estimates = [one(w) for w in work]
    return RelevanceTable(
        network_hash=fg.content_hash,
        hypothesis=hypothesis,
        evidence_vars=ev_vars,
        evidence_values=ev_values,
        samples=int(samples_per_variable),
        seed=int(seed),
        estimates=tuple(estimates),
        sampling=sampling,
        meta={"seconds": time.perf_counter() - t0},
    )


def partition_from_table(table: RelevanceTable, q: MapQuery, threshold: float = DEFAULT_THRESHOLD) -> Partition:
    """Variables with relevance >= ``threshold`` are relevant; the rest are sampled."""
    if not 0 <= threshold <= 1:
        raise ValidationError("threshold must lie in [0, 1]")
    if tuple(table.hypothesis) != tuple(q.hypothesis) or set(table.evidence_vars) != set(q.evidence):
        raise ValidationError("relevance table was built for a different hypothesis/evidence split")
    rel = table.relevance
    if set(rel) != set(q.intermediates):
        raise ValidationError("relevance table does not cover the query's intermediates")
    relevant = [v for v in q.intermediates if rel[v] >= threshold]
    irrelevant = [v for v in q.intermediates if rel[v] < threshold]
    return Partition(tuple(relevant), tuple(irrelevant))


def on_the_fly_partition(fg: FactorGraph, q: MapQuery, seed=0, samples: int = ON_THE_FLY_SAMPLES,
                         sampling: str = "uniform", method: str = "auto", backend=None) -> Partition:
    """Cheap partition: a variable is relevant if any of a few samples flips the argmax."""
    streams = seed_sequence(seed).spawn(max(1, len(q.intermediates)))
    relevant, irrelevant = [], []
    for target, ss in zip(q.intermediates, streams):
        est = _estimate(fg, q.hypothesis, q.evidence, target, samples, np.random.default_rng(ss),
                        sampling, method, backend)
        (relevant if est.flips > 0 else irrelevant).append(target)
    return Partition(tuple(relevant), tuple(irrelevant))


# --------------------------------------------------------------------------
# table files
# --------------------------------------------------------------------------

_MAGIC = "# frugalmap relevance table v1"


def write_table(table: RelevanceTable, sink: TextIO | None = None) -> str:
    ev_values = "-" if table.evidence_values is None else " ".join(map(str, table.evidence_values))
    lines = [
        _MAGIC,
        f"network {table.network_hash}",
        f"hypothesis {' '.join(map(str, table.hypothesis))}",
        f"evidence {' '.join(map(str, table.evidence_vars)) or '-'}",
        f"evidence_values {ev_values}",
        f"samples {table.samples}",
        f"seed {table.seed}",
        f"sampling {table.sampling}",
        f"low_budget {int(table.low_budget)}",
        f"records {len(table.estimates)}",
    ]
    lines += [f"{e.variable} {e.flips} {e.samples} {e.relevance!r}" for e in table.estimates]
    text = "\n".join(lines) + "\n"
    if sink is not None:
        sink.write(text)
    return text


def read_table(source: str | TextIO, fg: FactorGraph | None = None) -> RelevanceTable:
    """Parse a table file; with ``fg`` given, refuse tables built for another network."""
    text = source if isinstance(source, str) else source.read()
    lines = text.splitlines()
    if not lines or lines[0].strip() != _MAGIC:
        raise ParseError("not a relevance table (missing header line)", 1, 1)
    header = {}
    pos = 1
    keys = ["network", "hypothesis", "evidence", "evidence_values", "samples", "seed",
            "sampling", "low_budget", "records"]
    for key in keys:
        if pos >= len(lines):
            raise ParseError(f"missing header field {key!r}", pos + 1, 1)
        name, _, value = lines[pos].partition(" ")
        if name != key:
            raise ParseError(f"expected header field {key!r}, found {name!r}", pos + 1, 1)
        header[key] = value.strip()
        pos += 1

    def ids(value, line):
        if value in ("-", ""):
            return ()
        try:
            return tuple(int(x) for x in value.split())
        except ValueError:
            raise ParseError(f"malformed id list {value!r}", line, 1) from None

    try:
        samples = int(header["samples"])
        seed = int(header["seed"])
        n_records = int(header["records"])
    except ValueError as exc:
        raise ParseError(f"malformed header: {exc}") from None
    ev_values = None if header["evidence_values"] == "-" else ids(header["evidence_values"], 5)
    estimates = []
    for k in range(n_records):
        line = pos + k + 1
        if pos + k >= len(lines):
            raise ParseError("fewer records than announced", line, 1)
        bits = lines[pos + k].split()
        try:
            var, flips, n = int(bits[0]), int(bits[1]), int(bits[2])
            rel = float(bits[3])
        except (ValueError, IndexError):
            raise ParseError(f"malformed record {lines[pos + k]!r}", line, 1) from None
        try:
            est = RelevanceEstimate(var, n, flips)
        except ValidationError as exc:
            raise ParseError(str(exc), line, 1) from None
        if est.relevance != rel:
            raise ParseError("relevance column disagrees with flips/samples", line, 1)
        estimates.append(est)
    if any(ln.strip() for ln in lines[pos + n_records:]):
        raise ParseError("trailing content after records", pos + n_records + 1, 1)
    table = RelevanceTable(
        network_hash=header["network"],
        hypothesis=ids(header["hypothesis"], 3),
        evidence_vars=ids(header["evidence"], 4),
        evidence_values=ev_values,
        samples=samples,
        seed=seed,
        estimates=tuple(estimates),
        sampling=header["sampling"],
    )
    if fg is not None and fg.content_hash != table.network_hash:
        raise StaleTableError(
            f"relevance table was built for network {table.network_hash}, not {fg.content_hash}"
        )
    return table
