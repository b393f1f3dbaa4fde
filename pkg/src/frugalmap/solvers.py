"""Exact MAP, Annealed MAP and the Sampled-MFE family (MFE, MFE+, MFE+A)."""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .engine import (
    DEFAULT_CELL_BUDGET,
    LOG_SPACE_MIN_VARS,
    JointTable,
    _contract,
    _interaction_graph,
    _min_degree,
    eliminate,
    reduce,
)
from . import _kernels
from ._kernels import first_max
from .errors import ResourceError, ValidationError
from .model import FactorGraph, forward_sample
from .query import MapQuery, MapResult, Partition
from .relevance import (
    DEFAULT_THRESHOLD,
    ON_THE_FLY_SAMPLES,
    RelevanceTable,
    on_the_fly_partition,
    partition_from_table,
)

SOLVERS = ("map", "ann", "mfe", "mfe+", "mfe+a")


@dataclass(frozen=True)
class AnnealSchedule:
    initial_temperature: float = 2.0
    cooling_rate: float = 0.9
    steps_per_temperature: int = 50
    min_temperature: float = 0.02
    restarts: int = 2

    def __post_init__(self):
        if not self.initial_temperature > 0:
            raise ValidationError("initial_temperature must be positive")
        if not 0 < self.cooling_rate < 1:
            raise ValidationError("cooling_rate must lie in (0, 1)")
        if self.steps_per_temperature < 1:
            raise ValidationError("steps_per_temperature must be positive")
        if not self.min_temperature > 0:
            raise ValidationError("min_temperature must be positive")
        if self.restarts < 0:
            raise ValidationError("restarts must be non-negative")

    @property
    def levels(self) -> int:
        """Temperature levels per run (T > min_temperature)."""
        if self.initial_temperature <= self.min_temperature:
            return 0
        k = math.log(self.min_temperature / self.initial_temperature) / math.log(self.cooling_rate)
        return math.ceil(k - 1e-12)

    @property
    def total_proposals(self) -> int:
        return (self.restarts + 1) * self.steps_per_temperature * self.levels

    def as_dict(self) -> dict:
        return asdict(self)


def default_schedule(n_hypothesis: int) -> AnnealSchedule:
    return AnnealSchedule(steps_per_temperature=10 * max(1, n_hypothesis))


# --------------------------------------------------------------------------
# exact MAP
# --------------------------------------------------------------------------


def _log_space(fg, log_space):
    return fg.n_vars > LOG_SPACE_MIN_VARS if log_space is None else log_space


def map_table(fg: FactorGraph, q: MapQuery, cell_budget=DEFAULT_CELL_BUDGET, log_space=None) -> JointTable:
    """Unnormalized Pr(H, e) over the hypothesis space."""
    return eliminate(fg, q.evidence, q.hypothesis, cell_budget=cell_budget, log_space=_log_space(fg, log_space))


def argmax_table(table: JointTable) -> tuple[tuple[int, ...], float]:
    """Lowest C-order index among the (tolerance-)maxima and its log value."""
    flat = int(first_max(table.values, log=False))
    idx = np.unravel_index(flat, table.values.shape)
    return tuple(int(i) for i in idx), table.log_value(idx)


def exact_map(fg: FactorGraph, q: MapQuery, cell_budget=DEFAULT_CELL_BUDGET, log_space=None) -> MapResult:
    t0 = time.perf_counter()
    table = map_table(fg, q, cell_budget, log_space)
    idx, log_score = argmax_table(table)
    return MapResult(
        dict(zip(q.hypothesis, idx)), log_score, "map", time.perf_counter() - t0,
        {"cells": int(table.values.size)},
    )


# --------------------------------------------------------------------------
# Pr(h, e) for full hypothesis assignments
# --------------------------------------------------------------------------


# cells of intermediate results kept by one scorer before its caches reset
SCORER_CACHE_CELLS = 1 << 24


class HypothesisScorer:
    """log Pr(h, e) for full hypothesis assignments, e fixed.

    The elimination of the intermediates is planned once per query. Buckets
    whose factors do not depend on H are contracted at construction; only
    the H-dependent steps are replayed per call. Results are memoised.
    """

    def __init__(self, fg: FactorGraph, q: MapQuery, cell_budget=DEFAULT_CELL_BUDGET, log_space=None):
        self.hypothesis = q.hypothesis
        self.log_space = _log_space(fg, log_space)
        self.cache: dict[tuple[int, ...], float] = {}
        hpos = {v: k for k, v in enumerate(q.hypothesis)}
        cards = fg.cards
        self.base_log = 0.0
        self.leaves = []  # (array, index template with H positions)
        # node: (scope, kind, payload); kind "s" holds an array, "d" a slot id
        nodes = []
        for f in fg.factors:
            g = reduce(f, q.evidence)
            if any(v in hpos for v in g.scope):
                template = tuple(hpos.get(v, -1) for v in g.scope)
                scope = tuple(v for v in g.scope if v not in hpos)
                nodes.append((scope, "d", len(self.leaves)))
                self.leaves.append((g.values, template))
            elif g.scope:
                nodes.append((g.scope, "s", g.values))
            else:
                self.base_log += _safe_log(float(g.values))
        adj = _interaction_graph((f.scope for f in fg.factors), exclude=set(q.evidence) | set(hpos))
        order = _min_degree(adj, q.intermediates)
        # a step's output depends only on the H variables feeding into it,
        # so it is cached under that sub-assignment
        slot_deps = [tuple(sorted(p for p in t if p >= 0)) for _, t in self.leaves]
        self.steps = []  # (einsum template, dynamic patches, output slot, H deps, cache)
        n_slots = len(self.leaves)
        for var in order:
            bucket = [n for n in nodes if var in n[0]]
            if not bucket:
                continue
            nodes = [n for n in nodes if var not in n[0]]
            union = []
            for sc, _, _ in bucket:
                union.extend(v for v in sc if v not in union)
            cells = math.prod(cards[v] for v in union)
            if cells > cell_budget:
                raise ResourceError(f"eliminating variable {var} needs {cells} cells", cells, cell_budget)
            out = tuple(v for v in union if v != var)
            if all(kind == "s" for _, kind, _ in bucket):
                arr = _contract([(sc, a) for sc, _, a in bucket], out, cards)
                if out:
                    nodes.append((out, "s", arr))
                else:
                    self.base_log += _safe_log(float(arr))
                continue
            labels = {v: k for k, v in enumerate(union)}
            # einsum argument list with static operands in place; dynamic
            # positions are patched per evaluation
            template, patches = [], []
            for sc, kind, payload in bucket:
                if kind == "d":
                    patches.append((len(template), payload))
                template.append(payload if kind == "s" else None)
                template.append([labels[v] for v in sc])
            template.append([labels[v] for v in out])
            deps = sorted({p for _, src in patches for p in slot_deps[src]})
            slot_deps.append(tuple(deps))
            self.steps.append((template, patches, n_slots, tuple(deps), {}))
            nodes.append((out, "d", n_slots))
            n_slots += 1
        self.tail = [payload for sc, kind, payload in nodes if kind == "d"]
        self.n_slots = n_slots
        self.cached_cells = 0

    def _evaluate(self, h) -> float:
        slots = [None] * self.n_slots
        leaves = self.leaves
        total = self.base_log
        log_space = self.log_space
        for template, patches, slot, deps, cache in self.steps:
            key = tuple([h[p] for p in deps])
            hit = cache.get(key)
            if hit is None:
                args = template.copy()
                for pos, src in patches:
                    arr = slots[src]
                    if arr is None:
                        values, index = leaves[src]
                        arr = slots[src] = values[tuple([slice(None) if p < 0 else h[p] for p in index])]
                    args[pos] = arr
                arr = np.einsum(*args)
                if not arr.ndim:
                    # scalar outputs are folded into the running log total
                    hit = (None, _safe_log(float(arr)))
                elif log_space:
                    m = float(arr.max())
                    hit = (arr / m, math.log(m)) if m > 0.0 else (arr, -math.inf)
                else:
                    hit = (arr, 0.0)
                if hit[0] is not None:
                    self.cached_cells += hit[0].size
                    if self.cached_cells > SCORER_CACHE_CELLS:
                        self._drop_caches()
                cache[key] = hit
            slots[slot] = hit[0]
            total += hit[1]
        for src in self.tail:
            if src < len(leaves):
                values, index = leaves[src]
                total += _safe_log(float(values[tuple([h[p] for p in index])]))
        return total

    def _drop_caches(self):
        for step in self.steps:
            step[4].clear()
        self.cached_cells = 0

    def __call__(self, h: Sequence[int]) -> float:
        if type(h) is tuple:
            val = self.cache.get(h)
            if val is not None:
                return val
        key = tuple(int(s) for s in h)
        val = self.cache.get(key)
        if val is None:
            val = self.cache[key] = self._evaluate(key)
        return val

    @property
    def evaluations(self) -> int:
        return len(self.cache)


def _safe_log(x: float) -> float:
    return math.log(x) if x > 0 else -math.inf


# --------------------------------------------------------------------------
# Annealed MAP
# --------------------------------------------------------------------------


# memo arrays over Omega(H) up to this many entries; larger spaces use a dict
DENSE_ANNEAL_MAX = 1 << 24


def annealed_map(fg: FactorGraph, q: MapQuery, schedule: AnnealSchedule | None = None, seed=0,
                 cell_budget=DEFAULT_CELL_BUDGET, log_space=None,
                 scorer: HypothesisScorer | None = None, backend=None) -> MapResult:
    """Simulated annealing over joint hypothesis assignments; returns the best state seen.

    Each temperature level draws its proposals (variable, state offset,
    acceptance uniform) in one batch, so the walk is a fixed function of
    the seed whichever loop implementation runs it.
    """
    t0 = time.perf_counter()
    schedule = schedule or default_schedule(len(q.hypothesis))
    rng = np.random.default_rng(seed)
    score = scorer or HypothesisScorer(fg, q, cell_budget, log_space)
    cards = [fg.cards[v] for v in q.hypothesis]
    movable = np.asarray([k for k, c in enumerate(cards) if c > 1], dtype=np.int64)
    n_h = math.prod(cards)
    if n_h <= DENSE_ANNEAL_MAX:
        walk = _DenseWalk(score, cards, backend)
    else:
        walk = _DictWalk(score, cards)
    steps = schedule.steps_per_temperature
    cards_arr = np.asarray(cards, dtype=np.int64)
    for _ in range(schedule.restarts + 1):
        walk.start(tuple(int(rng.integers(c)) for c in cards))
        if not len(movable):
            continue
        temperature = schedule.initial_temperature
        while temperature > schedule.min_temperature:
            ks = movable[rng.integers(len(movable), size=steps)]
            offs = rng.integers(1, cards_arr[ks])
            us = rng.random(steps)
            walk.sweep(ks, offs, us, temperature)
            temperature *= schedule.cooling_rate
    best, best_val = walk.best()
    return MapResult(
        dict(zip(q.hypothesis, best)), best_val, "ann", time.perf_counter() - t0,
        {"proposals": walk.proposals, "accepted": walk.accepted, "evaluations": score.evaluations,
         "schedule": schedule.as_dict()},
    )


class _DenseWalk:
    """Annealing walk on linear indices with a NaN-initialised score array."""

    def __init__(self, score, cards, backend):
        self.score = score
        self.cards = np.asarray(cards, dtype=np.int64)
        self.shape = tuple(cards)
        strides = np.ones(len(cards), dtype=np.int64)
        for k in range(len(cards) - 2, -1, -1):
            strides[k] = strides[k + 1] * cards[k + 1]
        self.strides = strides
        self.scores = np.full(math.prod(cards), np.nan)
        self.backend = backend
        self.state = np.array([0, 0, -1, 0, 0, -1], dtype=np.int64)
        self.values = np.array([-math.inf, -math.inf])

    def _fill(self, lin):
        h = tuple(int(x) for x in np.unravel_index(lin, self.shape))
        self.scores[lin] = self.score(h)

    def start(self, h):
        lin = int(np.ravel_multi_index(h, self.shape))
        if np.isnan(self.scores[lin]):
            self._fill(lin)
        val = self.scores[lin]
        self.state[1] = lin
        self.values[0] = val
        if self.state[2] < 0 or val > self.values[1]:
            self.state[2] = lin
            self.values[1] = val

    def sweep(self, ks, offs, us, temperature):
        self.state[0] = 0
        while True:
            _kernels.anneal_sweep(self.scores, self.state, self.values, ks, offs, us, temperature,
                                  self.strides, self.cards, backend=self.backend)
            need = int(self.state[5])
            if need < 0:
                return
            self._fill(need)

    @property
    def proposals(self):
        return int(self.state[3])

    @property
    def accepted(self):
        return int(self.state[4])

    def best(self):
        h = tuple(int(x) for x in np.unravel_index(int(self.state[2]), self.shape))
        return h, float(self.values[1])


class _DictWalk:
    """Same walk over tuples, for hypothesis spaces too large to memoise densely."""

    def __init__(self, score, cards):
        self.score = score
        self.cards = cards
        self.cur = self.best_h = None
        self.cur_val = self.best_val = -math.inf
        self.proposals = self.accepted = 0

    def start(self, h):
        self.cur, self.cur_val = h, self.score(h)
        if self.best_h is None or self.cur_val > self.best_val:
            self.best_h, self.best_val = self.cur, self.cur_val

    def sweep(self, ks, offs, us, temperature):
        cards = self.cards
        cur, cur_val = self.cur, self.cur_val
        for k, off, u in zip(ks.tolist(), offs.tolist(), us.tolist()):
            cand = cur[:k] + ((cur[k] + off) % cards[k],) + cur[k + 1:]
            cand_val = self.score(cand)
            self.proposals += 1
            if cand_val >= cur_val or (
                    cand_val > -math.inf and u < math.exp((cand_val - cur_val) / temperature)):
                cur, cur_val = cand, cand_val
                self.accepted += 1
                if cur_val > self.best_val:
                    self.best_h, self.best_val = cur, cur_val
        self.cur, self.cur_val = cur, cur_val

    def best(self):
        return self.best_h, self.best_val


# --------------------------------------------------------------------------
# Sampled-MFE
# --------------------------------------------------------------------------


def _draw_irrelevant(fg, irrelevant, rng, sampling):
    if sampling == "uniform":
        return {v: int(rng.integers(fg.cards[v])) for v in irrelevant}
    if sampling == "prior":
        row = forward_sample(fg, rng, 1)[0]
        return {v: int(row[v]) for v in irrelevant}
    raise ValueError(f"unknown sampling measure {sampling!r}")


def sampled_mfe(fg: FactorGraph, q: MapQuery, partition: Partition, n_samples: int = 1,
                inner: str = "exact", seed=0, sampling: str = "uniform",
                schedule: AnnealSchedule | None = None, cell_budget=DEFAULT_CELL_BUDGET,
                log_space=None, report_score: bool = True) -> MapResult:
    """Majority vote over MAP explanations with the irrelevant intermediates sampled.

    Each round draws the irrelevant intermediates, solves MAP with the
    relevant ones summed out (exactly, or by annealing when
    ``inner="anneal"``), and tallies the winner. Ties in the tally go to the
    explanation that reached the top count first.
    """
    t0 = time.perf_counter()
    partition.check(q)
    if n_samples < 1:
        raise ValidationError("n_samples must be >= 1")
    if inner not in ("exact", "anneal"):
        raise ValidationError(f"unknown inner solver {inner!r}")
    rng = np.random.default_rng(seed)
    schedule = schedule or default_schedule(len(q.hypothesis))
    tally: dict[tuple[int, ...], int] = {}
    winner, top = None, 0
    for _ in range(n_samples):
        sampled = _draw_irrelevant(fg, partition.irrelevant, rng, sampling)
        sub = q.with_evidence(sampled)
        if inner == "exact":
            res = exact_map(fg, sub, cell_budget, log_space)
        else:
            res = annealed_map(fg, sub, schedule, int(rng.integers(2**63)), cell_budget, log_space)
        h = res.key(q.hypothesis)
        tally[h] = tally.get(h, 0) + 1
        if tally[h] > top:
            winner, top = h, tally[h]
    log_score = HypothesisScorer(fg, q, cell_budget, log_space)(winner) if report_score else math.nan
    meta = {
        "inner": inner,
        "n_samples": n_samples,
        "relevant": len(partition.relevant),
        "irrelevant": len(partition.irrelevant),
        "tally": top,
        "tally_fraction": top / n_samples,
        "distinct": len(tally),
    }
    if inner == "anneal":
        meta["schedule"] = schedule.as_dict()
    name = "mfe+a" if inner == "anneal" else "mfe"
    return MapResult(dict(zip(q.hypothesis, winner)), log_score, name, time.perf_counter() - t0, meta)


# --------------------------------------------------------------------------
# dispatcher used by the CLI and the bench harness
# --------------------------------------------------------------------------


def solve(fg: FactorGraph, q: MapQuery, solver: str, *, seed=0, table: RelevanceTable | None = None,
          threshold: float = DEFAULT_THRESHOLD, n_samples: int = 1,
          onthefly_samples: int = ON_THE_FLY_SAMPLES, schedule: AnnealSchedule | None = None,
          sampling: str = "uniform", cell_budget=DEFAULT_CELL_BUDGET, log_space=None,
          report_score: bool = True) -> MapResult:
    """Run one solver by name; ``wall_time`` covers everything the solver itself does.

    For ``mfe`` that includes the on-the-fly relevance pass; ``mfe+`` and
    ``mfe+a`` read a precomputed table, whose construction is not timed.
    """
    if solver not in SOLVERS:
        raise ValidationError(f"unknown solver {solver!r}; choose from {', '.join(SOLVERS)}")
    t0 = time.perf_counter()
    if solver == "map":
        res = exact_map(fg, q, cell_budget, log_space)
    elif solver == "ann":
        res = annealed_map(fg, q, schedule, seed, cell_budget, log_space)
    else:
        seeds = np.random.SeedSequence(seed).spawn(2)
        if solver == "mfe":
            part = on_the_fly_partition(fg, q, seeds[0], samples=onthefly_samples, sampling=sampling)
            t_part = time.perf_counter() - t0
        else:
            if table is None:
                raise ValidationError(f"solver {solver!r} needs a relevance table")
            part = partition_from_table(table, q, threshold)
            t_part = 0.0
        inner = "anneal" if solver == "mfe+a" else "exact"
        res = sampled_mfe(fg, q, part, n_samples, inner, seeds[1], sampling, schedule,
                          cell_budget, log_space, report_score)
        res.meta["partition_time"] = t_part
        res.meta["relevant_vars"] = list(part.relevant)
    res.solver = solver
    res.wall_time = time.perf_counter() - t0
    return res
