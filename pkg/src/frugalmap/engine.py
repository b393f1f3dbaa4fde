"""Factor algebra and exact inference by variable elimination.

All operations are pure. ``eliminate`` keeps an explicit log scale next to
its table when running in log mode, so products over hundreds of CPT
entries never underflow; the linear path does plain double products.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import _kernels
from .errors import ResourceError, ValidationError
from .model import Factor, FactorGraph, Network, check_assignment

DEFAULT_CELL_BUDGET = int(5e8)
BRUTE_FORCE_GUARD = 2**26
LOG_SPACE_MIN_VARS = 100

# einsum accepts a bounded number of operands; larger products are chunked
_EINSUM_MAX_OPERANDS = 24


@dataclass(frozen=True, eq=False)
class JointTable:
    """Table over ``scope`` whose true values are ``values * exp(log_scale)``."""

    scope: tuple[int, ...]
    values: np.ndarray
    log_scale: float = 0.0
    normalized: bool = False

    @property
    def total(self) -> float:
        return float(self.values.sum() * math.exp(self.log_scale))

    @property
    def log_total(self) -> float:
        s = float(self.values.sum())
        return math.log(s) + self.log_scale if s > 0 else -math.inf

    def log_value(self, index) -> float:
        v = float(self.values[index])
        return math.log(v) + self.log_scale if v > 0 else -math.inf

    def probabilities(self) -> np.ndarray:
        """Unscaled values (may underflow for huge networks)."""
        return self.values * math.exp(self.log_scale)

    def normalize(self) -> "JointTable":
        s = self.values.sum()
        if s <= 0:
            raise ValidationError("cannot normalize a table of zeros (impossible evidence)")
        return JointTable(self.scope, self.values / s, 0.0, True)


# --------------------------------------------------------------------------
# factor operations
# --------------------------------------------------------------------------


def reduce(f: Factor, evidence: Mapping[int, int]) -> Factor:
    """Slice ``f`` at the evidence states of its scope variables."""
    if not any(v in evidence for v in f.scope):
        return f
    index = tuple(evidence[v] if v in evidence else slice(None) for v in f.scope)
    scope = tuple(v for v in f.scope if v not in evidence)
    return Factor(scope, f.values[index])


def _aligned(scope, values, target):
    """View of ``values`` (over ``scope``) broadcastable against ``target``."""
    perm = sorted(range(len(scope)), key=lambda k: target.index(scope[k]))
    arr = np.transpose(values, perm)
    present = set(scope)
    shape = []
    it = iter(arr.shape)
    for v in target:
        shape.append(next(it) if v in present else 1)
    return arr.reshape(shape)


def multiply(f: Factor, g: Factor) -> Factor:
    scope = f.scope + tuple(v for v in g.scope if v not in f.scope)
    return Factor(scope, _aligned(f.scope, f.values, scope) * _aligned(g.scope, g.values, scope))


def _drop(f: Factor, var: int, op) -> Factor:
    if var not in f.scope:
        raise ValidationError(f"variable {var} is not in the factor scope {f.scope}")
    axis = f.scope.index(var)
    return Factor(f.scope[:axis] + f.scope[axis + 1:], op(f.values, axis=axis))


def sum_out(f: Factor, var: int) -> Factor:
    return _drop(f, var, np.sum)


def max_out(f: Factor, var: int) -> Factor:
    return _drop(f, var, np.max)


def product(factors: Sequence[Factor], scope: Sequence[int] | None = None) -> Factor:
    """Product of factors laid out over ``scope`` (default: order of first appearance)."""
    if scope is None:
        scope = []
        for f in factors:
            scope.extend(v for v in f.scope if v not in scope)
    pairs = [(f.scope, f.values) for f in factors]
    cards = {}
    for f in factors:
        cards.update(zip(f.scope, f.cards))
    return Factor(tuple(scope), _contract(pairs, tuple(scope), cards))


# --------------------------------------------------------------------------
# contraction helpers on (scope, array) pairs
# --------------------------------------------------------------------------


def _contract(pairs, out_scope, cards):
    """Multiply all pairs and sum out every variable not in ``out_scope``."""
    if not pairs:
        return np.ones(tuple(cards[v] for v in out_scope))
    while len(pairs) > _EINSUM_MAX_OPERANDS:
        head, pairs = pairs[:_EINSUM_MAX_OPERANDS], pairs[_EINSUM_MAX_OPERANDS:]
        keep = set(out_scope)
        for s, _ in pairs:
            keep.update(s)
        hs = []
        for s, _ in head:
            hs.extend(v for v in s if v not in hs)
        hs = tuple(v for v in hs if v in keep)
        pairs = [(hs, _contract(head, hs, cards))] + pairs
    labels = {}
    for s, _ in pairs:
        for v in s:
            labels.setdefault(v, len(labels))
    for v in out_scope:
        labels.setdefault(v, len(labels))
    if len(labels) > 52:
        raise ResourceError("contraction involves more than 52 variables")
    missing = [v for v in out_scope if not any(v in s for s, _ in pairs)]
    if missing:
        # einsum cannot invent output axes
        raise ValidationError(f"variables {missing} appear in no factor")
    args = []
    for s, a in pairs:
        args.extend((a, [labels[v] for v in s]))
    args.append([labels[v] for v in out_scope])
    return np.einsum(*args)


def _cells(scope, cards) -> int:
    n = 1
    for v in scope:
        n *= cards[v]
    return n


# --------------------------------------------------------------------------
# elimination ordering
# --------------------------------------------------------------------------


def _interaction_graph(scopes: Iterable[Sequence[int]], exclude=()) -> dict[int, set[int]]:
    exclude = set(exclude)
    adj: dict[int, set[int]] = {}
    for scope in scopes:
        vs = [v for v in scope if v not in exclude]
        for v in vs:
            adj.setdefault(v, set()).update(u for u in vs if u != v)
    return adj


def _min_degree(adj: dict[int, set[int]], eliminate: Iterable[int]) -> list[int]:
    adj = {v: set(n) for v, n in adj.items()}
    todo = set(eliminate)
    for v in todo:
        adj.setdefault(v, set())
    order = []
    while todo:
        v = min(todo, key=lambda u: (len(adj[u]), u))
        nbrs = adj.pop(v)
        for a in nbrs:
            adj[a].discard(v)
            adj[a].update(nbrs - {a})
        todo.discard(v)
        order.append(v)
    return order


def min_degree_order(fg: FactorGraph, eliminate: Iterable[int], exclude: Iterable[int] = ()) -> list[int]:
    """Greedy minimum-degree order over the interaction graph (ties: lowest id).

    ``exclude`` drops variables (typically evidence) from the graph first.
    """
    return _min_degree(_interaction_graph((f.scope for f in fg.factors), exclude), eliminate)


def induced_cluster_size(fg: FactorGraph, order: Sequence[int], exclude: Iterable[int] = ()) -> int:
    """Largest number of variables in any intermediate factor along ``order``."""
    adj = _interaction_graph((f.scope for f in fg.factors), exclude)
    worst = 0
    for v in order:
        nbrs = adj.pop(v, set())
        worst = max(worst, len(nbrs) + 1)
        for a in nbrs:
            adj[a].discard(v)
            adj[a].update(nbrs - {a})
    return worst


# --------------------------------------------------------------------------
# variable elimination
# --------------------------------------------------------------------------


def eliminate_pairs(pairs, cards, order, retain, cell_budget=DEFAULT_CELL_BUDGET,
                    log_space=False) -> JointTable:
    """Bucket elimination over already-reduced (scope, array) pairs."""
    log_scale = 0.0
    const = 1.0
    work = []
    for s, a in pairs:
        if s:
            work.append((s, a))
        else:
            const *= float(a)
    if const == 0.0:
        return JointTable(tuple(retain), np.zeros(tuple(cards[v] for v in retain)))
    if log_space:
        log_scale, const = math.log(const), 1.0

    for var in order:
        bucket = [p for p in work if var in p[0]]
        if not bucket:
            continue
        work = [p for p in work if var not in p[0]]
        union = []
        for s, _ in bucket:
            union.extend(v for v in s if v not in union)
        cells = _cells(union, cards)
        if cells > cell_budget:
            raise ResourceError(
                f"eliminating variable {var} needs {cells} cells (budget {int(cell_budget)})",
                cells, cell_budget,
            )
        out = tuple(v for v in union if v != var)
        arr = _contract(bucket, out, cards)
        if log_space:
            m = float(arr.max()) if arr.size else 0.0
            if m == 0.0:
                return JointTable(tuple(retain), np.zeros(tuple(cards[v] for v in retain)), 0.0)
            arr = arr / m
            log_scale += math.log(m)
        if out:
            work.append((out, arr))
        elif log_space:
            pass  # scalar 1.0 after rescaling
        else:
            const *= float(arr)

    retain = tuple(retain)
    cells = _cells(retain, cards)
    if cells > cell_budget:
        raise ResourceError(f"joint over retained variables needs {cells} cells", cells, cell_budget)
    leftover = [v for s, _ in work for v in s if v not in retain]
    if leftover:
        raise ValidationError(f"elimination order misses variables {sorted(set(leftover))}")
    present = {v for s, _ in work for v in s}
    table = _contract(work, tuple(v for v in retain if v in present), cards) if work else np.array(1.0)
    if len(present) < len(retain):
        # retained variables touched by no remaining factor are uniform factors of one
        full = np.ones(tuple(cards[v] for v in retain))
        table = full * _aligned(tuple(v for v in retain if v in present), table, retain)
    table = np.asarray(table, dtype=np.float64) * const
    if log_space:
        m = float(table.max()) if table.size else 0.0
        if m > 0:
            table = table / m
            log_scale += math.log(m)
    return JointTable(retain, table, log_scale)


def reduced_pairs(fg: FactorGraph, evidence: Mapping[int, int]):
    out = []
    for f in fg.factors:
        g = reduce(f, evidence)
        out.append((g.scope, g.values))
    return out


def eliminate(fg: FactorGraph, evidence: Mapping[int, int] | None = None,
              retain: Sequence[int] = (), order: Sequence[int] | None = None,
              cell_budget: float = DEFAULT_CELL_BUDGET, log_space: bool | None = None) -> JointTable:
    """Unnormalized table proportional to Pr(retain, evidence).

    ``order`` must list exactly the variables that are neither retained nor
    observed; ``None`` picks a min-degree order.
    """
    evidence = check_assignment(evidence or {}, fg.cards)
    retain = tuple(int(v) for v in retain)
    if len(set(retain)) != len(retain):
        raise ValidationError("retained variables contain duplicates")
    if set(retain) & set(evidence):
        raise ValidationError("retained and evidence variables overlap")
    for v in retain:
        if not 0 <= v < fg.n_vars:
            raise ValidationError(f"variable id {v} out of range")
    hidden = set(range(fg.n_vars)) - set(retain) - set(evidence)
    if order is None:
        order = min_degree_order(fg, hidden, exclude=evidence)
    else:
        order = [int(v) for v in order]
        if len(order) != len(set(order)) or set(order) != hidden:
            raise ValidationError("elimination order must cover exactly the hidden variables")
    if log_space is None:
        log_space = fg.n_vars > LOG_SPACE_MIN_VARS
    return eliminate_pairs(reduced_pairs(fg, evidence), fg.cards, order, retain, cell_budget, log_space)


# --------------------------------------------------------------------------
# enumeration oracle
# --------------------------------------------------------------------------


def brute_force_joint(net: Network, evidence: Mapping[int, int] | None = None,
                      retain: Sequence[int] = (), backend=None) -> JointTable:
    """Pr(retain, evidence) by summing chain-rule products over all assignments."""
    evidence = check_assignment(evidence or {}, net.cards)
    retain = tuple(int(v) for v in retain)
    if set(retain) & set(evidence):
        raise ValidationError("retained and evidence variables overlap")
    free = [v for v in range(len(net)) if v not in evidence]
    space = 1
    for v in free:
        space *= net.cards[v]
    if space > BRUTE_FORCE_GUARD:
        raise ResourceError(f"enumeration over {space} assignments exceeds the guard", space, BRUTE_FORCE_GUARD)
    packed = _kernels.pack([c.parents + (c.child,) for c in net.cpts], [c.table for c in net.cpts])
    base = np.zeros(len(net), dtype=np.int64)
    for v, s in evidence.items():
        base[v] = s
    flat = _kernels.enumerate_joint(
        packed, base, free, [net.cards[v] for v in free], retain, [net.cards[v] for v in retain],
        backend=backend,
    )
    return JointTable(retain, flat.reshape(tuple(net.cards[v] for v in retain)))
