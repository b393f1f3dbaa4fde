"""Discrete Bayesian networks, BIF parsing and factor-graph conversion.

Variables are identified by dense integer ids equal to their position in
the BIF declaration order. CPT tables are stored with shape
``(*parent_cards, child_card)`` so that the last axis is the child state;
factors use the same C-order layout (last scope variable fastest).
"""

from __future__ import annotations

import gzip
import hashlib
import io
import math
import re
from dataclasses import dataclass, field
from functools import cached_property
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Sequence, TextIO

import numpy as np

from .errors import ParseError, ValidationError

DEFAULT_EPSILON = 1e-9
PARSE_ROW_TOLERANCE = 1e-6

BUNDLED_NETWORKS = ("alarm", "andes", "asia", "barley", "hailfinder")


def _frozen_array(values, dtype=np.float64) -> np.ndarray:
    arr = np.array(values, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Variable:
    id: int
    name: str
    states: tuple[str, ...]

    def __post_init__(self):
        if len(self.states) < 2:
            raise ValidationError(f"variable {self.name!r} needs at least two states")
        if len(set(self.states)) != len(self.states):
            raise ValidationError(f"variable {self.name!r} has duplicate state labels")

    @property
    def cardinality(self) -> int:
        return len(self.states)


@dataclass(frozen=True, eq=False)
class Cpt:
    """Pr(child | parents) as an array of shape ``(*parent_cards, child_card)``."""

    child: int
    parents: tuple[int, ...]
    table: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "table", _frozen_array(self.table))

    @property
    def rows(self) -> np.ndarray:
        return self.table.reshape(-1, self.table.shape[-1])


@dataclass(frozen=True, eq=False)
class Network:
    variables: tuple[Variable, ...]
    cpts: tuple[Cpt, ...]
    name: str = "unknown"

    def __post_init__(self):
        object.__setattr__(self, "variables", tuple(self.variables))
        object.__setattr__(self, "cpts", tuple(self.cpts))
        n = len(self.variables)
        if len(self.cpts) != n:
            raise ValidationError(f"expected {n} CPTs, got {len(self.cpts)}")
        for i, (var, cpt) in enumerate(zip(self.variables, self.cpts)):
            if var.id != i or cpt.child != i:
                raise ValidationError(f"variable/CPT order mismatch at position {i}")
            shape = tuple(self.variables[p].cardinality for p in cpt.parents) + (var.cardinality,)
            if cpt.table.shape != shape:
                raise ValidationError(
                    f"CPT of {var.name!r} has shape {cpt.table.shape}, expected {shape}"
                )
            if len(set(cpt.parents)) != len(cpt.parents) or i in cpt.parents:
                raise ValidationError(f"CPT of {var.name!r} has an invalid parent list")
            if np.any(cpt.table < 0) or np.any(cpt.table > 1):
                raise ValidationError(f"CPT of {var.name!r} has entries outside [0, 1]")
            if not np.allclose(cpt.rows.sum(axis=1), 1.0, rtol=0, atol=1e-9):
                raise ValidationError(f"CPT rows of {var.name!r} do not sum to 1")
        self.topological_order  # raises on cycles

    def __len__(self):
        return len(self.variables)

    @cached_property
    def index(self) -> dict[str, int]:
        return {v.name: v.id for v in self.variables}

    @property
    def cards(self) -> tuple[int, ...]:
        return tuple(v.cardinality for v in self.variables)

    def parents(self, i: int) -> tuple[int, ...]:
        return self.cpts[i].parents

    @cached_property
    def children(self) -> tuple[tuple[int, ...], ...]:
        kids = [[] for _ in self.variables]
        for cpt in self.cpts:
            for p in cpt.parents:
                kids[p].append(cpt.child)
        return tuple(tuple(k) for k in kids)

    @property
    def arcs(self) -> list[tuple[int, int]]:
        return [(p, c.child) for c in self.cpts for p in c.parents]

    @property
    def roots(self) -> list[int]:
        return [v.id for v in self.variables if not self.cpts[v.id].parents]

    @property
    def leaves(self) -> list[int]:
        return [v.id for v in self.variables if not self.children[v.id]]

    @cached_property
    def topological_order(self) -> tuple[int, ...]:
        # Kahn's algorithm, lowest id first among ready nodes
        import heapq

        indeg = [len(c.parents) for c in self.cpts]
        ready = [i for i, d in enumerate(indeg) if d == 0]
        heapq.heapify(ready)
        order = []
        while ready:
            i = heapq.heappop(ready)
            order.append(i)
            for k in self.children[i]:
                indeg[k] -= 1
                if indeg[k] == 0:
                    heapq.heappush(ready, k)
        if len(order) != len(self.variables):
            stuck = [self.variables[i].name for i, d in enumerate(indeg) if d > 0]
            raise ValidationError(f"network contains a directed cycle through {stuck[:5]}")
        return tuple(order)

    def resolve(self, ref) -> int:
        """Variable id from an id or a name."""
        return resolve_variable(ref, len(self), self.index)

    def resolve_state(self, var: int, ref) -> int:
        return resolve_state(ref, self.variables[var].states)

    def joint_probability(self, assignment: Sequence[int]) -> float:
        """Chain-rule product of CPT entries at a full assignment."""
        p = 1.0
        for cpt in self.cpts:
            key = tuple(assignment[q] for q in cpt.parents) + (assignment[cpt.child],)
            p *= cpt.table[key]
        return p

    @cached_property
    def content_hash(self) -> str:
        h = hashlib.sha256()
        for var, cpt in zip(self.variables, self.cpts):
            h.update(var.name.encode())
            h.update(("|".join(var.states) + "\n").encode())
            h.update(np.asarray(cpt.parents, dtype="<i8").tobytes())
            h.update(np.ascontiguousarray(cpt.table, dtype="<f8").tobytes())
        return h.hexdigest()


# --------------------------------------------------------------------------
# variable / state references shared with the CLI
# --------------------------------------------------------------------------


def resolve_variable(ref, n: int, index: Mapping[str, int] | None = None) -> int:
    if isinstance(ref, (int, np.integer)):
        i = int(ref)
    elif index is not None and ref in index:
        return index[ref]
    elif isinstance(ref, str) and re.fullmatch(r"\d+", ref):
        i = int(ref)
    else:
        raise ValidationError(f"unknown variable {ref!r}")
    if not 0 <= i < n:
        raise ValidationError(f"variable id {i} out of range")
    return i


def resolve_state(ref, states: Sequence[str]) -> int:
    if isinstance(ref, (int, np.integer)):
        s = int(ref)
    elif ref in states:
        return list(states).index(ref)
    elif isinstance(ref, str) and re.fullmatch(r"\d+", ref):
        s = int(ref)
    else:
        raise ValidationError(f"unknown state {ref!r}; expected one of {list(states)}")
    if not 0 <= s < len(states):
        raise ValidationError(f"state index {s} out of range")
    return s


def check_assignment(assignment: Mapping[int, int], cards: Sequence[int]) -> dict[int, int]:
    out = {}
    for var, state in assignment.items():
        var, state = int(var), int(state)
        if not 0 <= var < len(cards):
            raise ValidationError(f"variable id {var} out of range")
        if not 0 <= state < cards[var]:
            raise ValidationError(f"state {state} out of range for variable {var}")
        out[var] = state
    return out


# --------------------------------------------------------------------------
# BIF parsing
# --------------------------------------------------------------------------

_TOKEN = re.compile(
    r"(?P<ws>\s+)|(?P<lc>//[^\n]*)|(?P<bc>/\*.*?\*/)|(?P<punct>[{}()\[\],;|])|(?P<word>[^\s{}()\[\],;|]+)",
    re.S,
)


class _Tokens:
    def __init__(self, text: str):
        self.toks = []
        line, line_start = 1, 0
        pos = 0
        while pos < len(text):
            m = _TOKEN.match(text, pos)
            if m is None:  # pragma: no cover - the word class matches everything else
                raise ParseError("unexpected character", line, pos - line_start + 1)
            kind = m.lastgroup
            if kind in ("punct", "word"):
                self.toks.append((m.group(), line, m.start() - line_start + 1))
            chunk = m.group()
            nl = chunk.count("\n")
            if nl:
                line += nl
                line_start = m.start() + chunk.rfind("\n") + 1
            pos = m.end()
        self.i = 0
        self.eof = (line, pos - line_start + 1)

    def peek(self):
        return self.toks[self.i][0] if self.i < len(self.toks) else None

    def where(self):
        if self.i < len(self.toks):
            return self.toks[self.i][1:]
        return self.eof

    def next(self, what="token"):
        if self.i >= len(self.toks):
            raise ParseError(f"unexpected end of input, expected {what}", *self.eof)
        tok = self.toks[self.i]
        self.i += 1
        return tok

    def expect(self, value):
        tok, line, col = self.next(repr(value))
        if tok != value:
            raise ParseError(f"expected {value!r}, found {tok!r}", line, col)
        return tok

    def word(self, what="identifier"):
        tok, line, col = self.next(what)
        if len(tok) == 1 and tok in "{}()[],;|":
            raise ParseError(f"expected {what}, found {tok!r}", line, col)
        return tok

    def number(self):
        tok, line, col = self.next("number")
        try:
            return float(tok)
        except ValueError:
            raise ParseError(f"expected a number, found {tok!r}", line, col) from None

    def words_until(self, closing):
        """Comma separated words up to (and consuming) ``closing``."""
        out = [self.word()]
        while True:
            tok, line, col = self.next(f"',' or {closing!r}")
            if tok == closing:
                return out
            if tok != ",":
                raise ParseError(f"expected ',' or {closing!r}, found {tok!r}", line, col)
            out.append(self.word())

    def numbers_until_semicolon(self):
        out = [self.number()]
        while True:
            tok, line, col = self.next("',' or ';'")
            if tok == ";":
                return out
            if tok != ",":
                raise ParseError(f"expected ',' or ';', found {tok!r}", line, col)
            out.append(self.number())


def parse_bif(source: str | TextIO) -> Network:
    """Parse a BNLearn-dialect BIF document."""
    text = source if isinstance(source, str) else source.read()
    toks = _Tokens(text)
    net_name = "unknown"
    decls: dict[str, tuple[str, ...]] = {}
    order: list[str] = []
    blocks: dict[str, tuple[list[str], dict, tuple[int, int]]] = {}

    while toks.peek() is not None:
        kw, line, col = toks.next()
        if kw == "network":
            net_name = toks.word("network name")
            toks.expect("{")
            toks.expect("}")
        elif kw == "variable":
            where = toks.where()
            name = toks.word("variable name")
            if name in decls:
                raise ParseError(f"duplicate variable {name!r}", *where)
            toks.expect("{")
            toks.expect("type")
            kind, kl, kc = toks.next("'discrete'")
            if kind != "discrete":
                raise ParseError(f"unsupported variable type {kind!r}", kl, kc)
            toks.expect("[")
            nl, nc = toks.where()
            n = toks.number()
            toks.expect("]")
            toks.expect("{")
            states = toks.words_until("}")
            toks.expect(";")
            toks.expect("}")
            if n != len(states):
                raise ParseError(f"{name!r} declares {int(n)} states but lists {len(states)}", nl, nc)
            if len(set(states)) != len(states):
                raise ParseError(f"duplicate state label in {name!r}", *where)
            if len(states) < 2:
                raise ParseError(f"variable {name!r} needs at least two states", *where)
            decls[name] = tuple(states)
            order.append(name)
        elif kw == "probability":
            where = toks.where()
            toks.expect("(")
            child = toks.word("variable name")
            tok, tl, tc = toks.next("'|' or ')'")
            if tok == "|":
                parents = toks.words_until(")")
            elif tok == ")":
                parents = []
            else:
                raise ParseError(f"expected '|' or ')', found {tok!r}", tl, tc)
            if child in blocks:
                raise ParseError(f"duplicate probability block for {child!r}", *where)
            toks.expect("{")
            entries: dict = {}
            while toks.peek() != "}":
                el, ec = toks.where()
                head = toks.peek()
                if head == "table":
                    toks.next()
                    key = "table"
                elif head == "(":
                    toks.next()
                    key = tuple(toks.words_until(")"))
                else:
                    tok, el, ec = toks.next("'(' or 'table'")
                    raise ParseError(f"unsupported probability entry {tok!r}", el, ec)
                if key in entries:
                    raise ParseError(f"duplicate row {key!r} for {child!r}", el, ec)
                entries[key] = (toks.numbers_until_semicolon(), (el, ec))
            toks.expect("}")
            blocks[child] = (parents, entries, where)
        else:
            raise ParseError(f"unexpected keyword {kw!r}", line, col)

    index = {name: i for i, name in enumerate(order)}
    variables = [Variable(i, name, decls[name]) for i, name in enumerate(order)]
    cpts = []
    for name in order:
        if name not in blocks:
            raise ParseError(f"no probability block for {name!r}")
        cpts.append(_build_cpt(name, blocks[name], index, decls))
    for name, (_, _, where) in blocks.items():
        if name not in index:
            raise ParseError(f"probability block for undeclared variable {name!r}", *where)
    try:
        return Network(tuple(variables), tuple(cpts), name=net_name)
    except ValidationError as exc:
        raise ParseError(str(exc)) from None


def _build_cpt(name, block, index, decls) -> Cpt:
    parents, entries, where = block
    for p in parents:
        if p not in index:
            raise ParseError(f"{name!r} has undeclared parent {p!r}", *where)
    if len(set(parents)) != len(parents) or name in parents:
        raise ParseError(f"invalid parent list for {name!r}", *where)
    states = decls[name]
    pstates = [decls[p] for p in parents]
    shape = tuple(len(s) for s in pstates) + (len(states),)
    table = np.full(shape, np.nan)
    for key, (values, (line, col)) in entries.items():
        if len(values) != len(states):
            raise ParseError(
                f"row for {name!r} has {len(values)} entries, expected {len(states)}", line, col
            )
        if key == "table":
            if parents:
                raise ParseError(f"'table' rows are only supported for root variables ({name!r})", line, col)
            cell = ()
        else:
            if len(key) != len(parents):
                raise ParseError(f"row for {name!r} names {len(key)} parent states", line, col)
            cell = []
            for label, p, ps in zip(key, parents, pstates):
                if label not in ps:
                    raise ParseError(f"unknown state {label!r} of parent {p!r}", line, col)
                cell.append(ps.index(label))
            cell = tuple(cell)
        row = np.asarray(values)
        if np.any(row < 0) or np.any(row > 1):
            raise ParseError(f"probability outside [0, 1] in {name!r}", line, col)
        if abs(row.sum() - 1.0) > PARSE_ROW_TOLERANCE:
            raise ParseError(f"row of {name!r} sums to {row.sum():.9g}", line, col)
        table[cell] = row / row.sum()
    if np.isnan(table).any():
        raise ParseError(f"probability block for {name!r} misses parent configurations", *where)
    return Cpt(index[name], tuple(index[p] for p in parents), table)


def read_network(path: str | Path) -> Network:
    """Load a ``.bif`` or ``.bif.gz`` file, or a bundled network by name."""
    path_str = str(path)
    if path_str in BUNDLED_NETWORKS:
        data = resources.files("frugalmap.data.networks").joinpath(f"{path_str}.bif.gz").read_bytes()
        return _named(parse_bif(gzip.decompress(data).decode("utf-8")), path_str)
    path = Path(path)
    raw = path.read_bytes()
    if path.suffix == ".gz":
        raw = gzip.decompress(raw)
    return _named(parse_bif(raw.decode("utf-8")), path.name.split(".")[0])


def _named(net: Network, fallback: str) -> Network:
    # BNLearn exports often call every network "unknown"
    if net.name in ("", "unknown"):
        object.__setattr__(net, "name", fallback)
    return net


# --------------------------------------------------------------------------
# determinism patch
# --------------------------------------------------------------------------


def patch_determinism(net: Network, epsilon: float = DEFAULT_EPSILON) -> Network:
    """Replace zero CPT entries by ``epsilon`` and take the mass from each row's maxima.

    The injected mass of a row is split equally among its maximal entries.
    Networks without zero entries come back unchanged (the same object).
    """
    if not 0 < epsilon <= 1e-3:
        raise ValidationError("epsilon must lie in (0, 1e-3]")
    if not any(np.any(c.table == 0) for c in net.cpts):
        return net
    cpts = []
    for cpt in net.cpts:
        rows = cpt.rows.copy()
        zero = rows == 0
        if zero.any():
            top = rows == rows.max(axis=1, keepdims=True)
            mass = zero.sum(axis=1, keepdims=True) * epsilon
            rows = np.where(top, rows - mass / top.sum(axis=1, keepdims=True), rows)
            rows[zero] = epsilon
            if np.any(rows <= 0):
                raise ValidationError(f"epsilon too large for CPT of {net.variables[cpt.child].name!r}")
        cpts.append(Cpt(cpt.child, cpt.parents, rows.reshape(cpt.table.shape)))
    return Network(net.variables, tuple(cpts), name=net.name)


# --------------------------------------------------------------------------
# factor graphs
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Factor:
    """Non-negative table over ``scope``; axis k belongs to ``scope[k]``."""

    scope: tuple[int, ...]
    values: np.ndarray

    def __post_init__(self):
        scope = tuple(int(v) for v in self.scope)
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != len(scope):
            raise ValidationError(f"factor values have {values.ndim} axes for a scope of {len(scope)}")
        if len(set(scope)) != len(scope):
            raise ValidationError("factor scope contains duplicates")
        if values.size and np.any(values < 0):
            raise ValidationError("factor values must be non-negative")
        if not values.flags.writeable and values.flags.c_contiguous:
            arr = values
        else:
            arr = _frozen_array(values)
        object.__setattr__(self, "scope", scope)
        object.__setattr__(self, "values", arr)

    @property
    def cards(self) -> tuple[int, ...]:
        return self.values.shape

    def __call__(self, assignment: Mapping[int, int] | Sequence[int]) -> float:
        return float(self.values[tuple(assignment[v] for v in self.scope)])

    def same_as(self, other: "Factor") -> bool:
        return self.scope == other.scope and np.array_equal(self.values, other.values)

    def __repr__(self):
        return f"Factor(scope={self.scope}, shape={self.values.shape})"


@dataclass(frozen=True, eq=False)
class FactorGraph:
    cards: tuple[int, ...]
    factors: tuple[Factor, ...]
    names: tuple[str, ...] | None = None
    states: tuple[tuple[str, ...], ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "cards", tuple(int(c) for c in self.cards))
        object.__setattr__(self, "factors", tuple(self.factors))
        seen = set()
        for f in self.factors:
            for v, c in zip(f.scope, f.cards):
                if not 0 <= v < len(self.cards):
                    raise ValidationError(f"factor refers to unknown variable {v}")
                if self.cards[v] != c:
                    raise ValidationError(f"cardinality mismatch for variable {v}")
                seen.add(v)
        if len(seen) != len(self.cards):
            missing = sorted(set(range(len(self.cards))) - seen)
            raise ValidationError(f"variables {missing[:5]} appear in no factor")
        if self.names is None:
            object.__setattr__(self, "names", tuple(f"v{i}" for i in range(len(self.cards))))
        if self.states is None:
            object.__setattr__(self, "states", tuple(tuple(str(s) for s in range(c)) for c in self.cards))

    @property
    def n_vars(self) -> int:
        return len(self.cards)

    @cached_property
    def index(self) -> dict[str, int]:
        return {name: i for i, name in enumerate(self.names)}

    @cached_property
    def factors_of(self) -> tuple[tuple[int, ...], ...]:
        """Factor indices touching each variable."""
        out = [[] for _ in self.cards]
        for k, f in enumerate(self.factors):
            for v in f.scope:
                out[v].append(k)
        return tuple(tuple(x) for x in out)

    def resolve(self, ref) -> int:
        return resolve_variable(ref, self.n_vars, self.index)

    def resolve_state(self, var: int, ref) -> int:
        return resolve_state(ref, self.states[var])

    def evaluate(self, assignment: Sequence[int]) -> float:
        """Product of all factors at a full assignment."""
        p = 1.0
        for f in self.factors:
            p *= f(assignment)
        return p

    @cached_property
    def packed_log(self):
        """Log factor tables packed for the argmax kernel."""
        from ._kernels import pack

        return pack([f.scope for f in self.factors], [f.values for f in self.factors], log=True)

    @cached_property
    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(np.asarray(self.cards, dtype="<i8").tobytes())
        for f in self.factors:
            h.update(np.asarray((len(f.scope),) + f.scope, dtype="<i8").tobytes())
            h.update(np.ascontiguousarray(f.values, dtype="<f8").tobytes())
        return h.hexdigest()[:16]

    @cached_property
    def is_cpt_shaped(self) -> bool:
        """True when factor k is a CPT for its last scope variable, one per variable."""
        children = [f.scope[-1] for f in self.factors if f.scope]
        if sorted(children) != list(range(self.n_vars)) or len(children) != len(self.factors):
            return False
        return all(np.allclose(f.values.sum(axis=-1), 1.0, atol=1e-9) for f in self.factors)

    @cached_property
    def sampling_order(self) -> tuple[int, ...]:
        """Factor indices in an order where parents are sampled before children."""
        if not self.is_cpt_shaped:
            raise ValidationError("factor graph is not a set of CPTs; forward sampling unavailable")
        child_factor = {f.scope[-1]: k for k, f in enumerate(self.factors)}
        done: set[int] = set()
        order: list[int] = []
        pending = list(range(self.n_vars))
        while pending:
            rest = []
            for v in pending:
                f = self.factors[child_factor[v]]
                if all(p in done for p in f.scope[:-1]):
                    order.append(child_factor[v])
                    done.add(v)
                else:
                    rest.append(v)
            if len(rest) == len(pending):
                raise ValidationError("factor graph CPT structure is cyclic")
            pending = rest
        return tuple(order)


def to_factor_graph(net: Network) -> FactorGraph:
    """One factor per CPT with scope ``(parents..., child)``."""
    factors = tuple(Factor(cpt.parents + (cpt.child,), cpt.table) for cpt in net.cpts)
    return FactorGraph(
        net.cards,
        factors,
        names=tuple(v.name for v in net.variables),
        states=tuple(v.states for v in net.variables),
    )


def forward_sample(fg: FactorGraph, rng: np.random.Generator, n: int = 1) -> np.ndarray:
    """Ancestral samples (n x n_vars) from a CPT-shaped factor graph."""
    out = np.zeros((n, fg.n_vars), dtype=np.int64)
    for k in fg.sampling_order:
        f = fg.factors[k]
        child = f.scope[-1]
        if len(f.scope) == 1:
            probs = np.broadcast_to(f.values, (n, f.values.shape[0]))
        else:
            probs = f.values[tuple(out[:, p] for p in f.scope[:-1])]
        cum = np.cumsum(probs, axis=1)
        u = rng.random(n) * cum[:, -1]
        out[:, child] = np.minimum((cum <= u[:, None]).sum(axis=1), f.values.shape[-1] - 1)
    return out


# --------------------------------------------------------------------------
# .fg text format (first scope variable fastest in the linear index)
# --------------------------------------------------------------------------


def write_fg(fg: FactorGraph, sink: TextIO | None = None) -> str:
    parts = [f"{len(fg.factors)}\n"]
    for f in fg.factors:
        flat = f.values.ravel(order="F")
        lines = [
            "",
            str(len(f.scope)),
            " ".join(str(v) for v in f.scope),
            " ".join(str(c) for c in f.cards),
            str(flat.size),
        ]
        lines.extend(f"{i} {float(x)!r}" for i, x in enumerate(flat))
        parts.append("\n".join(lines) + "\n")
    text = "".join(parts)
    if sink is not None:
        sink.write(text)
    return text


def read_fg(source: str | TextIO, names: Sequence[str] | None = None,
            states: Sequence[Sequence[str]] | None = None) -> FactorGraph:
    text = source if isinstance(source, str) else source.read()
    lines = [(n + 1, ln.strip()) for n, ln in enumerate(text.splitlines())]
    lines = [(n, ln) for n, ln in lines if ln and not ln.startswith("#")]
    pos = 0

    def take():
        nonlocal pos
        if pos >= len(lines):
            raise ParseError("unexpected end of factor-graph file")
        pos += 1
        return lines[pos - 1]

    def ints(line, what):
        n, ln = line
        try:
            return [int(x) for x in ln.split()]
        except ValueError:
            raise ParseError(f"malformed {what}: {ln!r}", n, 1) from None

    n_line = take()
    counts = ints(n_line, "factor count")
    if len(counts) != 1 or counts[0] < 0:
        raise ParseError("first line must hold the factor count", n_line[0], 1)
    cards: dict[int, int] = {}
    factors = []
    for _ in range(counts[0]):
        size_line = take()
        size = ints(size_line, "scope size")
        if len(size) != 1 or size[0] < 0:
            raise ParseError("malformed scope size", size_line[0], 1)
        size = size[0]
        scope = ints(take(), "scope") if size else []
        fcards = ints(take(), "cardinalities") if size else []
        if len(scope) != size or len(fcards) != size:
            raise ParseError("scope and cardinality lists must match the scope size", size_line[0], 1)
        for v, c in zip(scope, fcards):
            if v < 0 or c < 1:
                raise ParseError(f"invalid variable {v} or cardinality {c}", size_line[0], 1)
            if cards.setdefault(v, c) != c:
                raise ParseError(f"cardinality mismatch for variable {v}", size_line[0], 1)
        total = int(np.prod(fcards, dtype=np.int64)) if size else 1
        count_line = take()
        count = ints(count_line, "entry count")
        if len(count) != 1 or not 0 <= count[0] <= total:
            raise ParseError("entry count out of range", count_line[0], 1)
        flat = np.zeros(total)
        for _ in range(count[0]):
            n, ln = take()
            bits = ln.split()
            try:
                idx, val = int(bits[0]), float(bits[1])
            except (ValueError, IndexError):
                raise ParseError(f"malformed entry {ln!r}", n, 1) from None
            if len(bits) != 2 or not 0 <= idx < total:
                raise ParseError(f"entry index {idx} out of range", n, 1)
            flat[idx] = val
        factors.append(Factor(tuple(scope), flat.reshape(fcards, order="F")))
    if pos != len(lines):
        raise ParseError("trailing content after last factor", lines[pos][0], 1)
    n_vars = max(cards) + 1 if cards else 0
    if sorted(cards) != list(range(n_vars)):
        raise ParseError("variable ids must be dense from 0")
    try:
        return FactorGraph(tuple(cards[i] for i in range(n_vars)), tuple(factors),
                           names=tuple(names) if names else None,
                           states=tuple(tuple(s) for s in states) if states else None)
    except ValidationError as exc:
        raise ParseError(str(exc)) from None


def load_factor_graph(path: str | Path, patch: bool = False,
                      epsilon: float = DEFAULT_EPSILON) -> tuple[FactorGraph, Network | None]:
    """Open a bundled name, ``.bif[.gz]`` or ``.fg`` file as a factor graph."""
    path_str = str(path)
    if path_str.endswith(".fg"):
        with open(path_str, encoding="utf-8") as fh:
            fg = read_fg(fh)
        return fg, None
    net = read_network(path)
    if patch:
        net = patch_determinism(net, epsilon)
    return to_factor_graph(net), net


def random_network(rng: np.random.Generator, n_vars: int, max_card: int = 4,
                   max_parents: int = 3, min_card: int = 2,
                   max_states: int | None = None, dirichlet: float = 1.0) -> Network:
    """Random DAG over ``n_vars`` variables in topological id order (tests, demos)."""
    while True:
        cards = rng.integers(min_card, max_card + 1, size=n_vars)
        if max_states is None or np.prod(cards.astype(float)) <= max_states:
            break
    variables = tuple(
        Variable(i, f"X{i}", tuple(f"s{k}" for k in range(cards[i]))) for i in range(n_vars)
    )
    cpts = []
    for i in range(n_vars):
        k = int(rng.integers(0, min(max_parents, i) + 1))
        parents = tuple(sorted(int(p) for p in rng.choice(i, size=k, replace=False))) if k else ()
        shape = tuple(int(cards[p]) for p in parents) + (int(cards[i]),)
        rows = rng.dirichlet(np.full(cards[i], dirichlet), size=int(np.prod(shape[:-1], dtype=int)))
        cpts.append(Cpt(i, parents, rows.reshape(shape)))
    return Network(variables, tuple(cpts), name="random")


def network_from_tables(spec: Iterable[tuple[str, Sequence[str], Sequence[str], Sequence]]) -> Network:
    """Small helper: ``[(name, states, parent_names, table), ...]`` in declaration order."""
    spec = list(spec)
    index = {name: i for i, (name, *_ ) in enumerate(spec)}
    variables = tuple(Variable(i, name, tuple(states)) for i, (name, states, _, _) in enumerate(spec))
    cpts = []
    for i, (name, states, parents, table) in enumerate(spec):
        pids = tuple(index[p] for p in parents)
        shape = tuple(len(spec[p][1]) for p in pids) + (len(states),)
        table = np.asarray(table, dtype=float)
        if table.size != math.prod(shape):
            raise ValidationError(f"table of {name!r} has {table.size} entries, expected {math.prod(shape)}")
        cpts.append(Cpt(i, pids, table.reshape(shape)))
    return Network(variables, tuple(cpts))


def bif_text(net: Network) -> str:
    """Serialize a network back to BIF (used for fixtures and round trips)."""
    out = io.StringIO()
    out.write(f"network {net.name} {{\n}}\n")
    for v in net.variables:
        out.write(f"variable {v.name} {{\n  type discrete [ {v.cardinality} ] {{ {', '.join(v.states)} }};\n}}\n")
    for cpt in net.cpts:
        child = net.variables[cpt.child].name
        if not cpt.parents:
            out.write(f"probability ( {child} ) {{\n")
            out.write("  table " + ", ".join(repr(float(x)) for x in cpt.table) + ";\n}\n")
            continue
        pnames = [net.variables[p].name for p in cpt.parents]
        out.write(f"probability ( {child} | {', '.join(pnames)} ) {{\n")
        for cell in np.ndindex(*cpt.table.shape[:-1]):
            labels = ", ".join(net.variables[p].states[s] for p, s in zip(cpt.parents, cell))
            out.write(f"  ({labels}) " + ", ".join(repr(float(x)) for x in cpt.table[cell]) + ";\n")
        out.write("}\n")
    return out.getvalue()
