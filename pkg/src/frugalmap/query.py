"""Query and result types shared by the solvers, relevance and bench modules."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

from .errors import ValidationError
from .model import FactorGraph, check_assignment


@dataclass(frozen=True)
class MapQuery:
    """Hypothesis variables, observed evidence, and the implied intermediates."""

    hypothesis: tuple[int, ...]
    evidence: Mapping[int, int]
    n_vars: int

    def __post_init__(self):
        hyp = tuple(int(v) for v in self.hypothesis)
        if not hyp:
            raise ValidationError("hypothesis set must not be empty")
        if len(set(hyp)) != len(hyp):
            raise ValidationError("hypothesis set contains duplicates")
        if set(hyp) & set(self.evidence):
            raise ValidationError("hypothesis and evidence variables overlap")
        for v in list(hyp) + list(self.evidence):
            if not 0 <= v < self.n_vars:
                raise ValidationError(f"variable id {v} out of range")
        object.__setattr__(self, "hypothesis", hyp)
        object.__setattr__(self, "evidence", dict(sorted((int(k), int(v)) for k, v in self.evidence.items())))

    @classmethod
    def for_graph(cls, fg: FactorGraph, hypothesis: Sequence[int], evidence: Mapping[int, int]):
        return cls(tuple(hypothesis), check_assignment(evidence, fg.cards), fg.n_vars)

    @property
    def intermediates(self) -> tuple[int, ...]:
        taken = set(self.hypothesis) | set(self.evidence)
        return tuple(v for v in range(self.n_vars) if v not in taken)

    def with_evidence(self, extra: Mapping[int, int]) -> "MapQuery":
        return MapQuery(self.hypothesis, {**self.evidence, **extra}, self.n_vars)


@dataclass(frozen=True)
class Partition:
    relevant: tuple[int, ...]
    irrelevant: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "relevant", tuple(sorted(int(v) for v in self.relevant)))
        object.__setattr__(self, "irrelevant", tuple(sorted(int(v) for v in self.irrelevant)))
        if set(self.relevant) & set(self.irrelevant):
            raise ValidationError("relevant and irrelevant sets overlap")

    def check(self, q: MapQuery) -> None:
        if set(self.relevant) | set(self.irrelevant) != set(q.intermediates) or \
                len(self.relevant) + len(self.irrelevant) != len(q.intermediates):
            raise ValidationError("partition does not cover exactly the query's intermediates")

    @classmethod
    def all_relevant(cls, q: MapQuery) -> "Partition":
        return cls(q.intermediates, ())


@dataclass
class MapResult:
    explanation: dict[int, int]
    log_score: float
    solver: str
    wall_time: float = 0.0
    meta: dict = field(default_factory=dict)

    @property
    def score(self) -> float:
        """Pr(h, e); may underflow to 0 where ``log_score`` does not."""
        return math.exp(self.log_score) if self.log_score > -math.inf else 0.0

    def key(self, hypothesis: Sequence[int]) -> tuple[int, ...]:
        return tuple(self.explanation[v] for v in hypothesis)
