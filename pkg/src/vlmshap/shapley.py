"""Per-object importance from coalition values.

``exact_shapley`` evaluates the classic factorial-weighted sum over the
full powerset; ``estimate_shapley`` is the sampled fallback, the mean value
of coalitions containing an object minus the mean of those without it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import IncompleteTable, UncoveredObject
from .masking import Coalition

ESTIMATOR_EXACT = "exact"
ESTIMATOR_MEAN_DIFF = "mean-diff"


@dataclass
class ValueTable:
    """Finite coalition values v(S') in [-1, 1] for one scene."""

    n: int
    entries: dict[Coalition, float] = field(default_factory=dict)

    def set(self, coalition: Coalition, value: float) -> None:
        if coalition.n != self.n:
            raise ValueError(f"coalition width {coalition.n} != table width {self.n}")
        value = float(value)
        if not math.isfinite(value):
            raise ValueError(f"non-finite value for {coalition}: {value}")
        self.entries[coalition] = value

    def get(self, coalition: Coalition) -> float | None:
        return self.entries.get(coalition)

    @property
    def reference_value(self) -> float:
        return self.entries[Coalition.full(self.n)]

    @property
    def is_complete(self) -> bool:
        return len(self.entries) == 1 << self.n

    def __len__(self) -> int:
        return len(self.entries)


def exact_shapley(table: ValueTable) -> list[float]:
    """Shapley values from a complete powerset of coalition values.

    phi_i = sum over S' not containing i of
    |S'|! (n - |S'| - 1)! / n! * (v(S' + i) - v(S')).
    """
    n = table.n
    if not table.is_complete:
        raise IncompleteTable(
            f"exact mode needs all {1 << n} coalitions, table has {len(table)}"
        )
    values = np.empty(1 << n)
    for coalition, value in table.entries.items():
        values[coalition.bits] = value
    fact = [math.factorial(k) for k in range(n + 1)]
    weight = [fact[k] * fact[n - k - 1] / fact[n] for k in range(n)]
    phi = np.zeros(n)
    for i in range(n):
        bit = 1 << i
        for s_bits in range(1 << n):
            if s_bits & bit:
                continue
            w = weight[s_bits.bit_count()]
            phi[i] += w * (values[s_bits | bit] - values[s_bits])
    return [float(p) for p in phi]


def estimate_shapley(table: ValueTable) -> list[float]:
    """Mean-difference estimate from whatever coalitions were valued.

    Requires every object to appear in at least one valued coalition and be
    absent from at least one; the full coalition counts toward inclusion.
    """
    n = table.n
    included: list[list[float]] = [[] for _ in range(n)]
    excluded: list[list[float]] = [[] for _ in range(n)]
    for coalition, value in table.entries.items():
        for i in range(n):
            (included if coalition.contains(i) else excluded)[i].append(value)
    phi = [0.0] * n
    for i in range(n):
        if not included[i] or not excluded[i]:
            side = "included" if not included[i] else "excluded"
            raise UncoveredObject(f"object {i} is never {side} in the table")
        phi[i] = math.fsum(included[i]) / len(included[i]) - math.fsum(
            excluded[i]
        ) / len(excluded[i])
    return phi


def rank_objects(phi: Sequence[float]) -> list[int]:
    """Object ids by descending importance; ties broken by ascending id."""
    if any(not math.isfinite(p) for p in phi):
        raise ValueError("importance values must be finite")
    return sorted(range(len(phi)), key=lambda i: (-phi[i], i))


def solve(table: ValueTable) -> tuple[list[float], str]:
    """Exact when the powerset is on the table, sampled otherwise."""
    if table.is_complete:
        return exact_shapley(table), ESTIMATOR_EXACT
    return estimate_shapley(table), ESTIMATOR_MEAN_DIFF


@dataclass(frozen=True)
class AttributionResult:
    """Importance scores for one scene plus how they were produced."""

    phi: tuple[float, ...]
    ranking: tuple[int, ...]
    estimator: str
    samples_used: int
    elapsed_s: float
    config_fingerprint: str

    def __post_init__(self) -> None:
        if sorted(self.ranking) != list(range(len(self.phi))):
            raise ValueError("ranking must be a permutation of object ids")
        if any(not math.isfinite(p) for p in self.phi):
            raise ValueError("importance values must be finite")

    @property
    def top_object(self) -> int:
        return self.ranking[0]

    def to_json_dict(self) -> dict:
        return {
            "phi": list(self.phi),
            "ranking": list(self.ranking),
            "estimator": self.estimator,
            "samples": self.samples_used,
            "elapsed_s": self.elapsed_s,
            "fingerprint": self.config_fingerprint,
        }

    @classmethod
    def from_json_dict(cls, doc: Mapping) -> "AttributionResult":
        return cls(
            phi=tuple(float(p) for p in doc["phi"]),
            ranking=tuple(int(i) for i in doc["ranking"]),
            estimator=str(doc["estimator"]),
            samples_used=int(doc["samples"]),
            elapsed_s=float(doc["elapsed_s"]),
            config_fingerprint=str(doc["fingerprint"]),
        )
