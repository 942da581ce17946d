"""Coalition selection: which perturbations get evaluated.

The cheap default is the first-order leave-one-out set (plus the full
coalition as reference); precision can be bought with extra Monte Carlo
subsets, or the whole powerset for exact Shapley values on small scenes.
"""

from __future__ import annotations

import random
from dataclasses import dataclass
from typing import Iterable

from .errors import TooManyObjects
from .masking import Coalition

DEFAULT_EXACT_THRESHOLD = 12

PLAN_MODES = ("exact", "first-order", "mc")


def default_mc_budget(n: int) -> int:
    """Extra Monte Carlo samples on top of first-order: a small multiple."""
    return 2 * n


def first_order_coalitions(n: int) -> list[Coalition]:
    """Leave-one-out coalitions, ordered by ascending omitted id."""
    if n < 1:
        raise ValueError("need at least one object")
    return [Coalition.full(n).without(i) for i in range(n)]


def monte_carlo_coalitions(
    n: int, budget: int, seed: int, exclude: Iterable[Coalition] = ()
) -> list[Coalition]:
    """Up to ``budget`` distinct uniform subsets, never the full coalition.

    Subsets are drawn with each object included at probability one half;
    the empty coalition is allowed. Draws already in ``exclude`` are skipped,
    and fewer coalitions come back once the space is exhausted. Output is a
    pure function of ``(n, budget, seed, exclude)``.
    """
    if budget < 0:
        raise ValueError("budget must be >= 0")
    full_bits = (1 << n) - 1
    seen = {c.bits for c in exclude}
    available = full_bits - len(seen - {full_bits})  # 2^n - 1 candidates total
    rng = random.Random(seed)
    out: list[Coalition] = []
    while len(out) < budget and len(out) < available:
        bits = rng.getrandbits(n)
        if bits == full_bits or bits in seen:
            continue
        seen.add(bits)
        out.append(Coalition(n, bits))
    return out


def powerset_coalitions(
    n: int, exact_threshold: int = DEFAULT_EXACT_THRESHOLD
) -> list[Coalition]:
    """All 2^n coalitions in canonical bitset order."""
    if n > exact_threshold:
        raise TooManyObjects(
            f"{n} objects means {1 << n} coalitions; exact mode is capped at "
            f"{exact_threshold} (use sampling instead)"
        )
    return [Coalition(n, bits) for bits in range(1 << n)]


@dataclass(frozen=True)
class SamplingPlan:
    """Which coalitions to evaluate for one scene.

    ``mc`` budget counts extra samples beyond the first-order set (``None``
    scales with the object count); ``seed`` makes those draws reproducible.
    ``exact`` refuses scenes above ``exact_threshold`` objects.
    """

    mode: str = "first-order"
    budget: int | None = None
    seed: int = 0
    exact_threshold: int = DEFAULT_EXACT_THRESHOLD

    def __post_init__(self) -> None:
        if self.mode not in PLAN_MODES:
            raise ValueError(f"sampling mode must be one of {PLAN_MODES}")
        if self.budget is not None and self.budget < 0:
            raise ValueError("budget must be >= 0")

    def coalitions(self, n: int) -> list[Coalition]:
        """The evaluation set, always containing the full coalition."""
        if self.mode == "exact":
            return powerset_coalitions(n, self.exact_threshold)
        plan = first_order_coalitions(n)
        if self.mode == "mc":
            budget = self.budget if self.budget is not None else default_mc_budget(n)
            exclude = plan + [Coalition.full(n)]
            plan += monte_carlo_coalitions(n, budget, self.seed, exclude)
        plan.append(Coalition.full(n))
        return plan

    def describe(self) -> dict:
        return {
            "mode": self.mode,
            "budget": self.budget,
            "seed": self.seed,
            "exact_threshold": self.exact_threshold,
        }
