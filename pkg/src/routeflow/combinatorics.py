"""Sub-route destruction combinatorics, in exact integer/rational arithmetic.

A complete CVRP solution decomposes into a sub-routes serving two or more
customers and j sub-routes serving exactly one.  Dismantling it sub-route by
sub-route from the depot admits B(a, j) distinct destruction sequences: every
ordering of the a+j sub-routes, times two traversal directions for each
multi-customer sub-route.  B satisfies

    B(a, j) = 2a * B(a-1, j) + j * B(a, j-1),     B(0, 0) = 1

with closed form B(a, j) = (a+j)! * 2^a.  At each depot decision the backward
policy picks uniformly among the 2a+j available sub-route ends, so a specific
destruction sequence has probability prod 1/(2a_k + j_k) over its depot
decisions.  These per-sequence probabilities are order dependent and do not
all equal 1/B(a, j); enumerate_destructions makes that discrepancy exact and
verify_statements reports it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache

from .errors import CapacityError, ParameterError

FORWARD = "forward"
REVERSE = "reverse"

# factorial growth guard for exhaustive enumeration
MAX_ENUM_SEGMENTS = 7


@lru_cache(maxsize=None)
def count_recurrence(a: int, j: int) -> int:
    """Destruction-sequence count via the recurrence (exact integer)."""
    if a < 0 or j < 0:
        raise ParameterError("counts must be non-negative")
    if a == 0 and j == 0:
        return 1
    total = 0
    if a > 0:
        total += 2 * a * count_recurrence(a - 1, j)
    if j > 0:
        total += j * count_recurrence(a, j - 1)
    return total


def count_closed(a: int, j: int) -> int:
    """Closed form (a+j)! * 2^a (exact integer)."""
    if a < 0 or j < 0:
        raise ParameterError("counts must be non-negative")
    return math.factorial(a + j) << a


def backward_traj_prob_exact(a: int, j: int) -> Fraction:
    """Uniform-over-orderings trajectory backward probability, as a rational."""
    return Fraction(1, count_closed(a, j))


@dataclass(frozen=True)
class DestructionSequence:
    """One way to dismantle a solution: (segment index, direction) per step.

    Single-customer segments always use direction "forward".  probability is
    the product of the uniform depot choices 1/(2a_k + j_k) along the way.
    """

    steps: tuple[tuple[int, str], ...]
    probability: Fraction


def enumerate_destructions(decomp) -> list[DestructionSequence]:
    """Every distinct (ordering x direction) destruction of a decomposition.

    decomp needs `segments`: customer lists per sub-route.  Exhaustive, so
    guarded to at most MAX_ENUM_SEGMENTS sub-routes.
    """
    sizes = [len(s) for s in decomp.segments]
    if any(s < 1 for s in sizes):
        raise ParameterError("segments must hold at least one customer each")
    if len(sizes) > MAX_ENUM_SEGMENTS:
        raise CapacityError(
            f"enumeration limited to {MAX_ENUM_SEGMENTS} sub-routes, got {len(sizes)}"
        )
    result: list[DestructionSequence] = []
    steps: list[tuple[int, str]] = []

    def recurse(remaining: frozenset[int], prob: Fraction) -> None:
        if not remaining:
            result.append(DestructionSequence(tuple(steps), prob))
            return
        a = sum(1 for s in remaining if sizes[s] >= 2)
        j = len(remaining) - a
        choice = Fraction(1, 2 * a + j)
        for seg in sorted(remaining):
            directions = (FORWARD, REVERSE) if sizes[seg] >= 2 else (FORWARD,)
            for direction in directions:
                steps.append((seg, direction))
                recurse(remaining - {seg}, prob * choice)
                steps.pop()

    recurse(frozenset(range(len(sizes))), Fraction(1))
    return result


@dataclass
class _SyntheticDecomp:
    segments: list[list[int]]

    @property
    def a(self) -> int:
        return sum(1 for s in self.segments if len(s) >= 2)

    @property
    def j(self) -> int:
        return sum(1 for s in self.segments if len(s) == 1)


def synthetic_decomposition(a: int, j: int) -> _SyntheticDecomp:
    """A placeholder decomposition with a two-customer and j one-customer segments."""
    segments: list[list[int]] = []
    nxt = 1
    for _ in range(a):
        segments.append([nxt, nxt + 1])
        nxt += 2
    for _ in range(j):
        segments.append([nxt])
        nxt += 1
    return _SyntheticDecomp(segments)


@dataclass
class VerificationRow:
    a: int
    j: int
    recurrence: int
    closed: int
    enumerated: int
    prob_sum: Fraction
    min_prob: Fraction
    max_prob: Fraction

    @property
    def uniform_prob(self) -> Fraction:
        return Fraction(1, self.closed)

    @property
    def counts_agree(self) -> bool:
        return self.recurrence == self.closed == self.enumerated

    @property
    def prob_sum_is_one(self) -> bool:
        return self.prob_sum == 1

    @property
    def stepwise_matches_uniform(self) -> bool:
        """Whether every sequence probability equals 1/count (they need not)."""
        return self.min_prob == self.max_prob == self.uniform_prob


def verify_statements(a_max: int, j_max: int) -> list[VerificationRow]:
    """Cross-check recurrence, closed form and exhaustive enumeration.

    For every (a, j) in the range: the three counts must agree and the
    enumerated probabilities must sum to exactly 1.  min/max sequence
    probabilities are recorded against the uniform 1/count to document where
    the step-wise destruction probabilities deviate from it.
    """
    if a_max + j_max > MAX_ENUM_SEGMENTS:
        raise CapacityError(f"a_max + j_max must be at most {MAX_ENUM_SEGMENTS}")
    rows = []
    for a in range(a_max + 1):
        for j in range(j_max + 1):
            seqs = enumerate_destructions(synthetic_decomposition(a, j))
            probs = [s.probability for s in seqs]
            rows.append(
                VerificationRow(
                    a=a,
                    j=j,
                    recurrence=count_recurrence(a, j),
                    closed=count_closed(a, j),
                    enumerated=len(seqs),
                    prob_sum=sum(probs, Fraction(0)),
                    min_prob=min(probs) if probs else Fraction(1),
                    max_prob=max(probs) if probs else Fraction(1),
                )
            )
    return rows


def format_verification_table(rows: list[VerificationRow]) -> str:
    header = f"{'a':>2} {'j':>2} {'recurrence':>11} {'closed':>11} {'enumerated':>11} {'prob_sum':>9} {'min_prob':>10} {'max_prob':>10}"
    lines = [header, "-" * len(header)]
    for r in rows:
        lines.append(
            f"{r.a:>2} {r.j:>2} {r.recurrence:>11} {r.closed:>11} {r.enumerated:>11} "
            f"{str(r.prob_sum):>9} {str(r.min_prob):>10} {str(r.max_prob):>10}"
        )
    return "\n".join(lines)
