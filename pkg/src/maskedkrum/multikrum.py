"""Multi-Krum scoring, selection and aggregation.

Scores may be computed on any order-preserving affine image of the true
squared distances (such as the decoded ``2x + 2C`` table): every score sums
the same number of entries, so the ranking is unchanged.

Ties are always broken toward the lower client id.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence, Union

import numpy as np

from .core import DistanceMatrix, GradientVector, ResilienceError, ValidationError


def check_resilience_precondition(n: int, f: int) -> bool:
    if n < 1 or f < 0:
        raise ValidationError(f"need n >= 1 and f >= 0, got n={n}, f={f}")
    return n >= 2 * f + 3


@dataclass(frozen=True)
class ScoreTable:
    ids: tuple
    scores: tuple
    neighbors: tuple
    f: int

    def score_of(self, client_id: int) -> float:
        return self.scores[self.ids.index(client_id)]


@dataclass(frozen=True)
class SelectionResult:
    selected_ids: tuple
    rejected_ids: tuple
    scores: ScoreTable

    def as_dict(self) -> dict:
        return {
            "selected_ids": list(self.selected_ids),
            "rejected_ids": list(self.rejected_ids),
            "scores": {str(i): s for i, s in zip(self.scores.ids, self.scores.scores)},
            "neighbors": {str(i): list(nb) for i, nb in zip(self.scores.ids, self.scores.neighbors)},
            "f": self.scores.f,
        }


TIE_RTOL = 1e-12


def _rank(values, ids, tie_rtol: float) -> list:
    """Positions sorted by value; runs of values within ``tie_rtol`` (relative
    to the largest magnitude) of their predecessor are ordered by id."""
    by_value = sorted(range(len(values)), key=lambda p: (values[p], ids[p]))
    if not by_value:
        return []
    tol = tie_rtol * max(abs(v) for v in values)
    ranked, run = [], [by_value[0]]
    for prev, cur in zip(by_value, by_value[1:]):
        if values[cur] - values[prev] > tol:
            ranked.extend(sorted(run, key=lambda p: ids[p]))
            run = []
        run.append(cur)
    ranked.extend(sorted(run, key=lambda p: ids[p]))
    return ranked


def score_clients(dm: DistanceMatrix, f: int, tie_rtol: float = TIE_RTOL) -> ScoreTable:
    """Sum of each client's N - f - 2 smallest off-diagonal distances."""
    n = dm.n
    if not check_resilience_precondition(n, f):
        raise ResilienceError(f"N >= 2f+3 violated: N={n}, f={f}")
    m = n - f - 2
    ids = dm.ids
    scores, neighbors = [], []
    for row in range(n):
        others = [col for col in range(n) if col != row]
        vals = [float(dm.entries[row, c]) for c in others]
        chosen = [others[p] for p in _rank(vals, [ids[c] for c in others], tie_rtol)[:m]]
        scores.append(math.fsum(dm.entries[row, c] for c in chosen))
        neighbors.append(tuple(ids[c] for c in chosen))
    return ScoreTable(ids, tuple(scores), tuple(neighbors), f)


def select_top_k(scores: ScoreTable, k: int, tie_rtol: float = TIE_RTOL) -> SelectionResult:
    """The k lowest scores; output in ascending score, then ascending id.

    Scores within ``tie_rtol`` (relative to the largest score) of their
    predecessor count as tied, which absorbs the rounding left by decoding
    masked distances. Tied runs are ordered by client id.
    """
    n = len(scores.ids)
    if not 1 <= k <= n:
        raise ValidationError(f"k must lie in [1, {n}], got {k}")
    order = _rank(list(scores.scores), list(scores.ids), tie_rtol)
    selected = tuple(scores.ids[p] for p in order[:k])
    rejected = tuple(sorted(scores.ids[p] for p in order[k:]))
    return SelectionResult(selected, rejected, scores)


GradientSet = Union[Mapping[int, GradientVector], Sequence[GradientVector]]


def _by_id(gradients: GradientSet) -> Mapping[int, GradientVector]:
    if isinstance(gradients, Mapping):
        return gradients
    return {g.client_id: g for g in gradients}


def mean_of(gradients: GradientSet, ids: Sequence[int]) -> GradientVector:
    """Unweighted coordinate-wise mean, stacked in ascending id order."""
    table = _by_id(gradients)
    missing = [i for i in ids if i not in table]
    if missing:
        raise ValidationError(f"no gradient for selected client(s) {missing}")
    if not ids:
        raise ValidationError("cannot average an empty selection")
    stacked = np.stack([table[i].values for i in sorted(ids)])
    return GradientVector(0, stacked.mean(axis=0))


def aggregate_selected(gradients: GradientSet, sel: SelectionResult) -> GradientVector:
    return mean_of(gradients, sel.selected_ids)


def multikrum(dm: DistanceMatrix, f: int, k: int) -> SelectionResult:
    return select_top_k(score_clients(dm, f), k)
