"""Cell-level concordance between two annotators' point sets.

Points match when they lie within a physical radius of each other; pairs
are accepted greedily by increasing distance, each point at most once, with
(distance, id, id) ordering so results are deterministic.  Matched pairs
split into agreed/disagreed by class; leftover points are misses.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import GridIndex

Point = tuple[str, float, float]  # (id, x, y)


def radius_px(radius_um: float, mpp: float) -> float:
    """Physical matching radius in pixels (3 um at 0.25 mpp is 12 px)."""
    if radius_um <= 0 or mpp <= 0:
        raise ValueError("radius_um and mpp must be positive")
    return radius_um / mpp


@dataclass
class MatchResult:
    pairs: list[tuple[str, str, float]] = field(default_factory=list)
    unmatched_a: list[str] = field(default_factory=list)
    unmatched_b: list[str] = field(default_factory=list)


def match_points(
    points_a: list[Point], points_b: list[Point], radius: float
) -> MatchResult:
    """Greedy one-to-one matching of two point sets.

    Candidate pairs are every (a, b) with Euclidean distance <= radius
    (boundary inclusive), taken in (distance, id_a, id_b) order while both
    endpoints are free.
    """
    if radius <= 0:
        raise ValueError("radius must be positive")
    ids_a = [p[0] for p in points_a]
    ids_b = [p[0] for p in points_b]
    if len(set(ids_a)) != len(ids_a) or len(set(ids_b)) != len(ids_b):
        raise ValueError("point ids must be unique per side")

    index = GridIndex(bucket_size=radius)
    coords_b = {}
    for pid, x, y in points_b:
        index.insert_point(pid, x, y)
        coords_b[pid] = (x, y)

    candidates: list[tuple[float, str, str]] = []
    for pid, x, y in points_a:
        window = (x - radius, y - radius, x + radius, y + radius)
        for other in index.query(window):
            bx, by = coords_b[other]
            d = math.hypot(x - bx, y - by)
            if d <= radius:
                candidates.append((d, pid, other))
    candidates.sort()

    free_a = set(ids_a)
    free_b = set(ids_b)
    pairs = []
    for d, pa, pb in candidates:
        if pa in free_a and pb in free_b:
            pairs.append((pa, pb, d))
            free_a.discard(pa)
            free_b.discard(pb)
    return MatchResult(
        pairs=pairs,
        unmatched_a=[i for i in ids_a if i in free_a],
        unmatched_b=[i for i in ids_b if i in free_b],
    )


@dataclass
class ConcordanceStats:
    n_a: int
    n_b: int
    matched: int
    agreed: int
    disagreed: int
    missed_a: int
    missed_b: int
    excluded_unknown: int

    def _denominator(self) -> int:
        return self.agreed + self.disagreed + self.missed_a + self.missed_b

    def agreed_fraction(self) -> float:
        d = self._denominator()
        return self.agreed / d if d else 0.0

    def disagreed_fraction(self) -> float:
        d = self._denominator()
        return self.disagreed / d if d else 0.0

    def missed_fraction(self) -> float:
        d = self._denominator()
        return (self.missed_a + self.missed_b) / d if d else 0.0


def concordance(
    result: MatchResult,
    classes_a: dict[str, str],
    classes_b: dict[str, str],
    unknown_class: str | None = None,
) -> ConcordanceStats:
    """Classify matches into agreed/disagreed and leftovers into misses.

    Points of ``unknown_class`` still consume match slots but are excluded
    from every concordance denominator (agreed, disagreed and missed).
    """
    agreed = disagreed = excluded = 0
    for pa, pb, _ in result.pairs:
        ca, cb = classes_a[pa], classes_b[pb]
        if unknown_class is not None and unknown_class in (ca, cb):
            excluded += 1
        elif ca == cb:
            agreed += 1
        else:
            disagreed += 1
    missed_a = sum(
        1 for i in result.unmatched_a
        if unknown_class is None or classes_a[i] != unknown_class
    )
    missed_b = sum(
        1 for i in result.unmatched_b
        if unknown_class is None or classes_b[i] != unknown_class
    )
    excluded += (len(result.unmatched_a) - missed_a) + (
        len(result.unmatched_b) - missed_b
    )
    return ConcordanceStats(
        n_a=len(result.pairs) + len(result.unmatched_a),
        n_b=len(result.pairs) + len(result.unmatched_b),
        matched=len(result.pairs),
        agreed=agreed,
        disagreed=disagreed,
        missed_a=missed_a,
        missed_b=missed_b,
        excluded_unknown=excluded,
    )


@dataclass
class ConfusionMatrix:
    """Matched-pair class counts; rows index annotator A, columns B."""

    classes: list[str]
    matrix: np.ndarray

    def trace(self) -> int:
        return int(np.trace(self.matrix))

    def total(self) -> int:
        return int(self.matrix.sum())

    def transposed(self) -> "ConfusionMatrix":
        return ConfusionMatrix(list(self.classes), self.matrix.T.copy())

    def to_rows(self) -> list[list]:
        head = ["class"] + list(self.classes)
        out = [head]
        for i, name in enumerate(self.classes):
            out.append([name] + [int(v) for v in self.matrix[i]])
        return out


def confusion_matrix(
    result: MatchResult,
    classes_a: dict[str, str],
    classes_b: dict[str, str],
    class_order: list[str],
) -> ConfusionMatrix:
    """Count matched pairs per (class_a, class_b) cell in a fixed order."""
    pos = {name: i for i, name in enumerate(class_order)}
    m = np.zeros((len(class_order), len(class_order)), dtype=np.int64)
    for pa, pb, _ in result.pairs:
        ca, cb = classes_a[pa], classes_b[pb]
        if ca not in pos or cb not in pos:
            raise ValueError(f"class pair ({ca!r}, {cb!r}) outside class_order")
        m[pos[ca], pos[cb]] += 1
    return ConfusionMatrix(list(class_order), m)
