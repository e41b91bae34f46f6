"""NSGA-II building blocks over (accuracy, complexity) pairs.

Accuracy is maximised and complexity minimised. Every tie is broken by the
lower index so selections are reproducible bit for bit.
"""

from __future__ import annotations

import math
from collections.abc import Sequence
from typing import Protocol


class Objectives(Protocol):
    @property
    def cv_accuracy(self) -> float: ...

    @property
    def complexity(self) -> int: ...


def dominates(f: Objectives, g: Objectives) -> bool:
    """``f`` is no worse on both objectives and strictly better on one."""
    no_worse = f.cv_accuracy >= g.cv_accuracy and f.complexity <= g.complexity
    better = f.cv_accuracy > g.cv_accuracy or f.complexity < g.complexity
    return no_worse and better


def fast_nondominated_sort(pop: Sequence[Objectives]) -> list[list[int]]:
    """Indices grouped into fronts; each front is sorted ascending."""
    n = len(pop)
    dominated_by: list[list[int]] = [[] for _ in range(n)]
    counts = [0] * n
    for p in range(n):
        for q in range(p + 1, n):
            if dominates(pop[p], pop[q]):
                dominated_by[p].append(q)
                counts[q] += 1
            elif dominates(pop[q], pop[p]):
                dominated_by[q].append(p)
                counts[p] += 1

    fronts: list[list[int]] = []
    current = [i for i in range(n) if counts[i] == 0]
    while current:
        fronts.append(current)
        following: list[int] = []
        for p in current:
            for q in dominated_by[p]:
                counts[q] -= 1
                if counts[q] == 0:
                    following.append(q)
        current = sorted(following)
    return fronts


def crowding_distance(front: Sequence[Objectives]) -> list[float]:
    """NSGA-II density estimate; boundary members get ``inf``."""
    n = len(front)
    if n == 0:
        return []
    distance = [0.0] * n
    objectives = (
        [float(f.cv_accuracy) for f in front],
        [float(f.complexity) for f in front],
    )
    for values in objectives:
        order = sorted(range(n), key=lambda i: (values[i], i))
        distance[order[0]] = math.inf
        distance[order[-1]] = math.inf
        span = values[order[-1]] - values[order[0]]
        if span == 0.0:
            continue
        for pos in range(1, n - 1):
            i = order[pos]
            distance[i] += (values[order[pos + 1]] - values[order[pos - 1]]) / span
    return distance


def select_survivors(pop: Sequence[Objectives], mu: int) -> list[int]:
    """Indices of the ``mu`` survivors, whole fronts first, then by crowding."""
    if not 0 <= mu <= len(pop):
        raise ValueError(f"cannot select {mu} survivors from {len(pop)} candidates")
    chosen: list[int] = []
    for front in fast_nondominated_sort(pop):
        if len(chosen) + len(front) <= mu:
            chosen.extend(front)
            if len(chosen) == mu:
                break
            continue
        crowd = crowding_distance([pop[i] for i in front])
        ranked = sorted(range(len(front)), key=lambda j: (-crowd[j], front[j]))
        chosen.extend(front[j] for j in ranked[: mu - len(chosen)])
        break
    return chosen
