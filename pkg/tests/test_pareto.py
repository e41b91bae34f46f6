"""Tests for non-dominated sorting, crowding distance and survivor selection."""

from __future__ import annotations

import math

import numpy as np
import pytest

from evopipe.evolve import Fitness
from evopipe.pareto import (
    crowding_distance,
    dominates,
    fast_nondominated_sort,
    select_survivors,
)


def _pop(*pairs: tuple[float, int]) -> list[Fitness]:
    return [Fitness(acc, size) for acc, size in pairs]


def _brute_force_fronts(pop: list[Fitness]) -> list[list[int]]:
    remaining = set(range(len(pop)))
    fronts = []
    while remaining:
        front = sorted(
            i for i in remaining if not any(dominates(pop[j], pop[i]) for j in remaining)
        )
        fronts.append(front)
        remaining -= set(front)
    return fronts


# ---------------------------------------------------------------------------
# Dominance and sorting
# ---------------------------------------------------------------------------


class TestDominates:
    """Maximise accuracy, minimise complexity."""

    def test_strictly_better(self) -> None:
        assert dominates(Fitness(0.9, 2), Fitness(0.8, 3))

    def test_better_on_one_equal_on_other(self) -> None:
        assert dominates(Fitness(0.9, 2), Fitness(0.9, 3))

    def test_trade_off(self) -> None:
        assert not dominates(Fitness(0.9, 4), Fitness(0.8, 1))
        assert not dominates(Fitness(0.8, 1), Fitness(0.9, 4))

    def test_equal_points(self) -> None:
        assert not dominates(Fitness(0.5, 2), Fitness(0.5, 2))


class TestFastNondominatedSort:
    """Front construction."""

    def test_example(self) -> None:
        pop = _pop((0.9, 3), (0.8, 1), (0.85, 2), (0.7, 2), (0.6, 5))
        assert fast_nondominated_sort(pop) == [[0, 1, 2], [3], [4]]

    def test_duplicates_share_a_front(self) -> None:
        pop = _pop((0.5, 2), (0.5, 2))
        assert fast_nondominated_sort(pop) == [[0, 1]]

    def test_empty(self) -> None:
        assert fast_nondominated_sort([]) == []

    @pytest.mark.parametrize("seed", range(200))
    def test_matches_brute_force(self, seed: int) -> None:
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, 30))
        pop = [
            Fitness(float(rng.integers(0, 6)) / 5.0, int(rng.integers(1, 6))) for _ in range(n)
        ]
        assert fast_nondominated_sort(pop) == _brute_force_fronts(pop)


# ---------------------------------------------------------------------------
# Crowding and survival
# ---------------------------------------------------------------------------


class TestCrowdingDistance:
    """Density estimate within a front."""

    def test_boundaries_are_infinite(self) -> None:
        front = _pop((0.9, 4), (0.8, 2), (0.7, 1))
        distance = crowding_distance(front)
        assert distance[0] == math.inf
        assert distance[2] == math.inf
        assert distance[1] == pytest.approx(2.0)

    def test_small_fronts(self) -> None:
        assert crowding_distance([]) == []
        assert crowding_distance(_pop((0.5, 1))) == [math.inf]

    def test_interior_values(self) -> None:
        front = _pop((1.0, 5), (0.9, 4), (0.6, 2), (0.5, 1))
        distance = crowding_distance(front)
        # accuracy span 0.5, complexity span 4
        assert distance[1] == pytest.approx((1.0 - 0.6) / 0.5 + (5 - 2) / 4)
        assert distance[2] == pytest.approx((0.9 - 0.5) / 0.5 + (4 - 1) / 4)


class TestSelectSurvivors:
    """Whole fronts first, then the least crowded."""

    def test_whole_fronts(self) -> None:
        pop = _pop((0.9, 3), (0.8, 1), (0.7, 2), (0.6, 5))
        assert select_survivors(pop, 3) == [0, 1, 2]

    def test_truncates_by_crowding(self) -> None:
        pop = _pop((1.0, 5), (0.95, 4), (0.6, 2), (0.5, 1))
        # one front; the two boundaries survive first, then the more isolated interior point
        survivors = select_survivors(pop, 3)
        assert survivors[:2] == [0, 3]
        assert survivors[2] == 2

    def test_best_accuracy_always_survives(self) -> None:
        rng = np.random.default_rng(0)
        for _ in range(50):
            pop = [Fitness(float(rng.random()), int(rng.integers(1, 10))) for _ in range(20)]
            best = max(f.cv_accuracy for f in pop)
            kept = select_survivors(pop, 5)
            assert max(pop[i].cv_accuracy for i in kept) == best

    def test_mu_out_of_range(self) -> None:
        with pytest.raises(ValueError):
            select_survivors(_pop((0.5, 1)), 2)
