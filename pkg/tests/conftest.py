"""Shared fixtures: small deterministic datasets."""

from __future__ import annotations

import numpy as np
import pytest

from evopipe.data import Dataset, make_hill_valley


def make_blobs(n_per_class: int = 30, d: int = 4, c: int = 2, seed: int = 0) -> Dataset:
    """Well separated Gaussian blobs, one per class."""
    rng = np.random.default_rng(seed)
    centres = rng.normal(0.0, 4.0, size=(c, d))
    features = np.vstack([rng.normal(centres[k], 0.5, size=(n_per_class, d)) for k in range(c)])
    labels = np.repeat(np.arange(c, dtype=np.int64), n_per_class)
    order = rng.permutation(features.shape[0])
    return Dataset(
        features=features[order],
        labels=labels[order],
        feature_names=tuple(f"f{i}" for i in range(d)),
        n_classes=c,
        name="blobs",
    )


@pytest.fixture()
def blobs() -> Dataset:
    return make_blobs()


@pytest.fixture()
def blobs3() -> Dataset:
    return make_blobs(n_per_class=20, d=5, c=3, seed=1)


@pytest.fixture()
def hill_valley_small() -> Dataset:
    return make_hill_valley(80, 12, noisy=True, seed=0)
