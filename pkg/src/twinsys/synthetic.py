"""Small synthetic datasets used by the test suite and the benchmark."""

from __future__ import annotations

import numpy as np

from .dataset import CLASSIFICATION, Dataset, FeatureSchema


def xor_dataset() -> Dataset:
    X = np.array([[0.0, 0.0], [0.0, 1.0], [1.0, 0.0], [1.0, 1.0]])
    y = np.array([0, 1, 1, 0])
    return Dataset(FeatureSchema(("x1", "x2"), CLASSIFICATION, (2,), 2), X, y)


def parity_blobs(n: int, n_informative: int = 4, n_noise: int = 4, separation: float = 1.5,
                 spread: float = 0.65, seed: int = 0) -> Dataset:
    """Two-class mixture of Gaussian blobs plus pure-noise features.

    Blob centres sit on the corners ``{-separation, +separation}^n_informative``
    and a corner's class is the parity of its negative coordinates, so every
    pair of adjacent corners carries different labels. Each case gets
    isotropic ``spread`` noise around its corner; the ``n_noise`` trailing
    features are standard normal and independent of the class.
    """
    rng = np.random.default_rng(seed)
    signs = rng.choice([-1.0, 1.0], size=(n, n_informative))
    y = ((signs < 0).sum(axis=1) % 2).astype(np.int64)
    informative = signs * separation + spread * rng.standard_normal((n, n_informative))
    noise = rng.standard_normal((n, n_noise))
    names = tuple(f"inf{i}" for i in range(n_informative)) + tuple(f"noise{i}" for i in range(n_noise))
    return Dataset(FeatureSchema(names, CLASSIFICATION, (n_informative + n_noise,), 2),
                   np.hstack([informative, noise]), y)


def gaussian_blobs(n: int, d: int = 2, separation: float = 2.0, seed: int = 0) -> Dataset:
    """Two isotropic unit-variance blobs at ``-/+ separation`` on every axis."""
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, size=n)
    X = rng.standard_normal((n, d)) + separation * np.where(y == 1, 1.0, -1.0)[:, None]
    names = tuple(f"x{i}" for i in range(d))
    return Dataset(FeatureSchema(names, CLASSIFICATION, (d,), 2), X, y)
