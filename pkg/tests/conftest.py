import gzip
import struct
from pathlib import Path

import numpy as np
import pytest

from twinsys import network as nn
from twinsys.dataset import CLASSIFICATION, REGRESSION, Dataset, FeatureSchema

DATA_DIR = Path(__file__).parent / "data"
MNIST_TRAIN = (DATA_DIR / "mnist-train-images-idx3-ubyte.gz", DATA_DIR / "mnist-train-labels-idx1-ubyte.gz")
MNIST_TEST = (DATA_DIR / "mnist-test-images-idx3-ubyte.gz", DATA_DIR / "mnist-test-labels-idx1-ubyte.gz")

L = nn.LayerSpec


def write_idx(tmp_path, images: np.ndarray, labels: np.ndarray, img_magic=2051, lab_magic=2049,
              compress=False):
    """Write an IDX pair by hand; ``images`` is (n, rows, cols) uint8."""
    n, r, c = images.shape
    img = struct.pack(">iiii", img_magic, n, r, c) + images.astype(np.uint8).tobytes()
    lab = struct.pack(">ii", lab_magic, len(labels)) + np.asarray(labels, dtype=np.uint8).tobytes()
    if compress:
        img, lab = gzip.compress(img), gzip.compress(lab)
    ip, lp = tmp_path / "img.idx", tmp_path / "lab.idx"
    ip.write_bytes(img)
    lp.write_bytes(lab)
    return ip, lp


def regression_dataset(X, y=None, names=None) -> Dataset:
    X = np.asarray(X, dtype=float)
    names = names or tuple(f"x{i}" for i in range(X.shape[1]))
    y = np.zeros(len(X)) if y is None else y
    return Dataset(FeatureSchema(tuple(names), REGRESSION, (X.shape[1],)), X, y)


def classification_dataset(X, y, num_classes=2) -> Dataset:
    X = np.asarray(X, dtype=float)
    names = tuple(f"x{i}" for i in range(X.shape[1]))
    return Dataset(FeatureSchema(names, CLASSIFICATION, (X.shape[1],), num_classes), X, y)


def linear_model(coef, intercept=0.0) -> nn.NetworkModel:
    """Single dense regression layer computing ``coef . x + intercept``."""
    coef = np.asarray(coef, dtype=float)
    m = nn.build([L.dense(len(coef), 1)], REGRESSION, 0)
    m.params[0]["W"][:, 0] = coef
    m.params[0]["b"][:] = intercept
    return m


def randomize_biases(model: nn.NetworkModel, rng, scale=0.5) -> nn.NetworkModel:
    for p in model.params:
        if p is not None:
            p["b"][:] = scale * rng.standard_normal(p["b"].shape)
    return model


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
