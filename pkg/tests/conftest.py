import numpy as np
import pytest

from deepfool.data import resolve_dataset, split
from deepfool.models import AffineClassifier, MlpClassifier
from deepfool.tensor import Dense
from deepfool.training import TrainConfig, train

# desk protocol: default blobs, 80/20 split, fc:200,100,10
DESK_ARCH = "fc:200,100,10"
DESK_TRAIN = TrainConfig(learning_rate=0.01, momentum=0.9, batch_size=32, epochs=20, seed=0)

ACCEPTANCE = {}


def random_affine(rng, n, c):
    return AffineClassifier(rng.normal(size=(n, c)), rng.normal(size=c))


def random_net(rng, sizes):
    layers = []
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        act = "relu" if i < len(sizes) - 2 else "identity"
        layers.append(Dense(rng.normal(size=(a, b)) / np.sqrt(a), rng.normal(size=b) * 0.1, act))
    return MlpClassifier(layers)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def desk_data():
    data, _ = resolve_dataset("blobs")
    return split(data, (0.8, 0.2), seed=0)


@pytest.fixture(scope="session")
def desk_model(desk_data):
    train_set, test_set = desk_data
    model, trace = train(DESK_ARCH, train_set, DESK_TRAIN, test_set)
    return model


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"criterion {key:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
