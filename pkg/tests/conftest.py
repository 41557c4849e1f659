import numpy as np
import pytest

from asfl import nn
from asfl.nn import Classifier, Conv2d, Dense, Flatten, MaxPool2d, ModelSpec, ReLU, ResidualBlock


def random_spec(rng: np.random.Generator, num_classes: int = 3) -> ModelSpec:
    """Small random composable chain mixing every layer kind."""
    c, h = int(rng.integers(1, 3)), int(rng.integers(4, 8))
    layers: list = []
    shape = (c, h, h)
    for _ in range(int(rng.integers(1, 5))):
        choice = rng.choice(["conv", "relu", "res", "pool"])
        if choice == "conv":
            cand = Conv2d(shape[0], int(rng.integers(1, 4)), int(rng.choice([1, 2, 3])),
                          int(rng.choice([1, 2])), int(rng.integers(0, 2)))
        elif choice == "pool":
            cand = MaxPool2d(2, int(rng.choice([1, 2])))
        elif choice == "res":
            cand = ResidualBlock(shape[0])
        else:
            cand = ReLU()
        try:
            shape = cand.out_shape(shape)
        except nn.ShapeError:
            continue
        layers.append(cand)
    if rng.random() < 0.5:
        layers.append(Classifier(shape[0], num_classes))
    else:
        n = int(np.prod(shape))
        layers += [Flatten(), Dense(n, 4), ReLU(), Dense(4, num_classes)]
    return ModelSpec(tuple(layers), (c, h, h), num_classes)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_configure(config):
    config._acceptance_lines = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_acceptance_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
