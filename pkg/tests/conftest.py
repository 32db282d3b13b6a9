import numpy as np
import pytest
import torch

from transferattack.datasets import generate_synthetic_dataset
from transferattack.models import TrainingConfig, new_classifier, train_classifier

TINY_WIDTHS = (4, 6, 8)


def tiny_model(seed=0, classes=4, shape=(8, 8, 3), arch="cnn-a", dtype=torch.float32):
    m = new_classifier(arch, [f"c{i}" for i in range(classes)], shape, seed=seed, widths=TINY_WIDTHS)
    return m.astype(dtype) if dtype != torch.float32 else m


def random_images(rng, n, shape=(8, 8, 3)):
    return rng.integers(0, 256, size=(n,) + tuple(shape)).astype(np.uint8)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_data():
    return generate_synthetic_dataset(4, 40, size=32, seed=7)


@pytest.fixture(scope="session")
def trained_small(small_data):
    return train_classifier("cnn-a", small_data, TrainingConfig(epochs=40, batch_size=8, learning_rate=2e-3), widths=(16, 32, 64))


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES = {}


@pytest.fixture
def report_criterion(request):
    def record(number, passed, detail):
        line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES[number] = line
        with request.config.pluginmanager.get_plugin("capturemanager").global_and_fixture_disabled():
            print("\n" + line, flush=True)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
