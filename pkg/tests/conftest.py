import numpy as np
import pytest

from qosnets import data, qnn
from qosnets.am_models import truncation_library


def calibrated_mlp(sizes, has_bn=False, seed=0, n=256):
    rng = np.random.default_rng(seed + 1000)
    model = qnn.mlp(sizes, has_bn=has_bn, seed=seed)
    x = rng.normal(size=(n, sizes[0]))
    return qnn.calibrate(model, x), x


@pytest.fixture(scope="session")
def library():
    return truncation_library()


@pytest.fixture(scope="session")
def digits():
    ds = data.synthetic_digits(3000, seed=0)
    return ds.split([2000, 500, 500], seed=0)


@pytest.fixture(scope="session")
def toy_model(digits):
    tr, va, _ = digits
    m = qnn.toy_cnn(seed=0)
    m = qnn.train(m, tr.x, tr.y, qnn.TrainConfig(lr=0.05, epochs=4, batch_size=64, seed=0))
    return qnn.calibrate(m, va.x)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
