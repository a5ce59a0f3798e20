import numpy as np
import pytest

from madiff.datagen import gen_training_set
from madiff.masknet import MaskNetConfig, train_masknet
from madiff.nn import TrainConfig


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def masknet_data():
    return gen_training_set(2000, seed=1), gen_training_set(200, seed=2)


@pytest.fixture(scope="session")
def trained_masknet(masknet_data):
    """MaskNet trained once per session at the acceptance budget; returns (model, report, seconds)."""
    import time

    train, val = masknet_data
    hyper = TrainConfig(epochs=40, batch_size=16, lr=0.5, optimizer="sgd", seed=0, max_steps=5000)
    t0 = time.perf_counter()
    model, report = train_masknet(train, val, hyper, MaskNetConfig())
    return model, report, time.perf_counter() - t0


_ACCEPTANCE = {}


@pytest.fixture
def acceptance():
    """Record one result line per acceptance criterion."""

    def record(number, title, ok, detail=""):
        _ACCEPTANCE[number] = (title, bool(ok), detail)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        title, ok, detail = _ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number} {'PASS' if ok else 'FAIL'}: {title} {detail}".rstrip())
