import sys
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from semlink import tensor as T  # noqa: E402
from semlink.channel import ChannelConfig  # noqa: E402
from semlink.codec import ArchSpec  # noqa: E402
from semlink.harness.data import toy_split  # noqa: E402
from semlink.harness.train import TrainConfig, train  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _restore_dtype():
    prev = T.default_dtype()
    yield
    T.set_default_dtype(prev)


@pytest.fixture(scope="session")
def toy_data():
    return toy_split(200, 64, 8, seed=0)


def toy_config(snr_db=10.0, epochs=50, dtype="float32", seed=0, arch=None):
    return TrainConfig(
        arch=arch or ArchSpec.toy(),
        channel=ChannelConfig("awgn", snr_db),
        bandwidth_ratio=Fraction(1, 6),
        image_dims=(8, 8),
        epochs=epochs,
        batch_size=64,
        lr=1e-3,
        seed=seed,
        dtype=dtype,
    )


@pytest.fixture(scope="session")
def trained_toy(toy_data):
    """Toy codec trained for 50 epochs at 10 dB; shared by several modules."""
    train_x, val_x = toy_data
    return train(toy_config(), train_x, val_x)


# acceptance verdicts, printed once at the end of the run
VERDICTS = []


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in VERDICTS:
        terminalreporter.write_line(line)
