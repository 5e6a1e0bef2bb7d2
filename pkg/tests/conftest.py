import numpy as np
import pytest

from red_anticipation.data import SyntheticSpec, gen_synthetic
from red_anticipation.model import Hyper
from red_anticipation.training import TrainConfig


@pytest.fixture(scope="session")
def tiny_videos():
    """Small but label-rich synthetic set for fast training tests."""
    return gen_synthetic(SyntheticSpec(d=6, c=2, videos=3, chunks=120, seed=3,
                                       min_action=6, max_action=12))


@pytest.fixture
def tiny_config():
    hyper = Hyper(t_enc=6, t_dec=4, d=6, h=8, c=2, batch=8)
    return TrainConfig(hyper=hyper, epochs_stage1=2, epochs_stage2=2, seed=1,
                       batches_per_epoch=3)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_ACCEPTANCE: list[str] = []


@pytest.fixture
def record():
    """Log one acceptance line; shown in the terminal summary."""
    def add(number, ok, detail):
        _ACCEPTANCE.append(f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}")
        return ok
    return add


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
