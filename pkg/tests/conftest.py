import time

import numpy as np
import pytest

from helpers import SETUP_SECONDS, STREAM_CFG, TINY_CFG, sinusoid_corpus
from ranfm.model import Model
from ranfm.numerics import precision
from ranfm.runtime import ScenarioSpec, simulate_telemetry
from ranfm.training import TrainConfig, pretrain

# desk-scale schedule: the default 1e-4 peak rate needs far more than 300 steps
DESK_LR = dict(lr_max=3e-3, lr_min=3e-4)


@pytest.fixture(scope="session")
def corpus():
    return sinusoid_corpus()


@pytest.fixture(scope="session")
def pretrained_tiny(corpus):
    """300 steps on the sinusoid corpus, 64-bit."""
    train, _ = corpus
    cfg = TrainConfig(total_steps=300, batch_size=32, seed=0, **DESK_LR)
    t0 = time.perf_counter()
    with precision(64):
        result = pretrain(train, Model.init(TINY_CFG, seed=0), cfg)
    SETUP_SECONDS["pretrained_tiny"] = time.perf_counter() - t0
    return result


@pytest.fixture(scope="session")
def clean_jamming_model():
    """Reconstruction model pretrained on burst-free jamming telemetry."""
    traces = [simulate_telemetry(ScenarioSpec("jamming", duration=4096, seed=s, events=[],
                                              window=STREAM_CFG.window)) for s in range(3)]
    for d in traces:
        d.task = "pretrain"
    cfg = TrainConfig(total_steps=300, batch_size=32, seed=0, **DESK_LR)
    t0 = time.perf_counter()
    with precision(64):
        model = pretrain(traces, Model.init(STREAM_CFG, seed=0), cfg).model
    SETUP_SECONDS["clean_jamming_model"] = time.perf_counter() - t0
    return model


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE_RESULTS as RESULTS
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(RESULTS):
        ok, detail = RESULTS[n]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}")
