import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def pretrained():
    """Three-mode mixture DDPM shared across modules (a few seconds to train)."""
    from vard_lab import ddpm

    sched = ddpm.make_schedule()
    data = ddpm.three_mode_mixture()
    model = ddpm.Denoiser(seed=0)
    ddpm.pretrain(model, data, sched, 2000, np.random.default_rng(0), lr=3e-3)
    return model, sched, data


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
