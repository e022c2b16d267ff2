import pytest

from splineprune.datasets import xshape
from splineprune.engine import TrainConfig, mlp, train


@pytest.fixture(scope="session")
def xshape_net():
    """2x20 ReLU net trained on the X-shape set (seed 0), plus its training data."""
    data = xshape(1000, seed=0)
    net = mlp([2, 20, 20, 2], seed=0)
    cfg = TrainConfig(epochs=100, batch_size=20, lr=0.05, lr_schedule=TrainConfig.step_decay(100), seed=0)
    train(net, data, cfg)
    return net, data


ACCEPTANCE_LINES = []


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line per acceptance criterion; shown in the terminal summary."""
    def record(label, ok, detail):
        line = f"{label}: {'PASS' if ok else 'FAIL'} ({detail})"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
