import time

import numpy as np
import pytest
import torch

torch.set_num_threads(1)

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture
def criterion():
    """Records one PASS/FAIL line: ``criterion(number, passed, detail)``."""
    def record(number, passed, detail):
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return passed
    return record


@pytest.fixture(scope="session")
def toy_small():
    from ecgsynth.toy import synth_toy_dataset
    return synth_toy_dataset(40, seed=11)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def pretrained():
    """Smoke-pretrained extractor: three epochs on the first 1500 digit images
    (the rest are held out)."""
    from ecgsynth.metrics.inception import pretrain_extractor
    start = time.perf_counter()
    model, meta = pretrain_extractor(epochs=3, limit=1500, seed=0)
    meta["seconds"] = time.perf_counter() - start
    model.eval()
    return model, meta


@pytest.fixture(scope="session")
def random_extractor():
    """Untrained extractor whose batch-norm statistics are fitted to toy
    records, so activations are of order one."""
    from ecgsynth.metrics.inception import Inception1d
    from ecgsynth.toy import synth_toy_dataset
    torch.manual_seed(0)
    model = Inception1d()
    for m in model.modules():
        if isinstance(m, torch.nn.BatchNorm1d):
            m.momentum = None  # cumulative average
    x = torch.from_numpy(synth_toy_dataset(64, seed=99).signals)
    model.train()
    with torch.no_grad():
        for i in range(0, 64, 16):
            model(x[i:i + 16])
    return model.eval()
