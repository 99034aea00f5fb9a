import warnings

import numpy as np
import pytest
import torch

from solar.synthetic import generate_synthetic_benchmark

torch.set_num_threads(1)

ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n, ok, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def bench():
    return generate_synthetic_benchmark()


@pytest.fixture(scope="session")
def small_bench():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return generate_synthetic_benchmark(n_classes=6, per_class=8, image_size=32, seed=3)
