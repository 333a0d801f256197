import numpy as np
import pytest
import torch

from spdnet.synthdata import generate_sample, identity_spec, render_sample

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def rest_sample():
    return render_sample(identity_spec(), 64, 64, sample_id="rest")


@pytest.fixture(scope="session")
def small_samples():
    return [generate_sample(11, i) for i in range(6)]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    from pathlib import Path

    results = Path(__file__).resolve().parent.parent / "acceptance_results.txt"
    if results.is_file() and results.read_text().strip():
        terminalreporter.section("acceptance criteria")
        for line in results.read_text().splitlines():
            terminalreporter.write_line(line)
