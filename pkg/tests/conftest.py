import numpy as np
import pytest
import torch

from fusedseg.bench.synthetic import SyntheticDatasetSpec, generate_dataset

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def tiny_medical():
    """A handful of 64x64 samples from two modalities, for fast training tests."""
    specs = [
        SyntheticDatasetSpec("tiny_us", "ultrasound", "medical-dark-field", 6, "blob", seed=11),
        SyntheticDatasetSpec("tiny_ct", "ct", "medical-textured", 6, "ellipse", seed=12),
    ]
    return [s for sp in specs for s in generate_dataset(sp)]


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def pytest_terminal_summary(terminalreporter):
    from . import test_acceptance

    results = test_acceptance.RESULTS
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        ok, detail = results[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'} | {detail}")
