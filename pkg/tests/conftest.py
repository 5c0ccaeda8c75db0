import numpy as np
import pytest

from hybridsr import model_graph as mg
from hybridsr.datasets import synthetic_samples
from hybridsr.metrics import image_to_tensor
from hybridsr.quantization import calibrate

ACCEPTANCE_RESULTS = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, ok, detail in sorted(ACCEPTANCE_RESULTS, key=lambda r: r[0]):
        status = "PASS" if ok else "FAIL"
        terminalreporter.write_line(f"[{status}] {number:>2}. {title} -- {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def lr_tensors(samples):
    return [image_to_tensor(s.lr) for s in samples]


@pytest.fixture(scope="session")
def bicubic_x2():
    return mg.make_analytic_model("bicubic", 2)


@pytest.fixture(scope="session")
def gray_samples_x2():
    return synthetic_samples(10, 48, 2, seed=5)


@pytest.fixture(scope="session")
def bicubic_setup(bicubic_x2, gray_samples_x2):
    stats = calibrate(bicubic_x2, lr_tensors(gray_samples_x2), 1.0, 0)
    return bicubic_x2, gray_samples_x2, stats
