import numpy as np
import pytest

from moofuse.data import SyntheticSpec, generate
from moofuse.model import ModelSpec, init_params
from moofuse.numerics import Rng


def central_difference(f, x, h=1e-5):
    """Central finite differences of scalar ``f`` w.r.t. every entry of ``x`` (in place)."""
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        grad[i] = (fp - fm) / (2 * h)
    return grad


def rel_error(a, b, floor=1e-5):
    """Coordinate-wise relative error; below ``floor`` in magnitude it becomes absolute/floor.

    Central differences at h=1e-5 in float64 carry ~1e-11 of rounding noise, so
    coordinates smaller than the floor are held to an absolute 1e-10 instead.
    """
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


@pytest.fixture
def small_spec():
    return ModelSpec([4, 3], num_classes=3, hidden_width=5, backbone_depth=2)


@pytest.fixture
def small_params(small_spec):
    return init_params(small_spec, Rng(7))


@pytest.fixture(scope="session")
def small_dataset():
    spec = SyntheticSpec(num_classes=3, modality_dims=[6, 5], subjects_per_class=[5, 4, 4],
                         segments_per_subject=[6, 4], missing_rate=[0.0, 0.2], seed=11)
    return generate(spec)


_ACCEPTANCE = []


@pytest.fixture
def report_criterion():
    """Print and keep one PASS/FAIL line per acceptance criterion."""
    def report(number, passed, detail):
        line = f"ACCEPTANCE {number} {'PASS' if passed else 'FAIL'}: {detail}"
        print(line)
        _ACCEPTANCE.append(line)
        return passed
    return report


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE):
            terminalreporter.write_line(line)
