import numpy as np
import pytest

from drdl.data import LabelSpaces
from drdl.synth import SynthConfig, generate


def numeric_grad(f, arr, eps=1e-5):
    """Central differences of scalar ``f()`` w.r.t. every entry of ``arr`` (mutated in place)."""
    out = np.zeros_like(arr, dtype=np.float64)
    flat = arr.reshape(-1)
    gflat = out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f()
        flat[i] = orig - eps
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * eps)
    return out


def max_rel(a, b, floor=1e-8):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


@pytest.fixture(scope="session")
def tiny_domains():
    """8 ids x 2 cams x 2 images per domain, 16x8 canvas, with target query/gallery."""
    cfg = SynthConfig(num_ids=8, num_cams=2, per_camera=2, num_test_ids=4, shape=(3, 16, 8), seed=3)
    return generate(cfg)


@pytest.fixture(scope="session")
def tiny_spaces():
    return LabelSpaces(8, 2, 2)


@pytest.fixture(scope="session")
def bench_dir(tmp_path_factory):
    """The desk-scale benchmark written to disk once per session."""
    root = tmp_path_factory.mktemp("bench")
    generate(SynthConfig(seed=0), root)
    return root


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
