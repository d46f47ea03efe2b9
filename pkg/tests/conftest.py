import numpy as np
import pytest

from ssvif.imageio import ImagePair
from ssvif.synthgen import SceneSpec, generate

from helpers import ACCEPTANCE_RESULTS


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_RESULTS:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE_RESULTS):
            terminalreporter.write_line(ACCEPTANCE_RESULTS[key])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_pairs(count, size=32, seed=0, labels=False):
    r = np.random.default_rng(seed)
    pairs = []
    for i in range(count):
        vis = r.uniform(0, 1, (3, size, size)).astype(np.float32)
        ir = np.repeat(r.uniform(0, 1, (1, size, size)), 3, axis=0).astype(np.float32)
        label = r.integers(0, 3, (size, size)) if labels else None
        pairs.append(ImagePair(vis=vis, ir=ir, label=label, id=f"{i:05d}"))
    return pairs


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """20 synthetic 32x32 scenes with 3 classes."""
    root = tmp_path_factory.mktemp("small")
    generate(SceneSpec(width=32, height=32, n_classes=3, seed=3), 20, root)
    return root
