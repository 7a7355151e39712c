import numpy as np
import pytest
import torch

from emodan.data import generate_synthetic_corpus, template_shape


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
    np.random.seed(0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def face():
    """Frontal 68-point template at 224 px."""
    return template_shape(224)


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    return generate_synthetic_corpus(28, seed=3, scheme="seven", out_dir=out, size=64)


def random_shape(rng, spread=30.0):
    return template_shape(224) + rng.normal(0, spread / 10, size=(68, 2))


def pytest_terminal_summary(terminalreporter):
    import test_acceptance

    if test_acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in test_acceptance.RESULTS:
            terminalreporter.write_line(line)
