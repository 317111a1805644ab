import numpy as np
import pytest
from hypothesis import settings

from siamav.config import tiny_profile
from siamav.model import ModelConfig

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny():
    return tiny_profile()


@pytest.fixture
def micro_cfg():
    """Smallest geometry that still has several tokens per modality; float64."""
    return ModelConfig(
        image_size=(32, 32), audio_size=(32, 16), patch=8, d=16, encoder_depth=2, heads=2,
        mm_depth=2, dec_depth=1, dec_width=8, dec_heads=2, dtype="f64",
    )


_ACCEPTANCE = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[_ACCEPTANCE] = {}


@pytest.fixture
def acceptance_results(request):
    return request.config.stash[_ACCEPTANCE]


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash.get(_ACCEPTANCE, {})
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
