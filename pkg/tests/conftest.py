import numpy as np
import pytest
import torch

from semcom_sna.datasets import SyntheticSpec, make_synthetic
from semcom_sna.semcom import ChannelConfig, PipelineConfig, init_model, train_natural


@pytest.fixture(scope="session")
def small_split():
    return make_synthetic(SyntheticSpec(num_classes=4, samples_per_class=150, image_size=12, seed=3))


@pytest.fixture(scope="session")
def small_pipeline(small_split):
    return PipelineConfig(task="classification", d_s=32, d_c=16, encoder_arch="small_cnn", seed=0,
                          num_classes=4, image_shape=small_split.image_shape, encoder_width=16)


@pytest.fixture(scope="session")
def trained_small(small_split, small_pipeline):
    """A few epochs of natural training; good enough to be far above chance."""
    return train_natural(small_split, small_pipeline, ChannelConfig(), epochs=12, seed=0)


@pytest.fixture
def untrained_small(small_pipeline):
    from semcom_sna.semcom import ModelCheckpoint

    return ModelCheckpoint(init_model(small_pipeline), small_pipeline)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)


_ACCEPTANCE_KEY = pytest.StashKey[list]()


@pytest.fixture
def acceptance_report(request):
    """Record one pass/fail line per acceptance criterion; echoed in the terminal summary."""
    lines = request.config.stash.setdefault(_ACCEPTANCE_KEY, [])

    def record(cid, passed, detail):
        status = "SKIP" if passed is None else ("PASS" if passed else "FAIL")
        line = f"{status}  criterion {cid}: {detail}"
        lines.append(line)
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
