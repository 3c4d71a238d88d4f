import numpy as np
import pytest

from m2fusion import cnn, dataset, pipeline
from m2fusion.dataset import SplitSpec


def mini_config(repeats=2, seed=0, **kw):
    """Seconds-scale settings for plumbing tests; accuracy is not the point here."""
    tc = cnn.TrainConfig(initial_lr=0.001, max_epochs=1, minibatch=16)
    base = dict(sfi_size=16, signal_hidden=8, depth_hidden=8, signal_train=tc, depth_train=tc,
                ccf_lambda=10.0, svm_epochs=200, split=SplitSpec(repeats=repeats, seed=seed))
    base.update(kw)
    return pipeline.PipelineConfig.desk(**base)


@pytest.fixture(scope="session")
def mini_synth():
    return dataset.synth_dataset(samples_per_class=25, seed=11)


@pytest.fixture(scope="session")
def mini_encoded(mini_synth):
    return pipeline.encode(mini_synth, mini_config())


@pytest.fixture
def rng():
    return np.random.default_rng(0)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
