import numpy as np
import pytest

from ppg.layout import load_dataset
from ppg.synth import SyntheticGrammar, synth_corpus


@pytest.fixture(scope="session")
def corpus_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    synth_corpus(SyntheticGrammar(), 48, seed=7, out_dir=root)
    return root


@pytest.fixture(scope="session")
def records(corpus_dir):
    return load_dataset(corpus_dir)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
