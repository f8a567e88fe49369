import numpy as np
import pytest

from ofa.tasks import corpus_texts, synth_grounding_dataset
from ofa.vocab import build_vocab


@pytest.fixture(scope="session")
def synth_records():
    return synth_grounding_dataset(12, 64, np.random.default_rng(0))


@pytest.fixture(scope="session")
def vocab(synth_records):
    return build_vocab(corpus_texts(synth_records), target_subwords=300, num_loc_bins=1000, codebook_size=32)


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long end-to-end runs")


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        terminalreporter.write_line(results[n])
