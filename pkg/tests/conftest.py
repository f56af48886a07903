import os

import numpy as np
import pytest
import torch

os.environ.setdefault("KSVQE_OUT", "/tmp/ksvqe-test-out")
torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """A 6-reference corpus, shared by the CLI and trainer tests."""
    from ksvqe.worksim import CorpusConfig, generate_corpus

    out = tmp_path_factory.mktemp("corpus")
    generate_corpus(CorpusConfig(n_refs=6, seed=3), out)
    return out


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
