import numpy as np
import pytest
import torch

from ctxtts.evaluation.toy_corpus import ToyCorpusConfig, generate_toy_corpus


@pytest.fixture(scope="session")
def toy_manifest(tmp_path_factory):
    out = tmp_path_factory.mktemp("toy")
    return generate_toy_corpus(out, ToyCorpusConfig(seed=3, n_documents=4, sentences_per_doc=5,
                                                    test_documents=1))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)


def pytest_terminal_summary(terminalreporter):
    import sys

    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
