import pytest
import torch

import phed  # noqa: F401  (sets float64 default)
from phed.data import SyntheticSpec, generate_synthetic_corpus
from phed.model import ModelConfig, PhedModel, make_batch
from phed.numerics import RngState


@pytest.fixture(autouse=True)
def _float64():
    torch.set_default_dtype(torch.float64)
    yield


@pytest.fixture(scope="session")
def small_spec():
    return SyntheticSpec(n_pairs=200, seed=3)


@pytest.fixture(scope="session")
def small_corpus(small_spec):
    return generate_synthetic_corpus(small_spec)


@pytest.fixture
def vocab(small_spec):
    return small_spec.vocabulary()


def tiny_model(vocab_size, hidden=16, seed=0, dropout=0.0, **kw):
    cfg = ModelConfig(vocab_size=vocab_size, hidden=hidden, num_heads=2, d_z=4, dropout=dropout, **kw)
    return PhedModel(cfg, RngState(seed))


@pytest.fixture
def model(vocab):
    return tiny_model(len(vocab))


@pytest.fixture
def batch(small_corpus, vocab):
    return make_batch(small_corpus.train[:2], vocab)


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[n].line())
