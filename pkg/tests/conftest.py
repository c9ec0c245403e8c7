import numpy as np
import pytest

from dualtask.data import build_vocabulary, generate_synthetic_corpus
from dualtask.encoding import EncoderConfig
from dualtask.index import build_index
from dualtask.training import TrainConfig, train

SMALL_ENCODER = dict(word_embedding_dim=8, gru_hidden_dim=8, conv_filter_widths=(2, 3),
                     conv_filters_per_width=8, common_dim=24)


@pytest.fixture(scope="session")
def corpus():
    return generate_synthetic_corpus(11, 90, 8, 12, (4, 8), captions_per_video=3)


@pytest.fixture(scope="session")
def vocab(corpus):
    return build_vocabulary(corpus.all_captions())


@pytest.fixture(scope="session")
def trained(corpus, vocab):
    enc = EncoderConfig(frame_feature_dim=12, vocab_size=vocab.size, **SMALL_ENCODER)
    return train(TrainConfig(epochs=8, lr=3e-3, seed=0), corpus, vocab, enc)


@pytest.fixture(scope="session")
def index(trained, corpus):
    return build_index(trained, corpus.videos)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
