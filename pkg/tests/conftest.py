import pytest

from minibert.data import load_corpus
from minibert.fixtures import fixture_path
from minibert.tokenizer import WordPieceTokenizer, load_vocab


@pytest.fixture(scope="session")
def vocab():
    return load_vocab(fixture_path("vocab.txt"))


@pytest.fixture(scope="session")
def tok(vocab):
    return WordPieceTokenizer(vocab)


@pytest.fixture(scope="session")
def docs(tok):
    return load_corpus(fixture_path("toy_corpus.txt"), tok)
