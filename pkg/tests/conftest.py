import os

import pytest

from threadsum.tokenizer import Tokenizer

FIXTURES = os.path.join(os.path.dirname(__file__), "fixtures")


@pytest.fixture(scope="session")
def fixture_dir():
    return FIXTURES


@pytest.fixture(scope="session")
def tiny_tokenizer():
    return Tokenizer.load(os.path.join(FIXTURES, "tinyvocab"))
