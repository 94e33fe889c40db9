import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))  # reference_disasm import

from retobf.harden import harden
from retobf.image import CorpusParams, generate_corpus
from retobf.obfuscation import obfuscate_returns

KEY = 0xA5A5


@pytest.fixture(scope="session")
def corpus():
    """A small mixed corpus: leaves, multiple register-list shapes."""
    return generate_corpus(CorpusParams(function_count=24, seed=7))


@pytest.fixture(scope="session")
def obfuscated(corpus):
    image, manifest = corpus
    return obfuscate_returns(image, manifest, KEY)


@pytest.fixture(scope="session")
def hardened(corpus):
    image, manifest = corpus
    himg, hman, pads = harden(image, manifest, KEY, kmax=3, rotate=True, seed=11)
    return himg, hman, pads


@pytest.fixture(scope="session")
def multi_epilogue_corpus():
    return generate_corpus(
        CorpusParams(function_count=18, seed=21, multi_epilogue_prob=0.5)
    )
