import pytest

from synth import synth_dataset

from campus.corpus import EncodedCorpus


@pytest.fixture(scope="session")
def synth_corpus():
    """The 1500-sample three-source corpus used by the heavier suites."""
    return EncodedCorpus.build(synth_dataset(1500, seed=0))


@pytest.fixture(scope="session")
def small_corpus():
    return EncodedCorpus.build(synth_dataset(90, seed=4))
