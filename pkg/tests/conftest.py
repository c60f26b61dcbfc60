"""Shared fixtures."""

import numpy as np
import pytest

from hushspeak.audio_io import load_manifest, load_trials
from hushspeak.encoder import init_params
from hushspeak.synthdata import CorpusSpec, build_corpus

from tests.helpers import TINY_ENCODER, speechlike


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def clip():
    return speechlike()


@pytest.fixture
def tiny_params():
    return init_params(TINY_ENCODER, n_speakers=3)


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """3 speakers x 5 one-second utterances: 3 train and 2 held out each."""
    root = tmp_path_factory.mktemp("corpus")
    manifest_path, trials_path = build_corpus(
        CorpusSpec(n_speakers=3, utterances_per_speaker=5, duration_s=1.0, seed=11), root
    )
    return root, manifest_path, trials_path


@pytest.fixture
def tiny_manifest(tiny_corpus):
    return load_manifest(tiny_corpus[1])


@pytest.fixture
def tiny_trials(tiny_corpus):
    return load_trials(tiny_corpus[2])
