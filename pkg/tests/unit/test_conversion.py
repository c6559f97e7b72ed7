"""
Unit tests for vclab/conversion.py — single-utterance conversion and checkpoint-driven corpora.
"""

import numpy as np
import pytest

from vclab.conversion import ConversionModel, convert_corpus, convert_utterance
from vclab.features import CorpusError, FeatureSequence
from vclab.nets import Generator
from vclab.trainer import checkpoint_path, train


@pytest.fixture
def a2_checkpoint(make_config, small_corpus, tmp_path):
    train(small_corpus, make_config("a-stargan2", iterations=1), tmp_path)
    return checkpoint_path(tmp_path, 1)


# ---------------------------------------------------------------------------
# convert_utterance
# ---------------------------------------------------------------------------

def test_output_keeps_length_and_target_moments(small_corpus):
    generator = Generator(4, 2, "1d", (4, 8, 8, 4), np.random.default_rng(0))
    utt = small_corpus.split("test", 0)[0]
    features = FeatureSequence(utt.features.data[:, :22], f0=utt.features.f0[:22])
    out = convert_utterance(generator, features, small_corpus.stats[0], small_corpus.stats[1], target=1)
    assert out.data.shape == (4, 22)
    np.testing.assert_allclose(out.data.mean(axis=1), small_corpus.stats[1].psi, atol=1e-10)
    np.testing.assert_allclose(out.data.std(axis=1), small_corpus.stats[1].zeta)
    assert out.f0 is not None and (out.f0 > 0).all()


def test_conversion_rejects_wrong_dimension(small_corpus):
    generator = Generator(8, 2, "1d", (4, 8, 8, 4), np.random.default_rng(0))
    features = small_corpus.split("test", 0)[0].features
    with pytest.raises(CorpusError):
        convert_utterance(generator, features, small_corpus.stats[0], small_corpus.stats[1], target=1)


def test_conversion_needs_a_target_label(small_corpus):
    generator = Generator(4, 2, "1d", (4, 8, 8, 4), np.random.default_rng(0))
    features = small_corpus.split("test", 0)[0].features
    with pytest.raises(ValueError):
        convert_utterance(generator, features, small_corpus.stats[0], small_corpus.stats[1], target=None)


# ---------------------------------------------------------------------------
# ConversionModel
# ---------------------------------------------------------------------------

def test_model_from_checkpoint(a2_checkpoint):
    model = ConversionModel.from_checkpoint(a2_checkpoint)
    assert model.step == 1
    assert model.domain_names == ["d1", "d2"]
    assert model.domain_index("d2") == 1
    assert model.domain_index("1") == 0
    assert model.pairs() == [(0, 1), (1, 0)]
    with pytest.raises(ValueError):
        model.domain_index(5)


def test_convert_corpus_covers_every_pair(a2_checkpoint, small_corpus):
    model = ConversionModel.from_checkpoint(a2_checkpoint)
    converted = convert_corpus(model, small_corpus)
    assert len(converted.utterances) == 2
    assert {(u.source, u.domain) for u in converted.utterances} == {(0, 1), (1, 0)}
    source = small_corpus.split("test", 0)[0]
    match = next(u for u in converted.utterances if u.source == 0)
    assert match.utt_id == source.utt_id
    assert match.features.n_frames == source.features.n_frames


def test_conversion_is_deterministic(a2_checkpoint, small_corpus):
    model = ConversionModel.from_checkpoint(a2_checkpoint)
    features = small_corpus.split("test", 1)[0].features
    np.testing.assert_array_equal(model.convert(features, 1, 0).data, model.convert(features, 1, 0).data)


def test_convert_corpus_rejects_other_domains(a2_checkpoint, toy_corpus):
    model = ConversionModel.from_checkpoint(a2_checkpoint)
    with pytest.raises(CorpusError):
        convert_corpus(model, toy_corpus)


def test_cyclegan_model_picks_direction(make_config, small_corpus, tmp_path):
    train(small_corpus, make_config("cyclegan", iterations=1), tmp_path)
    model = ConversionModel.from_checkpoint(checkpoint_path(tmp_path, 1))
    forward, label = model.generator_for(0, 1)
    backward, _ = model.generator_for(1, 0)
    assert label is None
    assert forward is model.nets["generator"]
    assert backward is model.nets["inverse"]
