"""
Unit tests for vclab/features.py — statistics, normalization, VCF1 files, manifests and the toy corpus.
"""

import numpy as np
import pytest
import yaml

from vclab.features import (
    FEATURE_MAGIC,
    CorpusError,
    DomainCorpus,
    DomainStats,
    FeatureError,
    FeatureSequence,
    Utterance,
    compute_stats,
    convert_f0,
    convert_postprocess,
    crop,
    decode_features,
    denormalize,
    domain_means,
    encode_features,
    load_corpus,
    manifest_domain,
    nearest_mean_accuracy,
    normalize,
    pad_to_multiple,
    read_features,
    synth_toy_corpus,
    write_corpus,
    write_features,
)


def _seq(rng, q=3, n=10, f0=False):
    data = rng.standard_normal((q, n))
    track = np.where(np.arange(n) % 3 == 0, 0.0, rng.uniform(80, 200, n)) if f0 else None
    return FeatureSequence(data=data, f0=track)


# ---------------------------------------------------------------------------
# FeatureSequence
# ---------------------------------------------------------------------------

def test_sequence_rejects_wrong_rank():
    with pytest.raises(FeatureError):
        FeatureSequence(data=np.zeros(5))


def test_sequence_voiced_from_f0():
    seq = FeatureSequence(data=np.zeros((2, 3)), f0=np.array([0.0, 100.0, 120.0]))
    np.testing.assert_array_equal(seq.voiced, [False, True, True])


def test_sequence_rejects_inconsistent_mask():
    with pytest.raises(FeatureError):
        FeatureSequence(data=np.zeros((2, 3)), f0=np.array([0.0, 100.0, 120.0]), voiced=np.array([1, 1, 1]))


def test_sequence_rejects_negative_f0():
    with pytest.raises(FeatureError):
        FeatureSequence(data=np.zeros((2, 2)), f0=np.array([-1.0, 100.0]))


# ---------------------------------------------------------------------------
# Statistics and normalization
# ---------------------------------------------------------------------------

def test_stats_use_voiced_frames_only():
    data = np.array([[1.0, 3.0, 100.0], [2.0, 4.0, -50.0]])
    seq = FeatureSequence(data=data, voiced=np.array([True, True, False]))
    stats = compute_stats([seq])
    np.testing.assert_allclose(stats.psi, [2.0, 3.0])
    np.testing.assert_allclose(stats.zeta, [1.0, 1.0])


def test_stats_zero_variance_rejected():
    with pytest.raises(CorpusError, match="q=2"):
        compute_stats([FeatureSequence(data=np.array([[1.0, 2.0], [5.0, 5.0]]))])


def test_stats_too_few_frames():
    with pytest.raises(CorpusError):
        compute_stats([FeatureSequence(data=np.ones((2, 1)))])


def test_stats_log_f0(rng):
    seq = _seq(rng, f0=True)
    stats = compute_stats([seq])
    voiced = np.log(seq.f0[seq.f0 > 0])
    assert stats.mu_logf0 == pytest.approx(voiced.mean())
    assert stats.sigma_logf0 == pytest.approx(voiced.std())


def test_normalize_denormalize_inverse(rng):
    seq = _seq(rng)
    stats = compute_stats([seq])
    z = normalize(seq, stats)
    np.testing.assert_allclose(z.data.mean(axis=1), 0.0, atol=1e-12)
    np.testing.assert_allclose(z.data.std(axis=1), 1.0)
    np.testing.assert_allclose(denormalize(z, stats).data, seq.data)


def test_postprocess_matches_target_moments(rng):
    target = DomainStats(psi=np.array([1.0, -2.0, 0.5]), zeta=np.array([0.5, 2.0, 1.0]))
    out = convert_postprocess(_seq(rng), target)
    np.testing.assert_allclose(out.data.mean(axis=1), target.psi, atol=1e-12)
    np.testing.assert_allclose(out.data.std(axis=1), target.zeta)


def test_postprocess_skips_constant_sequence():
    seq = FeatureSequence(data=np.ones((2, 4)))
    target = DomainStats(psi=np.zeros(2), zeta=np.ones(2))
    assert convert_postprocess(seq, target) is seq


def test_convert_f0_maps_log_moments():
    src = DomainStats(psi=np.zeros(1), zeta=np.ones(1), mu_logf0=np.log(100.0), sigma_logf0=0.2)
    tgt = DomainStats(psi=np.zeros(1), zeta=np.ones(1), mu_logf0=np.log(200.0), sigma_logf0=0.1)
    out = convert_f0(np.array([0.0, 100.0, 100.0 * np.exp(0.2)]), src, tgt)
    np.testing.assert_allclose(out, [0.0, 200.0, 200.0 * np.exp(0.1)])


def test_convert_f0_needs_stats():
    plain = DomainStats(psi=np.zeros(1), zeta=np.ones(1))
    with pytest.raises(CorpusError):
        convert_f0(np.array([100.0]), plain, plain)


# ---------------------------------------------------------------------------
# Padding
# ---------------------------------------------------------------------------

def test_pad_replicates_last_frame_and_crop_restores(rng):
    seq = _seq(rng, n=10, f0=True)
    padded, n = pad_to_multiple(seq, 4)
    assert (padded.n_frames, n) == (12, 10)
    np.testing.assert_array_equal(padded.data[:, 10], seq.data[:, 9])
    np.testing.assert_array_equal(padded.f0[10:], seq.f0[9])
    np.testing.assert_array_equal(crop(padded, n).data, seq.data)


def test_pad_noop_on_multiple(rng):
    seq = _seq(rng, n=8)
    padded, n = pad_to_multiple(seq, 4)
    assert padded is seq and n == 8


# ---------------------------------------------------------------------------
# VCF1 files
# ---------------------------------------------------------------------------

def test_feature_file_round_trip(tmp_path, rng):
    seq = _seq(rng, f0=True)
    back = read_features(write_features(tmp_path / "a.vcf", seq))
    np.testing.assert_allclose(back.data, seq.data, rtol=1e-6)
    np.testing.assert_allclose(back.f0, seq.f0, rtol=1e-6)
    np.testing.assert_array_equal(back.voiced, seq.voiced)


def test_feature_file_layout(rng):
    blob = encode_features(_seq(rng, q=3, n=5))
    assert blob[:4] == FEATURE_MAGIC
    assert len(blob) == 20 + 4 * 15


def test_feature_file_rejects_bad_magic(rng):
    blob = bytearray(encode_features(_seq(rng)))
    blob[:4] = b"XXXX"
    with pytest.raises(FeatureError, match="magic"):
        decode_features(bytes(blob))


def test_feature_file_rejects_truncation(rng):
    blob = encode_features(_seq(rng))
    with pytest.raises(FeatureError):
        decode_features(blob[:-3])


def test_missing_feature_file(tmp_path):
    with pytest.raises(FeatureError, match="not found"):
        read_features(tmp_path / "nope.vcf")


# ---------------------------------------------------------------------------
# Manifests
# ---------------------------------------------------------------------------

def test_corpus_round_trip(tmp_path, small_corpus):
    manifest = write_corpus(small_corpus, tmp_path)
    loaded = load_corpus(manifest)
    assert loaded.domain_names == small_corpus.domain_names
    assert len(loaded.utterances) == len(small_corpus.utterances)
    np.testing.assert_allclose(loaded.stats[0].psi, small_corpus.stats[0].psi, rtol=1e-5)


def test_manifest_missing(tmp_path):
    with pytest.raises(CorpusError, match="Manifest not found"):
        load_corpus(tmp_path / "manifest.yaml")


def test_manifest_unknown_domain(tmp_path, rng):
    write_features(tmp_path / "a.vcf", _seq(rng))
    manifest = {"domains": ["x"], "utterances": [{"domain": "y", "path": "a.vcf"}]}
    (tmp_path / "m.yaml").write_text(yaml.safe_dump(manifest))
    with pytest.raises(CorpusError, match="unknown domain"):
        load_corpus(tmp_path / "m.yaml")


def test_domain_without_training_data(rng):
    corpus = DomainCorpus(
        domain_names=["a", "b"],
        utterances=[Utterance(0, "u0", _seq(rng)), Utterance(1, "u1", _seq(rng), split="test")],
    )
    with pytest.raises(CorpusError, match="'b' has no training utterances"):
        corpus.compute_all_stats()


def test_domain_index_by_name_and_number(small_corpus):
    assert small_corpus.domain_index("d2") == 1
    assert small_corpus.domain_index(1) == 0
    with pytest.raises(CorpusError):
        small_corpus.domain_index(3)


def test_manifest_domain_lookup(tmp_path, small_corpus):
    manifest = write_corpus(small_corpus, tmp_path / "corpus")
    utt = small_corpus.utterances[-1]
    name = small_corpus.domain_names[utt.domain]
    listed = tmp_path / "corpus" / name / f"{utt.utt_id}.vcf"
    assert manifest_domain(listed) == name
    assert manifest_domain(listed, manifest) == name
    assert manifest_domain(tmp_path / "elsewhere.vcf") is None
    with pytest.raises(CorpusError):
        manifest_domain(listed, tmp_path / "missing.yaml")


# ---------------------------------------------------------------------------
# Toy corpus
# ---------------------------------------------------------------------------

def test_toy_corpus_shape(toy_corpus):
    assert toy_corpus.n_domains == 3
    assert toy_corpus.n_dims == 8
    assert len(toy_corpus.split("train", 0)) == 6
    assert len(toy_corpus.split("test", 2)) == 2
    assert all(u.features.n_frames == 40 for u in toy_corpus.utterances)


def test_toy_corpus_is_deterministic():
    a = synth_toy_corpus(2, 4, 2, 16, seed=5)
    b = synth_toy_corpus(2, 4, 2, 16, seed=5)
    np.testing.assert_array_equal(a.utterances[3].features.data, b.utterances[3].features.data)


def test_toy_domains_are_separable(toy_corpus):
    means = domain_means(3, 8, np.random.default_rng(0))
    frames = np.concatenate([u.features.data for u in toy_corpus.split("train")], axis=1)
    labels = np.concatenate([[u.domain] * u.features.n_frames for u in toy_corpus.split("train")])
    assert nearest_mean_accuracy(frames, labels, means) > 0.9


def test_toy_means_are_distinct():
    means = domain_means(4, 3, np.random.default_rng(1))
    np.testing.assert_array_equal(means[0], [2.0, 2.0, 2.0])
    np.testing.assert_array_equal(means[1], [-2.0, -2.0, -2.0])
    assert len({tuple(m) for m in means}) == 4


@pytest.mark.parametrize("n_domains,n_dims", [(5, 2), (3, 1), (4, 2)])
def test_toy_means_beyond_sign_patterns(n_domains, n_dims):
    means = domain_means(n_domains, n_dims, np.random.default_rng(0))
    assert means.shape == (n_domains, n_dims)
    assert len({tuple(m) for m in means}) == n_domains


def test_toy_corpus_more_domains_than_sign_patterns():
    corpus = synth_toy_corpus(n_domains=5, n_dims=2, utts_per_domain=1, n_frames=8)
    assert corpus.n_domains == 5
    assert len(corpus.utterances) == 5


def test_toy_needs_two_domains():
    with pytest.raises(CorpusError):
        synth_toy_corpus(1, 4, 2, 16)
