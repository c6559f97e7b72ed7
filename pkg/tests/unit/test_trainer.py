"""
Unit tests for vclab/trainer.py — configs, network sets, single steps, determinism and resume.
"""

import numpy as np
import pytest

from vclab.autodiff import Tensor
from vclab.formatters import read_csv
from vclab.nets import Classifier
from vclab.objectives import Formulation
from vclab.trainer import (
    TINY_ITERATIONS,
    TrainingData,
    TrainingError,
    build_nets,
    checkpoint_path,
    clone_state,
    config_from_mapping,
    default_config,
    domain_stats_from_metadata,
    init_state,
    load_config,
    load_state,
    objective_values,
    train,
    train_step,
    update_critics,
    update_generators,
)

FORMULATIONS = [f.value for f in Formulation]


def _batch(state, config, corpus):
    return TrainingData.from_corpus(corpus).sample(config, state.rng)


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

def test_default_schedule():
    c = default_config("c-stargan")
    assert (c.alpha_g, c.alpha_dc, c.iterations) == (5e-4, 2e-6, 700_000)
    w = default_config("w-stargan")
    assert (w.alpha_dc, w.weights.lambda_gp) == (5e-6, 10.0)
    assert default_config("a-stargan1", "tiny").iterations == TINY_ITERATIONS


def test_config_validation():
    with pytest.raises(ValueError):
        default_config("a-stargan1", batch_size=1)
    with pytest.raises(ValueError):
        default_config("a-stargan1", segment_frames=12)
    with pytest.raises(ValueError, match="cyclegan is pairwise"):
        default_config("cyclegan")
    with pytest.raises(ValueError):
        default_config("cyclegan", source_domain=1, target_domain=1)


def test_config_from_mapping_merges_weights():
    config = config_from_mapping({"weights": {"lambda_id": 0.0}, "batch_size": 8}, "w-stargan", seed=None)
    assert config.weights.lambda_id == 0.0
    assert config.weights.lambda_gp == 10.0
    assert config.batch_size == 8
    assert config.seed == 0


def test_config_unknown_keys():
    with pytest.raises(ValueError, match="Unknown config key"):
        config_from_mapping({"learning_rate": 1.0}, "a-stargan1")
    with pytest.raises(ValueError, match="Unknown loss weight"):
        config_from_mapping({"weights": {"lambda_foo": 1.0}}, "a-stargan1")


def test_load_config_file(tmp_path):
    path = tmp_path / "cfg.yaml"
    path.write_text("formulation: a-stargan2\npreset: tiny\niterations: 7\n")
    config = load_config(path, None, seed=3)
    assert config.formulation is Formulation.A_STARGAN2
    assert (config.preset, config.iterations, config.seed) == ("tiny", 7, 3)


def test_load_config_missing_file(tmp_path):
    with pytest.raises(ValueError, match="not found"):
        load_config(tmp_path / "nope.yaml", "a-stargan1")


def test_config_to_dict_round_trip(make_config):
    config = make_config("w-stargan")
    raw = config.to_dict()
    again = config_from_mapping({k: v for k, v in raw.items() if k != "formulation"}, raw["formulation"])
    assert again == config


# ---------------------------------------------------------------------------
# Networks and batches
# ---------------------------------------------------------------------------

@pytest.mark.parametrize(
    "formulation, names",
    [
        ("cyclegan", {"generator", "inverse", "disc_x", "disc_y"}),
        ("c-stargan", {"generator", "discriminator", "classifier"}),
        ("w-stargan", {"generator", "critic"}),
        ("a-stargan1", {"generator", "classifier"}),
        ("a-stargan2", {"generator", "classifier"}),
    ],
)
def test_build_nets_per_formulation(make_config, formulation, names):
    assert set(build_nets(make_config(formulation), 4, 3, np.random.default_rng(0))) == names


def test_augmented_classifier_class_counts(make_config, rng):
    x = np.zeros((1, 4, 16))
    for formulation, classes in (("a-stargan1", 6), ("a-stargan2", 4)):
        clf = build_nets(make_config(formulation), 4, 3, rng)["classifier"]
        assert isinstance(clf, Classifier)
        assert clf.eval()(Tensor(x)).log_probs.shape == (1, classes)


def test_sample_shapes(make_config, toy_corpus):
    config = make_config("a-stargan1")
    batch = TrainingData.from_corpus(toy_corpus).sample(config, np.random.default_rng(0))
    assert batch.x.shape == batch.y.shape == (4, 8, 16)
    batch.validate(3)


def test_cyclegan_batches_use_the_pair(make_config, toy_corpus):
    config = make_config("cyclegan", source_domain=2, target_domain=0)
    batch = TrainingData.from_corpus(toy_corpus).sample(config, np.random.default_rng(0))
    assert set(batch.source) == {2}
    assert set(batch.y_labels) == {0}


# ---------------------------------------------------------------------------
# Single steps
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("formulation", FORMULATIONS)
def test_train_step_records_finite_losses(make_config, small_corpus, formulation):
    config = make_config(formulation)
    state = init_state(config, small_corpus.n_dims, small_corpus.n_domains)
    losses = train_step(state, config, _batch(state, config, small_corpus))
    assert state.step == 1
    assert "i_g" in losses
    assert all(np.isfinite(v) for v in losses.values())
    assert all(len(v) == 1 for v in state.history.values())


@pytest.mark.parametrize("formulation", ["c-stargan", "a-stargan1"])
def test_critic_update_descends(make_config, small_corpus, formulation):
    config = make_config(formulation, alpha_dc=1e-3)
    state = init_state(config, small_corpus.n_dims, small_corpus.n_domains)
    batch = _batch(state, config, small_corpus)
    before = objective_values(state, config, batch, "critic")
    update_critics(state, config, batch)
    assert objective_values(state, config, batch, "critic") < before


def test_generator_update_descends(make_config, small_corpus):
    config = make_config("a-stargan2", alpha_g=1e-3)
    state = init_state(config, small_corpus.n_dims, small_corpus.n_domains)
    batch = _batch(state, config, small_corpus)
    before = objective_values(state, config, batch, "generator")
    update_generators(state, config, batch)
    assert objective_values(state, config, batch, "generator") < before


def test_critic_update_leaves_generator_untouched(make_config, small_corpus):
    config = make_config("c-stargan")
    state = init_state(config, small_corpus.n_dims, small_corpus.n_domains)
    before = [p.values.copy() for p in state.nets["generator"].parameters()]
    update_critics(state, config, _batch(state, config, small_corpus))
    for old, p in zip(before, state.nets["generator"].parameters()):
        np.testing.assert_array_equal(old, p.values)


def test_non_finite_batch_names_the_term(make_config, small_corpus):
    config = make_config("a-stargan1")
    state = init_state(config, small_corpus.n_dims, small_corpus.n_domains)
    batch = _batch(state, config, small_corpus)
    batch.x[0, 0, 0] = np.nan
    with pytest.raises(TrainingError, match="Loss term 'generator'"):
        update_critics(state, config, batch)


def test_clone_state_is_independent(make_config, small_corpus):
    config = make_config("a-stargan2")
    state = init_state(config, small_corpus.n_dims, small_corpus.n_domains)
    twin = clone_state(state)
    train_step(state, config, _batch(state, config, small_corpus))
    assert twin.step == 0
    assert not np.allclose(
        twin.nets["generator"].parameters()[0].values, state.nets["generator"].parameters()[0].values
    )


# ---------------------------------------------------------------------------
# Runs
# ---------------------------------------------------------------------------

def test_training_is_deterministic(make_config, small_corpus):
    config = make_config("w-stargan", iterations=3)
    first = train(small_corpus, config)
    second = train(small_corpus, config)
    assert first.history == second.history


def test_different_seeds_differ(make_config, small_corpus):
    a = train(small_corpus, make_config("a-stargan1", seed=0))
    b = train(small_corpus, make_config("a-stargan1", seed=1))
    assert a.history["i_g"] != b.history["i_g"]


def test_zero_iterations_writes_initial_checkpoint(make_config, small_corpus, tmp_path):
    state = train(small_corpus, make_config("a-stargan1", iterations=0), tmp_path)
    assert state.step == 0
    assert checkpoint_path(tmp_path, 0).exists()
    assert read_csv(tmp_path / "losses.csv") == []


def test_checkpoint_interval(make_config, small_corpus, tmp_path):
    train(small_corpus, make_config("a-stargan2", iterations=4, checkpoint_interval=2), tmp_path)
    written = sorted(p.name for p in (tmp_path / "checkpoints").iterdir())
    assert written == ["step_00000002.vcck", "step_00000004.vcck"]


def test_loss_csv_is_long_format(make_config, small_corpus, tmp_path):
    state = train(small_corpus, make_config("c-stargan", iterations=2), tmp_path)
    rows = read_csv(tmp_path / "losses.csv")
    assert len(rows) == 2 * len(state.history)
    assert {r["step"] for r in rows} == {"1", "2"}
    assert {"i_g", "i_d", "i_c", "adv_d", "cls_c", "cyc", "id"} <= {r["term"] for r in rows}


def test_resume_matches_uninterrupted_run(make_config, small_corpus, tmp_path):
    straight = train(small_corpus, make_config("a-stargan2", iterations=4))

    train(small_corpus, make_config("a-stargan2", iterations=2), tmp_path / "first")
    state, config, meta = load_state(checkpoint_path(tmp_path / "first", 2), iterations=4)
    assert (state.step, config.iterations) == (2, 4)
    resumed = train(small_corpus, config, tmp_path / "second", state=state)

    assert resumed.step == 4
    for term, values in straight.history.items():
        np.testing.assert_allclose(resumed.history[term], values, rtol=1e-10)
    assert len(domain_stats_from_metadata(meta)) == 2


def test_resume_rejects_architecture_change(make_config, small_corpus, tmp_path):
    train(small_corpus, make_config("a-stargan1", iterations=1), tmp_path)
    with pytest.raises(ValueError, match="Cannot change"):
        load_state(checkpoint_path(tmp_path, 1), preset="full")
