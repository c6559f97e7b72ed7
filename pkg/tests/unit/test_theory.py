"""
Unit tests for vclab/theory.py — closed-form optima, the KL identity and the tabular dynamics.
"""

import numpy as np
import pytest

from vclab.theory import (
    TabularClassifier,
    TabularGame,
    classifier_best_response_check,
    classifier_loss,
    generator_loss_at_optimum,
    optimal_classifier,
    optimal_discriminator,
    optimal_merged_classifier,
    perturbed_classifiers,
    random_game,
    real_probability,
    solve_tabular_game,
    tabular_generator_loss,
    verify,
)


@pytest.fixture
def game():
    return random_game(3, 8, np.random.default_rng(7))


# ---------------------------------------------------------------------------
# Game tables
# ---------------------------------------------------------------------------

def test_game_rejects_unnormalized_rows():
    with pytest.raises(ValueError):
        TabularGame(np.array([[0.5, 0.6]]), np.array([[0.5, 0.5]]))


def test_game_rejects_shape_mismatch():
    with pytest.raises(ValueError):
        TabularGame(np.full((2, 3), 1 / 3), np.full((2, 4), 0.25))


def test_game_default_prior_is_uniform(game):
    np.testing.assert_allclose(game.prior, 1 / 3)


def test_classifier_rejects_bad_columns():
    with pytest.raises(ValueError):
        TabularClassifier(np.array([[0.5, 0.2], [0.4, 0.8]]))


# ---------------------------------------------------------------------------
# Closed-form best responses
# ---------------------------------------------------------------------------

def test_optimal_classifier_is_column_stochastic(game):
    probs = optimal_classifier(game).probs
    assert probs.shape == (6, 8)
    np.testing.assert_allclose(probs.sum(axis=0), 1.0)


def test_optimal_classifier_beats_perturbations(game):
    best = optimal_classifier(game)
    candidates = perturbed_classifiers(best, 500, np.random.default_rng(1))
    gaps = classifier_loss(game, candidates) - classifier_loss(game, best)
    assert gaps.min() >= -1e-12


def test_best_response_check(game):
    best = optimal_classifier(game)
    assert classifier_best_response_check(game, best).is_best
    uniform = TabularClassifier(np.full((6, 8), 1 / 6))
    check = classifier_best_response_check(game, uniform)
    assert not check.is_best
    assert check.gap > 0


def test_merged_classifier_has_k_plus_one_classes(game):
    probs = optimal_merged_classifier(game).probs
    assert probs.shape == (4, 8)
    np.testing.assert_allclose(probs.sum(axis=0), 1.0)


def test_optimal_discriminator_half_at_equilibrium(game):
    at_rest = game.with_generator(game.p_d)
    np.testing.assert_allclose(optimal_discriminator(at_rest), 0.5)


def test_empty_support_column_is_uniform():
    p = np.array([[0.5, 0.5, 0.0]])
    probs = optimal_classifier(TabularGame(p, p)).probs
    np.testing.assert_allclose(probs[:, 2], 0.5)


def test_two_domain_two_point_optimum():
    game = TabularGame(np.eye(2), np.full((2, 2), 0.5))
    probs = optimal_classifier(game).probs
    # classes: real-1, real-2, fake-1, fake-2
    np.testing.assert_allclose(probs[:, 0], [0.5, 0.0, 0.25, 0.25], atol=1e-15)


def test_disjoint_supports_are_separated_exactly():
    game = TabularGame(np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]]))
    probs = optimal_classifier(game).probs
    assert probs[0, 0] == 1.0
    assert probs[1, 1] == 1.0


def test_optimal_classifier_is_permutation_equivariant(game):
    perm = np.random.default_rng(2).permutation(game.support)
    shuffled = TabularGame(game.p_d[:, perm], game.p_g[:, perm], game.prior)
    np.testing.assert_allclose(optimal_classifier(shuffled).probs, optimal_classifier(game).probs[:, perm], rtol=1e-13)
    np.testing.assert_allclose(optimal_merged_classifier(shuffled).probs, optimal_merged_classifier(game).probs[:, perm], rtol=1e-13)


# ---------------------------------------------------------------------------
# Generator loss against the optimal classifier
# ---------------------------------------------------------------------------

def test_generator_loss_equals_expected_kl(game):
    best = optimal_classifier(game)
    assert tabular_generator_loss(game, best) == pytest.approx(generator_loss_at_optimum(game), abs=1e-10)


def test_generator_loss_zero_at_equilibrium(game):
    at_rest = game.with_generator(game.p_d)
    assert generator_loss_at_optimum(at_rest) == pytest.approx(0.0, abs=1e-15)
    assert real_probability(at_rest, optimal_classifier(at_rest)) == pytest.approx(0.5)


def test_generator_loss_infinite_off_support():
    p_d = np.array([[1.0, 0.0]])
    p_g = np.array([[0.5, 0.5]])
    game = TabularGame(p_d, p_g)
    assert generator_loss_at_optimum(game) == float("inf")
    assert tabular_generator_loss(game, optimal_classifier(game)) == float("inf")


def test_single_domain_kl_value():
    game = TabularGame(np.array([[0.5, 0.5]]), np.array([[0.25, 0.75]]))
    expected = 0.25 * np.log(0.5) + 0.75 * np.log(1.5)
    assert generator_loss_at_optimum(game) == pytest.approx(expected, abs=1e-15)
    assert generator_loss_at_optimum(game) == pytest.approx(0.1308, abs=1e-4)


def test_skewed_prior_weights_kl():
    p_d = np.array([[0.5, 0.5], [0.5, 0.5]])
    p_g = np.array([[0.9, 0.1], [0.5, 0.5]])
    game = TabularGame(p_d, p_g, prior=np.array([0.25, 0.75]))
    kl = 0.9 * np.log(1.8) + 0.1 * np.log(0.2)
    assert generator_loss_at_optimum(game) == pytest.approx(0.25 * kl)
    assert tabular_generator_loss(game, optimal_classifier(game)) == pytest.approx(0.25 * kl)


# ---------------------------------------------------------------------------
# Dynamics
# ---------------------------------------------------------------------------

def test_a_stargan1_dynamics_converge(game):
    trajectory = solve_tabular_game(game, "a-stargan1", steps=5000)
    assert trajectory.kl[0] > 0.01
    assert trajectory.final_kl < 1e-3
    assert not trajectory.diverged
    assert trajectory.kl.shape == (5001,)
    assert trajectory.per_domain.shape == (5001, 3)


def test_equilibrium_is_fixed_point(game):
    trajectory = solve_tabular_game(game.with_generator(game.p_d), "a-stargan1", steps=100)
    assert np.abs(trajectory.kl).max() < 1e-12
    np.testing.assert_allclose(trajectory.final.p_g, game.p_d, atol=1e-12)


def test_single_domain_merged_game_reaches_chance():
    single = random_game(1, 8, np.random.default_rng(3))
    trajectory = solve_tabular_game(single, "a-stargan2", steps=5000)
    assert real_probability(trajectory.final, trajectory.classifier) == pytest.approx(0.5, abs=0.05)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_merged_game_reaches_chance_on_multi_domain_game(seed):
    game = random_game(3, 8, np.random.default_rng(seed))
    trajectory = solve_tabular_game(game, "a-stargan2", steps=5000)
    assert trajectory.classifier.probs.shape == (4, 8)
    assert 0.45 <= real_probability(trajectory.final, trajectory.classifier) <= 0.55


def test_conditional_discriminator_dynamics_run(game):
    trajectory = solve_tabular_game(game, "c-stargan-adv-only", steps=50)
    assert trajectory.classifier is None
    assert np.isfinite(trajectory.kl).all()


def test_unknown_formulation(game):
    with pytest.raises(ValueError):
        solve_tabular_game(game, "w-stargan", steps=1)


def test_solver_needs_full_support():
    p = np.array([[1.0, 0.0]])
    with pytest.raises(ValueError):
        solve_tabular_game(TabularGame(p, p), steps=1)


# ---------------------------------------------------------------------------
# Battery
# ---------------------------------------------------------------------------

def test_verify_small_battery_passes():
    report = verify(n_domains=3, support=8, seeds=2, steps=5000, optimum_games=5, optimum_candidates=50)
    assert report.passed, report.checks
    assert set(report.checks) == {
        "closed_form_classifier_optimal",
        "generator_loss_equals_kl",
        "a_stargan1_converges",
        "equilibrium_is_fixed_point",
        "a_stargan2_chance_level",
        "a_stargan2_single_domain_chance_level",
    }
    assert 0.45 <= report.details["a_stargan2_real_probability"] <= 0.55
    assert "a-stargan2_seed0" in report.trajectories
    assert "a-stargan1_seed0" in report.trajectories
