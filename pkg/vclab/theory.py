"""
Tabular oracle for the augmented-classifier game on a finite support.

With p_d(y|k), p_G(y|k) given as K×S tables and a prior p(k):

  • optimal_classifier       — closed-form minimiser of the 2K-way classifier loss
  • classifier_loss          — that loss for any 2K×S classifier table
  • generator_loss_at_optimum — E_k KL(p_G(·|k) ‖ p_d(·|k)), the generator loss against the optimum
  • solve_tabular_game       — exact classifier best response + softmax-gradient generator steps
  • verify                   — the full battery run by ``vclab verify-theory``

Class layout of 2K-way tables: rows 0..K−1 are "real, domain k", rows K..2K−1
"fake, domain k". (K+1)-way tables put the merged fake class in row K.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import rel_entr, softmax, xlogy

ROW_TOL = 1e-12
BEST_RESPONSE_TOL = 1e-9
SOLVERS = ("a-stargan1", "a-stargan2", "c-stargan-adv-only")
CHANCE_BAND = (0.45, 0.55)


# ---------------------------------------------------------------------------
# Types
# ---------------------------------------------------------------------------


@dataclass
class TabularGame:
    p_d: np.ndarray
    p_g: np.ndarray
    prior: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.p_d = np.asarray(self.p_d, dtype=np.float64)
        self.p_g = np.asarray(self.p_g, dtype=np.float64)
        if self.p_d.ndim != 2 or self.p_d.shape != self.p_g.shape:
            raise ValueError(f"p_d {self.p_d.shape} and p_G {self.p_g.shape} must be equal K×S tables")
        k = self.p_d.shape[0]
        self.prior = np.full(k, 1.0 / k) if self.prior is None else np.asarray(self.prior, dtype=np.float64)
        for name, table in (("p_d", self.p_d), ("p_G", self.p_g)):
            if (table < 0).any():
                raise ValueError(f"{name} has negative entries")
            if np.abs(table.sum(axis=1) - 1.0).max() > ROW_TOL:
                raise ValueError(f"{name} rows must sum to 1")
        if self.prior.shape != (k,) or (self.prior < 0).any() or abs(self.prior.sum() - 1.0) > ROW_TOL:
            raise ValueError("prior must be a distribution over the K domains")

    @property
    def n_domains(self) -> int:
        return self.p_d.shape[0]

    @property
    def support(self) -> int:
        return self.p_d.shape[1]

    def with_generator(self, p_g: np.ndarray) -> TabularGame:
        return TabularGame(self.p_d, p_g, self.prior)


@dataclass
class TabularClassifier:
    """L×S table of p_A(class | y); every column is a distribution."""

    probs: np.ndarray

    def __post_init__(self) -> None:
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if (self.probs < 0).any() or np.abs(self.probs.sum(axis=0) - 1.0).max() > ROW_TOL:
            raise ValueError("Classifier columns must be distributions")


def random_game(n_domains: int, support: int, rng: np.random.Generator, concentration: float = 2.0) -> TabularGame:
    """Dirichlet rows for both p_d and p_G (full support almost surely)."""
    alpha = np.full(support, concentration)
    p_d = rng.dirichlet(alpha, size=n_domains)
    p_g = rng.dirichlet(alpha, size=n_domains)
    return TabularGame(p_d / p_d.sum(axis=1, keepdims=True), p_g / p_g.sum(axis=1, keepdims=True))


# ---------------------------------------------------------------------------
# Closed forms
# ---------------------------------------------------------------------------


def _real_fake_mass(game: TabularGame) -> tuple[np.ndarray, np.ndarray]:
    prior = game.prior[:, None]
    return prior * game.p_d, prior * game.p_g


def optimal_classifier(game: TabularGame) -> TabularClassifier:
    """p_A*(k|y) = p(k)p_d(y|k)/γ(y), p_A*(K+k|y) = p(k)p_G(y|k)/γ(y).

    γ(y) sums all 2K numerators; columns with γ(y) = 0 are uniform.
    """
    real, fake = _real_fake_mass(game)
    numer = np.concatenate([real, fake], axis=0)
    gamma = numer.sum(axis=0)
    probs = np.full_like(numer, 1.0 / numer.shape[0])
    mass = gamma > 0
    probs[:, mass] = numer[:, mass] / gamma[mass]
    return TabularClassifier(probs)


def optimal_merged_classifier(game: TabularGame) -> TabularClassifier:
    """(K+1)-way best response: p(k)p_d(y|k)/γ(y) for k < K, Σ_k p(k)p_G(y|k)/γ(y) for the fake class."""
    real, fake = _real_fake_mass(game)
    numer = np.concatenate([real, fake.sum(axis=0, keepdims=True)], axis=0)
    gamma = numer.sum(axis=0)
    probs = np.full_like(numer, 1.0 / numer.shape[0])
    mass = gamma > 0
    probs[:, mass] = numer[:, mass] / gamma[mass]
    return TabularClassifier(probs)


def optimal_discriminator(game: TabularGame) -> np.ndarray:
    """Conditional D*(y, k) = p_d / (p_d + p_G); 1/2 where both vanish."""
    total = game.p_d + game.p_g
    return np.divide(game.p_d, total, out=np.full_like(total, 0.5), where=total > 0)


def classifier_loss(game: TabularGame, classifier: TabularClassifier | np.ndarray) -> float | np.ndarray:
    """−Σ_k p(k) [E_{p_d(·|k)} log A(k|y) + E_{p_G(·|k)} log A(K+k|y)].

    Accepts one 2K×S table or a stack (..., 2K, S) and returns matching losses.
    """
    probs = classifier.probs if isinstance(classifier, TabularClassifier) else np.asarray(classifier)
    k = game.n_domains
    real, fake = _real_fake_mass(game)
    with np.errstate(divide="ignore"):
        total = -(xlogy(real, probs[..., :k, :]).sum(axis=(-2, -1)) + xlogy(fake, probs[..., k:, :]).sum(axis=(-2, -1)))
    return float(total) if np.ndim(total) == 0 else total


def tabular_generator_loss(game: TabularGame, classifier: TabularClassifier) -> float:
    """Σ_k p(k) E_{p_G(·|k)}[−log A(k|y) + log A(K+k|y)]; +∞ when p_G charges a point A calls impossible."""
    k = game.n_domains
    _, fake = _real_fake_mass(game)
    with np.errstate(divide="ignore"):
        as_real = xlogy(fake, classifier.probs[:k]).sum()
        as_fake = xlogy(fake, classifier.probs[k:]).sum()
    if np.isinf(as_real):
        return float("inf")
    return float(-as_real + as_fake)


def per_domain_kl(game: TabularGame) -> np.ndarray:
    return rel_entr(game.p_g, game.p_d).sum(axis=1)


def generator_loss_at_optimum(game: TabularGame) -> float:
    """E_k KL(p_G(·|k) ‖ p_d(·|k)); +∞ unless p_G ≪ p_d."""
    return float(game.prior @ per_domain_kl(game))


@dataclass
class BestResponseCheck:
    is_best: bool
    gap: float


def classifier_best_response_check(game: TabularGame, candidate: TabularClassifier) -> BestResponseCheck:
    """gap = L(candidate) − L(optimum); is_best iff gap ≤ 1e-9."""
    gap = classifier_loss(game, candidate) - classifier_loss(game, optimal_classifier(game))
    return BestResponseCheck(is_best=bool(gap <= BEST_RESPONSE_TOL), gap=float(gap))


def perturbed_classifiers(
    classifier: TabularClassifier, n: int, rng: np.random.Generator, max_scale: float = 1.0
) -> np.ndarray:
    """n random column-wise softmax perturbations of ``classifier`` → (n, L, S)."""
    logits = np.log(np.maximum(classifier.probs, 1e-300))
    scales = rng.uniform(0.0, max_scale, size=(n, 1, 1))
    noisy = logits[None] + scales * rng.standard_normal((n,) + logits.shape)
    return softmax(noisy, axis=1)


def real_probability(game: TabularGame, classifier: TabularClassifier) -> float:
    """Mean total real-class mass the classifier assigns to generated samples."""
    k = game.n_domains
    real_mass = classifier.probs[:k].sum(axis=0)
    _, fake = _real_fake_mass(game)
    return float((fake * real_mass[None, :]).sum())


# ---------------------------------------------------------------------------
# Dynamics
# ---------------------------------------------------------------------------


@dataclass
class TabularTrajectory:
    formulation: str
    kl: np.ndarray
    per_domain: np.ndarray
    final: TabularGame
    classifier: TabularClassifier | None
    diverged: bool

    @property
    def final_kl(self) -> float:
        return float(self.kl[-1])


def _unchecked(game: TabularGame, p_g: np.ndarray) -> TabularGame:
    """Same game with a new generator table, skipping row validation inside the solver loop."""
    out = object.__new__(TabularGame)
    out.p_d, out.p_g, out.prior = game.p_d, p_g, game.prior
    return out


def _step_costs(game: TabularGame, formulation: str) -> tuple[np.ndarray, TabularClassifier | None]:
    """Per-(k, y) generator cost against the exact best response of the opponent."""
    k = game.n_domains
    with np.errstate(divide="ignore", invalid="ignore"):
        if formulation == "a-stargan1":
            a = optimal_classifier(game)
            return np.log(a.probs[k:]) - np.log(a.probs[:k]), a
        if formulation == "a-stargan2":
            a = optimal_merged_classifier(game)
            return np.log(a.probs[k:k + 1]) - np.log(a.probs[:k]), a
        if formulation == "c-stargan-adv-only":
            return -np.log(optimal_discriminator(game)), None
    raise ValueError(f"Unknown tabular formulation '{formulation}'. Use one of: {SOLVERS}")


def solve_tabular_game(
    game: TabularGame,
    formulation: str = "a-stargan1",
    steps: int = 5000,
    step_size: float = 1.0,
) -> TabularTrajectory:
    """Alternate the opponent's exact best response with a generator gradient step.

    p_G(·|k) = softmax(θ_k). Each step descends the generator loss against the
    fixed best response; each domain's gradient is divided by p(k). Records
    E_k KL(p_G‖p_d) before the first step and after every step.
    """
    if formulation not in SOLVERS:
        raise ValueError(f"Unknown tabular formulation '{formulation}'. Use one of: {SOLVERS}")
    if (game.p_g <= 0).any():
        raise ValueError("solve_tabular_game needs p_G with full support")
    theta = np.log(game.p_g)
    current = game
    kl = np.empty(steps + 1)
    per_domain = np.empty((steps + 1, game.n_domains))
    per_domain[0] = per_domain_kl(current)
    kl[0] = game.prior @ per_domain[0]
    classifier = None
    rises = 0
    for step in range(1, steps + 1):
        cost, classifier = _step_costs(current, formulation)
        p = current.p_g
        centered = cost - np.sum(p * cost, axis=1, keepdims=True)
        theta = theta - step_size * p * centered
        p_new = softmax(theta, axis=1)
        current = _unchecked(game, p_new)
        per_domain[step] = per_domain_kl(current)
        kl[step] = game.prior @ per_domain[step]
        rises += kl[step] > kl[step - 1]
    if formulation != "c-stargan-adv-only":
        classifier = _step_costs(current, formulation)[1]
    diverged = steps > 0 and rises > steps / 2
    return TabularTrajectory(formulation, kl, per_domain, current, classifier, bool(diverged))


# ---------------------------------------------------------------------------
# Verification battery
# ---------------------------------------------------------------------------


@dataclass
class TheoryReport:
    checks: dict[str, bool] = field(default_factory=dict)
    details: dict[str, float] = field(default_factory=dict)
    trajectories: dict[str, TabularTrajectory] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(self.checks.values())


def verify(
    n_domains: int = 3,
    support: int = 8,
    seeds: int = 20,
    steps: int = 5000,
    step_size: float = 1.0,
    kl_tol: float = 1e-3,
    optimum_games: int = 100,
    optimum_candidates: int = 1000,
    seed: int = 0,
) -> TheoryReport:
    """Closed-form optimality, the KL identity, the fixed point, and convergence on random games."""
    report = TheoryReport()
    rng = np.random.default_rng(seed)

    worst_gap = np.inf
    worst_identity = 0.0
    for _ in range(optimum_games):
        game = random_game(n_domains, support, rng)
        best = optimal_classifier(game)
        candidates = perturbed_classifiers(best, optimum_candidates, rng)
        gaps = classifier_loss(game, candidates) - classifier_loss(game, best)
        worst_gap = min(worst_gap, float(np.min(gaps)))
        identity = abs(tabular_generator_loss(game, best) - generator_loss_at_optimum(game))
        worst_identity = max(worst_identity, identity)
    report.details["min_candidate_gap"] = worst_gap
    report.details["max_kl_identity_error"] = worst_identity
    report.checks["closed_form_classifier_optimal"] = worst_gap >= -BEST_RESPONSE_TOL
    report.checks["generator_loss_equals_kl"] = worst_identity <= 1e-10

    finals = []
    fixed_worst = 0.0
    for s in range(seeds):
        game = random_game(n_domains, support, np.random.default_rng(seed + s))
        trajectory = solve_tabular_game(game, "a-stargan1", steps, step_size)
        report.trajectories[f"a-stargan1_seed{seed + s}"] = trajectory
        finals.append(trajectory.final_kl)
        at_rest = solve_tabular_game(game.with_generator(game.p_d), "a-stargan1", min(steps, 200), step_size)
        fixed_worst = max(fixed_worst, float(np.max(np.abs(at_rest.kl))))
    report.details["max_final_kl"] = float(np.max(finals)) if finals else 0.0
    report.details["max_fixed_point_kl"] = fixed_worst
    report.checks["a_stargan1_converges"] = report.details["max_final_kl"] < kl_tol
    report.checks["equilibrium_is_fixed_point"] = fixed_worst < 1e-6

    # The merged-fake game need not drive the KL to zero, but its classifier must end at chance.
    game = random_game(n_domains, support, np.random.default_rng(seed))
    merged = solve_tabular_game(game, "a-stargan2", steps, step_size)
    report.trajectories[f"a-stargan2_seed{seed}"] = merged
    report.details["a-stargan2_final_kl"] = merged.final_kl
    chance = real_probability(merged.final, merged.classifier)
    report.details["a_stargan2_real_probability"] = chance
    report.checks["a_stargan2_chance_level"] = CHANCE_BAND[0] <= chance <= CHANCE_BAND[1]

    # K = 1: merged and per-domain fake classes coincide.
    single = solve_tabular_game(random_game(1, support, np.random.default_rng(seed)), "a-stargan2", steps, step_size)
    report.trajectories["a-stargan2_single_domain"] = single
    chance = real_probability(single.final, single.classifier)
    report.details["a_stargan2_single_domain_real_probability"] = chance
    report.checks["a_stargan2_single_domain_chance_level"] = CHANCE_BAND[0] <= chance <= CHANCE_BAND[1]

    # Informational: conditional-D dynamics on the same game.
    trajectory = solve_tabular_game(game, "c-stargan-adv-only", steps, step_size)
    report.trajectories[f"c-stargan-adv-only_seed{seed}"] = trajectory
    report.details["c-stargan-adv-only_final_kl"] = trajectory.final_kl
    return report
