"""
Adversarial, classification, cycle and identity losses for the five formulations.

Every function is a pure function of network outputs (Tensors); expectations
are batch means. Probabilities entering a log are clamped to [1e-7, 1 − 1e-7]
and the number of clamped values is counted (see clamp_count()); classifier
log-probabilities are floored at log(1e-12).

  • cyclegan_adv_losses, cycle_consistency_loss, identity_mapping_loss
  • cstargan_adv_losses, domain_classification_losses
  • wstargan_losses, gradient_penalty
  • astargan1_losses, astargan2_losses
  • full_objectives — weighted sums per formulation
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
try:
    from enum import StrEnum
except ImportError:  # Python < 3.11
    from enum import Enum

    class StrEnum(str, Enum):
        __str__ = str.__str__
        __format__ = str.__format__

        @staticmethod
        def _generate_next_value_(name, start, count, last_values):
            return name.lower()
from typing import Callable, Mapping, Sequence

import numpy as np

from vclab.autodiff import (
    NumericalError,
    ShapeError,
    Tensor,
    as_tensor,
    clip,
    grad,
    l2_norm,
    log,
    mean,
    power,
    reshape,
    tabs,
    tsum,
)
from vclab.formatters import warn

PROB_EPS = 1e-7
LOG_PROB_FLOOR = math.log(1e-12)


class Formulation(StrEnum):
    CYCLEGAN = "cyclegan"
    C_STARGAN = "c-stargan"
    W_STARGAN = "w-stargan"
    A_STARGAN1 = "a-stargan1"
    A_STARGAN2 = "a-stargan2"

    @property
    def augmented(self) -> bool:
        return self in (Formulation.A_STARGAN1, Formulation.A_STARGAN2)

    @property
    def multi_domain(self) -> bool:
        return self is not Formulation.CYCLEGAN


# ---------------------------------------------------------------------------
# Weights and batches
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LossWeights:
    lambda_adv: float = 1.0
    lambda_cls: float = 1.0
    lambda_cyc: float = 1.0
    lambda_id: float = 1.0
    lambda_gp: float = 0.0
    rho: float = 1.0

    def __post_init__(self) -> None:
        for name, value in asdict(self).items():
            if name != "rho" and value < 0:
                raise ValueError(f"Loss weight {name} must be non-negative, got {value}")
        if self.rho < 1:
            raise ValueError(f"rho must be at least 1, got {self.rho}")

    def as_dict(self) -> dict[str, float]:
        return asdict(self)


DEFAULT_WEIGHTS: dict[Formulation, LossWeights] = {
    Formulation.CYCLEGAN: LossWeights(),
    Formulation.C_STARGAN: LossWeights(),
    Formulation.W_STARGAN: LossWeights(lambda_adv=10.0, lambda_cls=10.0, lambda_gp=10.0),
    Formulation.A_STARGAN1: LossWeights(),
    Formulation.A_STARGAN2: LossWeights(),
}


@dataclass
class Minibatch:
    """x ~ p_d(x) with source labels k′, target labels k ~ p(k), and real y with labels k_real.

    Arrays are (B, Q, N); labels are 0-based.
    """

    x: np.ndarray
    source: np.ndarray
    target: np.ndarray
    y: np.ndarray
    y_labels: np.ndarray

    def validate(self, n_domains: int) -> None:
        for name in ("source", "target", "y_labels"):
            labels = np.asarray(getattr(self, name))
            if n_domains and labels.size and (labels.min() < 0 or labels.max() >= n_domains):
                raise ValueError(f"Minibatch {name} labels outside [0, {n_domains}): {labels.tolist()}")
        if self.x.shape[0] == 0 or self.y.shape[0] == 0:
            raise ValueError("Minibatch is empty")

    @property
    def size(self) -> int:
        return self.x.shape[0]


# ---------------------------------------------------------------------------
# Clamping
# ---------------------------------------------------------------------------

_clamp_events = 0


def clamp_count() -> int:
    return _clamp_events


def reset_clamp_count() -> None:
    global _clamp_events
    _clamp_events = 0


def _clamped_log(p: Tensor, what: str) -> Tensor:
    global _clamp_events
    p = as_tensor(p)
    outside = int(np.count_nonzero((p.values < PROB_EPS) | (p.values > 1.0 - PROB_EPS)))
    if outside:
        if _clamp_events == 0:
            warn("probability clamped", term=what, count=outside)
        _clamp_events += outside
    return log(clip(p, PROB_EPS, 1.0 - PROB_EPS))


def _log1m(p: Tensor, what: str) -> Tensor:
    return _clamped_log(1.0 - as_tensor(p), what)


def _pick(log_probs: Tensor, classes: Sequence[int] | np.ndarray) -> Tensor:
    """log p(class_b | sample_b) for each row b, floored at log(1e-12)."""
    log_probs = as_tensor(log_probs)
    classes = np.asarray(classes, dtype=int).reshape(-1)
    if log_probs.ndim != 2 or classes.size != log_probs.shape[0]:
        raise ShapeError(f"Need (B, L) log-probs and B labels, got {log_probs.shape} and {classes.size}")
    if classes.min() < 0 or classes.max() >= log_probs.shape[1]:
        raise ValueError(f"Class index outside [0, {log_probs.shape[1]})")
    mask = np.zeros(log_probs.shape, dtype=log_probs.dtype)
    mask[np.arange(classes.size), classes] = 1.0
    return tsum(clip(log_probs, LOG_PROB_FLOOR, 0.0) * mask, axis=1)


# ---------------------------------------------------------------------------
# CycleGAN
# ---------------------------------------------------------------------------


def cyclegan_adv_losses(
    dy_real: Tensor | None = None,
    dy_fake: Tensor | None = None,
    dx_real: Tensor | None = None,
    dx_fake: Tensor | None = None,
    non_saturating: bool = True,
) -> dict[str, Tensor]:
    """Cross-entropy adversarial terms for D_Y/G (y side) and D_X/F (x side).

    dy_fake = D_Y(G(x)), dx_fake = D_X(F(y)). Terms whose inputs are missing are left out.
    Keys: adv_dy, adv_g, adv_dx, adv_f.
    """
    out: dict[str, Tensor] = {}
    for side, real, fake, gen in (("dy", dy_real, dy_fake, "g"), ("dx", dx_real, dx_fake, "f")):
        if real is not None and fake is not None:
            out[f"adv_{side}"] = -mean(_clamped_log(real, f"adv_{side}")) - mean(_log1m(fake, f"adv_{side}"))
        if fake is not None:
            if non_saturating:
                out[f"adv_{gen}"] = -mean(_clamped_log(fake, f"adv_{gen}"))
            else:
                out[f"adv_{gen}"] = mean(_log1m(fake, f"adv_{gen}"))
    return out


def _rho_distance(x, other, rho: float, what: str) -> Tensor:
    x, other = as_tensor(x), as_tensor(other)
    if x.shape != other.shape:
        raise ShapeError(f"{what}: reconstruction shape {other.shape} differs from input shape {x.shape}")
    if rho < 1:
        raise ValueError(f"rho must be at least 1, got {rho}")
    diff = tabs(other - x)
    return mean(diff if rho == 1 else power(diff, rho))


def cycle_consistency_loss(x, reconstruction, rho: float = 1.0) -> Tensor:
    """mean |F(G(x)) − x|^ρ over all elements (StarGAN: G(G(x, k), k′) − x)."""
    return _rho_distance(x, reconstruction, rho, "cycle_consistency_loss")


def identity_mapping_loss(x, mapped, rho: float = 1.0) -> Tensor:
    """mean |G(x, k′) − x|^ρ for x already in domain k′."""
    return _rho_distance(x, mapped, rho, "identity_mapping_loss")


stargan_cycle_loss = cycle_consistency_loss
stargan_identity_loss = identity_mapping_loss


# ---------------------------------------------------------------------------
# C-StarGAN
# ---------------------------------------------------------------------------


def cstargan_adv_losses(
    d_real: Tensor | None = None,
    d_fake: Tensor | None = None,
    non_saturating: bool = True,
) -> dict[str, Tensor]:
    """d_real = D(y, k) for real (k, y) pairs; d_fake = D(G(x, k), k). Keys: adv_d, adv_g."""
    out: dict[str, Tensor] = {}
    if d_real is not None and d_fake is not None:
        out["adv_d"] = -mean(_clamped_log(d_real, "adv_d")) - mean(_log1m(d_fake, "adv_d"))
    if d_fake is not None:
        out["adv_g"] = -mean(_clamped_log(d_fake, "adv_g")) if non_saturating else mean(_log1m(d_fake, "adv_g"))
    return out


def domain_classification_losses(
    log_p_real: Tensor | None = None,
    real_labels=None,
    log_p_fake: Tensor | None = None,
    target_labels=None,
) -> dict[str, Tensor]:
    """cls_c = −E log p_C(k|y) on real data; cls_g = −E log p_C(k|G(x, k)). Inputs are (B, K) log-probs."""
    out: dict[str, Tensor] = {}
    if log_p_real is not None:
        out["cls_c"] = -mean(_pick(log_p_real, real_labels))
    if log_p_fake is not None:
        out["cls_g"] = -mean(_pick(log_p_fake, target_labels))
    return out


# ---------------------------------------------------------------------------
# W-StarGAN
# ---------------------------------------------------------------------------


def wstargan_losses(
    score_real: Tensor | None = None,
    score_fake: Tensor | None = None,
    lambda_adv: float = 10.0,
    lambda_gp: float = 10.0,
    penalty: Tensor | None = None,
    lambda_cls: float = 10.0,
    log_p_real: Tensor | None = None,
    real_labels=None,
) -> dict[str, Tensor]:
    """Critic-side and generator-side Wasserstein terms.

    Keys: adv_g (−E D(fake), unweighted), i_g_adv (λ_adv · adv_g), distance (E D(real) − E D(fake)),
    adv_d (−distance), i_d (λ_adv · adv_d + λ_gp · penalty), cls_c / i_c when log_p_real is given.
    """
    out: dict[str, Tensor] = {}
    if score_fake is not None:
        out["adv_g"] = -mean(score_fake)
        out["i_g_adv"] = out["adv_g"] * lambda_adv
    if score_real is not None and score_fake is not None:
        out["distance"] = mean(score_real) - mean(score_fake)
        out["adv_d"] = -out["distance"]
        i_d = out["adv_d"] * lambda_adv
        if penalty is not None:
            out["gp"] = penalty
            i_d = i_d + penalty * lambda_gp
        out["i_d"] = i_d
    if log_p_real is not None:
        out["cls_c"] = -mean(_pick(log_p_real, real_labels))
        out["i_c"] = out["cls_c"] * lambda_cls
    return out


def gradient_penalty(
    critic: Callable[[Tensor], Tensor],
    real,
    fake,
    rng: np.random.Generator,
) -> Tensor:
    """E[(‖∇ D(x̂)‖₂ − 1)²] with x̂ = ε·real + (1 − ε)·fake, one ε ~ U[0, 1] per pair.

    The fake batch is shuffled once with ``rng`` before pairing. ``critic`` maps a
    (B, ...) batch to (B,) scores. The result is differentiable w.r.t. the critic's parameters.
    """
    real_v = as_tensor(real).values
    fake_v = as_tensor(fake).values
    if real_v.shape != fake_v.shape:
        raise ShapeError(f"gradient_penalty: real {real_v.shape} and fake {fake_v.shape} batches differ")
    batch = real_v.shape[0]
    fake_v = fake_v[rng.permutation(batch)]
    eps = rng.uniform(0.0, 1.0, size=(batch,) + (1,) * (real_v.ndim - 1))
    x_hat = Tensor(eps * real_v + (1.0 - eps) * fake_v, requires_grad=True, name="x_hat")
    scores = as_tensor(critic(x_hat))
    (g,) = grad(tsum(scores), [x_hat], create_graph=True)
    per_sample = g.values.reshape(batch, -1)
    bad = np.flatnonzero(~np.isfinite(per_sample).all(axis=1))
    if bad.size:
        raise NumericalError(f"Critic gradient is not finite at interpolated sample {int(bad[0])}")
    norms = l2_norm(reshape(g, (batch, -1)), axis=1)
    return mean(power(norms - 1.0, 2.0))


# ---------------------------------------------------------------------------
# A-StarGAN
# ---------------------------------------------------------------------------


def astargan1_losses(
    log_p_real: Tensor | None,
    real_labels,
    log_p_fake: Tensor | None,
    target_labels,
    n_domains: int,
) -> dict[str, Tensor]:
    """2K-way augmented classifier: classes 0..K−1 real domains, K..2K−1 fakes of those domains.

    adv_a = −E log p_A(k|y) − E log p_A(K+k|G(x,k)); adv_g = −E log p_A(k|G) + E log p_A(K+k|G).
    """
    out: dict[str, Tensor] = {}
    target = None if target_labels is None else np.asarray(target_labels, dtype=int)
    if log_p_fake is not None:
        _expect_classes(log_p_fake, 2 * n_domains, "astargan1_losses")
        fake_as_real = _pick(log_p_fake, target)
        fake_as_fake = _pick(log_p_fake, target + n_domains)
        out["adv_g"] = -mean(fake_as_real) + mean(fake_as_fake)
        if log_p_real is not None:
            _expect_classes(log_p_real, 2 * n_domains, "astargan1_losses")
            out["adv_a"] = -mean(_pick(log_p_real, real_labels)) - mean(fake_as_fake)
    return out


def astargan2_losses(
    log_p_real: Tensor | None,
    real_labels,
    log_p_fake: Tensor | None,
    target_labels,
    n_domains: int,
) -> dict[str, Tensor]:
    """(K+1)-way classifier: classes 0..K−1 real domains, class K a single merged fake class."""
    out: dict[str, Tensor] = {}
    if log_p_fake is not None:
        _expect_classes(log_p_fake, n_domains + 1, "astargan2_losses")
        fake_class = np.full(log_p_fake.shape[0], n_domains)
        fake_as_fake = _pick(log_p_fake, fake_class)
        out["adv_g"] = -mean(_pick(log_p_fake, target_labels)) + mean(fake_as_fake)
        if log_p_real is not None:
            _expect_classes(log_p_real, n_domains + 1, "astargan2_losses")
            out["adv_a"] = -mean(_pick(log_p_real, real_labels)) - mean(fake_as_fake)
    return out


def _expect_classes(log_probs: Tensor, n_classes: int, what: str) -> None:
    if log_probs.ndim != 2 or log_probs.shape[1] != n_classes:
        raise ShapeError(f"{what}: expected (B, {n_classes}) log-probs, got {log_probs.shape}")


# ---------------------------------------------------------------------------
# Full objectives
# ---------------------------------------------------------------------------

_OBJECTIVE_TERMS: dict[Formulation, dict[str, tuple[tuple[str, str], ...]]] = {
    Formulation.CYCLEGAN: {
        "i_g": (("adv_g", "lambda_adv"), ("adv_f", "lambda_adv"), ("cyc", "lambda_cyc"), ("id", "lambda_id")),
        "i_d": (("adv_dx", ""), ("adv_dy", "")),
    },
    Formulation.C_STARGAN: {
        "i_g": (("adv_g", "lambda_adv"), ("cls_g", "lambda_cls"), ("cyc", "lambda_cyc"), ("id", "lambda_id")),
        "i_d": (("adv_d", "lambda_adv"),),
        "i_c": (("cls_c", "lambda_cls"),),
    },
    Formulation.W_STARGAN: {
        "i_g": (("adv_g", "lambda_adv"), ("cls_g", "lambda_cls"), ("cyc", "lambda_cyc"), ("id", "lambda_id")),
        "i_d": (("adv_d", "lambda_adv"), ("gp", "lambda_gp")),
        "i_c": (("cls_c", "lambda_cls"),),
    },
    Formulation.A_STARGAN1: {
        "i_g": (("adv_g", "lambda_adv"), ("cyc", "lambda_cyc"), ("id", "lambda_id")),
        "i_a": (("adv_a", "lambda_adv"),),
    },
    Formulation.A_STARGAN2: {
        "i_g": (("adv_g", "lambda_adv"), ("cyc", "lambda_cyc"), ("id", "lambda_id")),
        "i_a": (("adv_a", "lambda_adv"),),
    },
}


def objective_names(formulation: Formulation | str) -> tuple[str, ...]:
    return tuple(_OBJECTIVE_TERMS[Formulation(formulation)])


def full_objectives(
    formulation: Formulation | str,
    weights: LossWeights,
    components: Mapping[str, Tensor | float],
    targets: Sequence[str] | None = None,
) -> dict[str, Tensor | float]:
    """Weighted sums of component losses for each player's objective.

    CycleGAN: i_g (joint G, F objective), i_d (D_X + D_Y, unweighted).
    C-/W-StarGAN: i_g, i_d, i_c. A-StarGAN: i_g, i_a.
    ``targets`` restricts which objectives are built; a missing component raises KeyError.
    """
    table = _OBJECTIVE_TERMS[Formulation(formulation)]
    names = tuple(table) if targets is None else tuple(targets)
    out: dict[str, Tensor | float] = {}
    for name in names:
        if name not in table:
            raise KeyError(f"{formulation} has no objective '{name}'")
        total: Tensor | float = 0.0
        for term, weight_name in table[name]:
            if term not in components:
                raise KeyError(f"Objective {name} of {formulation} needs component loss '{term}'")
            weight = getattr(weights, weight_name) if weight_name else 1.0
            total = total + components[term] * weight
        out[name] = total
    return out


cyclegan_full_objectives = full_objectives
stargan_full_objectives = full_objectives
