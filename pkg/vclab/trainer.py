"""
Alternating minimax training for CycleGAN, C-StarGAN, W-StarGAN and A-StarGAN1/2.

Each step updates the critic-side players first (discriminators, classifiers,
or the multi-task critic) against a detached generator output, then the
generator(s), with exactly one Adam step per player.

Environment variables:
  VCLAB_PROGRESS=true   — show a tqdm progress bar in train()
"""

from __future__ import annotations

import contextlib
import copy
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Callable, Iterator, Mapping

import numpy as np
import yaml
from tqdm import tqdm

from vclab.autodiff import Adam, NumericalError, Tensor, backward, no_grad, precision
from vclab.features import CorpusError, DomainCorpus, DomainStats, normalize
from vclab.formatters import emit, write_csv
from vclab.nets import (
    CLASSIFIER_WIDTH,
    CRITIC_WIDTHS,
    DISCRIMINATOR_WIDTH,
    GENERATOR_WIDTHS,
    Classifier,
    Generator,
    Module,
    MultiTaskCritic,
    PatchDiscriminator,
    preset_width,
    read_checkpoint,
    restore_parameters,
    save_checkpoint,
)
from vclab.objectives import (
    DEFAULT_WEIGHTS,
    Formulation,
    LossWeights,
    Minibatch,
    astargan1_losses,
    astargan2_losses,
    cstargan_adv_losses,
    cycle_consistency_loss,
    cyclegan_adv_losses,
    domain_classification_losses,
    full_objectives,
    gradient_penalty,
    identity_mapping_loss,
    wstargan_losses,
)

PROGRESS = os.environ.get("VCLAB_PROGRESS", "").lower() in ("1", "true", "yes")

# (alpha_G, alpha_D/C, iterations)
DEFAULT_SCHEDULE: dict[Formulation, tuple[float, float, int]] = {
    Formulation.CYCLEGAN: (5e-4, 5e-6, 350_000),
    Formulation.C_STARGAN: (5e-4, 2e-6, 700_000),
    Formulation.W_STARGAN: (5e-4, 5e-6, 350_000),
    Formulation.A_STARGAN1: (5e-4, 2e-6, 350_000),
    Formulation.A_STARGAN2: (5e-4, 2e-6, 350_000),
}
TINY_ITERATIONS = 2000

# net name -> role; "critic" nets use beta1_dc / alpha_dc
NETWORKS: dict[Formulation, dict[str, str]] = {
    Formulation.CYCLEGAN: {"disc_x": "critic", "disc_y": "critic", "generator": "generator", "inverse": "generator"},
    Formulation.C_STARGAN: {"discriminator": "critic", "classifier": "critic", "generator": "generator"},
    Formulation.W_STARGAN: {"critic": "critic", "generator": "generator"},
    Formulation.A_STARGAN1: {"classifier": "critic", "generator": "generator"},
    Formulation.A_STARGAN2: {"classifier": "critic", "generator": "generator"},
}


class TrainingError(RuntimeError):
    """Raised when a loss term or parameter update turns non-finite; names the term."""


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    formulation: Formulation
    weights: LossWeights = field(default_factory=LossWeights)
    alpha_g: float = 5e-4
    alpha_dc: float = 2e-6
    beta1_g: float = 0.9
    beta1_dc: float = 0.5
    beta2: float = 0.999
    adam_eps: float = 1e-8
    iterations: int = 350_000
    batch_size: int = 16
    seed: int = 0
    checkpoint_interval: int = 10_000
    log_interval: int = 100
    precision: str = "f64"
    preset: str = "full"
    generator_variant: str = "1d"
    segment_frames: int = 32
    dropout: float = 0.2
    non_saturating: bool = True
    source_domain: int | None = None
    target_domain: int | None = None

    def __post_init__(self) -> None:
        self.formulation = Formulation(self.formulation)
        if isinstance(self.weights, Mapping):
            self.weights = LossWeights(**self.weights)
        if self.alpha_g <= 0 or self.alpha_dc <= 0:
            raise ValueError("Learning rates must be positive")
        if self.iterations < 0:
            raise ValueError("iterations must be non-negative")
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2 (batch statistics)")
        if self.segment_frames < 8 or self.segment_frames % 8:
            raise ValueError("segment_frames must be a positive multiple of 8")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if self.precision not in ("f32", "f64"):
            raise ValueError("precision must be 'f32' or 'f64'")
        if self.preset not in ("full", "tiny"):
            raise ValueError("preset must be 'full' or 'tiny'")
        if self.formulation is Formulation.CYCLEGAN:
            if self.source_domain is None or self.target_domain is None:
                raise ValueError("cyclegan is pairwise: set source_domain and target_domain")
            if self.source_domain == self.target_domain:
                raise ValueError("cyclegan needs two different domains")

    def to_dict(self) -> dict[str, Any]:
        out = asdict(self)
        out["formulation"] = str(self.formulation)
        out["weights"] = self.weights.as_dict()
        return out


def default_config(formulation: Formulation | str, preset: str = "full", **overrides: Any) -> TrainConfig:
    """Published hyperparameters for ``formulation``; the tiny preset shortens the run to 2000 steps."""
    formulation = Formulation(formulation)
    alpha_g, alpha_dc, iterations = DEFAULT_SCHEDULE[formulation]
    base: dict[str, Any] = {
        "formulation": formulation,
        "weights": DEFAULT_WEIGHTS[formulation],
        "alpha_g": alpha_g,
        "alpha_dc": alpha_dc,
        "iterations": TINY_ITERATIONS if preset == "tiny" else iterations,
        "preset": preset,
    }
    weight_overrides = overrides.pop("weights", None)
    base.update(overrides)
    if weight_overrides:
        merged = base["weights"].as_dict()
        merged.update(weight_overrides if isinstance(weight_overrides, Mapping) else asdict(weight_overrides))
        base["weights"] = LossWeights(**merged)
    return TrainConfig(**base)


_CONFIG_KEYS = {f.name for f in fields(TrainConfig)}
_WEIGHT_KEYS = {f.name for f in fields(LossWeights)}


def config_from_mapping(raw: Mapping[str, Any], formulation: Formulation | str | None = None, **overrides: Any) -> TrainConfig:
    """Merge a config mapping over the published defaults; unknown keys raise ValueError."""
    raw = dict(raw or {})
    unknown = sorted(set(raw) - _CONFIG_KEYS)
    if unknown:
        raise ValueError(f"Unknown config key(s): {unknown}. Known: {sorted(_CONFIG_KEYS)}")
    weights = raw.get("weights") or {}
    bad = sorted(set(weights) - _WEIGHT_KEYS)
    if bad:
        raise ValueError(f"Unknown loss weight(s): {bad}. Known: {sorted(_WEIGHT_KEYS)}")
    raw.update({k: v for k, v in overrides.items() if v is not None})
    chosen = formulation or raw.get("formulation")
    if chosen is None:
        raise ValueError("No formulation given")
    raw["formulation"] = chosen
    preset = raw.pop("preset", "full")
    return default_config(raw.pop("formulation"), preset, **raw)


def load_config(path: str | Path | None, formulation: Formulation | str | None = None, **overrides: Any) -> TrainConfig:
    """Read a YAML/JSON config file (or none) and fill the gaps from the published defaults."""
    raw: dict = {}
    if path is not None:
        try:
            raw = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
        except FileNotFoundError:
            raise ValueError(f"Config file not found: {path}") from None
        except yaml.YAMLError as exc:
            raise ValueError(f"Config file {path} is not valid YAML/JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise ValueError(f"Config file {path} must hold a mapping")
    return config_from_mapping(raw, formulation, **overrides)


# ---------------------------------------------------------------------------
# Networks and state
# ---------------------------------------------------------------------------


def build_nets(config: TrainConfig, n_features: int, n_domains: int, rng: np.random.Generator) -> dict[str, Module]:
    f = config.formulation

    def w(width: int) -> int:
        return preset_width(width, config.preset)

    g_widths = [w(c) for c in GENERATOR_WIDTHS[config.generator_variant]]
    conditional = 0 if f is Formulation.CYCLEGAN else n_domains

    def generator() -> Generator:
        return Generator(n_features, conditional, config.generator_variant, g_widths, rng)

    nets: dict[str, Module] = {"generator": generator()}
    if f is Formulation.CYCLEGAN:
        nets["inverse"] = generator()
        nets["disc_x"] = PatchDiscriminator(n_features, 0, w(DISCRIMINATOR_WIDTH), rng, config.dropout)
        nets["disc_y"] = PatchDiscriminator(n_features, 0, w(DISCRIMINATOR_WIDTH), rng, config.dropout)
    elif f is Formulation.C_STARGAN:
        nets["discriminator"] = PatchDiscriminator(n_features, n_domains, w(DISCRIMINATOR_WIDTH), rng, config.dropout)
        nets["classifier"] = Classifier(n_features, n_domains, w(CLASSIFIER_WIDTH["domain"]), rng, config.dropout)
    elif f is Formulation.W_STARGAN:
        nets["critic"] = MultiTaskCritic(n_features, n_domains, [w(c) for c in CRITIC_WIDTHS], rng, config.dropout)
    else:
        n_classes = 2 * n_domains if f is Formulation.A_STARGAN1 else n_domains + 1
        nets["classifier"] = Classifier(n_features, n_classes, w(CLASSIFIER_WIDTH["augmented"]), rng, config.dropout)
    return nets


@dataclass
class TrainState:
    nets: dict[str, Module]
    optimizers: dict[str, Adam]
    rng: np.random.Generator
    n_features: int
    n_domains: int
    step: int = 0
    history: dict[str, list[float]] = field(default_factory=dict)


def _optimizers(config: TrainConfig, nets: dict[str, Module]) -> dict[str, Adam]:
    out = {}
    for name, role in NETWORKS[config.formulation].items():
        lr, beta1 = (config.alpha_dc, config.beta1_dc) if role == "critic" else (config.alpha_g, config.beta1_g)
        out[name] = Adam(nets[name].parameters(), lr=lr, beta1=beta1, beta2=config.beta2, eps=config.adam_eps)
    return out


def init_state(config: TrainConfig, n_features: int, n_domains: int) -> TrainState:
    """Fresh networks from ``config.seed``; initialization and training draw from separate streams."""
    init_seq, train_seq = np.random.SeedSequence(config.seed).spawn(2)
    with precision(config.precision):
        nets = build_nets(config, n_features, n_domains, np.random.default_rng(init_seq))
    rng = np.random.default_rng(train_seq)
    for net in nets.values():
        net.train().bind_rng(rng)
    return TrainState(nets=nets, optimizers=_optimizers(config, nets), rng=rng, n_features=n_features, n_domains=n_domains)


# ---------------------------------------------------------------------------
# Minibatches
# ---------------------------------------------------------------------------


@dataclass
class TrainingData:
    """Per-domain training utterances, normalized with their own domain's statistics."""

    domains: list[list[np.ndarray]]

    @classmethod
    def from_corpus(cls, corpus: DomainCorpus) -> TrainingData:
        stats = corpus.stats or corpus.compute_all_stats()
        domains = []
        for k, name in enumerate(corpus.domain_names):
            seqs = corpus.training_sequences(k)
            if not seqs:
                raise CorpusError(f"Domain '{name}' has no training utterances")
            domains.append([normalize(s, stats[k]).data for s in seqs])
        return cls(domains)

    @property
    def n_domains(self) -> int:
        return len(self.domains)

    def _crop(self, data: np.ndarray, length: int, rng: np.random.Generator) -> np.ndarray:
        n = data.shape[1]
        if n < length:
            return np.pad(data, ((0, 0), (0, length - n)), mode="edge")
        start = int(rng.integers(0, n - length + 1))
        return data[:, start : start + length]

    def _draw(self, domain: int, length: int, rng: np.random.Generator) -> np.ndarray:
        utts = self.domains[domain]
        return self._crop(utts[int(rng.integers(len(utts)))], length, rng)

    def sample(self, config: TrainConfig, rng: np.random.Generator) -> Minibatch:
        b, length = config.batch_size, config.segment_frames
        if config.formulation is Formulation.CYCLEGAN:
            src, trg = config.source_domain, config.target_domain
            for d in (src, trg):
                if not 0 <= d < self.n_domains:
                    raise CorpusError(f"cyclegan domain {d + 1} is not in the corpus (1..{self.n_domains})")
            x = np.stack([self._draw(src, length, rng) for _ in range(b)])
            y = np.stack([self._draw(trg, length, rng) for _ in range(b)])
            return Minibatch(x, np.full(b, src), np.full(b, trg), y, np.full(b, trg))
        pooled = [(k, i) for k, utts in enumerate(self.domains) for i in range(len(utts))]
        picks = rng.integers(len(pooled), size=b)
        source = np.array([pooled[p][0] for p in picks])
        x = np.stack([self._crop(self.domains[k][i], length, rng) for k, i in (pooled[p] for p in picks)])
        target = rng.integers(self.n_domains, size=b)
        y_labels = rng.integers(self.n_domains, size=b)
        y = np.stack([self._draw(int(k), length, rng) for k in y_labels])
        return Minibatch(x, source, target, y, y_labels)


# ---------------------------------------------------------------------------
# One step
# ---------------------------------------------------------------------------


@contextlib.contextmanager
def _term(name: str) -> Iterator[None]:
    try:
        yield
    except NumericalError as exc:
        raise TrainingError(f"Loss term '{name}' became non-finite: {exc}") from exc


def _update(state: TrainState, objective: Tensor, term: str, players: list[str]) -> None:
    for net in state.nets.values():
        net.zero_grad()
    with _term(term):
        backward(objective)
    for name in players:
        try:
            state.optimizers[name].step()
        except NumericalError as exc:
            raise TrainingError(f"Update of '{name}' on objective '{term}' failed: {exc}") from exc


def _detached_fakes(state: TrainState, batch: Minibatch) -> dict[str, Tensor]:
    with no_grad(), _term("generator"):
        fakes = {"x_to_y": state.nets["generator"](Tensor(batch.x), batch.target)}
        if "inverse" in state.nets:
            fakes["y_to_x"] = state.nets["inverse"](Tensor(batch.y), None)
    return {k: v.detach() for k, v in fakes.items()}


def critic_losses(state: TrainState, config: TrainConfig, batch: Minibatch) -> tuple[dict, dict, list[str]]:
    """Component losses and objectives of the critic-side players against detached fakes.

    Returns (components, objectives, players updated by sum(objectives)).
    """
    f, nets, w = config.formulation, state.nets, config.weights
    fakes = _detached_fakes(state, batch)
    x, y, fake = Tensor(batch.x), Tensor(batch.y), fakes["x_to_y"]
    comps: dict[str, Tensor] = {}
    if f is Formulation.CYCLEGAN:
        with _term("adv_d"):
            comps.update(
                cyclegan_adv_losses(
                    dy_real=nets["disc_y"](y).value,
                    dy_fake=nets["disc_y"](fake).value,
                    dx_real=nets["disc_x"](x).value,
                    dx_fake=nets["disc_x"](fakes["y_to_x"]).value,
                )
            )
            comps.pop("adv_g", None)
            comps.pop("adv_f", None)
        targets, players = ["i_d"], ["disc_x", "disc_y"]
    elif f is Formulation.C_STARGAN:
        with _term("adv_d"):
            comps.update(
                cstargan_adv_losses(
                    nets["discriminator"](y, batch.y_labels).value, nets["discriminator"](fake, batch.target).value
                )
            )
            comps.pop("adv_g", None)
        with _term("cls_c"):
            comps.update(domain_classification_losses(nets["classifier"](y).log_probs, batch.y_labels))
        targets, players = ["i_d", "i_c"], ["discriminator", "classifier"]
    elif f is Formulation.W_STARGAN:
        critic = nets["critic"]
        with _term("adv_d"):
            score_real, cls_real = critic(y)
            score_fake, _ = critic(fake)
        with _term("gp"):
            penalty = gradient_penalty(critic.score, batch.y, fake, state.rng)
        comps.update(
            wstargan_losses(
                score_real.value, score_fake.value, w.lambda_adv, w.lambda_gp, penalty, w.lambda_cls,
                cls_real.log_probs, batch.y_labels,
            )
        )
        for key in ("adv_g", "i_g_adv", "i_d", "i_c"):
            comps.pop(key, None)
        targets, players = ["i_d", "i_c"], ["critic"]
    else:
        losses = astargan1_losses if f is Formulation.A_STARGAN1 else astargan2_losses
        with _term("adv_a"):
            out = losses(
                nets["classifier"](y).log_probs, batch.y_labels, nets["classifier"](fake).log_probs,
                batch.target, state.n_domains,
            )
        comps["adv_a"] = out["adv_a"]
        targets, players = ["i_a"], ["classifier"]
    objectives = full_objectives(f, w, comps, targets)
    return comps, objectives, players


def generator_losses(state: TrainState, config: TrainConfig, batch: Minibatch) -> tuple[dict, dict, list[str]]:
    """Component losses and objective of the generator side (joint G, F for CycleGAN)."""
    f, nets, w = config.formulation, state.nets, config.weights
    x, y = Tensor(batch.x), Tensor(batch.y)
    g = nets["generator"]
    comps: dict[str, Tensor] = {}
    if f is Formulation.CYCLEGAN:
        inv = nets["inverse"]
        with _term("adv_g"):
            fake_y, fake_x = g(x), inv(y)
            comps.update(
                cyclegan_adv_losses(
                    dy_fake=nets["disc_y"](fake_y).value,
                    dx_fake=nets["disc_x"](fake_x).value,
                    non_saturating=config.non_saturating,
                )
            )
        with _term("cyc"):
            comps["cyc"] = cycle_consistency_loss(x, inv(fake_y), w.rho) + cycle_consistency_loss(y, g(fake_x), w.rho)
        with _term("id"):
            comps["id"] = identity_mapping_loss(y, g(y), w.rho) + identity_mapping_loss(x, inv(x), w.rho)
        objectives = full_objectives(f, w, comps, ["i_g"])
        return comps, objectives, ["generator", "inverse"]

    with _term("adv_g"):
        fake = g(x, batch.target)
        if f is Formulation.C_STARGAN:
            d_fake = nets["discriminator"](fake, batch.target).value
            comps["adv_g"] = cstargan_adv_losses(d_fake=d_fake, non_saturating=config.non_saturating)["adv_g"]
        elif f is Formulation.W_STARGAN:
            score_fake, cls_fake = nets["critic"](fake)
            comps["adv_g"] = wstargan_losses(score_fake=score_fake.value, lambda_adv=w.lambda_adv)["adv_g"]
        else:
            losses = astargan1_losses if f is Formulation.A_STARGAN1 else astargan2_losses
            log_p = nets["classifier"](fake).log_probs
            comps["adv_g"] = losses(None, None, log_p, batch.target, state.n_domains)["adv_g"]
    if f is Formulation.C_STARGAN:
        with _term("cls_g"):
            comps.update(domain_classification_losses(log_p_fake=nets["classifier"](fake).log_probs, target_labels=batch.target))
    elif f is Formulation.W_STARGAN:
        with _term("cls_g"):
            comps.update(domain_classification_losses(log_p_fake=cls_fake.log_probs, target_labels=batch.target))
    with _term("cyc"):
        comps["cyc"] = cycle_consistency_loss(x, g(fake, batch.source), w.rho)
    with _term("id"):
        comps["id"] = identity_mapping_loss(x, g(x, batch.source), w.rho)
    objectives = full_objectives(f, w, comps, ["i_g"])
    return comps, objectives, ["generator"]


def _total(objectives: dict) -> Tensor:
    total = None
    for value in objectives.values():
        total = value if total is None else total + value
    return total


def update_critics(state: TrainState, config: TrainConfig, batch: Minibatch) -> dict[str, float]:
    with precision(config.precision):
        comps, objectives, players = critic_losses(state, config, batch)
        _update(state, _total(objectives), "+".join(objectives), players)
    return {k: float(v.item()) for k, v in {**comps, **objectives}.items()}


def update_generators(state: TrainState, config: TrainConfig, batch: Minibatch) -> dict[str, float]:
    with precision(config.precision):
        comps, objectives, players = generator_losses(state, config, batch)
        _update(state, _total(objectives), "i_g", players)
    return {k: float(v.item()) for k, v in {**comps, **objectives}.items()}


def objective_values(state: TrainState, config: TrainConfig, batch: Minibatch, side: str) -> float:
    """Current total objective of one side ("critic" or "generator") on ``batch``, without updating.

    Dropout and the gradient penalty still draw from ``state.rng``.
    """
    with precision(config.precision):
        _, objectives, _ = (critic_losses if side == "critic" else generator_losses)(state, config, batch)
    return float(_total(objectives).item())


def train_step(state: TrainState, config: TrainConfig, batch: Minibatch) -> dict[str, float]:
    """Critic-side players first, then the generator(s); appends every term to the history."""
    batch.validate(state.n_domains)
    losses = update_critics(state, config, batch)
    losses.update(update_generators(state, config, batch))
    state.step += 1
    for term, value in losses.items():
        if not np.isfinite(value):
            raise TrainingError(f"Loss term '{term}' is not finite at step {state.step}")
        state.history.setdefault(term, []).append(value)
    return losses


# ---------------------------------------------------------------------------
# Full runs and checkpoints
# ---------------------------------------------------------------------------


def checkpoint_metadata(state: TrainState, config: TrainConfig, corpus: DomainCorpus | None = None, **extra: Any) -> dict:
    meta = {
        "formulation": str(config.formulation),
        "config": config.to_dict(),
        "n_features": state.n_features,
        "n_domains": state.n_domains,
        "step": state.step,
        "rng_state": state.rng.bit_generator.state,
        "history": state.history,
    }
    if corpus is not None:
        meta["domain_names"] = list(corpus.domain_names)
        meta["stats"] = [s.to_dict() for s in corpus.stats]
    meta.update(extra)
    return meta


def checkpoint_path(out_dir: str | Path, step: int) -> Path:
    return Path(out_dir) / "checkpoints" / f"step_{step:08d}.vcck"


def write_loss_csv(path: str | Path, history: Mapping[str, list[float]]) -> Path:
    """Long format: one (step, term, value) row per step and term, steps counted from 1."""
    terms = sorted(history)
    steps = max((len(v) for v in history.values()), default=0)
    rows = ((step + 1, term, history[term][step]) for step in range(steps) for term in terms if step < len(history[term]))
    return write_csv(path, ("step", "term", "value"), rows)


def train(
    corpus: DomainCorpus,
    config: TrainConfig,
    out_dir: str | Path | None = None,
    state: TrainState | None = None,
    callback: Callable[[TrainState, dict[str, float]], None] | None = None,
) -> TrainState:
    """Run ``config.iterations`` steps (continuing from ``state.step`` when resuming)."""
    if corpus.n_domains < 2 and config.formulation.multi_domain:
        raise CorpusError("Multi-domain training needs at least 2 domains")
    data = TrainingData.from_corpus(corpus)
    if state is None:
        state = init_state(config, corpus.n_dims, corpus.n_domains)
    elif state.n_features != corpus.n_dims or state.n_domains != corpus.n_domains:
        raise CorpusError("Checkpoint networks do not match the corpus shape")
    emit("TRAIN", "start", formulation=config.formulation, steps=config.iterations, from_step=state.step)
    bar = tqdm(total=config.iterations, initial=state.step, disable=not PROGRESS, desc=str(config.formulation))
    try:
        while state.step < config.iterations:
            losses = train_step(state, config, data.sample(config, state.rng))
            bar.update(1)
            if callback is not None:
                callback(state, losses)
            if config.log_interval and state.step % config.log_interval == 0:
                emit("TRAIN", f"step {state.step}", **{k: losses[k] for k in sorted(losses) if k.startswith("i_")})
            if out_dir is not None and config.checkpoint_interval and state.step % config.checkpoint_interval == 0:
                _save(out_dir, state, config, corpus)
    finally:
        bar.close()
    if out_dir is not None:
        _save(out_dir, state, config, corpus)
        write_loss_csv(Path(out_dir) / "losses.csv", state.history)
    return state


def _save(out_dir: str | Path, state: TrainState, config: TrainConfig, corpus: DomainCorpus) -> Path:
    path = checkpoint_path(out_dir, state.step)
    save_checkpoint(path, state.nets, checkpoint_metadata(state, config, corpus))
    emit("TRAIN", "checkpoint written", path=path, step=state.step)
    return path


_ARCHITECTURE_KEYS = ("preset", "generator_variant", "source_domain", "target_domain")


def load_state(path: str | Path, **overrides: Any) -> tuple[TrainState, TrainConfig, dict]:
    """Rebuild networks, Adam moments, RNG and history from a checkpoint.

    ``overrides`` (``None`` values ignored) change the stored config, e.g. to extend the iteration count;
    they may not change the network layout.
    """
    entries, meta = read_checkpoint(path)
    stored = {k: v for k, v in meta["config"].items() if k != "formulation"}
    config = config_from_mapping(stored, meta["formulation"], **overrides)
    changed = [k for k in _ARCHITECTURE_KEYS if getattr(config, k) != stored.get(k)]
    if changed:
        raise ValueError(f"Cannot change {changed} when resuming from {path}")
    state = init_state(config, meta["n_features"], meta["n_domains"])
    restore_parameters(state.nets, entries)
    state.rng.bit_generator.state = meta["rng_state"]
    state.step = int(meta["step"])
    state.history = {k: list(v) for k, v in meta.get("history", {}).items()}
    return state, config, meta


def clone_state(state: TrainState) -> TrainState:
    """Deep copy with the networks rebound to the copied RNG."""
    twin = copy.deepcopy(state)
    for net in twin.nets.values():
        net.bind_rng(twin.rng)
    return twin


def domain_stats_from_metadata(meta: Mapping[str, Any]) -> list[DomainStats]:
    return [DomainStats.from_dict(s) for s in meta.get("stats", [])]
