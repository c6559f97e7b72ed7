"""Feature conversion with a trained generator: normalize, pad, G(x, k), crop, post-process."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from vclab.autodiff import Tensor, no_grad, precision
from vclab.features import (
    CorpusError,
    DomainCorpus,
    DomainStats,
    FeatureSequence,
    Utterance,
    convert_f0,
    convert_postprocess,
    crop,
    normalize,
    pad_to_multiple,
)
from vclab.nets import Generator, Module
from vclab.objectives import Formulation
from vclab.trainer import TrainConfig, domain_stats_from_metadata, load_state


def convert_utterance(
    generator: Generator,
    features: FeatureSequence,
    source_stats: DomainStats,
    target_stats: DomainStats,
    target: int | None = None,
) -> FeatureSequence:
    """Convert one utterance to domain ``target`` (``None`` for an unconditional generator).

    Output has the input's length; f0 is mapped with the log-Gaussian transform when present.
    """
    if features.n_dims != generator.n_features:
        raise CorpusError(f"Generator expects Q={generator.n_features}, utterance has Q={features.n_dims}")
    if generator.n_domains and (target is None or not 0 <= target < generator.n_domains):
        raise ValueError(f"Target domain must be in 1..{generator.n_domains}, got {None if target is None else target + 1}")
    padded, n = pad_to_multiple(normalize(features, source_stats), 4)
    generator.eval()
    with no_grad():
        out = generator(Tensor(padded.data[None]), None if not generator.n_domains else [target])
    converted = crop(padded.with_data(out.values[0].astype(np.float64)), n)
    converted = convert_postprocess(converted, target_stats)
    if features.f0 is not None and source_stats.has_f0 and target_stats.has_f0:
        converted = FeatureSequence(
            data=converted.data,
            frame_shift_ms=converted.frame_shift_ms,
            f0=convert_f0(features.f0, source_stats, target_stats),
        )
    return converted


@dataclass
class ConversionModel:
    """Generator(s), per-domain statistics and domain names restored from one checkpoint."""

    config: TrainConfig
    nets: dict[str, Module]
    stats: list[DomainStats]
    domain_names: list[str]
    step: int

    @classmethod
    def from_checkpoint(cls, path: str | Path) -> ConversionModel:
        state, config, meta = load_state(path)
        stats = domain_stats_from_metadata(meta)
        if not stats:
            raise CorpusError(f"Checkpoint {path} carries no domain statistics; it cannot drive conversion")
        for net in state.nets.values():
            net.eval()
        names = meta.get("domain_names") or [f"d{k + 1}" for k in range(len(stats))]
        return cls(config, state.nets, stats, list(names), state.step)

    @property
    def formulation(self) -> Formulation:
        return self.config.formulation

    def domain_index(self, key: str | int) -> int:
        """Domain by name or 1-based index."""
        if isinstance(key, str) and key in self.domain_names:
            return self.domain_names.index(key)
        try:
            k = int(key)
        except (TypeError, ValueError):
            raise ValueError(f"Unknown domain '{key}'. Known: {self.domain_names}") from None
        if not 1 <= k <= len(self.domain_names):
            raise ValueError(f"Domain index {k} out of range 1..{len(self.domain_names)}")
        return k - 1

    def generator_for(self, source: int, target: int) -> tuple[Generator, int | None]:
        if self.formulation is not Formulation.CYCLEGAN:
            return self.nets["generator"], target  # type: ignore[return-value]
        pair = (self.config.source_domain, self.config.target_domain)
        if (source, target) == pair:
            return self.nets["generator"], None  # type: ignore[return-value]
        if (target, source) == pair:
            return self.nets["inverse"], None  # type: ignore[return-value]
        names = [self.domain_names[k] for k in pair]
        raise ValueError(f"This cyclegan checkpoint converts only between {names[0]} and {names[1]}")

    def convert(self, features: FeatureSequence, source: int, target: int) -> FeatureSequence:
        generator, label = self.generator_for(source, target)
        with precision(self.config.precision):
            return convert_utterance(generator, features, self.stats[source], self.stats[target], label)

    def pairs(self) -> list[tuple[int, int]]:
        """Every (source, target) pair this model can convert, source ≠ target."""
        if self.formulation is Formulation.CYCLEGAN:
            s, t = self.config.source_domain, self.config.target_domain
            return [(s, t), (t, s)]
        k = len(self.domain_names)
        return [(s, t) for s in range(k) for t in range(k) if s != t]


def convert_corpus(model: ConversionModel, corpus: DomainCorpus, split: str = "test") -> DomainCorpus:
    """Convert every ``split`` utterance to every other domain the model supports.

    The result's utterances live in the target domain, keep their id and record their source.
    """
    if list(corpus.domain_names) != model.domain_names:
        raise CorpusError(f"Corpus domains {corpus.domain_names} differ from checkpoint domains {model.domain_names}")
    out = []
    for source, target in model.pairs():
        for utt in corpus.split(split, source):
            out.append(
                Utterance(
                    domain=target,
                    utt_id=utt.utt_id,
                    features=model.convert(utt.features, source, target),
                    split=split,
                    source=source,
                )
            )
    if not out:
        raise CorpusError(f"No '{split}' utterances to convert")
    return DomainCorpus(domain_names=list(corpus.domain_names), utterances=out, frame_shift_ms=corpus.frame_shift_ms)
