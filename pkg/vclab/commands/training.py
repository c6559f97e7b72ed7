"""
Training command.

Commands:
  train  — run one formulation on a corpus manifest; writes run.yaml, losses.csv, checkpoints/
"""

from __future__ import annotations

import argparse
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import yaml

from vclab.commands import Command, CommandResult, UsageError, arg
from vclab.features import DomainCorpus, load_corpus
from vclab.formatters import atomic_write_text, emit, kv_table, section
from vclab.objectives import Formulation
from vclab.trainer import TrainConfig, load_config, load_state, train

RUN_MANIFEST = "run.yaml"


@dataclass
class RunManifest:
    """Everything needed to reproduce a run; the output layout depends only on out_dir and run_id."""

    run_id: str
    config: dict[str, Any]
    corpus: str
    out_dir: str
    seed: int
    resumed_from: str | None = None
    final_step: int | None = None
    checkpoints: list[str] = field(default_factory=list)

    @property
    def run_dir(self) -> Path:
        return Path(self.out_dir) / self.run_id

    def write(self) -> Path:
        path = self.run_dir / RUN_MANIFEST
        atomic_write_text(path, yaml.safe_dump(asdict(self), sort_keys=False))
        return path

    @classmethod
    def read(cls, path: str | Path) -> RunManifest:
        raw = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
        return cls(**raw)


def default_run_id(config: TrainConfig) -> str:
    return f"{config.formulation}-{config.preset}-seed{config.seed}"


def _overrides(args: argparse.Namespace, corpus: DomainCorpus) -> dict[str, Any]:
    out = {
        "iterations": args.iters,
        "preset": args.preset,
        "seed": args.seed,
        "precision": args.precision,
        "batch_size": args.batch_size,
        "segment_frames": args.segment_frames,
        "generator_variant": args.generator_variant,
        "checkpoint_interval": args.checkpoint_interval,
    }
    if args.source is not None or args.target is not None:
        if args.source is None or args.target is None:
            raise UsageError("cyclegan needs both --source and --target")
        out["source_domain"] = corpus.domain_index(args.source)
        out["target_domain"] = corpus.domain_index(args.target)
    return out


def handle_train(args: argparse.Namespace) -> CommandResult:
    corpus = load_corpus(args.corpus)
    overrides = _overrides(args, corpus)
    state = None
    if args.resume:
        state, config, meta = load_state(args.resume, **overrides)
        if meta["formulation"] != args.formulation:
            raise UsageError(f"--resume checkpoint holds a {meta['formulation']} run, not {args.formulation}")
    else:
        if args.formulation == Formulation.CYCLEGAN and "source_domain" not in overrides:
            raise UsageError("cyclegan is pairwise: pass --source and --target domains")
        config = load_config(args.config, args.formulation, **overrides)

    manifest = RunManifest(
        run_id=args.run_id or default_run_id(config),
        config=config.to_dict(),
        corpus=str(args.corpus),
        out_dir=str(args.out),
        seed=config.seed,
        resumed_from=None if args.resume is None else str(args.resume),
    )
    manifest.write()
    emit("CLI", "train", run_dir=manifest.run_dir, formulation=config.formulation, iterations=config.iterations)

    state = train(corpus, config, out_dir=manifest.run_dir, state=state)

    manifest.final_step = state.step
    manifest.checkpoints = sorted(p.name for p in (manifest.run_dir / "checkpoints").glob("*.vcck"))
    manifest.write()
    finals = [(term, values[-1]) for term, values in sorted(state.history.items()) if values]
    body = kv_table(
        [
            ("run directory", manifest.run_dir),
            ("steps", state.step),
            ("alpha_G / alpha_DC", f"{config.alpha_g:g} / {config.alpha_dc:g}"),
            ("weights", ", ".join(f"{k}={v:g}" for k, v in config.weights.as_dict().items())),
        ]
    )
    return CommandResult(section(f"Trained {config.formulation}", body) + "\n\n" + section("Final losses", kv_table(finals)))


TRAINING_COMMANDS = [
    Command(
        "train",
        "Train one adversarial formulation on a corpus.",
        (
            arg("--formulation", required=True, choices=[str(f) for f in Formulation]),
            arg("--corpus", type=Path, required=True, help="corpus manifest (YAML)"),
            arg("--config", type=Path, help="YAML/JSON config; missing keys use the published defaults"),
            arg("--out", type=Path, required=True, help="output root; the run goes to <out>/<run-id>/"),
            arg("--run-id"),
            arg("--iters", type=int, help="iteration count I"),
            arg("--preset", choices=["full", "tiny"]),
            arg("--seed", type=int),
            arg("--precision", choices=["f32", "f64"]),
            arg("--batch-size", type=int),
            arg("--segment-frames", type=int),
            arg("--generator-variant", choices=["1d", "2d"]),
            arg("--checkpoint-interval", type=int),
            arg("--source", help="cyclegan source domain (name or 1-based index)"),
            arg("--target", help="cyclegan target domain (name or 1-based index)"),
            arg("--resume", type=Path, help="checkpoint to continue from"),
        ),
    ),
]

TRAINING_HANDLERS = {
    "train": handle_train,
}
