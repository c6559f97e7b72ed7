"""
Corpus commands.

Commands:
  synth-data  — write a synthetic Gaussian-domain corpus (VCF1 files + YAML manifest)
  convert     — convert one VCF1 file, or every test utterance of a corpus, with a checkpoint
"""

from __future__ import annotations

import argparse
from pathlib import Path

from vclab.commands import Command, CommandResult, UsageError, arg
from vclab.conversion import ConversionModel, convert_corpus
from vclab.features import (
    DEFAULT_FRAME_SHIFT_MS,
    TOY_STYLES,
    load_corpus,
    manifest_domain,
    read_features,
    synth_toy_corpus,
    write_corpus,
    write_features,
)
from vclab.formatters import bullet_list, emit, kv_table, section
from vclab.objectives import Formulation


def handle_synth_data(args: argparse.Namespace) -> CommandResult:
    if args.domains < 2:
        raise UsageError(f"--domains must be at least 2, got {args.domains}")
    corpus = synth_toy_corpus(
        n_domains=args.domains,
        n_dims=args.dim,
        utts_per_domain=args.utts,
        n_frames=args.frames,
        seed=args.seed,
        style=args.style,
        test_utts=args.test_utts,
        frame_shift_ms=args.frame_shift_ms,
    )
    manifest = write_corpus(corpus, args.out)
    emit("CLI", "corpus written", manifest=manifest, utterances=len(corpus.utterances))
    body = kv_table(
        [
            ("manifest", manifest),
            ("domains", ", ".join(corpus.domain_names)),
            ("utterances", len(corpus.utterances)),
            ("train / test per domain", f"{args.utts} / {args.test_utts}"),
            ("Q × N", f"{args.dim} × {args.frames}"),
        ]
    )
    return CommandResult(section("Synthetic corpus", body))


def handle_convert(args: argparse.Namespace) -> CommandResult:
    model = ConversionModel.from_checkpoint(args.checkpoint)
    if args.corpus:
        corpus = load_corpus(args.corpus, with_stats=False)
        converted = convert_corpus(model, corpus, split=args.split)
        manifest = write_corpus(converted, args.out)
        emit("CLI", "converted corpus written", manifest=manifest, utterances=len(converted.utterances))
        pairs = sorted({(u.source, u.domain) for u in converted.utterances})
        lines = [f"{model.domain_names[s]} → {model.domain_names[t]}" for s, t in pairs]
        return CommandResult(
            section(f"Converted {len(converted.utterances)} utterances → {manifest}", bullet_list(lines))
        )

    if not args.input or args.target_domain is None:
        raise UsageError("convert needs --input and --target-domain (or --corpus for batch mode)")
    target = model.domain_index(args.target_domain)
    inferred = None if args.source_domain is not None else manifest_domain(args.input, args.manifest)
    if args.source_domain is not None:
        source = model.domain_index(args.source_domain)
    elif inferred is not None:
        source = model.domain_index(inferred)
        emit("CLI", "source domain from manifest", input=args.input, source=inferred)
    elif model.formulation is Formulation.CYCLEGAN:
        pair = (model.config.source_domain, model.config.target_domain)
        source = pair[0] if target == pair[1] else pair[1]
    else:
        raise UsageError(
            f"No manifest lists {args.input}; pass --source-domain (or --manifest) to pick the normalization statistics"
        )
    features = read_features(args.input, args.frame_shift_ms)
    converted = model.convert(features, source, target)
    out = write_features(args.out, converted)
    emit("CLI", "converted", input=args.input, output=out, frames=converted.n_frames)
    body = kv_table(
        [
            ("source", model.domain_names[source]),
            ("target", model.domain_names[target]),
            ("frames", converted.n_frames),
            ("output", out),
        ]
    )
    return CommandResult(section("Converted utterance", body))


DATA_COMMANDS = [
    Command(
        "synth-data",
        "Write a synthetic multi-domain corpus.",
        (
            arg("--domains", type=int, default=4, help="number of domains K (≥ 2)"),
            arg("--dim", type=int, default=8, help="feature dimension Q"),
            arg("--utts", type=int, default=20, help="training utterances per domain"),
            arg("--test-utts", type=int, default=0, help="parallel test utterances per domain"),
            arg("--frames", type=int, default=64, help="frames per utterance"),
            arg("--seed", type=int, default=0),
            arg("--style", choices=TOY_STYLES, default=TOY_STYLES[0]),
            arg("--frame-shift-ms", type=float, default=DEFAULT_FRAME_SHIFT_MS),
            arg("--out", type=Path, required=True, help="output directory"),
        ),
    ),
    Command(
        "convert",
        "Convert features with a trained checkpoint.",
        (
            arg("--checkpoint", type=Path, required=True),
            arg("--input", type=Path, help="VCF1 file to convert"),
            arg("--source-domain", help="domain of --input (name or 1-based index); default: looked up in --manifest"),
            arg("--manifest", type=Path, help="manifest listing --input; default: manifest.yaml beside it or one level up"),
            arg("--target-domain", help="name or 1-based index"),
            arg("--corpus", type=Path, help="manifest; converts every --split utterance to every other domain"),
            arg("--split", default="test"),
            arg("--frame-shift-ms", type=float, default=DEFAULT_FRAME_SHIFT_MS),
            arg("--out", type=Path, required=True, help="VCF1 file, or a directory with --corpus"),
        ),
    ),
]

DATA_HANDLERS = {
    "synth-data": handle_synth_data,
    "convert": handle_convert,
}
