"""
Report commands.

Commands:
  evaluate       — DTW-MCD per utterance and per pair, modulation spectra, frame-classifier accuracy,
                   adversary outputs (with --checkpoint)
  verify-theory  — tabular checks of the optimal classifier and the KL equilibrium
"""

from __future__ import annotations

import argparse
from pathlib import Path

import yaml

from vclab.commands import Command, CommandResult, UsageError, arg
from vclab.conversion import ConversionModel
from vclab.evaluation import (
    FrameClassifier,
    adversary_report,
    dtw_mcd,
    mean_ci,
    modulation_spectrum,
)
from vclab.features import DomainCorpus, Utterance, load_corpus, normalize
from vclab.formatters import atomic_write_text, bullet_list, emit, kv_table, pass_fail, section, warn, write_csv
from vclab.objectives import Formulation
from vclab.theory import verify

# 1-based dimensions plotted for modulation spectra
DEFAULT_MODSPEC_DIMS = "5,10,20"


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------


def _parse_dims(raw: str) -> list[int]:
    try:
        dims = [int(v) for v in raw.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"--modspec-dims must be comma-separated integers, got '{raw}'") from None
    if any(d < 1 for d in dims):
        raise UsageError("--modspec-dims are 1-based")
    return dims


def _pair_with_references(
    converted: DomainCorpus, reference: DomainCorpus, split: str
) -> list[tuple[Utterance, Utterance]]:
    """Match each converted utterance with the reference utterance of its target domain and id."""
    if list(converted.domain_names) != list(reference.domain_names):
        raise UsageError(f"Domains differ: converted {converted.domain_names}, reference {reference.domain_names}")
    index = {(u.domain, u.utt_id): u for u in reference.split(split)}
    pairs = []
    for utt in converted.utterances:
        ref = index.get((utt.domain, utt.utt_id))
        if ref is None:
            warn("no reference utterance, skipped", domain=converted.domain_names[utt.domain], id=utt.utt_id)
            continue
        pairs.append((utt, ref))
    if not pairs:
        raise UsageError(f"No converted utterance has a '{split}' reference with the same domain and id")
    return pairs


def handle_evaluate(args: argparse.Namespace) -> CommandResult:
    converted = load_corpus(args.converted, with_stats=False)
    reference = load_corpus(args.reference)
    names = reference.domain_names
    pairs = _pair_with_references(converted, reference, args.split)
    out = Path(args.out)

    rows, per_pair = [], {}
    for utt, ref in pairs:
        source = utt.source if utt.source is not None else utt.domain
        mcd, path = dtw_mcd(utt.features, ref.features)
        rows.append((names[source], names[utt.domain], utt.utt_id, mcd, len(path)))
        per_pair.setdefault((source, utt.domain), []).append(mcd)
    write_csv(out / "mcd.csv", ("source", "target", "id", "mcd_db", "path_length"), rows)

    table = []
    for (s, t), values in sorted(per_pair.items()):
        mean, ci = mean_ci(values)
        table.append((names[s], names[t], mean, ci, len(values)))
    write_csv(out / "mcd_pairs.csv", ("source", "target", "mean_db", "ci95_db", "n"), table)

    spectra = []
    dims = [d for d in _parse_dims(args.modspec_dims) if d <= reference.n_dims]
    ref_seqs = [u.features for _, u in pairs]
    conv_seqs = [u.features for u, _ in pairs]
    for d in dims:
        for label, seqs in (("converted", conv_seqs), ("reference", ref_seqs)):
            try:
                freqs, db = modulation_spectrum(seqs, d - 1)
            except ValueError as exc:
                warn("modulation spectrum skipped", dim=d, set=label, reason=exc)
                continue
            spectra.extend((label, d, float(f), float(v)) for f, v in zip(freqs, db))
    write_csv(out / "modspec.csv", ("set", "dim", "freq_hz", "power_db"), spectra)

    classifier = FrameClassifier.fit(reference)
    accuracy = classifier.accuracy(conv_seqs, [u.domain for u, _ in pairs])

    summary = [
        ("utterances", len(pairs)),
        ("mean MCD [dB]", "{:.3f} ± {:.3f}".format(*mean_ci([r[3] for r in rows]))),
        ("frame accuracy (target domain)", accuracy),
    ]
    text = section("Evaluation", kv_table(summary))
    text += "\n\n" + section(
        "MCD per pair [dB]", bullet_list([f"{s} → {t}: {m:.3f} ± {c:.3f} (n={n})" for s, t, m, c, n in table])
    )

    if args.checkpoint:
        text += "\n\n" + _adversary_section(args.checkpoint, pairs, out)
    emit("CLI", "evaluation written", out=out, utterances=len(pairs))
    return CommandResult(text)


def _adversary_section(checkpoint: Path, pairs: list[tuple[Utterance, Utterance]], out: Path) -> str:
    model = ConversionModel.from_checkpoint(checkpoint)
    if model.formulation is Formulation.CYCLEGAN:
        raise UsageError("The adversary report covers the multi-domain formulations only")
    conversions = []
    for utt, _ in pairs:
        source = utt.source if utt.source is not None else utt.domain
        conversions.append((source, utt.domain, normalize(utt.features, model.stats[utt.domain]).data))
    rows = adversary_report(model.formulation, model.nets, conversions)
    names = model.domain_names
    write_csv(
        out / "adversary.csv",
        ("source", "target", "real_or_d", "target_prob", "n"),
        [(names[r.source], names[r.target], r.real_prob, r.target_prob, r.n) for r in rows],
    )
    lines = [f"{names[r.source]} → {names[r.target]}: D/real={r.real_prob:.4f} p(target)={r.target_prob:.4f}" for r in rows]
    return section(f"Adversary outputs ({model.formulation})", bullet_list(lines))


# ---------------------------------------------------------------------------
# verify-theory
# ---------------------------------------------------------------------------


def handle_verify_theory(args: argparse.Namespace) -> CommandResult:
    report = verify(
        n_domains=args.domains,
        support=args.support,
        seeds=args.seeds,
        steps=args.steps,
        step_size=args.step_size,
        kl_tol=args.kl_tol,
        optimum_games=args.optimum_games,
        optimum_candidates=args.optimum_candidates,
        seed=args.seed,
    )
    if args.out:
        out = Path(args.out)
        summary = {
            "passed": report.passed,
            "checks": dict(report.checks),
            "details": {k: float(v) for k, v in report.details.items()},
        }
        atomic_write_text(out / "theory_summary.yaml", yaml.safe_dump(summary, sort_keys=False))
        width = max((t.per_domain.shape[1] for t in report.trajectories.values()), default=0)
        rows = []
        for name, trajectory in report.trajectories.items():
            blank = [""] * (width - trajectory.per_domain.shape[1])
            for step, (kl, per_domain) in enumerate(zip(trajectory.kl, trajectory.per_domain)):
                rows.append((name, step, float(kl), *(float(v) for v in per_domain), *blank))
        header = ("run", "step", "kl", *(f"kl_d{k + 1}" for k in range(width)))
        write_csv(out / "theory_trajectories.csv", header, rows)
        emit("CLI", "theory report written", out=out)
    checks = [f"{pass_fail(ok)}  {name}" for name, ok in report.checks.items()]
    text = section("Theory checks", bullet_list(checks)) + "\n\n" + section("Details", kv_table(sorted(report.details.items())))
    return CommandResult(text, exit_code=0 if report.passed else 2)


REPORT_COMMANDS = [
    Command(
        "evaluate",
        "Score converted features against parallel references.",
        (
            arg("--converted", type=Path, required=True, help="manifest written by convert --corpus"),
            arg("--reference", type=Path, required=True, help="original corpus manifest"),
            arg("--split", default="test"),
            arg("--modspec-dims", default=DEFAULT_MODSPEC_DIMS, help="1-based dimensions, comma-separated"),
            arg("--checkpoint", type=Path, help="also report adversary outputs on the conversions"),
            arg("--out", type=Path, required=True, help="directory for the CSV reports"),
        ),
    ),
    Command(
        "verify-theory",
        "Check the optimal classifier and the KL equilibrium on random tabular games.",
        (
            arg("--domains", type=int, default=3),
            arg("--support", type=int, default=8),
            arg("--seeds", type=int, default=20),
            arg("--steps", type=int, default=5000),
            arg("--step-size", type=float, default=1.0),
            arg("--kl-tol", type=float, default=1e-3),
            arg("--optimum-games", type=int, default=100),
            arg("--optimum-candidates", type=int, default=1000),
            arg("--seed", type=int, default=0),
            arg("--out", type=Path, help="directory for the summary YAML and trajectory CSV"),
        ),
    ),
]

REPORT_HANDLERS = {
    "evaluate": handle_evaluate,
    "verify-theory": handle_verify_theory,
}
