"""
Objective evaluation of converted features.

  • mcd_matrix / mcd_frame — mel-cepstral distortion in dB, first coefficient excluded
  • dtw_mcd                — average MCD along the DTW path (steps (1,0), (0,1), (1,1))
  • modulation_spectrum    — averaged log-power spectrum of one coefficient's trajectory
  • FrameClassifier        — per-domain diagonal Gaussians for frame-level domain accuracy
  • adversary_report       — mean discriminator / classifier outputs on converted samples
  • mean_ci                — mean ± 1.96·stderr

Utterances are weighted equally in every average over a test set.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import librosa
import numpy as np
from scipy import signal

from vclab.autodiff import Tensor, no_grad
from vclab.features import DomainCorpus, FeatureSequence
from vclab.formatters import warn
from vclab.nets import Module, PatchDiscriminator
from vclab.objectives import Formulation

MCD_SCALE = 10.0 / math.log(10.0)
MODSPEC_WINDOW = 128
MODSPEC_HOP = 64
DB_FLOOR = -120.0


# ---------------------------------------------------------------------------
# MCD and DTW
# ---------------------------------------------------------------------------


def mcd_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Frame-pair MCD for a (Q, N) against b (Q, M) → (N, M) dB, coefficients 2..Q only."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape[0] != b.shape[0]:
        raise ValueError(f"Feature dimensions differ: {a.shape[0]} vs {b.shape[0]}")
    if a.shape[0] < 2:
        raise ValueError(f"MCD needs Q ≥ 2, got Q={a.shape[0]}")
    diff = a[1:, :, None] - b[1:, None, :]
    return MCD_SCALE * np.sqrt(2.0 * np.sum(diff * diff, axis=0))


def mcd_frame(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64).reshape(-1, 1)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 1)
    return float(mcd_matrix(a, b)[0, 0])


@dataclass(frozen=True)
class DtwPath:
    """0-based (i, j) pairs from (0, 0) to (N−1, M−1)."""

    pairs: np.ndarray

    def __post_init__(self) -> None:
        steps = np.diff(self.pairs, axis=0)
        allowed = {(1, 0), (0, 1), (1, 1)}
        if any(tuple(int(v) for v in s) not in allowed for s in steps):
            raise ValueError("DTW path contains a step outside {(1,0), (0,1), (1,1)}")

    def __len__(self) -> int:
        return len(self.pairs)

    def transposed(self) -> DtwPath:
        return DtwPath(self.pairs[:, ::-1].copy())


def dtw_mcd(converted: FeatureSequence | np.ndarray, target: FeatureSequence | np.ndarray) -> tuple[float, DtwPath]:
    """Minimum-total-MCD monotone alignment; returns (total / path length, path)."""
    a = converted.data if isinstance(converted, FeatureSequence) else np.asarray(converted)
    b = target.data if isinstance(target, FeatureSequence) else np.asarray(target)
    if a.shape[1] == 0 or b.shape[1] == 0:
        raise ValueError("dtw_mcd needs non-empty sequences")
    cost = mcd_matrix(a, b)
    acc, warp = librosa.sequence.dtw(C=cost, backtrack=True)
    path = DtwPath(np.asarray(warp[::-1], dtype=int))
    return float(acc[-1, -1] / len(path)), path


# ---------------------------------------------------------------------------
# Modulation spectra
# ---------------------------------------------------------------------------


def _segments(trajectory: np.ndarray, window: int, hop: int) -> np.ndarray:
    n = trajectory.size
    extra = (-(n - window)) % hop
    padded = np.pad(trajectory, (0, extra))
    return librosa.util.frame(padded, frame_length=window, hop_length=hop)


def modulation_spectrum(
    sequences: Sequence[FeatureSequence],
    q: int,
    window: int = MODSPEC_WINDOW,
    hop: int = MODSPEC_HOP,
    floor_db: float = DB_FLOOR,
) -> tuple[np.ndarray, np.ndarray]:
    """Average log-power spectrum of the mean-removed q-th (0-based) trajectory.

    Each utterance: Hann-windowed segments (final one zero-padded), averaged
    periodogram. Utterances are averaged in the power domain. Returns (Hz, dB).
    """
    taper = signal.get_window("hann", window)
    spectra = []
    shift_ms = None
    for i, seq in enumerate(sequences):
        if seq.n_frames < window:
            warn("trajectory shorter than modulation window, utterance skipped", index=i, frames=seq.n_frames)
            continue
        shift_ms = seq.frame_shift_ms
        trajectory = seq.data[q] - seq.data[q].mean()
        frames = _segments(trajectory, window, hop) * taper[:, None]
        power = np.abs(np.fft.rfft(frames, axis=0)) ** 2 / np.sum(taper**2)
        spectra.append(power.mean(axis=1))
    if not spectra:
        raise ValueError(f"No trajectory is at least {window} frames long")
    mean_power = np.mean(spectra, axis=0)
    freqs = np.fft.rfftfreq(window, d=shift_ms / 1000.0)
    db = 10.0 * np.log10(np.maximum(mean_power, 10.0 ** (floor_db / 10.0)))
    return freqs, db


# ---------------------------------------------------------------------------
# Frame classifier
# ---------------------------------------------------------------------------


class FrameClassifier:
    """Per-domain diagonal Gaussian over raw feature frames, fit on real training data."""

    def __init__(self, means: np.ndarray, variances: np.ndarray) -> None:
        self.means = means
        self.variances = variances

    @classmethod
    def fit(cls, corpus: DomainCorpus) -> FrameClassifier:
        means, variances = [], []
        for k in range(corpus.n_domains):
            frames = np.concatenate([s.data for s in corpus.training_sequences(k)], axis=1)
            means.append(frames.mean(axis=1))
            variances.append(np.maximum(frames.var(axis=1), 1e-12))
        return cls(np.asarray(means), np.asarray(variances))

    def log_likelihood(self, frames: np.ndarray) -> np.ndarray:
        """(Q, N) frames → (N, K) log-densities."""
        x = np.asarray(frames, dtype=np.float64).T[:, None, :]
        z = (x - self.means[None]) ** 2 / self.variances[None]
        return -0.5 * np.sum(z + np.log(2.0 * np.pi * self.variances[None]), axis=2)

    def predict(self, frames: np.ndarray) -> np.ndarray:
        return self.log_likelihood(frames).argmax(axis=1)

    def accuracy(self, sequences: Sequence[FeatureSequence], labels: Sequence[int]) -> float:
        """Per-utterance frame accuracy, averaged over utterances."""
        scores = [float(np.mean(self.predict(s.data) == k)) for s, k in zip(sequences, labels)]
        return float(np.mean(scores)) if scores else float("nan")


# ---------------------------------------------------------------------------
# Adversary statistics
# ---------------------------------------------------------------------------


def segment_probabilities(probs: np.ndarray, target: int, n_domains: int) -> tuple[np.ndarray, np.ndarray]:
    """Augmented-classifier outputs (L, P) → per-segment (real-probability, target-probability).

    real = Σ_{k<K} p_k; target = p_target / real (0 where real is 0).
    """
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim == 1:
        probs = probs[:, None]
    real = probs[:n_domains].sum(axis=0)
    target_prob = np.divide(probs[target], real, out=np.zeros_like(real), where=real > 0)
    return real, target_prob


@dataclass
class AdversaryRow:
    source: int
    target: int
    real_prob: float
    target_prob: float
    n: int


def adversary_report(
    formulation: Formulation | str,
    nets: Mapping[str, Module],
    conversions: Sequence[tuple[int, int, np.ndarray]],
) -> list[AdversaryRow]:
    """Mean adversary outputs per (source, target) pair on converted, normalized features.

    A-StarGAN: real-probability and renormalized target probability per segment.
    C-StarGAN: D(ŷ, k) and p_C(k|ŷ). W-StarGAN: critic score and p_C(k|ŷ).
    Each conversion is (source, target, (Q, N) array).
    """
    formulation = Formulation(formulation)
    if formulation is Formulation.CYCLEGAN:
        raise ValueError("adversary_report covers the multi-domain formulations only")
    if formulation.augmented:
        required = ("classifier",)
    elif formulation is Formulation.C_STARGAN:
        required = ("discriminator", "classifier")
    else:
        required = ("critic",)
    missing = [name for name in required if name not in nets]
    if missing:
        raise ValueError(f"{formulation} report needs networks {missing}; checkpoint is from another formulation")
    for net in nets.values():
        net.eval()

    per_pair: dict[tuple[int, int], list[tuple[float, float]]] = {}
    with no_grad():
        for source, target, data in conversions:
            y = Tensor(np.asarray(data)[None])
            if formulation.augmented:
                out = nets["classifier"](y)
                n_classes = out.segment_log_probs.shape[1]
                n_domains = n_classes // 2 if formulation is Formulation.A_STARGAN1 else n_classes - 1
                real, tprob = segment_probabilities(np.exp(out.segment_log_probs.values[0]), target, n_domains)
                pair = (float(real.mean()), float(tprob.mean()))
            elif formulation is Formulation.C_STARGAN:
                disc: PatchDiscriminator = nets["discriminator"]  # type: ignore[assignment]
                d_value = disc(y, [target]).value.item()
                pair = (d_value, float(nets["classifier"](y).probs[0, target]))
            else:
                score, cls = nets["critic"](y)
                pair = (score.value.item(), float(cls.probs[0, target]))
            per_pair.setdefault((source, target), []).append(pair)
    rows = []
    for (source, target), values in sorted(per_pair.items()):
        arr = np.asarray(values)
        rows.append(AdversaryRow(source, target, float(arr[:, 0].mean()), float(arr[:, 1].mean()), len(values)))
    return rows


# ---------------------------------------------------------------------------
# Summaries
# ---------------------------------------------------------------------------


def mean_ci(values: Sequence[float]) -> tuple[float, float]:
    """(mean, 1.96 · standard error); the half-width is 0 for fewer than two values."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        return float("nan"), float("nan")
    if arr.size < 2:
        return float(arr.mean()), 0.0
    return float(arr.mean()), float(1.96 * arr.std(ddof=1) / math.sqrt(arr.size))
