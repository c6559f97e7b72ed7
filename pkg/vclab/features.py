"""
Acoustic feature sequences, per-domain statistics, conversion post-processing and I/O.

  • FeatureSequence / DomainStats / DomainCorpus
  • compute_stats, normalize / denormalize, convert_postprocess, convert_f0
  • pad_to_multiple / crop
  • read_features / write_features — "VCF1" binary files
  • load_corpus / write_corpus — YAML manifest listing domains and files
  • synth_toy_corpus — Gaussian domains over shared sinusoidal content

Voiced frames are those with f0 > 0 when an f0 track or mask is present;
sequences without either count as fully voiced.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import yaml

from vclab.formatters import atomic_write_bytes, atomic_write_text, warn

FEATURE_MAGIC = b"VCF1"
FEATURE_VERSION = 1
FLAG_F0 = 0b01
FLAG_MASK = 0b10
MANIFEST_VERSION = 1
DEFAULT_FRAME_SHIFT_MS = 5.0


class FeatureError(ValueError):
    """Raised for malformed feature sequences or feature files."""


class CorpusError(ValueError):
    """Raised when a corpus or its statistics are degenerate or incomplete."""


# ---------------------------------------------------------------------------
# Data model
# ---------------------------------------------------------------------------


@dataclass
class FeatureSequence:
    """Q×N feature matrix with optional voiced mask and f0 track (Hz, 0 = unvoiced)."""

    data: np.ndarray
    frame_shift_ms: float = DEFAULT_FRAME_SHIFT_MS
    voiced: np.ndarray | None = None
    f0: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2 or self.data.shape[1] < 1:
            raise FeatureError(f"Feature data must be Q×N with N ≥ 1, got shape {self.data.shape}")
        n = self.data.shape[1]
        if self.f0 is not None:
            self.f0 = np.asarray(self.f0, dtype=np.float64).reshape(-1)
            if self.f0.size != n:
                raise FeatureError(f"f0 has {self.f0.size} frames, features have {n}")
            if (self.f0 < 0).any():
                raise FeatureError("f0 must be non-negative")
        if self.voiced is not None:
            self.voiced = np.asarray(self.voiced, dtype=bool).reshape(-1)
            if self.voiced.size != n:
                raise FeatureError(f"Voiced mask has {self.voiced.size} frames, features have {n}")
        elif self.f0 is not None:
            self.voiced = self.f0 > 0
        if self.f0 is not None and self.voiced is not None and not np.array_equal(self.f0 > 0, self.voiced):
            raise FeatureError("f0 must be 0 exactly on unvoiced frames")

    @property
    def n_dims(self) -> int:
        return self.data.shape[0]

    @property
    def n_frames(self) -> int:
        return self.data.shape[1]

    def voiced_mask(self) -> np.ndarray:
        return self.voiced if self.voiced is not None else np.ones(self.n_frames, dtype=bool)

    def with_data(self, data: np.ndarray) -> FeatureSequence:
        return replace(self, data=data)


@dataclass(frozen=True)
class DomainStats:
    psi: np.ndarray
    zeta: np.ndarray
    mu_logf0: float | None = None
    sigma_logf0: float | None = None

    def __post_init__(self) -> None:
        if not (np.asarray(self.zeta) > 0).all():
            raise CorpusError("Feature standard deviations must be positive")
        if self.sigma_logf0 is not None and not self.sigma_logf0 > 0:
            raise CorpusError("log-F0 standard deviation must be positive")

    @property
    def has_f0(self) -> bool:
        return self.mu_logf0 is not None

    def to_dict(self) -> dict:
        return {
            "psi": [float(v) for v in self.psi],
            "zeta": [float(v) for v in self.zeta],
            "mu_logf0": self.mu_logf0,
            "sigma_logf0": self.sigma_logf0,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> DomainStats:
        return cls(
            psi=np.asarray(raw["psi"], dtype=np.float64),
            zeta=np.asarray(raw["zeta"], dtype=np.float64),
            mu_logf0=raw.get("mu_logf0"),
            sigma_logf0=raw.get("sigma_logf0"),
        )


@dataclass
class Utterance:
    domain: int
    utt_id: str
    features: FeatureSequence
    split: str = "train"
    source: int | None = None


@dataclass
class DomainCorpus:
    """K domains of utterances; stats are computed from the training split only."""

    domain_names: list[str]
    utterances: list[Utterance]
    frame_shift_ms: float = DEFAULT_FRAME_SHIFT_MS
    stats: list[DomainStats] = field(default_factory=list)

    @property
    def n_domains(self) -> int:
        return len(self.domain_names)

    @property
    def n_dims(self) -> int:
        return self.utterances[0].features.n_dims

    def split(self, name: str, domain: int | None = None) -> list[Utterance]:
        return [u for u in self.utterances if u.split == name and (domain is None or u.domain == domain)]

    def training_sequences(self, domain: int) -> list[FeatureSequence]:
        return [u.features for u in self.split("train", domain)]

    def domain_index(self, key: str | int) -> int:
        """Resolve a domain given by name or 1-based index."""
        if isinstance(key, str) and key in self.domain_names:
            return self.domain_names.index(key)
        try:
            index = int(key) - 1
        except (TypeError, ValueError):
            raise CorpusError(f"Unknown domain '{key}'. Known: {self.domain_names}") from None
        if not 0 <= index < self.n_domains:
            raise CorpusError(f"Domain {key} out of range 1..{self.n_domains}")
        return index

    def compute_all_stats(self) -> list[DomainStats]:
        dims = {u.features.n_dims for u in self.utterances}
        if len(dims) > 1:
            raise CorpusError(f"Utterances disagree on feature dimension: {sorted(dims)}")
        stats = []
        for k, name in enumerate(self.domain_names):
            seqs = self.training_sequences(k)
            if not seqs:
                raise CorpusError(f"Domain '{name}' has no training utterances")
            try:
                stats.append(compute_stats(seqs))
            except CorpusError as exc:
                raise CorpusError(f"Domain '{name}': {exc}") from exc
        self.stats = stats
        return stats


# ---------------------------------------------------------------------------
# Statistics and normalization
# ---------------------------------------------------------------------------


def compute_stats(utterances: Iterable[FeatureSequence]) -> DomainStats:
    """Per-dimension mean and population std over voiced frames; log-F0 stats when f0 is present."""
    utterances = list(utterances)
    frames = [u.data[:, u.voiced_mask()] for u in utterances]
    pooled = np.concatenate(frames, axis=1) if frames else np.zeros((0, 0))
    if pooled.shape[1] < 2:
        raise CorpusError(f"Need at least 2 voiced frames for statistics, got {pooled.shape[1]}")
    psi = pooled.mean(axis=1)
    zeta = pooled.std(axis=1)
    flat = np.flatnonzero(zeta == 0)
    if flat.size:
        raise CorpusError(f"Zero variance in feature dimension q={int(flat[0]) + 1} (degenerate corpus)")
    mu = sigma = None
    f0_tracks = [u.f0[u.f0 > 0] for u in utterances if u.f0 is not None]
    if f0_tracks:
        log_f0 = np.log(np.concatenate(f0_tracks))
        if log_f0.size < 2 or log_f0.std() == 0:
            raise CorpusError("log-F0 has no variance over voiced frames")
        mu, sigma = float(log_f0.mean()), float(log_f0.std())
    return DomainStats(psi=psi, zeta=zeta, mu_logf0=mu, sigma_logf0=sigma)


def normalize(x: FeatureSequence, stats: DomainStats) -> FeatureSequence:
    return x.with_data((x.data - stats.psi[:, None]) / stats.zeta[:, None])


def denormalize(x: FeatureSequence, stats: DomainStats) -> FeatureSequence:
    return x.with_data(x.data * stats.zeta[:, None] + stats.psi[:, None])


def convert_postprocess(y_hat: FeatureSequence, target: DomainStats) -> FeatureSequence:
    """Affine-map each dimension so its voiced-frame mean/std equal the target's ψ, ζ."""
    voiced = y_hat.data[:, y_hat.voiced_mask()]
    if voiced.shape[1] == 0:
        warn("no voiced frames, post-processing skipped")
        return y_hat
    m = voiced.mean(axis=1)
    s = voiced.std(axis=1)
    if (s == 0).any():
        warn("generated sequence has zero variance, post-processing skipped", q=int(np.flatnonzero(s == 0)[0]) + 1)
        return y_hat
    return y_hat.with_data((y_hat.data - m[:, None]) / s[:, None] * target.zeta[:, None] + target.psi[:, None])


def convert_f0(f0: np.ndarray, source: DomainStats, target: DomainStats) -> np.ndarray:
    """Log-Gaussian normalized F0 transform; unvoiced (0) frames stay 0."""
    f0 = np.asarray(f0, dtype=np.float64)
    if (f0 < 0).any():
        raise FeatureError("f0 must be non-negative")
    if not (source.has_f0 and target.has_f0):
        raise CorpusError("Both domains need log-F0 statistics to convert f0")
    out = np.zeros_like(f0)
    voiced = f0 > 0
    scaled = (np.log(f0[voiced]) - source.mu_logf0) * (target.sigma_logf0 / source.sigma_logf0)
    out[voiced] = np.exp(scaled + target.mu_logf0)
    return out


# ---------------------------------------------------------------------------
# Padding
# ---------------------------------------------------------------------------


def pad_to_multiple(x: FeatureSequence, m: int = 4) -> tuple[FeatureSequence, int]:
    """Edge-replicate frames up to the next multiple of m. Returns (padded, original length)."""
    if m < 1:
        raise ValueError(f"m must be at least 1, got {m}")
    n = x.n_frames
    extra = (-n) % m
    if extra == 0:
        return x, n
    return (
        FeatureSequence(
            data=np.pad(x.data, ((0, 0), (0, extra)), mode="edge"),
            frame_shift_ms=x.frame_shift_ms,
            voiced=None if x.voiced is None else np.pad(x.voiced, (0, extra), mode="edge"),
            f0=None if x.f0 is None else np.pad(x.f0, (0, extra), mode="edge"),
        ),
        n,
    )


def crop(x: FeatureSequence, n: int) -> FeatureSequence:
    return FeatureSequence(
        data=x.data[:, :n],
        frame_shift_ms=x.frame_shift_ms,
        voiced=None if x.voiced is None else x.voiced[:n],
        f0=None if x.f0 is None else x.f0[:n],
    )


# ---------------------------------------------------------------------------
# VCF1 files
# ---------------------------------------------------------------------------

_HEADER = struct.Struct("<4sIIII")


def encode_features(x: FeatureSequence) -> bytes:
    flags = (FLAG_F0 if x.f0 is not None else 0) | (FLAG_MASK if x.voiced is not None else 0)
    parts = [
        _HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, x.n_dims, x.n_frames, flags),
        np.ascontiguousarray(x.data.T, dtype="<f4").tobytes(),
    ]
    if x.f0 is not None:
        parts.append(np.ascontiguousarray(x.f0, dtype="<f4").tobytes())
    if x.voiced is not None:
        parts.append(x.voiced.astype(np.uint8).tobytes())
    return b"".join(parts)


def decode_features(blob: bytes, frame_shift_ms: float = DEFAULT_FRAME_SHIFT_MS) -> FeatureSequence:
    if len(blob) < _HEADER.size:
        raise FeatureError("Feature file is truncated (no header)")
    magic, version, q, n, flags = _HEADER.unpack_from(blob, 0)
    if magic != FEATURE_MAGIC:
        raise FeatureError(f"Not a VCF1 feature file (magic {magic!r})")
    if version != FEATURE_VERSION:
        raise FeatureError(f"Unsupported feature file version {version}")
    expected = _HEADER.size + 4 * q * n + (4 * n if flags & FLAG_F0 else 0) + (n if flags & FLAG_MASK else 0)
    if len(blob) != expected:
        raise FeatureError(f"Feature file has {len(blob)} bytes, header implies {expected}")
    pos = _HEADER.size
    data = np.frombuffer(blob, dtype="<f4", count=q * n, offset=pos).reshape(n, q).T.astype(np.float64)
    pos += 4 * q * n
    f0 = voiced = None
    if flags & FLAG_F0:
        f0 = np.frombuffer(blob, dtype="<f4", count=n, offset=pos).astype(np.float64)
        pos += 4 * n
    if flags & FLAG_MASK:
        voiced = np.frombuffer(blob, dtype=np.uint8, count=n, offset=pos).astype(bool)
    return FeatureSequence(data=data, frame_shift_ms=frame_shift_ms, voiced=voiced, f0=f0)


def write_features(path: str | Path, x: FeatureSequence) -> Path:
    return atomic_write_bytes(path, encode_features(x))


def read_features(path: str | Path, frame_shift_ms: float = DEFAULT_FRAME_SHIFT_MS) -> FeatureSequence:
    try:
        blob = Path(path).read_bytes()
    except FileNotFoundError:
        raise FeatureError(f"Feature file not found: {path}") from None
    try:
        return decode_features(blob, frame_shift_ms)
    except FeatureError as exc:
        raise FeatureError(f"{path}: {exc}") from exc


# ---------------------------------------------------------------------------
# Manifests
# ---------------------------------------------------------------------------


def write_corpus(corpus: DomainCorpus, out_dir: str | Path, manifest_name: str = "manifest.yaml") -> Path:
    """Write every utterance as VCF1 under out_dir/<domain>/ plus a YAML manifest."""
    out_dir = Path(out_dir)
    entries = []
    for utt in corpus.utterances:
        rel = Path(corpus.domain_names[utt.domain]) / f"{utt.utt_id}.vcf"
        write_features(out_dir / rel, utt.features)
        entry = {"domain": corpus.domain_names[utt.domain], "id": utt.utt_id, "path": rel.as_posix(), "split": utt.split}
        if utt.source is not None:
            entry["source"] = corpus.domain_names[utt.source]
        entries.append(entry)
    manifest = {
        "version": MANIFEST_VERSION,
        "frame_shift_ms": corpus.frame_shift_ms,
        "domains": list(corpus.domain_names),
        "utterances": entries,
    }
    path = out_dir / manifest_name
    atomic_write_text(path, yaml.safe_dump(manifest, sort_keys=False))
    return path


def load_corpus(manifest_path: str | Path, with_stats: bool = True) -> DomainCorpus:
    """Read a YAML (or JSON) manifest and its feature files; paths are relative to the manifest."""
    manifest_path = Path(manifest_path)
    try:
        raw = yaml.safe_load(manifest_path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise CorpusError(f"Manifest not found: {manifest_path}") from None
    except yaml.YAMLError as exc:
        raise CorpusError(f"Manifest {manifest_path} is not valid YAML/JSON: {exc}") from exc
    if not isinstance(raw, dict) or "domains" not in raw or "utterances" not in raw:
        raise CorpusError(f"Manifest {manifest_path} needs 'domains' and 'utterances' keys")
    if raw.get("version", MANIFEST_VERSION) != MANIFEST_VERSION:
        raise CorpusError(f"Unsupported manifest version {raw.get('version')}")
    names = [str(d) for d in raw["domains"]]
    shift = float(raw.get("frame_shift_ms", DEFAULT_FRAME_SHIFT_MS))
    utterances = []
    for i, entry in enumerate(raw["utterances"]):
        domain = str(entry.get("domain"))
        if domain not in names:
            raise CorpusError(f"Manifest entry {i} names unknown domain '{domain}'")
        source = entry.get("source")
        if source is not None and str(source) not in names:
            raise CorpusError(f"Manifest entry {i} names unknown source domain '{source}'")
        features = read_features(manifest_path.parent / entry["path"], shift)
        utterances.append(
            Utterance(
                domain=names.index(domain),
                utt_id=str(entry.get("id", Path(entry["path"]).stem)),
                features=features,
                split=str(entry.get("split", "train")),
                source=None if source is None else names.index(str(source)),
            )
        )
    if not utterances:
        raise CorpusError(f"Manifest {manifest_path} lists no utterances")
    corpus = DomainCorpus(domain_names=names, utterances=utterances, frame_shift_ms=shift)
    if with_stats:
        corpus.compute_all_stats()
    return corpus


def manifest_domain(feature_path: str | Path, manifest_path: str | Path | None = None) -> str | None:
    """Domain name a manifest assigns to feature_path, or None if no manifest lists it.

    Without an explicit manifest, looks for manifest.yaml in the file's directory and
    its parent (the layout write_corpus produces).
    """
    target = Path(feature_path).resolve()
    if manifest_path is not None:
        candidates = [Path(manifest_path)]
    else:
        candidates = [d / "manifest.yaml" for d in list(target.parents)[:2]]
    for candidate in candidates:
        if not candidate.is_file():
            if manifest_path is not None:
                raise CorpusError(f"Manifest not found: {candidate}")
            continue
        try:
            raw = yaml.safe_load(candidate.read_text(encoding="utf-8"))
        except yaml.YAMLError as exc:
            raise CorpusError(f"Manifest {candidate} is not valid YAML/JSON: {exc}") from exc
        for entry in (raw or {}).get("utterances", []):
            if "path" in entry and (candidate.parent / entry["path"]).resolve() == target:
                return str(entry.get("domain"))
    return None


# ---------------------------------------------------------------------------
# Synthetic corpus
# ---------------------------------------------------------------------------

TOY_STYLES = ("gaussian-domains",)


def domain_means(n_domains: int, n_dims: int, rng: np.random.Generator, spread: float = 2.0) -> np.ndarray:
    """m_0 = +spread·1, m_1 = −spread·1, further domains get unused random sign patterns.

    Once all 2^Q patterns are taken, remaining domains get spread·z with z ~ N(0, I).
    """
    means = np.empty((n_domains, n_dims))
    patterns = 2**n_dims
    for k in range(n_domains):
        if k == 0:
            means[k] = spread * np.ones(n_dims)
        elif k == 1:
            means[k] = -spread * np.ones(n_dims)
        elif k < patterns:
            taken = {tuple(m) for m in means[:k]}
            while True:
                candidate = spread * rng.choice([-1.0, 1.0], size=n_dims)
                if tuple(candidate) not in taken:
                    break
            means[k] = candidate
        else:
            means[k] = spread * rng.standard_normal(n_dims)
    return means


def content_trajectory(n_dims: int, n_frames: int, rng: np.random.Generator) -> np.ndarray:
    """Low-frequency sinusoids (0.5–3 cycles per utterance), unit amplitude, one per dimension."""
    t = np.arange(n_frames) / n_frames
    freq = rng.uniform(0.5, 3.0, size=(n_dims, 1))
    phase = rng.uniform(0.0, 2.0 * np.pi, size=(n_dims, 1))
    return np.sin(2.0 * np.pi * freq * t[None, :] + phase)


def synth_toy_corpus(
    n_domains: int,
    n_dims: int,
    utts_per_domain: int,
    n_frames: int,
    seed: int = 0,
    style: str = "gaussian-domains",
    test_utts: int = 0,
    frame_shift_ms: float = DEFAULT_FRAME_SHIFT_MS,
    noise: float = 0.3,
) -> DomainCorpus:
    """Gaussian domains over shared content.

    Utterance u of every domain shares one content trajectory c_u; domain k
    renders it as m_k + s_k ⊙ c_u + noise, with a per-dimension scale s_k.
    f0 = exp(μ_k + σ_k·c_u[0]) on all-voiced frames. Test utterances (the last
    ``test_utts`` indices) are therefore parallel across domains.
    """
    if n_domains < 2:
        raise CorpusError(f"A toy corpus needs at least 2 domains, got {n_domains}")
    if style not in TOY_STYLES:
        raise ValueError(f"Unknown toy corpus style '{style}'. Use one of: {TOY_STYLES}")
    if n_dims < 1 or n_frames < 2 or utts_per_domain < 1:
        raise ValueError("Toy corpus needs n_dims ≥ 1, n_frames ≥ 2 and at least one utterance per domain")
    rng = np.random.default_rng(seed)
    means = domain_means(n_domains, n_dims, rng)
    scales = rng.uniform(0.7, 1.3, size=(n_domains, n_dims))
    log_f0_mu = np.log(110.0) + 0.25 * np.arange(n_domains)
    log_f0_sigma = rng.uniform(0.1, 0.25, size=n_domains)
    total = utts_per_domain + test_utts
    contents = [content_trajectory(n_dims, n_frames, rng) for _ in range(total)]
    names = [f"d{k + 1}" for k in range(n_domains)]
    utterances = []
    for k in range(n_domains):
        for u, content in enumerate(contents):
            data = means[k][:, None] + scales[k][:, None] * content + noise * rng.standard_normal((n_dims, n_frames))
            f0 = np.exp(log_f0_mu[k] + log_f0_sigma[k] * content[0])
            utterances.append(
                Utterance(
                    domain=k,
                    utt_id=f"utt{u:03d}",
                    features=FeatureSequence(data=data, frame_shift_ms=frame_shift_ms, f0=f0),
                    split="train" if u < utts_per_domain else "test",
                )
            )
    corpus = DomainCorpus(domain_names=names, utterances=utterances, frame_shift_ms=frame_shift_ms)
    corpus.compute_all_stats()
    return corpus


def nearest_mean_accuracy(frames: np.ndarray, labels: Sequence[int], means: np.ndarray) -> float:
    """Fraction of (Q, N) frames whose nearest domain mean matches their label."""
    dist = ((frames.T[:, None, :] - means[None, :, :]) ** 2).sum(axis=2)
    return float(np.mean(dist.argmin(axis=1) == np.asarray(labels)))
