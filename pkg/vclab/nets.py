"""
Generators, patch discriminators and classifiers built from GLU convolution blocks.

Every conditional layer sees the one-hot domain code appended to its input
channels and repeated over the spatial axes.

  • Generator          — 1D (Q channels × N) or 2D (1 × Q × N) encoder/decoder, conditional or not
  • PatchDiscriminator — per-segment probabilities, D = Π patches (C-StarGAN, CycleGAN)
  • MultiTaskCritic    — shared trunk, score head (Σ patches) + domain head (W-StarGAN)
  • Classifier         — per-segment softmax over L ∈ {K, 2K, K+1} classes, product-aggregated
  • save_checkpoint / read_checkpoint — "VCCK" parameter container with Adam state
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from vclab.autodiff import (
    Parameter,
    ShapeError,
    Tensor,
    as_tensor,
    batch_norm,
    broadcast_to,
    concat,
    conv,
    default_dtype,
    dropout,
    glu,
    log_sigmoid,
    log_softmax,
    logsumexp,
    reshape,
    sigmoid,
    tsum,
)
from vclab.formatters import atomic_write_bytes

DROPOUT_RATE = 0.2

# ---------------------------------------------------------------------------
# Module plumbing
# ---------------------------------------------------------------------------


class Module:
    """Parameter container with train/eval mode and a bound dropout RNG."""

    def __init__(self) -> None:
        self.training = True
        self.rng = np.random.default_rng(0)

    def children(self) -> Iterator[tuple[str, Module]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = "") -> list[tuple[str, Parameter]]:
        out = []
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                out.append((f"{prefix}{name}", value))
        for name, child in self.children():
            out.extend(child.named_parameters(f"{prefix}{name}."))
        return out

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def train(self, mode: bool = True) -> Module:
        self.training = mode
        for _, child in self.children():
            child.train(mode)
        return self

    def eval(self) -> Module:
        return self.train(False)

    def bind_rng(self, rng: np.random.Generator) -> Module:
        self.rng = rng
        for _, child in self.children():
            child.bind_rng(rng)
        return self

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def _init_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, gain: float = 1.0) -> np.ndarray:
    bound = gain * np.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Conv(Module):
    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel: Sequence[int],
        stride: Sequence[int],
        padding: Sequence[int],
        rng: np.random.Generator,
        transposed: bool = False,
    ) -> None:
        super().__init__()
        self.kernel = tuple(kernel)
        self.stride = tuple(stride)
        self.padding = tuple(padding)
        self.transposed = transposed
        self.rank = len(self.kernel)
        fan_in = in_channels * int(np.prod(self.kernel))
        shape = (in_channels, out_channels) if transposed else (out_channels, in_channels)
        self.weight = Parameter(_init_uniform(rng, shape + self.kernel, fan_in))
        self.bias = Parameter(np.zeros(out_channels))

    def __call__(self, x: Tensor) -> Tensor:
        return conv(x, self.weight, self.bias, self.stride, self.padding, self.transposed, self.rank)


class BatchNorm(Module):
    """Per-channel (1D) or per-channel-and-height (2D) normalization with batch statistics."""

    def __init__(self, channels: int, rank: int, height: int | None = None) -> None:
        super().__init__()
        if rank == 1:
            shape, self.axes = (1, channels, 1), (0, 2)
        else:
            if height is None:
                raise ShapeError("2D batch norm needs the feature height")
            shape, self.axes = (1, channels, height, 1), (0, 3)
        self.scale = Parameter(np.ones(shape))
        self.shift = Parameter(np.zeros(shape))

    def __call__(self, x: Tensor) -> Tensor:
        return batch_norm(x, self.scale, self.shift, self.axes, require_batch=self.training)


class GLUBlock(Module):
    """conv → batch norm → GLU; the conv emits twice the block width."""

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel: Sequence[int],
        stride: Sequence[int],
        padding: Sequence[int],
        rng: np.random.Generator,
        transposed: bool = False,
        height: int | None = None,
    ) -> None:
        super().__init__()
        self.conv = Conv(in_channels, 2 * out_channels, kernel, stride, padding, rng, transposed)
        self.norm = BatchNorm(2 * out_channels, len(tuple(kernel)), height)

    def __call__(self, x: Tensor) -> Tensor:
        return glu(self.norm(self.conv(x)), axis=1)


def one_hot(labels: Sequence[int] | np.ndarray, n_domains: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=int).reshape(-1)
    if labels.size and (labels.min() < 0 or labels.max() >= n_domains):
        raise ValueError(f"Domain label out of range [0, {n_domains}): {labels.tolist()}")
    out = np.zeros((labels.size, n_domains), dtype=default_dtype())
    out[np.arange(labels.size), labels] = 1.0
    return out


def condition(x: Tensor, code: Tensor | None) -> Tensor:
    """Append the (B, K) domain code to x's channels, repeated over spatial axes."""
    if code is None:
        return x
    spatial = x.shape[2:]
    tiled = broadcast_to(reshape(code, code.shape + (1,) * len(spatial)), code.shape + spatial)
    return concat([x, tiled], axis=1)


def _domain_code(labels, n_domains: int, batch: int) -> Tensor | None:
    if n_domains == 0:
        return None
    if labels is None:
        raise ValueError("This network is conditional: a target domain label is required")
    if isinstance(labels, Tensor):
        code = labels
    else:
        arr = np.asarray(labels, dtype=int).reshape(-1)
        if arr.size == 1 and batch > 1:
            arr = np.repeat(arr, batch)
        code = Tensor(one_hot(arr, n_domains))
    if code.shape != (batch, n_domains):
        raise ShapeError(f"Domain code shape {code.shape} does not match batch {batch} × {n_domains} domains")
    return code


# ---------------------------------------------------------------------------
# Generator
# ---------------------------------------------------------------------------

GENERATOR_WIDTHS = {"1d": (64, 128, 256, 128), "2d": (32, 64, 128, 64)}
DISCRIMINATOR_WIDTH = 32
CRITIC_WIDTHS = (64, 128, 128, 256)
CLASSIFIER_WIDTH = {"domain": 16, "augmented": 64}


def preset_width(width: int, preset: str) -> int:
    if preset == "full":
        return width
    if preset == "tiny":
        return max(2, width // 4)
    raise ValueError(f"Unknown preset '{preset}'. Use 'full' or 'tiny'.")


class Generator(Module):
    """G(x, k): (B, Q, N) → (B, Q, N) for N divisible by 4.

    widths = (first, down-2, down-4, bottleneck). n_domains = 0 builds the
    unconditional CycleGAN mapping.
    """

    def __init__(
        self,
        n_features: int,
        n_domains: int,
        variant: str = "1d",
        widths: Sequence[int] | None = None,
        rng: np.random.Generator | None = None,
    ) -> None:
        super().__init__()
        if variant not in GENERATOR_WIDTHS:
            raise ValueError(f"Unknown generator variant '{variant}'. Use '1d' or '2d'.")
        if variant == "2d" and n_features % 4:
            raise ShapeError(f"The 2D generator needs Q divisible by 4, got Q={n_features}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.n_features = n_features
        self.n_domains = n_domains
        self.variant = variant
        c1, c2, c3, cb = widths if widths is not None else GENERATOR_WIDTHS[variant]
        k = n_domains
        q = n_features
        if variant == "1d":
            io_k, io_p = (5,), (2,)
            ds_k, ds_s, ds_p = (4,), (2,), (1,)
            bn_k, bn_p = (5,), (2,)
            heights = [None, None, None, None]
            in_ch, out_ch = q, q
        else:
            io_k, io_p = (3, 9), (1, 4)
            ds_k, ds_s, ds_p = (4, 8), (2, 2), (1, 3)
            bn_k, bn_p = (3, 5), (1, 2)
            heights = [q, q // 2, q // 4, q // 4]
            in_ch, out_ch = 1, 1
        one = (1,) * len(io_k)
        self.blocks = [
            GLUBlock(in_ch + k, c1, io_k, one, io_p, rng, height=heights[0]),
            GLUBlock(c1 + k, c2, ds_k, ds_s, ds_p, rng, height=heights[1]),
            GLUBlock(c2 + k, c3, ds_k, ds_s, ds_p, rng, height=heights[2]),
            GLUBlock(c3 + k, cb, bn_k, one, bn_p, rng, height=heights[3]),
            GLUBlock(cb + k, c3, bn_k, one, bn_p, rng, height=heights[3]),
            GLUBlock(c3 + k, c2, ds_k, ds_s, ds_p, rng, transposed=True, height=heights[1]),
            GLUBlock(c2 + k, c1, ds_k, ds_s, ds_p, rng, transposed=True, height=heights[0]),
        ]
        self.out = Conv(c1 + k, out_ch, io_k, one, io_p, rng)

    def __call__(self, x: Tensor, labels=None) -> Tensor:
        x = as_tensor(x)
        if x.ndim != 3 or x.shape[1] != self.n_features:
            raise ShapeError(f"Generator expects (B, {self.n_features}, N), got {x.shape}")
        batch, q, n = x.shape
        if n % 4:
            raise ShapeError(f"Generator needs N divisible by 4, got N={n}; pad the sequence first")
        code = _domain_code(labels, self.n_domains, batch)
        h = reshape(x, (batch, 1, q, n)) if self.variant == "2d" else x
        for block in self.blocks:
            h = block(condition(h, code))
        h = self.out(condition(h, code))
        return reshape(h, (batch, q, n))


# ---------------------------------------------------------------------------
# Discriminators and classifiers
# ---------------------------------------------------------------------------


@dataclass
class DiscriminatorOutput:
    """patches: per-segment values (B, P); value: aggregated D (B,)."""

    patches: Tensor
    value: Tensor
    log_value: Tensor | None = None


@dataclass
class ClassifierOutput:
    """segment_log_probs: (B, L, P); log_probs: aggregated, normalized (B, L)."""

    segment_log_probs: Tensor
    log_probs: Tensor

    @property
    def probs(self) -> np.ndarray:
        return np.exp(self.log_probs.values)


def aggregate_patch_probabilities(log_patches: Tensor) -> tuple[Tensor, Tensor]:
    """D = Π_p patch_p, computed as exp(Σ log patch_p). Returns (value, log_value)."""
    log_value = tsum(log_patches, axis=-1)
    return log_value.exp(), log_value


def aggregate_patch_scores(scores: Tensor) -> Tensor:
    return tsum(scores, axis=-1)


def aggregate_segments(segment_log_probs: Tensor) -> Tensor:
    """Product of per-segment distributions, renormalized, in the log domain: (B, L, P) → (B, L)."""
    joint = tsum(segment_log_probs, axis=2)
    return joint - logsumexp(joint, axis=1, keepdims=True)


class GLUTrunk(Module):
    """Conv1d GLU stack over Q input channels: stride-1 entry then three stride-2 stages.

    Dropout follows every stage; the domain code (if any) is appended to every input.
    """

    def __init__(
        self,
        n_features: int,
        widths: Sequence[int],
        n_domains: int,
        rng: np.random.Generator,
        dropout_rate: float = DROPOUT_RATE,
    ) -> None:
        super().__init__()
        k = n_domains
        w = list(widths)
        self.n_domains = n_domains
        self.dropout_rate = dropout_rate
        self.blocks = [GLUBlock(n_features + k, w[0], (5,), (1,), (2,), rng)]
        for prev, cur in zip(w[:-1], w[1:]):
            self.blocks.append(GLUBlock(prev + k, cur, (4,), (2,), (1,), rng))
        self.width = w[-1]

    def __call__(self, x: Tensor, code: Tensor | None) -> Tensor:
        h = x
        for block in self.blocks:
            h = block(condition(h, code))
            if self.training:
                h = dropout(h, self.dropout_rate, self.rng)
        return h


def _check_input(x: Tensor, n_features: int, name: str) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 3 or x.shape[1] != n_features:
        raise ShapeError(f"{name} expects (B, {n_features}, N), got {x.shape}")
    if x.shape[2] < 8:
        raise ShapeError(f"{name} needs at least 8 frames, got {x.shape[2]}")
    return x


class PatchDiscriminator(Module):
    """Per-segment real/fake probabilities; D(y[, k]) = product over segments.

    Conditional when n_domains > 0 (C-StarGAN), unconditional otherwise (CycleGAN D_X, D_Y).
    """

    def __init__(
        self,
        n_features: int,
        n_domains: int = 0,
        width: int = DISCRIMINATOR_WIDTH,
        rng: np.random.Generator | None = None,
        dropout_rate: float = DROPOUT_RATE,
    ) -> None:
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.n_features = n_features
        self.n_domains = n_domains
        self.trunk = GLUTrunk(n_features, [width] * 4, n_domains, rng, dropout_rate)
        self.head = Conv(width + n_domains, 1, (3,), (1,), (1,), rng)

    def __call__(self, y: Tensor, labels=None) -> DiscriminatorOutput:
        y = _check_input(y, self.n_features, "PatchDiscriminator")
        if self.n_domains and labels is None:
            raise ValueError("Conditional discriminator needs the domain label k")
        code = _domain_code(labels, self.n_domains, y.shape[0])
        logits = self.head(condition(self.trunk(y, code), code))
        logits = reshape(logits, (y.shape[0], -1))
        log_patches = log_sigmoid(logits)
        value, log_value = aggregate_patch_probabilities(log_patches)
        return DiscriminatorOutput(patches=sigmoid(logits), value=value, log_value=log_value)


class MultiTaskCritic(Module):
    """Shared GLU trunk with an unbounded score head D and a K-way domain head C."""

    def __init__(
        self,
        n_features: int,
        n_domains: int,
        widths: Sequence[int] = CRITIC_WIDTHS,
        rng: np.random.Generator | None = None,
        dropout_rate: float = DROPOUT_RATE,
    ) -> None:
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.n_features = n_features
        self.n_domains = n_domains
        self.trunk = GLUTrunk(n_features, widths, 0, rng, dropout_rate)
        self.score_head = Conv(self.trunk.width, 1, (3,), (1,), (1,), rng)
        self.class_head = Conv(self.trunk.width, n_domains, (3,), (1,), (1,), rng)

    def __call__(self, y: Tensor) -> tuple[DiscriminatorOutput, ClassifierOutput]:
        y = _check_input(y, self.n_features, "MultiTaskCritic")
        h = self.trunk(y, None)
        scores = reshape(self.score_head(h), (y.shape[0], -1))
        segment_log_probs = log_softmax(self.class_head(h), axis=1)
        return (
            DiscriminatorOutput(patches=scores, value=aggregate_patch_scores(scores)),
            ClassifierOutput(segment_log_probs, aggregate_segments(segment_log_probs)),
        )

    def score(self, y: Tensor) -> Tensor:
        return self(y)[0].value


class Classifier(Module):
    """Per-segment softmax over n_classes; n_classes is K (C), 2K (A-StarGAN1) or K+1 (A-StarGAN2)."""

    def __init__(
        self,
        n_features: int,
        n_classes: int,
        width: int = CLASSIFIER_WIDTH["domain"],
        rng: np.random.Generator | None = None,
        dropout_rate: float = DROPOUT_RATE,
    ) -> None:
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.n_features = n_features
        self.n_classes = n_classes
        self.trunk = GLUTrunk(n_features, [width] * 4, 0, rng, dropout_rate)
        self.head = Conv(width, n_classes, (3,), (1,), (1,), rng)

    def __call__(self, y: Tensor) -> ClassifierOutput:
        y = _check_input(y, self.n_features, "Classifier")
        segment_log_probs = log_softmax(self.head(self.trunk(y, None)), axis=1)
        return ClassifierOutput(segment_log_probs, aggregate_segments(segment_log_probs))


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"VCCK"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    """Raised when a checkpoint file is malformed or does not match the networks."""


@dataclass
class CheckpointEntry:
    values: np.ndarray
    m: np.ndarray
    v: np.ndarray
    step: int


def named_parameters(nets: dict[str, Module]) -> list[tuple[str, Parameter]]:
    out = []
    for net_name in sorted(nets):
        for name, p in nets[net_name].named_parameters(f"{net_name}."):
            p.name = name
            out.append((name, p))
    return out


def encode_checkpoint(params: Sequence[tuple[str, Parameter]], metadata: dict) -> bytes:
    meta = json.dumps(metadata, sort_keys=True).encode("utf-8")
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(meta)), meta]
    chunks.append(struct.pack("<I", len(params)))
    for name, p in params:
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack(f"<I{p.ndim}I", p.ndim, *p.shape))
        chunks.append(struct.pack("<I", p.step))
        for arr in (p.values, p.m, p.v):
            chunks.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(chunks)


def decode_checkpoint(blob: bytes) -> tuple[dict[str, CheckpointEntry], dict]:
    if blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError("Not a checkpoint file (bad magic)")
    try:
        version, meta_len = struct.unpack_from("<II", blob, 4)
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"Unsupported checkpoint version {version}")
        pos = 12
        metadata = json.loads(blob[pos : pos + meta_len].decode("utf-8"))
        pos += meta_len
        (count,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        entries: dict[str, CheckpointEntry] = {}
        for _ in range(count):
            (name_len,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos : pos + name_len].decode("utf-8")
            pos += name_len
            (ndim,) = struct.unpack_from("<I", blob, pos)
            shape = struct.unpack_from(f"<{ndim}I", blob, pos + 4)
            pos += 4 + 4 * ndim
            (step,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            size = int(np.prod(shape))
            arrays = []
            for _ in range(3):
                arr = np.frombuffer(blob, dtype="<f8", count=size, offset=pos).reshape(shape)
                arrays.append(arr.astype(np.float64))
                pos += 8 * size
            entries[name] = CheckpointEntry(*arrays, step=step)
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"Truncated or corrupt checkpoint: {exc}") from exc
    return entries, metadata


def save_checkpoint(path: str | Path, nets: dict[str, Module], metadata: dict) -> Path:
    path = Path(path)
    atomic_write_bytes(path, encode_checkpoint(named_parameters(nets), metadata))
    return path


def read_checkpoint(path: str | Path) -> tuple[dict[str, CheckpointEntry], dict]:
    return decode_checkpoint(Path(path).read_bytes())


def restore_parameters(nets: dict[str, Module], entries: dict[str, CheckpointEntry]) -> None:
    params = named_parameters(nets)
    missing = [name for name, _ in params if name not in entries]
    if missing:
        raise CheckpointError(f"Checkpoint lacks parameters: {missing[:5]}")
    for name, p in params:
        entry = entries[name]
        if entry.values.shape != p.shape:
            raise CheckpointError(f"Parameter '{name}' has shape {entry.values.shape} in checkpoint, {p.shape} in net")
        p.assign(entry.values)
        p.m = entry.m.astype(p.dtype)
        p.v = entry.v.astype(p.dtype)
        p.step = entry.step
        p.grad = None
