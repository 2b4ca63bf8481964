"""Core value types, error types and parameter bookkeeping shared by all modules.

Conventions used throughout the package:

* images are ``float32`` tensors shaped ``(3, H, W)`` with pixel values in
  ``[0, 1]`` before any backbone-specific normalization;
* binary masks are ``(H, W)`` tensors containing only ``{0, 1}``;
* prompt embeddings are ``(256, 64, 64)`` tensors with values in ``[-1, 1]``;
* logit maps are unbounded ``(H, W)`` tensors that become probabilities
  through a sigmoid.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import torch
from torch import Tensor, nn

PROMPT_CHANNELS = 256
PROMPT_SIZE = 64
MIN_IMAGE_SIZE = 32
DEFAULT_BINARIZE_THRESHOLD = 0.5


class ShapeMismatchError(ValueError):
    """A tensor does not match the shape a contract requires."""


class NonFiniteError(ValueError):
    """An input or intermediate value contains NaN or +/-inf."""


class MissingWeightsError(FileNotFoundError):
    """Pretrained weights were requested but are not available."""


class UnsupportedOperationError(RuntimeError):
    """The selected backend cannot perform the requested operation."""


class FrozenParameterError(RuntimeError):
    """Parameters that must remain frozen were modified."""


class DatasetLayoutError(RuntimeError):
    """A dataset directory does not follow the documented layout."""


def _require_finite(t: Tensor, what: str) -> None:
    if not bool(torch.isfinite(t).all()):
        raise NonFiniteError(f"{what} contains non-finite values")


def _shape_error(what: str, expected: str, actual: Sequence[int]) -> ShapeMismatchError:
    return ShapeMismatchError(f"{what}: expected shape {expected}, got {tuple(actual)}")


@dataclass(frozen=True)
class Image:
    """A single RGB image, channels-first, pixel values in [0, 1]."""

    pixels: Tensor

    def __post_init__(self) -> None:
        p = self.pixels
        if p.ndim != 3 or p.shape[0] != 3:
            raise _shape_error("Image.pixels", "(3, H, W)", p.shape)
        if p.shape[1] < MIN_IMAGE_SIZE or p.shape[2] < MIN_IMAGE_SIZE:
            raise ShapeMismatchError(
                f"Image.pixels: spatial dims must be >= {MIN_IMAGE_SIZE}, got {tuple(p.shape[1:])}"
            )
        _require_finite(p, "Image.pixels")

    @property
    def height(self) -> int:
        return int(self.pixels.shape[1])

    @property
    def width(self) -> int:
        return int(self.pixels.shape[2])


@dataclass(frozen=True)
class Mask:
    """A binary segmentation mask shaped (H, W) with values in {0, 1}."""

    data: Tensor

    def __post_init__(self) -> None:
        d = self.data
        if d.ndim != 2:
            raise _shape_error("Mask.data", "(H, W)", d.shape)
        _require_finite(d.float(), "Mask.data")
        uniq = torch.unique(d)
        if not bool(((uniq == 0) | (uniq == 1)).all()):
            raise ValueError("Mask.data must contain only {0, 1}")

    @property
    def height(self) -> int:
        return int(self.data.shape[0])

    @property
    def width(self) -> int:
        return int(self.data.shape[1])

    def foreground_fraction(self) -> float:
        return float(self.data.float().mean())


@dataclass(frozen=True)
class LogitMap:
    """An unbounded per-pixel logit map shaped (H, W)."""

    data: Tensor

    def __post_init__(self) -> None:
        if self.data.ndim != 2:
            raise _shape_error("LogitMap.data", "(H, W)", self.data.shape)
        _require_finite(self.data, "LogitMap.data")

    def probabilities(self) -> Tensor:
        return torch.sigmoid(self.data)


@dataclass(frozen=True)
class ImageEmbedding:
    """Dense image features produced by a segmenter backend, (256, 64, 64)."""

    features: Tensor

    def __post_init__(self) -> None:
        f = self.features
        if f.ndim != 3 or f.shape[0] != PROMPT_CHANNELS:
            raise _shape_error("ImageEmbedding.features", f"({PROMPT_CHANNELS}, h, w)", f.shape)
        _require_finite(f, "ImageEmbedding.features")


@dataclass(frozen=True)
class PromptEmbedding:
    """A dense prompt embedding shaped (256, 64, 64) with values in [-1, 1]."""

    features: Tensor

    def __post_init__(self) -> None:
        f = self.features
        expected = (PROMPT_CHANNELS, PROMPT_SIZE, PROMPT_SIZE)
        if tuple(f.shape) != expected:
            raise _shape_error("PromptEmbedding.features", str(expected), f.shape)
        _require_finite(f, "PromptEmbedding.features")
        with torch.no_grad():
            lo, hi = float(f.min()), float(f.max())
        if lo < -1.0 or hi > 1.0:
            raise ValueError(
                f"PromptEmbedding.features must lie in [-1, 1], got range [{lo:.6g}, {hi:.6g}]"
            )


def binarize(
    logits: LogitMap | Tensor, threshold: float = DEFAULT_BINARIZE_THRESHOLD
) -> Mask:
    """Threshold a logit map into a binary mask.

    ``sigmoid(x) >= t`` is evaluated as ``x >= logit(t)`` so no probabilities
    are materialized; ties go to foreground.
    """
    if not (0.0 < threshold < 1.0):
        raise ValueError(f"threshold must lie strictly inside (0, 1), got {threshold}")
    data = logits.data if isinstance(logits, LogitMap) else logits
    if data.ndim != 2:
        raise _shape_error("binarize input", "(H, W)", data.shape)
    _require_finite(data, "binarize input")
    cut = math.log(threshold / (1.0 - threshold))
    return Mask((data >= cut).to(torch.uint8))


def initialize_parameters(module: nn.Module, seed: int) -> None:
    """Deterministically (re-)initialize all parameters of ``module``.

    Conv/linear weights get Kaiming-normal (fan-in) draws from an explicit
    ``torch.Generator`` seeded with ``seed``; norm weights are set to 1 and
    all biases to 0.  Two calls with equal seeds on equal architectures yield
    bitwise-identical parameters, independent of global RNG state.
    """
    gen = torch.Generator().manual_seed(seed)
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            weight = m.weight
            if isinstance(m, nn.ConvTranspose2d):
                # transposed conv weight is (in, out, kh, kw); fan-in is in * k * k
                fan_in = weight.shape[0] * weight.shape[2] * weight.shape[3]
            elif isinstance(m, nn.Conv2d):
                fan_in = weight.shape[1] * weight.shape[2] * weight.shape[3]
            else:
                fan_in = weight.shape[1]
            std = math.sqrt(2.0 / max(fan_in, 1))
            with torch.no_grad():
                weight.normal_(mean=0.0, std=std, generator=gen)
                if m.bias is not None:
                    m.bias.zero_()
        elif isinstance(m, (nn.BatchNorm2d, nn.GroupNorm, nn.LayerNorm)):
            with torch.no_grad():
                if m.weight is not None:
                    m.weight.fill_(1.0)
                if m.bias is not None:
                    m.bias.zero_()


# ---------------------------------------------------------------------------
# Parameter snapshots
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SnapshotEntry:
    name: str
    shape: tuple[int, ...]
    checksum: str


@dataclass(frozen=True)
class ParameterSnapshot:
    """Content hash of every named parameter of a module.

    Only learnable parameters are hashed; buffers (e.g. batch-norm running
    statistics) are excluded on purpose, since frozen-ness is a statement
    about what the optimizer may touch.
    """

    entries: tuple[SnapshotEntry, ...]
    checksum: str

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ParameterSnapshot):
            return NotImplemented
        return self.checksum == other.checksum and self.entries == other.entries

    def __iter__(self) -> Iterator[SnapshotEntry]:
        return iter(self.entries)

    def diff(self, other: "ParameterSnapshot") -> list[str]:
        """Names whose checksum differs between the two snapshots."""
        mine = {e.name: e.checksum for e in self.entries}
        theirs = {e.name: e.checksum for e in other.entries}
        names = sorted(set(mine) | set(theirs))
        return [n for n in names if mine.get(n) != theirs.get(n)]

    def to_manifest(self) -> dict:
        return {
            "checksum": self.checksum,
            "parameters": [
                {"name": e.name, "shape": list(e.shape), "checksum": e.checksum}
                for e in self.entries
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_manifest(), indent=2, sort_keys=True)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def from_manifest(cls, manifest: Mapping) -> "ParameterSnapshot":
        entries = tuple(
            SnapshotEntry(p["name"], tuple(p["shape"]), p["checksum"])
            for p in manifest["parameters"]
        )
        return cls(entries=entries, checksum=manifest["checksum"])

    @classmethod
    def load(cls, path: str | Path) -> "ParameterSnapshot":
        return cls.from_manifest(json.loads(Path(path).read_text()))


def _canonical_bytes(param: Tensor) -> bytes:
    # float32 little-endian is the canonical on-the-wire form; this keeps the
    # digest independent of the dtype/device the module happens to run in.
    arr = param.detach().cpu().to(torch.float32).contiguous().numpy()
    return arr.astype("<f4", copy=False).tobytes()


def snapshot_parameters(module: nn.Module) -> ParameterSnapshot:
    """Hash all named parameters of ``module`` into a deterministic snapshot.

    Parameters are visited in lexicographic name order and each is serialized
    as little-endian float32 before hashing, so equal weights always produce
    equal snapshots regardless of construction order, device or dtype.
    """
    entries = []
    global_h = hashlib.sha256()
    for name, param in sorted(module.named_parameters(), key=lambda kv: kv[0]):
        h = hashlib.sha256(_canonical_bytes(param)).hexdigest()
        entries.append(SnapshotEntry(name=name, shape=tuple(param.shape), checksum=h))
        global_h.update(name.encode("utf-8"))
        global_h.update(str(tuple(param.shape)).encode("utf-8"))
        global_h.update(h.encode("utf-8"))
    return ParameterSnapshot(entries=tuple(entries), checksum=global_h.hexdigest())
