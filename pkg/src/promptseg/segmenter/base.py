"""Backend interface for frozen promptable segmenters.

A backend owns a frozen image encoder and a frozen mask decoder.  The image
encoder maps a preprocessed image to a dense (256, 64, 64) embedding; the
mask decoder combines that embedding with a dense prompt embedding of the
same shape and returns low-resolution mask logits on a fixed 256x256 grid.
All backend parameters carry ``requires_grad=False``: gradients flow through
the decoder into the *prompt* only.
"""

from __future__ import annotations

import abc
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from ..core import (
    FrozenParameterError,
    Image,
    ImageEmbedding,
    LogitMap,
    Mask,
    NonFiniteError,
    PromptEmbedding,
    PROMPT_CHANNELS,
    PROMPT_SIZE,
    ShapeMismatchError,
    UnsupportedOperationError,
)

LOW_RES_LOGITS = 256


@dataclass(frozen=True)
class SegmenterOutput:
    """Low-resolution mask logits, (B, 1, 256, 256)."""

    low_res_logits: Tensor

    def __post_init__(self) -> None:
        t = self.low_res_logits
        if t.ndim != 4 or t.shape[1] != 1 or t.shape[2] != LOW_RES_LOGITS or t.shape[3] != LOW_RES_LOGITS:
            raise ShapeMismatchError(
                f"SegmenterOutput.low_res_logits: expected (B, 1, {LOW_RES_LOGITS}, {LOW_RES_LOGITS}), "
                f"got {tuple(t.shape)}"
            )

    def at_resolution(self, height: int, width: int) -> Tensor:
        """Logits bilinearly resampled to an arbitrary output grid."""
        if (height, width) == tuple(self.low_res_logits.shape[-2:]):
            return self.low_res_logits
        return F.interpolate(
            self.low_res_logits, size=(height, width), mode="bilinear", align_corners=False
        )

    def logit_map(self, index: int = 0, height: int | None = None, width: int | None = None) -> LogitMap:
        t = self.low_res_logits
        if height is not None and width is not None:
            t = self.at_resolution(height, width)
        return LogitMap(t[index, 0].detach())


class SegmenterBackend(nn.Module, abc.ABC):
    """A frozen promptable segmenter exposing dense-prompt decoding."""

    kind: str = "abstract"

    @property
    @abc.abstractmethod
    def input_resolution(self) -> int:
        """Side length the backend resizes images to before encoding."""

    @abc.abstractmethod
    def encode_batch(self, images: Tensor) -> Tensor:
        """(B, 3, H, W) in [0, 1] -> dense embeddings (B, 256, 64, 64)."""

    @abc.abstractmethod
    def decode_batch(self, embeddings: Tensor, prompts: Tensor) -> SegmenterOutput:
        """Dense embeddings + dense prompts -> low-res logits (B, 1, 256, 256)."""

    def native_prompt_logits(self, image: Image, *, point: tuple[int, int] | None = None,
                             mask: Mask | None = None) -> SegmenterOutput:
        """Decode with the backend's own prompt encoder (points / masks).

        Only backends that ship a native prompt encoder implement this.
        """
        raise UnsupportedOperationError(
            f"backend {self.kind!r} has no native prompt encoder"
        )

    def assert_frozen(self) -> None:
        trainable = [n for n, p in self.named_parameters() if p.requires_grad]
        if trainable:
            raise FrozenParameterError(
                f"backend parameters must be frozen, found trainable: {trainable[:5]}"
            )


def _check_prompt_batch(prompts: Tensor) -> None:
    if prompts.ndim != 4 or tuple(prompts.shape[1:]) != (PROMPT_CHANNELS, PROMPT_SIZE, PROMPT_SIZE):
        raise ShapeMismatchError(
            f"dense prompt: expected (B, {PROMPT_CHANNELS}, {PROMPT_SIZE}, {PROMPT_SIZE}), "
            f"got {tuple(prompts.shape)}"
        )


def encode_image(backend: SegmenterBackend, image: Image) -> ImageEmbedding:
    """Embed one image with the frozen encoder (no gradients retained)."""
    with torch.no_grad():
        feats = backend.encode_batch(image.pixels.unsqueeze(0))
    return ImageEmbedding(feats.squeeze(0))

def decode_mask(
    backend: SegmenterBackend, embedding: ImageEmbedding, prompt: PromptEmbedding
) -> SegmenterOutput:
    """Decode one embedding/prompt pair into low-resolution mask logits.

    The prompt tensor keeps its autograd history, so the result is
    differentiable with respect to whatever produced the prompt.
    """
    out = backend.decode_batch(
        embedding.features.unsqueeze(0), prompt.features.unsqueeze(0)
    )
    if not bool(torch.isfinite(out.low_res_logits).all()):
        raise NonFiniteError("segmenter produced non-finite logits")
    return out


def segment_with_prompt(
    backend: SegmenterBackend, generator: nn.Module, image: Image
) -> SegmenterOutput:
    """Full pipeline: image -> generated prompt -> frozen decode."""
    from ..generator import generate_prompt  # local import to avoid a cycle

    prompt = generate_prompt(generator, image)
    return decode_mask(backend, encode_image(backend, image), prompt)


def derive_point_prompt(mask: Mask) -> tuple[int, int]:
    """(row, col) of the foreground pixel closest to the foreground centroid.

    Raises ``ValueError`` for an empty mask: no point prompt can be derived
    from a mask with no foreground.
    """
    fg = torch.nonzero(mask.data > 0)
    if fg.numel() == 0:
        raise ValueError("cannot derive a point prompt from an empty mask")
    centroid = fg.float().mean(dim=0)
    dist = ((fg.float() - centroid) ** 2).sum(dim=1)
    best = fg[int(torch.argmin(dist))]
    return int(best[0]), int(best[1])


def baseline_prompt_forward(
    backend: SegmenterBackend,
    image: Image,
    *,
    point: tuple[int, int] | None = None,
    mask: Mask | None = None,
) -> SegmenterOutput:
    """Reference forward pass using the backend's native prompt encoder.

    Exactly one of ``point`` (a (row, col) pixel coordinate in the original
    image) or ``mask`` (a ground-truth mask, from which logits are produced
    via the backend's mask-prompt path) must be given.
    """
    if (point is None) == (mask is None):
        raise ValueError("provide exactly one of point= or mask=")
    return backend.native_prompt_logits(image, point=point, mask=mask)
