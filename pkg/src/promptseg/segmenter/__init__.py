"""Frozen promptable-segmenter backends and typed operations on them."""

from .base import (
    LOW_RES_LOGITS,
    SegmenterBackend,
    SegmenterOutput,
    baseline_prompt_forward,
    decode_mask,
    derive_point_prompt,
    encode_image,
    segment_with_prompt,
)
from .stub import DEFAULT_STUB_SEED, FrozenStubBackend


def build_backend(kind: str, **kwargs) -> SegmenterBackend:
    """Factory for segmenter backends.

    ``stub`` is always available; ``foundation-vit-huge`` needs the optional
    ``segment-anything`` extra plus a ``weights_path``.
    """
    if kind == "stub":
        return FrozenStubBackend(**kwargs)
    if kind == "foundation-vit-huge":
        from .foundation import FoundationViTHBackend

        return FoundationViTHBackend(**kwargs)
    raise ValueError(f"unknown backend kind {kind!r}; choose 'stub' or 'foundation-vit-huge'")


__all__ = [
    "LOW_RES_LOGITS",
    "SegmenterBackend",
    "SegmenterOutput",
    "FrozenStubBackend",
    "DEFAULT_STUB_SEED",
    "build_backend",
    "baseline_prompt_forward",
    "decode_mask",
    "derive_point_prompt",
    "encode_image",
    "segment_with_prompt",
]
