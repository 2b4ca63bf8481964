"""Lightweight surrogate mask decoder.

Maps a dense prompt embedding (256, 64, 64) straight to mask logits on a
256x256 grid through two stride-2 transposed convolutions (64 -> 128 -> 256),
replacing the heavy frozen decoder at inference time.  Intermediate width is
64 channels, keeping the module orders of magnitude smaller than the prompt
generator it rides on.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .core import (
    PROMPT_CHANNELS,
    PROMPT_SIZE,
    PromptEmbedding,
    ShapeMismatchError,
    initialize_parameters,
)

SURROGATE_OUTPUT = 256
_HIDDEN = 64


class SurrogateDecoder(nn.Module):
    """Two deconvolution layers: prompt embedding -> (1, 256, 256) logits."""

    def __init__(self, init_seed: int = 0):
        super().__init__()
        self.up1 = nn.ConvTranspose2d(PROMPT_CHANNELS, _HIDDEN, kernel_size=4, stride=2, padding=1)
        self.up2 = nn.ConvTranspose2d(_HIDDEN, 1, kernel_size=4, stride=2, padding=1)
        initialize_parameters(self, init_seed)

    def forward(self, prompts: Tensor) -> Tensor:
        if prompts.ndim != 4 or tuple(prompts.shape[1:]) != (
            PROMPT_CHANNELS,
            PROMPT_SIZE,
            PROMPT_SIZE,
        ):
            raise ShapeMismatchError(
                f"surrogate input: expected (B, {PROMPT_CHANNELS}, {PROMPT_SIZE}, {PROMPT_SIZE}), "
                f"got {tuple(prompts.shape)}"
            )
        h = F.relu(self.up1(prompts))
        logits = self.up2(h)
        # 64 -> 128 -> 256 by construction; guard anyway
        if logits.shape[-2:] != (SURROGATE_OUTPUT, SURROGATE_OUTPUT):
            raise ShapeMismatchError(
                f"surrogate output: expected {SURROGATE_OUTPUT}x{SURROGATE_OUTPUT}, got {tuple(logits.shape[-2:])}"
            )
        return logits


def surrogate_forward(decoder: SurrogateDecoder, prompt: PromptEmbedding) -> Tensor:
    """Single-prompt forward returning (1, 256, 256) logits."""
    return decoder(prompt.features.unsqueeze(0)).squeeze(0)
