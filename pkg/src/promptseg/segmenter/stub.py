"""Deterministic frozen stub backend for tests and CPU development.

The stub honours the full backend contract -- fixed input resolution, dense
(256, 64, 64) embeddings, (1, 256, 256) logits, frozen weights, gradients
flowing through the decoder into the prompt -- at a tiny fraction of the cost
of a real foundation model.  Weights are drawn once from a fixed-seed
generator at construction, so two stubs with equal seeds are bitwise equal.

The decoder adds ``prompt_gain * mean_c(prompt)`` directly onto the logits,
which makes mask probability increase monotonically with the prompt values:
a useful structural property for sanity tests and for giving the prompt an
immediately usable gradient.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from ..core import PROMPT_CHANNELS, PROMPT_SIZE, ShapeMismatchError, initialize_parameters
from .base import LOW_RES_LOGITS, SegmenterBackend, SegmenterOutput, _check_prompt_batch

DEFAULT_STUB_SEED = 1234


class FrozenStubBackend(SegmenterBackend):
    kind = "stub"

    def __init__(self, input_resolution: int = 128, seed: int = DEFAULT_STUB_SEED):
        super().__init__()
        if input_resolution < 32:
            raise ValueError("stub input_resolution must be >= 32")
        self._input_resolution = input_resolution
        self.seed = seed

        self.enc1 = nn.Conv2d(3, 16, 3, stride=2, padding=1)
        self.enc2 = nn.Conv2d(16, 32, 3, stride=2, padding=1)
        self.enc3 = nn.Conv2d(32, PROMPT_CHANNELS, 1)
        self.dec1 = nn.Conv2d(2 * PROMPT_CHANNELS, 32, 1)
        self.dec2 = nn.Conv2d(32, 16, 3, padding=1)
        self.dec3 = nn.Conv2d(16, 1, 1)
        # direct prompt term: keeps d(logit)/d(prompt) bounded away from zero
        self.register_buffer("prompt_gain", torch.tensor(2.0))
        self.register_buffer("logit_gain", torch.tensor(4.0))

        initialize_parameters(self, seed)
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    @property
    def input_resolution(self) -> int:
        return self._input_resolution

    def preprocess(self, images: Tensor) -> Tensor:
        """Resize to the backend grid and rescale [0, 1] -> [-1, 1]."""
        r = self._input_resolution
        if images.shape[-2:] != (r, r):
            images = F.interpolate(images, size=(r, r), mode="bilinear", align_corners=False)
        return images * 2.0 - 1.0

    def encode_batch(self, images: Tensor) -> Tensor:
        if images.ndim != 4 or images.shape[1] != 3:
            raise ValueError(f"expected (B, 3, H, W), got {tuple(images.shape)}")
        x = self.preprocess(images)
        x = F.relu(self.enc1(x))
        x = F.relu(self.enc2(x))
        if x.shape[-2:] != (PROMPT_SIZE, PROMPT_SIZE):
            x = F.interpolate(x, size=(PROMPT_SIZE, PROMPT_SIZE), mode="bilinear", align_corners=False)
        return self.enc3(x)

    def decode_batch(self, embeddings: Tensor, prompts: Tensor) -> SegmenterOutput:
        _check_prompt_batch(prompts)
        if embeddings.shape != prompts.shape:
            raise ShapeMismatchError(
                f"embedding/prompt batch shapes differ: {tuple(embeddings.shape)} vs {tuple(prompts.shape)}"
            )
        h = F.relu(self.dec1(torch.cat([embeddings, prompts], dim=1)))
        h = F.relu(self.dec2(h))
        logits = self.dec3(h) + self.prompt_gain * prompts.mean(dim=1, keepdim=True)
        logits = self.logit_gain * logits
        logits = F.interpolate(
            logits, size=(LOW_RES_LOGITS, LOW_RES_LOGITS), mode="bilinear", align_corners=False
        )
        return SegmenterOutput(logits)
