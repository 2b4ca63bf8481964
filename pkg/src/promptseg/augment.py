"""Paired image/mask augmentation with replayable random draws.

Every step samples its parameters from a fixed number of scalar draws; a draw
of zero always means "no change", so a recipe applied with all-zero draws is
the identity.  This makes augmentation both seedable (draws come from a
``numpy`` generator keyed by (seed, epoch, index)) and replayable in tests.

Geometric steps are applied to image and mask with identical parameters --
bilinear for the image, nearest for the mask -- so masks stay binary.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torchvision.transforms.functional as TF
from torch import Tensor
from torchvision.transforms import InterpolationMode


class AugmentStep:
    """One augmentation step drawing ``n_draws`` scalars in [-1, 1]."""

    n_draws: int = 0

    def apply(self, image: Tensor, mask: Tensor, draws: Sequence[float]):
        raise NotImplementedError


@dataclass(frozen=True)
class ColorJitterStep(AugmentStep):
    """Brightness/contrast/saturation factors ``1 + d*m``, hue shift ``d*m``."""

    brightness: float = 0.0
    contrast: float = 0.0
    saturation: float = 0.0
    hue: float = 0.0
    n_draws: int = 4

    def apply(self, image: Tensor, mask: Tensor, draws: Sequence[float]):
        db, dc, ds, dh = draws
        if self.brightness and db:
            image = TF.adjust_brightness(image, 1.0 + db * self.brightness)
        if self.contrast and dc:
            image = TF.adjust_contrast(image, 1.0 + dc * self.contrast)
        if self.saturation and ds:
            image = TF.adjust_saturation(image, 1.0 + ds * self.saturation)
        if self.hue and dh:
            image = TF.adjust_hue(image, dh * self.hue)
        return image.clamp(0.0, 1.0), mask


@dataclass(frozen=True)
class HorizontalFlipStep(AugmentStep):
    """Flip both maps when the draw exceeds ``1 - 2p`` (p at uniform draws)."""

    p: float = 0.5
    n_draws: int = 1

    def apply(self, image: Tensor, mask: Tensor, draws: Sequence[float]):
        if draws[0] > 1.0 - 2.0 * self.p:
            image = TF.hflip(image)
            mask = TF.hflip(mask)
        return image, mask


@dataclass(frozen=True)
class AffineStep(AugmentStep):
    """Rotation ``d*degrees``, translation ``d*translate`` (fraction of the
    side), scale ``1 + d*scale_delta``; shared by image and mask."""

    degrees: float = 0.0
    translate: float = 0.0
    scale_delta: float = 0.0
    n_draws: int = 4

    def apply(self, image: Tensor, mask: Tensor, draws: Sequence[float]):
        da, dx, dy, dsc = draws
        angle = da * self.degrees
        h, w = image.shape[-2:]
        tx = int(round(dx * self.translate * w))
        ty = int(round(dy * self.translate * h))
        scale = 1.0 + dsc * self.scale_delta
        if angle == 0.0 and tx == 0 and ty == 0 and scale == 1.0:
            return image, mask
        image = TF.affine(
            image, angle=angle, translate=[tx, ty], scale=scale, shear=[0.0],
            interpolation=InterpolationMode.BILINEAR,
        )
        mask = TF.affine(
            mask.unsqueeze(0), angle=angle, translate=[tx, ty], scale=scale, shear=[0.0],
            interpolation=InterpolationMode.NEAREST,
        ).squeeze(0)
        return image, mask


@dataclass(frozen=True)
class AugmentationRecipe:
    """An ordered list of steps applied with freshly drawn parameters."""

    steps: tuple[AugmentStep, ...] = ()

    @property
    def n_draws(self) -> int:
        return sum(s.n_draws for s in self.steps)

    def apply_with_draws(
        self, image: Tensor, mask: Tensor, draws: Sequence[float]
    ) -> tuple[Tensor, Tensor]:
        if len(draws) != self.n_draws:
            raise ValueError(f"expected {self.n_draws} draws, got {len(draws)}")
        pos = 0
        for step in self.steps:
            image, mask = step.apply(image, mask, draws[pos : pos + step.n_draws])
            pos += step.n_draws
        return image, mask

    def apply(
        self, image: Tensor, mask: Tensor, rng: np.random.Generator
    ) -> tuple[Tensor, Tensor]:
        draws = rng.uniform(-1.0, 1.0, size=self.n_draws)
        return self.apply_with_draws(image, mask, draws.tolist())


def glas_recipe() -> AugmentationRecipe:
    return AugmentationRecipe(
        steps=(
            ColorJitterStep(brightness=0.2, contrast=0.2, saturation=0.2, hue=0.1),
            HorizontalFlipStep(p=0.5),
            AffineStep(translate=0.05, scale_delta=0.2),
        )
    )


def monuseg_recipe() -> AugmentationRecipe:
    return AugmentationRecipe(
        steps=(
            AffineStep(degrees=20.0, scale_delta=0.25),
            HorizontalFlipStep(p=0.5),
            ColorJitterStep(brightness=0.4, contrast=0.4, saturation=0.4, hue=0.1),
        )
    )


def make_augmenter(dataset_name: str) -> AugmentationRecipe:
    """Training-time augmentation recipe for a dataset (identity if none)."""
    if dataset_name == "glas":
        return glas_recipe()
    if dataset_name == "monuseg":
        return monuseg_recipe()
    return AugmentationRecipe()


def sample_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    """Stateless per-sample RNG: equal keys give equal draws."""
    return np.random.default_rng(np.random.SeedSequence((seed, epoch, index)))
