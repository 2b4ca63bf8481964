"""Prompt-generator network: image -> dense prompt embedding (256, 64, 64).

A harmonic-DenseNet trunk extracts six feature stages; a light two-block
decoder runs at the prompt grid's native resolutions (32x32 then 64x64).
Each block bilinearly resizes its input and a lateral encoder skip onto the
block grid, concatenates them, and applies two 3x3 convolutions -- the first
followed by ReLU, the second by batch norm and tanh -- so the final output is
always (256, 64, 64) with values in [-1, 1] regardless of input size.

Skips come from the first encoder stage whose stride matches each block grid
at the reference input size of 512 (stride 16 for the 32x32 block, stride 8
for the 64x64 block); at other input sizes the resize keeps them aligned.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .core import (
    Image,
    MissingWeightsError,
    NonFiniteError,
    PromptEmbedding,
    PROMPT_CHANNELS,
    PROMPT_SIZE,
    initialize_parameters,
)
from .hardnet import ENCODER_RECIPES, STAGE_STRIDES, HarDNetEncoder

# ImageNet statistics used to normalize [0, 1] pixels before the trunk.
_NORM_MEAN = (0.485, 0.456, 0.406)
_NORM_STD = (0.229, 0.224, 0.225)

# decoder block grids and the encoder stage each block takes its skip from
# (first stage at stride 16, first stage at stride 8)
_BLOCK_GRIDS = (PROMPT_SIZE // 2, PROMPT_SIZE)
_SKIP_STAGES = (3, 1)


@dataclass(frozen=True)
class GeneratorConfig:
    """Architecture hyper-parameters of the prompt generator.

    ``decoder_hidden_channels`` defaults to ``decoder_channels`` (the full
    width used by the reference architecture); the tiny test configuration
    shrinks it so CPU tests stay fast while the output contract -- 256
    channels on a 64x64 grid -- is unchanged.
    """

    backbone: str = "hardnet85-like"
    encoder_block_channels: tuple[int, ...] = (192, 256, 320, 480, 720, 1280)
    decoder_channels: int = PROMPT_CHANNELS
    decoder_hidden_channels: int | None = None
    output_spatial: int = PROMPT_SIZE
    init_seed: int = 0
    pretrained_backbone: bool = False
    backbone_weights_path: str | None = None

    def __post_init__(self) -> None:
        if self.backbone not in ENCODER_RECIPES:
            raise ValueError(
                f"unknown backbone {self.backbone!r}; choose from {sorted(ENCODER_RECIPES)}"
            )
        if len(self.encoder_block_channels) != len(ENCODER_RECIPES[self.backbone].growth):
            raise ValueError("encoder_block_channels must list one width per encoder stage")
        if self.decoder_channels != PROMPT_CHANNELS:
            raise ValueError(f"decoder_channels is fixed at {PROMPT_CHANNELS}")
        if self.output_spatial != PROMPT_SIZE:
            raise ValueError(f"output_spatial is fixed at {PROMPT_SIZE}")

    @property
    def hidden_channels(self) -> int:
        return self.decoder_hidden_channels or self.decoder_channels


def tiny_test_config(init_seed: int = 0) -> GeneratorConfig:
    """Miniature generator used by the fast CPU test suite."""
    return GeneratorConfig(
        backbone="tiny-test",
        encoder_block_channels=(8, 8, 8, 8, 8, 8),
        decoder_hidden_channels=16,
        init_seed=init_seed,
    )


class DecoderBlock(nn.Module):
    """Resize-concat-conv block operating on a fixed spatial grid."""

    def __init__(self, in_channels: int, skip_channels: int, hidden: int, out_channels: int, grid: int):
        super().__init__()
        self.grid = grid
        self.conv1 = nn.Conv2d(in_channels + skip_channels, hidden, 3, padding=1)
        self.conv2 = nn.Conv2d(hidden, out_channels, 3, padding=1, bias=False)
        self.bn = nn.BatchNorm2d(out_channels)

    def forward(self, x: Tensor, skip: Tensor) -> Tensor:
        size = (self.grid, self.grid)
        if x.shape[-2:] != size:
            x = F.interpolate(x, size=size, mode="bilinear", align_corners=False)
        if skip.shape[-2:] != size:
            skip = F.interpolate(skip, size=size, mode="bilinear", align_corners=False)
        x = F.relu(self.conv1(torch.cat([x, skip], dim=1)))
        return torch.tanh(self.bn(self.conv2(x)))


class PromptGenerator(nn.Module):
    """Trainable network mapping RGB images to dense prompt embeddings."""

    def __init__(self, config: GeneratorConfig):
        super().__init__()
        self.config = config
        recipe = ENCODER_RECIPES[config.backbone]
        self.encoder = HarDNetEncoder(recipe, config.encoder_block_channels)
        ch = config.encoder_block_channels
        hidden = config.hidden_channels
        self.block1 = DecoderBlock(
            in_channels=ch[-1],
            skip_channels=ch[_SKIP_STAGES[0]],
            hidden=hidden,
            out_channels=hidden,
            grid=_BLOCK_GRIDS[0],
        )
        self.block2 = DecoderBlock(
            in_channels=hidden,
            skip_channels=ch[_SKIP_STAGES[1]],
            hidden=hidden,
            out_channels=config.decoder_channels,
            grid=_BLOCK_GRIDS[1],
        )
        mean = torch.tensor(_NORM_MEAN).view(1, 3, 1, 1)
        std = torch.tensor(_NORM_STD).view(1, 3, 1, 1)
        self.register_buffer("pixel_mean", mean)
        self.register_buffer("pixel_std", std)

    def forward(self, images: Tensor) -> Tensor:
        """Batched forward: (B, 3, H, W) in [0, 1] -> (B, 256, 64, 64) in [-1, 1]."""
        if images.ndim != 4 or images.shape[1] != 3:
            raise ValueError(f"expected (B, 3, H, W) input, got {tuple(images.shape)}")
        if not bool(torch.isfinite(images).all()):
            raise NonFiniteError("generator input contains non-finite values")
        x = (images - self.pixel_mean.to(images.dtype)) / self.pixel_std.to(images.dtype)
        feats = self.encoder(x)
        d = self.block1(feats[-1], feats[_SKIP_STAGES[0]])
        return self.block2(d, feats[_SKIP_STAGES[1]])


def build_prompt_generator(config: GeneratorConfig | None = None) -> PromptGenerator:
    """Construct a prompt generator with deterministic, seeded initialization.

    If ``config.pretrained_backbone`` is set, encoder weights are loaded from
    ``config.backbone_weights_path`` (a ``state_dict`` of ``HarDNetEncoder``);
    a missing file raises :class:`MissingWeightsError` instead of silently
    training from scratch.
    """
    config = config or GeneratorConfig()
    model = PromptGenerator(config)
    initialize_parameters(model, config.init_seed)
    if config.pretrained_backbone:
        path = config.backbone_weights_path
        if path is None or not Path(path).is_file():
            raise MissingWeightsError(
                f"pretrained backbone requested but weights file not found: {path!r}"
            )
        state = torch.load(path, map_location="cpu", weights_only=True)
        model.encoder.load_state_dict(state)
    return model


def generate_prompt(model: PromptGenerator, image: Image) -> PromptEmbedding:
    """Run the generator on a single image and wrap the validated result.

    Gradients are preserved so the returned embedding stays differentiable
    with respect to the generator's parameters.
    """
    out = model(image.pixels.unsqueeze(0))
    return PromptEmbedding(out.squeeze(0))


@torch.no_grad()
def count_flops(model: nn.Module, input_size: int = 256) -> int:
    """Multiply-accumulate count of one forward pass at ``input_size**2``.

    Counts convolution, transposed-convolution and linear MACs via forward
    hooks; elementwise ops and normalization are excluded, matching the usual
    convention for convolutional network costs.
    """
    total = 0

    def conv_hook(module: nn.Conv2d, inputs, output) -> None:
        nonlocal total
        k = module.kernel_size[0] * module.kernel_size[1]
        cin = module.in_channels // module.groups
        total += k * cin * module.out_channels * output.shape[-2] * output.shape[-1]

    def deconv_hook(module: nn.ConvTranspose2d, inputs, output) -> None:
        nonlocal total
        k = module.kernel_size[0] * module.kernel_size[1]
        cin = module.in_channels // module.groups
        total += k * cin * module.out_channels * inputs[0].shape[-2] * inputs[0].shape[-1]

    def linear_hook(module: nn.Linear, inputs, output) -> None:
        nonlocal total
        total += module.in_features * module.out_features * output[..., 0].numel()

    handles = []
    for m in model.modules():
        if isinstance(m, nn.ConvTranspose2d):
            handles.append(m.register_forward_hook(deconv_hook))
        elif isinstance(m, nn.Conv2d):
            handles.append(m.register_forward_hook(conv_hook))
        elif isinstance(m, nn.Linear):
            handles.append(m.register_forward_hook(linear_hook))
    was_training = model.training
    model.eval()
    try:
        model(torch.zeros(1, 3, input_size, input_size))
    finally:
        model.train(was_training)
        for h in handles:
            h.remove()
    return total
