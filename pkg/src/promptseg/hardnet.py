"""Harmonic densely-connected convolutional encoder.

Six-stage trunk built from HarDBlocks: each block layer receives skip inputs
from layers ``i - 2**j`` whenever ``2**j`` divides ``i``, channel widths grow
by ``grmul`` per power-of-two link, and the block emits the concatenation of
its odd-indexed layers plus the last one.  A 1x1 transition after every block
sets the stage width; stages 1, 3 and 5 are followed by 2x2 max-pooling.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor, nn


class ConvLayer(nn.Sequential):
    def __init__(self, in_channels: int, out_channels: int, kernel: int = 3, stride: int = 1):
        super().__init__(
            nn.Conv2d(
                in_channels,
                out_channels,
                kernel_size=kernel,
                stride=stride,
                padding=kernel // 2,
                bias=False,
            ),
            nn.BatchNorm2d(out_channels),
            nn.ReLU6(inplace=True),
        )


def _layer_link(layer: int, base_channels: int, growth: int, grmul: float):
    """Channel count and input links for one block layer.

    Layer ``i`` draws from layers ``i - 2**j`` for every ``j`` with
    ``2**j | i``; its width is ``growth * grmul**(number of extra links)``
    rounded down to an even number.
    """
    if layer == 0:
        return base_channels, 0, []
    out_channels = float(growth)
    link = []
    for j in range(10):
        dv = 2**j
        if layer % dv == 0:
            link.append(layer - dv)
            if j > 0:
                out_channels *= grmul
    out_channels = int(int(out_channels + 1) / 2) * 2
    in_channels = 0
    for prev in link:
        ch, _, _ = _layer_link(prev, base_channels, growth, grmul)
        in_channels += ch
    return out_channels, in_channels, link


class HarDBlock(nn.Module):
    def __init__(self, in_channels: int, growth: int, grmul: float, n_layers: int):
        super().__init__()
        self.links: list[list[int]] = []
        layers = []
        out_total = 0
        for i in range(n_layers):
            out_ch, in_ch, link = _layer_link(i + 1, in_channels, growth, grmul)
            self.links.append(link)
            layers.append(ConvLayer(in_ch, out_ch))
            # the block output keeps the last layer and every odd layer
            if i == n_layers - 1 or (i + 1) % 2 == 1:
                out_total += out_ch
        self.layers = nn.ModuleList(layers)
        self.out_channels = out_total

    def forward(self, x: Tensor) -> Tensor:
        feats = [x]
        for i, layer in enumerate(self.layers):
            link = self.links[i]
            inputs = [feats[k] for k in link]
            x_in = inputs[0] if len(inputs) == 1 else torch.cat(inputs, dim=1)
            feats.append(layer(x_in))
        n = len(feats) - 1
        keep = [feats[i] for i in range(1, n + 1) if i == n or i % 2 == 1]
        return torch.cat(keep, dim=1)


@dataclass(frozen=True)
class EncoderRecipe:
    first_channels: tuple[int, int]
    growth: tuple[int, ...]
    layers_per_block: tuple[int, ...]
    grmul: float
    downsample: tuple[int, ...]
    drop_rate: float


ENCODER_RECIPES: dict[str, EncoderRecipe] = {
    # 85-layer configuration of the harmonic-DenseNet family
    "hardnet85-like": EncoderRecipe(
        first_channels=(48, 96),
        growth=(24, 24, 28, 36, 48, 256),
        layers_per_block=(8, 16, 16, 16, 16, 4),
        grmul=1.7,
        downsample=(1, 0, 1, 0, 1, 0),
        drop_rate=0.1,
    ),
    # miniature variant with the same topology, for fast CPU tests
    "tiny-test": EncoderRecipe(
        first_channels=(8, 8),
        growth=(4, 4, 4, 4, 4, 4),
        layers_per_block=(2, 2, 2, 2, 2, 2),
        grmul=1.7,
        downsample=(1, 0, 1, 0, 1, 0),
        drop_rate=0.0,
    ),
}

# spatial stride of each stage output relative to the input image
STAGE_STRIDES = (4, 8, 8, 16, 16, 32)


class HarDNetEncoder(nn.Module):
    """Six-stage trunk returning one feature map per stage.

    ``stage_channels[i]`` is the width of stage ``i``'s output (after its 1x1
    transition) and ``STAGE_STRIDES[i]`` its downsampling factor.
    """

    def __init__(self, recipe: EncoderRecipe, stage_channels: tuple[int, ...]):
        super().__init__()
        n_blocks = len(recipe.growth)
        if len(stage_channels) != n_blocks:
            raise ValueError(
                f"expected {n_blocks} stage widths, got {len(stage_channels)}"
            )
        self.recipe = recipe
        self.stage_channels = tuple(stage_channels)

        c0, c1 = recipe.first_channels
        self.stem = nn.Sequential(
            ConvLayer(3, c0, stride=2),
            ConvLayer(c0, c1),
            nn.MaxPool2d(kernel_size=3, stride=2, padding=1),
        )

        stages = []
        pools = []
        ch = c1
        for i in range(n_blocks):
            block = HarDBlock(ch, recipe.growth[i], recipe.grmul, recipe.layers_per_block[i])
            ops: list[nn.Module] = [block]
            if recipe.drop_rate > 0 and i == n_blocks - 1:
                ops.append(nn.Dropout(recipe.drop_rate))
            ops.append(ConvLayer(block.out_channels, stage_channels[i], kernel=1))
            stages.append(nn.Sequential(*ops))
            pools.append(
                nn.MaxPool2d(kernel_size=2, stride=2) if recipe.downsample[i] else nn.Identity()
            )
            ch = stage_channels[i]
        self.stages = nn.ModuleList(stages)
        self.pools = nn.ModuleList(pools)

    def forward(self, x: Tensor) -> list[Tensor]:
        x = self.stem(x)
        feats = []
        for stage, pool in zip(self.stages, self.pools):
            x = stage(x)
            feats.append(x)
            x = pool(x)
        return feats
