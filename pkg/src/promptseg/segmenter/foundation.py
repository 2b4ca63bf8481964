"""ViT-H promptable-segmentation foundation backend.

Thin adapter around the ``segment_anything`` package (an optional extra: it
is not a hard dependency and is imported lazily).  The adapter

* preprocesses images the way the foundation model expects: scale the longest
  side to 1024, normalize with the model's pixel statistics, zero-pad to
  1024x1024;
* runs the frozen ViT-H image encoder to get (256, 64, 64) embeddings;
* injects a dense prompt embedding into the mask decoder's dense-prompt slot
  (with empty sparse prompts) and returns the single-mask low-resolution
  logits on the 256x256 grid;
* exposes the model's native point- and mask-prompt paths for baselines.

All parameters are frozen at load time.
"""

from __future__ import annotations

from pathlib import Path

import torch
import torch.nn.functional as F
from torch import Tensor

from ..core import Image, Mask, MissingWeightsError, PROMPT_SIZE
from .base import LOW_RES_LOGITS, SegmenterBackend, SegmenterOutput, _check_prompt_batch

_FOUNDATION_RESOLUTION = 1024


def _import_sam():
    try:
        import segment_anything  # type: ignore
    except ImportError as exc:  # pragma: no cover - depends on optional extra
        raise MissingWeightsError(
            "the foundation backend needs the optional 'segment-anything' package "
            "(pip install 'promptseg[sam]' or pip install segment-anything)"
        ) from exc
    return segment_anything


class FoundationViTHBackend(SegmenterBackend):
    kind = "foundation-vit-huge"

    def __init__(self, weights_path: str | Path, device: str = "cpu"):
        super().__init__()
        sam_pkg = _import_sam()
        path = Path(weights_path)
        if not path.is_file():
            raise MissingWeightsError(f"foundation checkpoint not found: {path}")
        self.sam = sam_pkg.sam_model_registry["vit_h"](checkpoint=str(path)).to(device)
        self.sam.eval()
        for p in self.sam.parameters():
            p.requires_grad_(False)
        self.device = device

    @property
    def input_resolution(self) -> int:
        return _FOUNDATION_RESOLUTION

    # -- preprocessing ------------------------------------------------------

    def _scaled_size(self, h: int, w: int) -> tuple[int, int]:
        scale = _FOUNDATION_RESOLUTION / max(h, w)
        return max(1, round(h * scale)), max(1, round(w * scale))

    def preprocess(self, images: Tensor) -> Tensor:
        """[0, 1] pixels -> resized, normalized, padded 1024x1024 input."""
        h, w = images.shape[-2:]
        nh, nw = self._scaled_size(h, w)
        x = F.interpolate(images * 255.0, size=(nh, nw), mode="bilinear", align_corners=False)
        x = (x - self.sam.pixel_mean) / self.sam.pixel_std
        return F.pad(x, (0, _FOUNDATION_RESOLUTION - nw, 0, _FOUNDATION_RESOLUTION - nh))

    # -- backend contract ---------------------------------------------------

    def encode_batch(self, images: Tensor) -> Tensor:
        x = self.preprocess(images.to(self.device))
        return self.sam.image_encoder(x)

    def decode_batch(self, embeddings: Tensor, prompts: Tensor) -> SegmenterOutput:
        _check_prompt_batch(prompts)
        dec = self.sam.mask_decoder
        image_pe = self.sam.prompt_encoder.get_dense_pe()
        sparse = torch.empty(
            (prompts.shape[0], 0, prompts.shape[1]), device=prompts.device, dtype=prompts.dtype
        )
        outs = []
        for i in range(prompts.shape[0]):
            low_res, _ = dec(
                image_embeddings=embeddings[i : i + 1],
                image_pe=image_pe,
                sparse_prompt_embeddings=sparse[i : i + 1],
                dense_prompt_embeddings=prompts[i : i + 1],
                multimask_output=False,
            )
            outs.append(low_res)
        return SegmenterOutput(torch.cat(outs, dim=0))

    # -- native prompt baselines -------------------------------------------

    def native_prompt_logits(
        self,
        image: Image,
        *,
        point: tuple[int, int] | None = None,
        mask: Mask | None = None,
    ) -> SegmenterOutput:
        enc = self.sam.prompt_encoder
        nh, nw = self._scaled_size(image.height, image.width)
        points = None
        masks_in = None
        if point is not None:
            row, col = point
            # image coords -> model coords on the resized grid, (x, y) order
            x = col * nw / image.width
            y = row * nh / image.height
            coords = torch.tensor([[[x, y]]], dtype=torch.float32, device=self.device)
            labels = torch.ones((1, 1), dtype=torch.int64, device=self.device)
            points = (coords, labels)
        if mask is not None:
            m = mask.data.float()[None, None].to(self.device)
            m = F.interpolate(m, size=(nh, nw), mode="nearest")
            m = F.pad(m, (0, _FOUNDATION_RESOLUTION - nw, 0, _FOUNDATION_RESOLUTION - nh))
            grid = enc.mask_input_size  # (256, 256) low-res prompt grid
            masks_in = F.interpolate(m, size=grid, mode="bilinear", align_corners=False)
        with torch.no_grad():
            sparse, dense = enc(points=points, boxes=None, masks=masks_in)
            emb = self.encode_batch(image.pixels.unsqueeze(0))
            low_res, _ = self.sam.mask_decoder(
                image_embeddings=emb,
                image_pe=enc.get_dense_pe(),
                sparse_prompt_embeddings=sparse,
                dense_prompt_embeddings=dense,
                multimask_output=False,
            )
        return SegmenterOutput(low_res)
