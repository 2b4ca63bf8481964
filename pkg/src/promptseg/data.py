"""Dataset loading: directory layouts, resizing rules and synthetic data.

Expected on-disk layouts (all masks are single-channel images where any value
above half the maximum counts as foreground):

* image datasets (``monuseg``, ``glas``, ``polyp-combined``)::

      <root>/<split>/images/<name>.<ext>
      <root>/<split>/masks/<name>.<ext>

  ``polyp-combined`` test data additionally groups partitions one level
  deeper: ``<root>/test/<variant>/images`` etc.

* video datasets (``sunseg``)::

      <root>/train/<clip_id>/images/<frame>.<ext>
      <root>/test/<easy|hard>/<clip_id>/images/<frame>.<ext>

  frames are ordered within their clip and carry the clip id.

``synthetic-blobs`` needs no files: it draws soft elliptical blobs from a
seeded generator, for tests and CI.

Images are resized bilinearly and masks with nearest-neighbour to the
dataset's working size, then binarized.  Sample order is deterministic
(sorted by id) for every loader.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch
from PIL import Image as PILImage
from torch import Tensor
from torch.utils.data import Dataset

from .core import DatasetLayoutError, Image, Mask

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")

# working resolution per dataset (height, width)
DATASET_DEFAULT_SIZE: dict[str, tuple[int, int]] = {
    "monuseg": (512, 512),
    "glas": (224, 224),
    "polyp-combined": (352, 352),
    "sunseg": (352, 352),
    "synthetic-blobs": (128, 128),
}

# advertised sample counts; a mismatch warns but does not fail
EXPECTED_COUNTS: dict[tuple[str, str], int] = {
    ("monuseg", "train"): 30,
    ("monuseg", "test"): 14,
    ("glas", "train"): 85,
    ("glas", "test"): 80,
    ("polyp-combined", "train"): 1448,
    ("polyp-combined", "test:kvasir"): 100,
    ("polyp-combined", "test:clinicdb"): 64,
    ("polyp-combined", "test:etis"): 196,
    ("polyp-combined", "test:colondb"): 380,
}


@dataclass(frozen=True)
class DatasetSpec:
    """Which dataset to load, from where, at what size.

    ``variant`` selects a sub-split where one exists: ``easy``/``hard`` for
    the video test split, or a test partition name for ``polyp-combined``.
    ``synthetic_count``/``seed`` only apply to ``synthetic-blobs``.
    """

    name: str
    root_dir: str | Path | None = None
    split: str = "train"
    resize: tuple[int, int] | None = None
    variant: str | None = None
    synthetic_count: int = 4
    seed: int = 7

    def __post_init__(self) -> None:
        if self.name not in DATASET_DEFAULT_SIZE:
            raise ValueError(
                f"unknown dataset {self.name!r}; choose from {sorted(DATASET_DEFAULT_SIZE)}"
            )
        if self.split not in ("train", "test"):
            raise ValueError(f"split must be 'train' or 'test', got {self.split!r}")

    @property
    def size(self) -> tuple[int, int]:
        return self.resize or DATASET_DEFAULT_SIZE[self.name]

    @property
    def is_video(self) -> bool:
        return self.name == "sunseg"


@dataclass(frozen=True)
class SampleRef:
    """One image/mask pair, either on disk or preloaded in memory."""

    sample_id: str
    image_path: Path | None = None
    mask_path: Path | None = None
    clip_id: str | None = None
    image_data: Tensor | None = None
    mask_data: Tensor | None = None


def _load_image_file(path: Path, size: tuple[int, int]) -> Tensor:
    with PILImage.open(path) as img:
        img = img.convert("RGB")
        if (img.height, img.width) != size:
            img = img.resize((size[1], size[0]), PILImage.BILINEAR)
        arr = np.asarray(img, dtype=np.float32) / 255.0
    return torch.from_numpy(arr).permute(2, 0, 1).contiguous()


def _load_mask_file(path: Path, size: tuple[int, int]) -> Tensor:
    with PILImage.open(path) as img:
        img = img.convert("L")
        if (img.height, img.width) != size:
            img = img.resize((size[1], size[0]), PILImage.NEAREST)
        arr = np.asarray(img)
    peak = float(arr.max())
    cut = peak / 2.0 if peak > 1 else 0.5
    return torch.from_numpy((arr > cut).astype(np.uint8))


class SegmentationDataset(Dataset):
    """Deterministically ordered map-style dataset of image/mask pairs."""

    def __init__(self, spec: DatasetSpec, refs: Sequence[SampleRef]):
        self.spec = spec
        self.refs = list(refs)

    def __len__(self) -> int:
        return len(self.refs)

    def __getitem__(self, index: int) -> dict:
        ref = self.refs[index]
        if ref.image_data is not None:
            image, mask = ref.image_data, ref.mask_data
        else:
            image = _load_image_file(ref.image_path, self.spec.size)
            mask = _load_mask_file(ref.mask_path, self.spec.size)
        return {
            "sample_id": ref.sample_id,
            "image": image,
            "mask": mask,
            "clip_id": ref.clip_id or "",
        }

    def sample(self, index: int) -> tuple[Image, Mask]:
        item = self[index]
        return Image(item["image"]), Mask(item["mask"])

    def ids(self) -> list[str]:
        return [r.sample_id for r in self.refs]


def _list_images(directory: Path) -> list[Path]:
    return sorted(
        p for p in directory.iterdir() if p.suffix.lower() in IMAGE_EXTENSIONS
    )


def _scan_pair_dir(root: Path) -> list[tuple[str, Path, Path]]:
    images_dir = root / "images"
    masks_dir = root / "masks"
    for d in (images_dir, masks_dir):
        if not d.is_dir():
            raise DatasetLayoutError(f"missing directory: {d}")
    images = _list_images(images_dir)
    if not images:
        raise DatasetLayoutError(f"no images found under {images_dir}")
    masks_by_stem = {p.stem: p for p in _list_images(masks_dir)}
    pairs = []
    for img in images:
        mask = masks_by_stem.get(img.stem)
        if mask is None:
            raise DatasetLayoutError(f"no mask for image {img.name!r} under {masks_dir}")
        pairs.append((img.stem, img, mask))
    return pairs


def _warn_count(spec: DatasetSpec, actual: int) -> None:
    key = (spec.name, spec.split if spec.variant is None else f"{spec.split}:{spec.variant}")
    expected = EXPECTED_COUNTS.get(key)
    if expected is not None and actual != expected:
        warnings.warn(
            f"{spec.name} {key[1]}: found {actual} samples, expected {expected}",
            stacklevel=3,
        )


def _load_image_dir_dataset(spec: DatasetSpec) -> SegmentationDataset:
    if spec.root_dir is None:
        raise DatasetLayoutError(f"dataset {spec.name!r} needs root_dir")
    root = Path(spec.root_dir) / spec.split
    if spec.name == "polyp-combined" and spec.split == "test":
        if spec.variant is None:
            raise ValueError(
                "polyp-combined test split needs variant= (e.g. 'kvasir', 'clinicdb', 'etis', 'colondb')"
            )
        root = root / spec.variant
    if not root.is_dir():
        raise DatasetLayoutError(f"missing dataset directory: {root}")
    refs = [
        SampleRef(sample_id=stem, image_path=img, mask_path=mask)
        for stem, img, mask in _scan_pair_dir(root)
    ]
    _warn_count(spec, len(refs))
    return SegmentationDataset(spec, refs)


def load_sunseg(spec: DatasetSpec) -> SegmentationDataset:
    """Load the video dataset: clips of frames, flattened in clip order."""
    if spec.root_dir is None:
        raise DatasetLayoutError("sunseg needs root_dir")
    root = Path(spec.root_dir) / spec.split
    if spec.split == "test":
        if spec.variant not in ("easy", "hard"):
            raise ValueError("sunseg test split needs variant='easy' or variant='hard'")
        matches = [d for d in root.iterdir() if d.is_dir() and d.name.lower() == spec.variant] if root.is_dir() else []
        if not matches:
            raise DatasetLayoutError(f"missing sub-split directory {spec.variant!r} under {root}")
        root = matches[0]
    if not root.is_dir():
        raise DatasetLayoutError(f"missing dataset directory: {root}")
    clips = sorted(d for d in root.iterdir() if d.is_dir())
    if not clips:
        raise DatasetLayoutError(f"no clip directories under {root}")
    refs = []
    for clip in clips:
        for stem, img, mask in _scan_pair_dir(clip):
            refs.append(
                SampleRef(
                    sample_id=f"{clip.name}/{stem}",
                    image_path=img,
                    mask_path=mask,
                    clip_id=clip.name,
                )
            )
    _warn_count(spec, len(refs))
    return SegmentationDataset(spec, refs)


# ---------------------------------------------------------------------------
# synthetic blobs
# ---------------------------------------------------------------------------


def _blob_field(rng: np.random.Generator, size: tuple[int, int]) -> np.ndarray:
    """Soft max-of-ellipses field in [0, 1] peaking at 1 inside each blob."""
    h, w = size
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    yy /= h
    xx /= w
    field = np.zeros((h, w))
    for _ in range(int(rng.integers(1, 4))):
        cy, cx = rng.uniform(0.25, 0.75, size=2)
        ry, rx = rng.uniform(0.08, 0.25, size=2)
        theta = rng.uniform(0.0, math.pi)
        dy, dx = yy - cy, xx - cx
        u = dy * math.cos(theta) - dx * math.sin(theta)
        v = dy * math.sin(theta) + dx * math.cos(theta)
        d2 = (u / ry) ** 2 + (v / rx) ** 2
        field = np.maximum(field, np.exp(-d2 * math.log(2.0)))
    return field


def make_blobs(
    count: int, size: tuple[int, int] = (128, 128), seed: int = 7
) -> list[SampleRef]:
    """Generate ``count`` seeded blob samples with mask-correlated images."""
    rng = np.random.default_rng(seed)
    refs = []
    for i in range(count):
        field = _blob_field(rng, size)
        mask = field > 0.5
        noise = rng.normal(0.0, 0.03, size=(3,) + size)
        chans = np.stack(
            [
                0.25 + 0.55 * field,
                0.55 - 0.35 * field,
                0.40 + 0.20 * field,
            ]
        )
        image = np.clip(chans + noise, 0.0, 1.0).astype(np.float32)
        refs.append(
            SampleRef(
                sample_id=f"blob_{i:03d}",
                image_data=torch.from_numpy(image),
                mask_data=torch.from_numpy(mask.astype(np.uint8)),
            )
        )
    return refs


def load_dataset(spec: DatasetSpec) -> SegmentationDataset:
    """Load any supported dataset according to its spec."""
    if spec.name == "synthetic-blobs":
        refs = make_blobs(spec.synthetic_count, spec.size, spec.seed)
        return SegmentationDataset(spec, refs)
    if spec.name == "sunseg":
        return load_sunseg(spec)
    return _load_image_dir_dataset(spec)


def split_train_val(
    dataset: SegmentationDataset, val_fraction: float, seed: int
) -> tuple[list[int], list[int]]:
    """Seeded index split; returns (train_indices, val_indices)."""
    n = len(dataset)
    if not 0.0 <= val_fraction < 1.0:
        raise ValueError("val_fraction must lie in [0, 1)")
    perm = torch.randperm(n, generator=torch.Generator().manual_seed(seed)).tolist()
    n_val = int(round(n * val_fraction))
    if val_fraction > 0.0:
        n_val = max(1, min(n_val, n - 1))
    return sorted(perm[n_val:]), sorted(perm[:n_val])
