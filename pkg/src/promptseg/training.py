"""Training, evaluation and inference for the prompt generator.

The frozen backend never enters the optimizer: gradients reach the generator
through the backend's decoder, and a parameter snapshot of the backend is
re-checked at every epoch boundary so an accidental update fails loudly.

Determinism: all randomness flows from ``TrainConfig.seed`` -- parameter
initialization, the train/val split, batch shuffling (an explicit generator
whose state is checkpointed) and per-sample augmentation draws (stateless,
keyed by seed/epoch/index).  Checkpoints carry every RNG state, so resuming
from the last epoch boundary reproduces the uninterrupted run bit for bit.
"""

from __future__ import annotations

import csv
import dataclasses
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn
from torch.utils.data import DataLoader, Dataset, RandomSampler

from .augment import AugmentationRecipe, make_augmenter, sample_rng
from .core import (
    FrozenParameterError,
    Image,
    Mask,
    NonFiniteError,
    ParameterSnapshot,
    binarize,
    snapshot_parameters,
)
from .data import DatasetSpec, SegmentationDataset, load_dataset, split_train_val
from .generator import GeneratorConfig, PromptGenerator, build_prompt_generator
from .losses import LossValue, seg_loss
from .metrics import MetricConfig, MetricReport, dice_score, evaluate_dataset
from .segmenter import SegmenterBackend, build_backend
from .surrogate import SurrogateDecoder

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT_VERSION = 1
LOG_COLUMNS = (
    "epoch",
    "global_step",
    "loss_total",
    "loss_bce",
    "loss_dice",
    "val_dice",
    "lr",
    "epoch_seconds",
)


# ---------------------------------------------------------------------------
# configs
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    dataset: DatasetSpec
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    checkpoint_dir: str | Path = "checkpoints"
    backend: str = "stub"
    backend_options: dict = field(default_factory=dict)
    optimizer: str = "adam"
    lr: float = 3e-4
    weight_decay: float = 1e-5
    batch_size: int = 10
    max_epochs: int = 200
    max_steps: int | None = None
    lr_schedule: str = "none"  # "none" | "cosine"
    seed: int = 0
    deterministic: bool = True
    val_fraction: float = 0.1
    augment: bool = True
    device: str = "cpu"

    def __post_init__(self) -> None:
        if self.optimizer != "adam":
            raise ValueError(f"unsupported optimizer {self.optimizer!r}")
        if self.lr_schedule not in ("none", "cosine"):
            raise ValueError(f"unsupported lr_schedule {self.lr_schedule!r}")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("batch_size and max_epochs must be positive")


@dataclass(frozen=True)
class SurrogateTrainConfig:
    lr: float = 3e-4
    weight_decay: float = 1e-5
    batch_size: int = 24
    max_epochs: int = 60
    max_steps: int | None = None
    seed: int = 0
    device: str = "cpu"


@dataclass
class FitResult:
    generator: PromptGenerator
    backend: SegmenterBackend
    history: list[dict]
    best_val_dice: float
    best_checkpoint: Path | None
    last_checkpoint: Path
    backend_snapshot: ParameterSnapshot


def config_to_dict(config: TrainConfig) -> dict:
    d = dataclasses.asdict(config)
    d["checkpoint_dir"] = str(config.checkpoint_dir)
    if d["dataset"].get("root_dir") is not None:
        d["dataset"]["root_dir"] = str(d["dataset"]["root_dir"])
    for key in ("resize",):
        if d["dataset"].get(key) is not None:
            d["dataset"][key] = list(d["dataset"][key])
    d["generator"]["encoder_block_channels"] = list(d["generator"]["encoder_block_channels"])
    return d


def config_from_dict(raw: dict) -> TrainConfig:
    raw = dict(raw)
    ds = dict(raw.pop("dataset"))
    if ds.get("resize") is not None:
        ds["resize"] = tuple(ds["resize"])
    gen_raw = dict(raw.pop("generator", {}))
    if gen_raw.get("encoder_block_channels") is not None:
        gen_raw["encoder_block_channels"] = tuple(gen_raw["encoder_block_channels"])
    return TrainConfig(dataset=DatasetSpec(**ds), generator=GeneratorConfig(**gen_raw), **raw)


# ---------------------------------------------------------------------------
# data plumbing
# ---------------------------------------------------------------------------


class _AugmentedView(Dataset):
    """Train-split view applying the recipe with (seed, epoch, index) draws."""

    def __init__(
        self,
        base: SegmentationDataset,
        indices: Sequence[int],
        recipe: AugmentationRecipe,
        seed: int,
    ):
        self.base = base
        self.indices = list(indices)
        self.recipe = recipe
        self.seed = seed
        self.epoch = 0

    def __len__(self) -> int:
        return len(self.indices)

    def __getitem__(self, i: int) -> dict:
        base_index = self.indices[i]
        item = self.base[base_index]
        if self.recipe.steps:
            rng = sample_rng(self.seed, self.epoch, base_index)
            image, mask = self.recipe.apply(item["image"], item["mask"], rng)
            item = {**item, "image": image, "mask": mask}
        return item


def _logits_at(output, height: int, width: int) -> Tensor:
    return output.at_resolution(height, width).squeeze(1)


# ---------------------------------------------------------------------------
# single optimization step
# ---------------------------------------------------------------------------


def train_step(
    generator: PromptGenerator,
    backend: SegmenterBackend,
    optimizer: torch.optim.Optimizer,
    images: Tensor,
    masks: Tensor,
) -> LossValue:
    """One optimization step of the generator against the frozen backend.

    Image embeddings are computed without gradients (nothing upstream of the
    frozen encoder is trainable); the loss is evaluated at the masks' own
    resolution.  Raises :class:`NonFiniteError` before applying a step whose
    loss is NaN/inf.
    """
    generator.train()
    optimizer.zero_grad(set_to_none=True)
    with torch.no_grad():
        embeddings = backend.encode_batch(images)
    prompts = generator(images)
    output = backend.decode_batch(embeddings, prompts)
    logits = _logits_at(output, masks.shape[-2], masks.shape[-1])
    loss = seg_loss(logits, masks.to(logits.dtype))
    if not bool(torch.isfinite(loss.total)):
        raise NonFiniteError(
            f"non-finite training loss: {loss!r}"
        )
    loss.total.backward()
    optimizer.step()
    return loss.detached()


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_generator_checkpoint(
    path: str | Path,
    generator: PromptGenerator,
    extra: dict | None = None,
) -> None:
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "kind": "generator",
        "generator_config": dataclasses.asdict(generator.config),
        "generator_state": generator.state_dict(),
        "parameter_checksum": snapshot_parameters(generator).checksum,
    }
    payload.update(extra or {})
    torch.save(payload, path)


def load_generator_checkpoint(path: str | Path) -> tuple[PromptGenerator, dict]:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    version = payload.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(
            f"unsupported checkpoint format_version {version!r} "
            f"(this build reads version {CHECKPOINT_FORMAT_VERSION})"
        )
    cfg_raw = dict(payload["generator_config"])
    cfg_raw["encoder_block_channels"] = tuple(cfg_raw["encoder_block_channels"])
    generator = PromptGenerator(GeneratorConfig(**cfg_raw))
    generator.load_state_dict(payload["generator_state"])
    return generator, payload


# ---------------------------------------------------------------------------
# fit
# ---------------------------------------------------------------------------


def _probe_writable(directory: Path) -> None:
    probe = directory / ".write_probe"
    try:
        directory.mkdir(parents=True, exist_ok=True)
        probe.write_text("ok")
        probe.unlink()
    except OSError as exc:
        raise PermissionError(f"checkpoint directory is not writable: {directory}") from exc


@torch.no_grad()
def _validation_dice(
    generator: PromptGenerator,
    backend: SegmenterBackend,
    dataset: SegmentationDataset,
    indices: Sequence[int],
) -> float:
    was_training = generator.training
    generator.eval()
    scores = []
    for i in indices:
        item = dataset[i]
        image = item["image"].unsqueeze(0)
        emb = backend.encode_batch(image)
        prompts = generator(image)
        out = backend.decode_batch(emb, prompts)
        logits = _logits_at(out, item["mask"].shape[-2], item["mask"].shape[-1])[0]
        pred = binarize(logits).data.numpy()
        scores.append(dice_score(pred, item["mask"].numpy()))
    generator.train(was_training)
    return float(np.mean(scores))


def fit(config: TrainConfig, resume_from: str | Path | None = None) -> FitResult:
    """Train the prompt generator per ``config``; optionally resume.

    Writes ``training_log.csv``, ``best.pt`` (highest validation Dice) and
    ``last.pt`` (full resumable state, refreshed every epoch) into
    ``config.checkpoint_dir``.
    """
    ckpt_dir = Path(config.checkpoint_dir)
    _probe_writable(ckpt_dir)

    torch.manual_seed(config.seed)
    prev_det = torch.are_deterministic_algorithms_enabled()
    if config.deterministic:
        torch.use_deterministic_algorithms(True)

    try:
        dataset = load_dataset(config.dataset)
        train_idx, val_idx = split_train_val(dataset, config.val_fraction, config.seed)
        recipe = make_augmenter(config.dataset.name) if config.augment else AugmentationRecipe()
        train_view = _AugmentedView(dataset, train_idx, recipe, config.seed)

        generator = build_prompt_generator(config.generator).to(config.device)
        backend = build_backend(config.backend, **config.backend_options).to(config.device)
        backend.eval()
        backend.assert_frozen()
        backend_snapshot = snapshot_parameters(backend)

        optimizer = torch.optim.Adam(
            generator.parameters(), lr=config.lr, weight_decay=config.weight_decay
        )
        scheduler = None
        if config.lr_schedule == "cosine":
            scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(
                optimizer, T_max=config.max_epochs
            )
        shuffle_gen = torch.Generator().manual_seed(config.seed + 1)

        start_epoch = 0
        global_step = 0
        best_val = float("-inf")
        history: list[dict] = []

        if resume_from is not None:
            state = torch.load(resume_from, map_location="cpu", weights_only=False)
            if state.get("format_version") != CHECKPOINT_FORMAT_VERSION:
                raise ValueError(
                    f"unsupported checkpoint format_version {state.get('format_version')!r}"
                )
            if state.get("kind") != "train_state":
                raise ValueError("resume_from must point at a full training state (last.pt)")
            saved_gen_cfg = dict(state["generator_config"])
            saved_gen_cfg["encoder_block_channels"] = tuple(saved_gen_cfg["encoder_block_channels"])
            if GeneratorConfig(**saved_gen_cfg) != config.generator:
                raise ValueError("generator architecture in checkpoint differs from config")
            generator.load_state_dict(state["generator_state"])
            optimizer.load_state_dict(state["optimizer_state"])
            if scheduler is not None and state.get("scheduler_state") is not None:
                scheduler.load_state_dict(state["scheduler_state"])
            shuffle_gen.set_state(state["shuffle_gen_state"])
            torch.set_rng_state(state["torch_rng_state"])
            start_epoch = int(state["epoch"]) + 1
            global_step = int(state["global_step"])
            best_val = float(state["best_val_dice"])
            history = list(state.get("history", []))

        log_path = ckpt_dir / "training_log.csv"
        log_mode = "a" if (resume_from is not None and log_path.exists()) else "w"
        log_file = open(log_path, log_mode, newline="")
        log_writer = csv.writer(log_file)
        if log_mode == "w":
            log_writer.writerow(LOG_COLUMNS)

        best_path = ckpt_dir / "best.pt"
        last_path = ckpt_dir / "last.pt"
        loader = DataLoader(
            train_view,
            batch_size=config.batch_size,
            sampler=RandomSampler(train_view, generator=shuffle_gen),
            num_workers=0,
        )

        stop = False
        for epoch in range(start_epoch, config.max_epochs):
            t0 = time.monotonic()
            train_view.epoch = epoch
            epoch_losses: list[LossValue] = []
            for batch in loader:
                try:
                    loss = train_step(
                        generator,
                        backend,
                        optimizer,
                        batch["image"].to(config.device),
                        batch["mask"].to(config.device),
                    )
                except NonFiniteError as exc:
                    raise RuntimeError(
                        f"training aborted at epoch {epoch}, step {global_step}: {exc} "
                        f"(lr={optimizer.param_groups[0]['lr']:.3g})"
                    ) from exc
                epoch_losses.append(loss)
                global_step += 1
                if config.max_steps is not None and global_step >= config.max_steps:
                    stop = True
                    break
            if scheduler is not None:
                scheduler.step()

            after = snapshot_parameters(backend)
            if after != backend_snapshot:
                raise FrozenParameterError(
                    f"frozen backend changed during epoch {epoch}: {backend_snapshot.diff(after)[:5]}"
                )

            val_dice = (
                _validation_dice(generator, backend, dataset, val_idx)
                if val_idx
                else float("nan")
            )
            row = {
                "epoch": epoch,
                "global_step": global_step,
                "loss_total": float(np.mean([float(l.total) for l in epoch_losses])) if epoch_losses else float("nan"),
                "loss_bce": float(np.mean([float(l.bce) for l in epoch_losses])) if epoch_losses else float("nan"),
                "loss_dice": float(np.mean([float(l.dice) for l in epoch_losses])) if epoch_losses else float("nan"),
                "val_dice": val_dice,
                "lr": optimizer.param_groups[0]["lr"],
                "epoch_seconds": time.monotonic() - t0,
            }
            history.append(row)
            log_writer.writerow([row[c] for c in LOG_COLUMNS])
            log_file.flush()
            logger.info(
                "epoch %d: loss=%.4f val_dice=%s", epoch, row["loss_total"], f"{val_dice:.4f}"
            )

            improved = val_idx and val_dice > best_val
            if improved:
                best_val = val_dice
                save_generator_checkpoint(
                    best_path, generator, extra={"epoch": epoch, "val_dice": val_dice}
                )
            torch.save(
                {
                    "format_version": CHECKPOINT_FORMAT_VERSION,
                    "kind": "train_state",
                    "epoch": epoch,
                    "global_step": global_step,
                    "best_val_dice": best_val,
                    "generator_config": dataclasses.asdict(config.generator),
                    "generator_state": generator.state_dict(),
                    "optimizer_state": optimizer.state_dict(),
                    "scheduler_state": scheduler.state_dict() if scheduler is not None else None,
                    "shuffle_gen_state": shuffle_gen.get_state(),
                    "torch_rng_state": torch.get_rng_state(),
                    "history": history,
                },
                last_path,
            )
            if stop:
                break

        log_file.close()
        return FitResult(
            generator=generator,
            backend=backend,
            history=history,
            best_val_dice=best_val if best_val > float("-inf") else float("nan"),
            best_checkpoint=best_path if best_path.exists() else None,
            last_checkpoint=last_path,
            backend_snapshot=backend_snapshot,
        )
    finally:
        torch.use_deterministic_algorithms(prev_det)


# ---------------------------------------------------------------------------
# surrogate training
# ---------------------------------------------------------------------------


def train_surrogate(
    generator: PromptGenerator,
    dataset: SegmentationDataset,
    config: SurrogateTrainConfig = SurrogateTrainConfig(),
    checkpoint_path: str | Path | None = None,
) -> tuple[SurrogateDecoder, list[dict]]:
    """Train the lightweight decoder on frozen-generator prompts.

    The generator is put in eval mode and verified (by parameter snapshot) to
    be unchanged afterwards; prompts are computed without gradients so the
    optimizer can only ever see the surrogate's parameters.
    """
    torch.manual_seed(config.seed)
    generator = generator.to(config.device)
    generator.eval()
    before = snapshot_parameters(generator)

    surrogate = SurrogateDecoder(init_seed=config.seed).to(config.device)
    optimizer = torch.optim.Adam(
        surrogate.parameters(), lr=config.lr, weight_decay=config.weight_decay
    )
    shuffle_gen = torch.Generator().manual_seed(config.seed + 1)
    loader = DataLoader(
        dataset,
        batch_size=config.batch_size,
        sampler=RandomSampler(dataset, generator=shuffle_gen),
        num_workers=0,
    )

    history = []
    global_step = 0
    stop = False
    for epoch in range(config.max_epochs):
        losses = []
        for batch in loader:
            images = batch["image"].to(config.device)
            masks = batch["mask"].to(config.device)
            with torch.no_grad():
                prompts = generator(images)
            optimizer.zero_grad(set_to_none=True)
            logits = surrogate(prompts)
            logits = F.interpolate(
                logits, size=masks.shape[-2:], mode="bilinear", align_corners=False
            ).squeeze(1)
            loss = seg_loss(logits, masks.to(logits.dtype))
            if not bool(torch.isfinite(loss.total)):
                raise NonFiniteError(f"non-finite surrogate loss at step {global_step}")
            loss.total.backward()
            optimizer.step()
            losses.append(float(loss.total.detach()))
            global_step += 1
            if config.max_steps is not None and global_step >= config.max_steps:
                stop = True
                break
        history.append({"epoch": epoch, "loss_total": float(np.mean(losses))})
        if stop:
            break

    after = snapshot_parameters(generator)
    if after != before:
        raise FrozenParameterError(
            f"generator changed during surrogate training: {before.diff(after)[:5]}"
        )
    if checkpoint_path is not None:
        torch.save(
            {
                "format_version": CHECKPOINT_FORMAT_VERSION,
                "kind": "surrogate",
                "surrogate_state": surrogate.state_dict(),
                "generator_checksum": before.checksum,
                "history": history,
            },
            checkpoint_path,
        )
    return surrogate, history


# ---------------------------------------------------------------------------
# evaluation / inference
# ---------------------------------------------------------------------------


@torch.no_grad()
def predict_probabilities(
    generator: PromptGenerator,
    dataset: SegmentationDataset,
    *,
    backend: SegmenterBackend | None = None,
    surrogate: SurrogateDecoder | None = None,
    device: str = "cpu",
) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
    """Per-sample probability maps (at ground-truth resolution) plus GTs.

    Exactly one of ``backend`` (decode through the frozen segmenter) or
    ``surrogate`` (decode through the lightweight head) must be given.
    """
    if (backend is None) == (surrogate is None):
        raise ValueError("provide exactly one of backend= or surrogate=")
    generator = generator.to(device).eval()
    preds: dict[str, np.ndarray] = {}
    gts: dict[str, np.ndarray] = {}
    for i in range(len(dataset)):
        item = dataset[i]
        image = item["image"].unsqueeze(0).to(device)
        mask = item["mask"]
        prompts = generator(image)
        if backend is not None:
            emb = backend.encode_batch(image)
            logits = backend.decode_batch(emb, prompts).at_resolution(
                mask.shape[-2], mask.shape[-1]
            )
        else:
            logits = surrogate(prompts)
            logits = F.interpolate(
                logits, size=mask.shape[-2:], mode="bilinear", align_corners=False
            )
        preds[item["sample_id"]] = torch.sigmoid(logits)[0, 0].cpu().numpy()
        gts[item["sample_id"]] = mask.cpu().numpy()
    return preds, gts


def evaluate(
    generator: PromptGenerator,
    dataset: SegmentationDataset,
    *,
    backend: SegmenterBackend | None = None,
    surrogate: SurrogateDecoder | None = None,
    metric_config: MetricConfig = MetricConfig(),
    device: str = "cpu",
) -> MetricReport:
    """Score the generator on a dataset with the full metric suite."""
    preds, gts = predict_probabilities(
        generator, dataset, backend=backend, surrogate=surrogate, device=device
    )
    return evaluate_dataset(preds, gts, metric_config)


def infer(
    generator: PromptGenerator,
    image_paths: Iterable[str | Path],
    out_dir: str | Path,
    *,
    backend: SegmenterBackend | None = None,
    surrogate: SurrogateDecoder | None = None,
    threshold: float = 0.5,
    device: str = "cpu",
) -> list[Path]:
    """Segment arbitrary image files; writes ``<stem>_mask.png`` (binary) and
    ``<stem>_prob.png`` (8-bit probability) per input.

    Unreadable inputs are logged and skipped rather than aborting the batch.
    """
    from PIL import Image as PILImage

    if (backend is None) == (surrogate is None):
        raise ValueError("provide exactly one of backend= or surrogate=")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    generator = generator.to(device).eval()
    written: list[Path] = []
    for path in image_paths:
        path = Path(path)
        try:
            with PILImage.open(path) as img:
                arr = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
            pixels = torch.from_numpy(arr).permute(2, 0, 1).contiguous()
            image = Image(pixels)
        except Exception as exc:  # noqa: BLE001 - per-file isolation is the contract
            logger.error("skipping %s: %s", path, exc)
            continue
        with torch.no_grad():
            batch = image.pixels.unsqueeze(0).to(device)
            prompts = generator(batch)
            if backend is not None:
                emb = backend.encode_batch(batch)
                logits = backend.decode_batch(emb, prompts).at_resolution(
                    image.height, image.width
                )
            else:
                logits = surrogate(prompts)
                logits = F.interpolate(
                    logits, size=(image.height, image.width), mode="bilinear", align_corners=False
                )
        mask = binarize(logits[0, 0], threshold=threshold).data.numpy() * 255
        prob = (torch.sigmoid(logits)[0, 0].cpu().numpy() * 255.0).round().astype(np.uint8)
        mask_path = out / f"{path.stem}_mask.png"
        prob_path = out / f"{path.stem}_prob.png"
        PILImage.fromarray(mask.astype(np.uint8), mode="L").save(mask_path)
        PILImage.fromarray(prob, mode="L").save(prob_path)
        written.extend([mask_path, prob_path])
    return written
