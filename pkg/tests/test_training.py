import csv

import numpy as np
import pytest
import torch
from PIL import Image as PILImage

from promptseg.core import FrozenParameterError, snapshot_parameters
from promptseg.data import DatasetSpec, load_dataset
from promptseg.generator import build_prompt_generator, tiny_test_config
from promptseg.metrics import METRIC_COLUMNS
from promptseg.segmenter import FrozenStubBackend
from promptseg.training import (
    LOG_COLUMNS,
    SurrogateTrainConfig,
    TrainConfig,
    config_from_dict,
    config_to_dict,
    evaluate,
    fit,
    infer,
    load_generator_checkpoint,
    predict_probabilities,
    save_generator_checkpoint,
    train_step,
    train_surrogate,
)


def _blob_spec(count=8, side=48, seed=7):
    return DatasetSpec("synthetic-blobs", synthetic_count=count, resize=(side, side), seed=seed)


def _tiny_config(tmp_path, **overrides):
    defaults = dict(
        dataset=_blob_spec(),
        generator=tiny_test_config(),
        checkpoint_dir=tmp_path / "ckpt",
        batch_size=4,
        max_epochs=2,
        val_fraction=0.25,
        seed=0,
    )
    defaults.update(overrides)
    return TrainConfig(**defaults)


class TestTrainStep:
    def test_updates_generator_not_backend(self, tiny_generator, stub_backend, blob_batch):
        images, masks = blob_batch
        optimizer = torch.optim.Adam(tiny_generator.parameters(), lr=3e-4)
        gen_before = snapshot_parameters(tiny_generator)
        backend_before = snapshot_parameters(stub_backend)
        loss = train_step(tiny_generator, stub_backend, optimizer, images, masks)
        assert torch.isfinite(loss.total)
        assert float(loss.total) == pytest.approx(float(loss.bce) + float(loss.dice))
        assert snapshot_parameters(tiny_generator) != gen_before
        assert snapshot_parameters(stub_backend) == backend_before


class TestConfig:
    def test_round_trip(self, tmp_path):
        import dataclasses

        config = _tiny_config(tmp_path, lr_schedule="cosine", max_steps=7)
        restored = config_from_dict(config_to_dict(config))
        # paths serialize to strings; everything else must survive exactly
        assert restored == dataclasses.replace(config, checkpoint_dir=str(config.checkpoint_dir))
        assert config_from_dict(config_to_dict(restored)) == restored

    def test_validation(self, tmp_path):
        with pytest.raises(ValueError, match="optimizer"):
            _tiny_config(tmp_path, optimizer="sgd")
        with pytest.raises(ValueError, match="lr_schedule"):
            _tiny_config(tmp_path, lr_schedule="step")
        with pytest.raises(ValueError):
            _tiny_config(tmp_path, batch_size=0)


class TestFit:
    def test_artifacts_and_history(self, tmp_path):
        config = _tiny_config(tmp_path)
        result = fit(config)
        assert len(result.history) == 2
        assert set(result.history[0]) == set(LOG_COLUMNS)
        assert all(np.isfinite(row["loss_total"]) for row in result.history)
        assert result.best_checkpoint is not None and result.best_checkpoint.exists()
        assert result.last_checkpoint.exists()
        log = tmp_path / "ckpt" / "training_log.csv"
        with open(log) as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == list(LOG_COLUMNS)
        assert len(rows) == 3

    def test_max_steps_stops_early(self, tmp_path):
        config = _tiny_config(tmp_path, max_epochs=50, max_steps=3)
        result = fit(config)
        assert result.history[-1]["global_step"] == 3

    def test_deterministic_repeats(self, tmp_path):
        a = fit(_tiny_config(tmp_path / "a", max_epochs=1))
        b = fit(_tiny_config(tmp_path / "b", max_epochs=1))
        assert snapshot_parameters(a.generator) == snapshot_parameters(b.generator)
        assert a.history[0]["loss_total"] == b.history[0]["loss_total"]

    def test_seed_changes_trajectory(self, tmp_path):
        a = fit(_tiny_config(tmp_path / "a", max_epochs=1, seed=0))
        b = fit(_tiny_config(tmp_path / "b", max_epochs=1, seed=5))
        assert a.history[0]["loss_total"] != b.history[0]["loss_total"]

    def test_resume_matches_uninterrupted(self, tmp_path):
        interrupted = fit(_tiny_config(tmp_path / "a", max_epochs=2))
        resumed = fit(
            _tiny_config(tmp_path / "a", max_epochs=4),
            resume_from=interrupted.last_checkpoint,
        )
        straight = fit(_tiny_config(tmp_path / "b", max_epochs=4))
        assert snapshot_parameters(resumed.generator) == snapshot_parameters(straight.generator)
        assert len(resumed.history) == 4
        assert [r["loss_total"] for r in resumed.history] == pytest.approx(
            [r["loss_total"] for r in straight.history]
        )

    def test_resume_log_appends(self, tmp_path):
        first = fit(_tiny_config(tmp_path, max_epochs=1))
        fit(_tiny_config(tmp_path, max_epochs=2), resume_from=first.last_checkpoint)
        with open(tmp_path / "ckpt" / "training_log.csv") as fh:
            rows = list(csv.reader(fh))
        assert len(rows) == 3  # header + epoch 0 + epoch 1

    def test_unwritable_checkpoint_dir(self, tmp_path):
        blocker = tmp_path / "occupied"
        blocker.write_text("a file, not a directory")
        with pytest.raises(PermissionError, match="not writable"):
            fit(_tiny_config(tmp_path, checkpoint_dir=blocker / "sub"))

    def test_resume_rejects_tampered_version(self, tmp_path):
        result = fit(_tiny_config(tmp_path, max_epochs=1))
        state = torch.load(result.last_checkpoint, map_location="cpu", weights_only=False)
        state["format_version"] = 999
        bad = tmp_path / "tampered.pt"
        torch.save(state, bad)
        with pytest.raises(ValueError, match="format_version"):
            fit(_tiny_config(tmp_path, max_epochs=2), resume_from=bad)

    def test_resume_rejects_generator_only_checkpoint(self, tmp_path):
        result = fit(_tiny_config(tmp_path, max_epochs=1))
        with pytest.raises(ValueError, match="training state"):
            fit(_tiny_config(tmp_path, max_epochs=2), resume_from=result.best_checkpoint)

    def test_resume_rejects_architecture_change(self, tmp_path):
        result = fit(_tiny_config(tmp_path, max_epochs=1))
        other = _tiny_config(tmp_path, max_epochs=2, generator=tiny_test_config(init_seed=3))
        with pytest.raises(ValueError, match="architecture"):
            fit(other, resume_from=result.last_checkpoint)


class TestGeneratorCheckpoint:
    def test_round_trip(self, tmp_path, tiny_generator):
        path = tmp_path / "gen.pt"
        save_generator_checkpoint(path, tiny_generator, extra={"note": 1})
        restored, payload = load_generator_checkpoint(path)
        assert snapshot_parameters(restored) == snapshot_parameters(tiny_generator)
        assert payload["note"] == 1

    def test_version_guard(self, tmp_path, tiny_generator):
        path = tmp_path / "gen.pt"
        save_generator_checkpoint(path, tiny_generator)
        payload = torch.load(path, map_location="cpu", weights_only=False)
        payload["format_version"] = 0
        torch.save(payload, path)
        with pytest.raises(ValueError, match="format_version"):
            load_generator_checkpoint(path)


class TestFrozenGuard:
    def test_unfrozen_backend_detected(self):
        backend = FrozenStubBackend()
        next(backend.parameters()).requires_grad_(True)
        with pytest.raises(FrozenParameterError):
            backend.assert_frozen()


class TestSurrogate:
    def test_trains_without_touching_generator(self, tiny_generator):
        dataset = load_dataset(_blob_spec(count=6))
        gen_before = snapshot_parameters(tiny_generator)
        surrogate, history = train_surrogate(
            tiny_generator,
            dataset,
            SurrogateTrainConfig(batch_size=3, max_epochs=15, seed=0),
        )
        assert snapshot_parameters(tiny_generator) == gen_before
        assert history[-1]["loss_total"] < history[0]["loss_total"]

    def test_checkpoint_carries_generator_checksum(self, tiny_generator, tmp_path):
        dataset = load_dataset(_blob_spec(count=4))
        path = tmp_path / "surrogate.pt"
        train_surrogate(
            tiny_generator,
            dataset,
            SurrogateTrainConfig(batch_size=4, max_epochs=1, seed=0),
            checkpoint_path=path,
        )
        payload = torch.load(path, map_location="cpu", weights_only=False)
        assert payload["kind"] == "surrogate"
        assert payload["generator_checksum"] == snapshot_parameters(tiny_generator).checksum


class TestEvaluateAndInfer:
    def test_evaluate_via_backend(self, tiny_generator, stub_backend):
        dataset = load_dataset(_blob_spec(count=3))
        report = evaluate(tiny_generator, dataset, backend=stub_backend)
        assert [s.sample_id for s in report.samples] == sorted(dataset.ids())
        assert set(report.mean) == set(METRIC_COLUMNS)

    def test_evaluate_via_surrogate(self, tiny_generator):
        dataset = load_dataset(_blob_spec(count=3))
        surrogate, _ = train_surrogate(
            tiny_generator, dataset, SurrogateTrainConfig(batch_size=3, max_epochs=1)
        )
        report = evaluate(tiny_generator, dataset, surrogate=surrogate)
        assert len(report.samples) == 3

    def test_exactly_one_decode_route(self, tiny_generator, stub_backend):
        dataset = load_dataset(_blob_spec(count=2))
        with pytest.raises(ValueError, match="exactly one"):
            predict_probabilities(tiny_generator, dataset)
        from promptseg.surrogate import SurrogateDecoder

        with pytest.raises(ValueError, match="exactly one"):
            predict_probabilities(
                tiny_generator, dataset, backend=stub_backend, surrogate=SurrogateDecoder()
            )

    def test_infer_skips_corrupt_files(self, tiny_generator, stub_backend, tmp_path):
        rng = np.random.default_rng(3)
        inputs = []
        for i in range(2):
            p = tmp_path / f"scan_{i}.png"
            PILImage.fromarray(rng.integers(0, 255, (48, 48, 3), dtype=np.uint8)).save(p)
            inputs.append(p)
        corrupt = tmp_path / "broken.png"
        corrupt.write_bytes(b"this is not an image")
        inputs.append(corrupt)

        out_dir = tmp_path / "out"
        written = infer(tiny_generator, inputs, out_dir, backend=stub_backend)
        assert len(written) == 4
        assert sorted(p.name for p in written) == [
            "scan_0_mask.png",
            "scan_0_prob.png",
            "scan_1_mask.png",
            "scan_1_prob.png",
        ]
        mask = np.asarray(PILImage.open(out_dir / "scan_0_mask.png"))
        assert mask.shape == (48, 48)
        assert set(np.unique(mask)) <= {0, 255}
