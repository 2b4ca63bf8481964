import json
import math

import pytest
import torch
from torch import nn

from promptseg.core import (
    Image,
    LogitMap,
    Mask,
    NonFiniteError,
    ParameterSnapshot,
    PromptEmbedding,
    ShapeMismatchError,
    binarize,
    initialize_parameters,
    snapshot_parameters,
)


class TestValueTypes:
    def test_image_accepts_valid(self):
        img = Image(torch.rand(3, 64, 48))
        assert img.height == 64 and img.width == 48

    def test_image_rejects_wrong_channels(self):
        with pytest.raises(ShapeMismatchError):
            Image(torch.rand(1, 64, 64))

    def test_image_rejects_too_small(self):
        with pytest.raises(ShapeMismatchError):
            Image(torch.rand(3, 16, 64))

    def test_image_rejects_nan(self):
        pixels = torch.rand(3, 64, 64)
        pixels[0, 0, 0] = float("nan")
        with pytest.raises(NonFiniteError):
            Image(pixels)

    def test_mask_requires_binary(self):
        with pytest.raises(ValueError):
            Mask(torch.full((8, 8), 0.5))
        Mask(torch.zeros(8, 8, dtype=torch.uint8))  # ok

    def test_mask_requires_2d(self):
        with pytest.raises(ShapeMismatchError):
            Mask(torch.zeros(1, 8, 8))

    def test_prompt_embedding_shape_and_range(self):
        PromptEmbedding(torch.zeros(256, 64, 64))
        with pytest.raises(ShapeMismatchError):
            PromptEmbedding(torch.zeros(256, 32, 32))
        with pytest.raises(ValueError):
            PromptEmbedding(torch.full((256, 64, 64), 1.25))

    def test_logit_map_probabilities(self):
        lm = LogitMap(torch.zeros(4, 4))
        assert torch.allclose(lm.probabilities(), torch.full((4, 4), 0.5))


class TestBinarize:
    def test_threshold_validation(self):
        logits = torch.zeros(4, 4)
        for bad in (0.0, 1.0, -0.2, 1.7):
            with pytest.raises(ValueError):
                binarize(logits, threshold=bad)

    def test_ties_go_to_foreground(self):
        # sigmoid(0) == 0.5 exactly; threshold 0.5 must produce foreground
        out = binarize(torch.zeros(3, 3), threshold=0.5)
        assert int(out.data.sum()) == 9

    def test_matches_probability_comparison(self):
        g = torch.Generator().manual_seed(0)
        for _ in range(20):
            logits = torch.randn(16, 16, generator=g) * 3
            thr = float(torch.rand(1, generator=g) * 0.9 + 0.05)
            expected = (torch.sigmoid(logits.double()) >= thr).to(torch.uint8)
            got = binarize(logits, threshold=thr).data
            assert torch.equal(got, expected)

    def test_monotone_in_threshold(self):
        g = torch.Generator().manual_seed(1)
        logits = torch.randn(32, 32, generator=g)
        prev = None
        for thr in (0.1, 0.3, 0.5, 0.7, 0.9):
            area = int(binarize(logits, threshold=thr).data.sum())
            if prev is not None:
                assert area <= prev
            prev = area

    def test_rejects_non_finite(self):
        logits = torch.zeros(4, 4)
        logits[1, 1] = float("inf")
        with pytest.raises(NonFiniteError):
            binarize(logits)


def _small_module(seed: int = 0) -> nn.Module:
    mod = nn.Sequential(nn.Conv2d(3, 4, 3, padding=1), nn.BatchNorm2d(4), nn.Conv2d(4, 2, 1))
    initialize_parameters(mod, seed)
    return mod


class TestSnapshot:
    def test_deterministic_and_seed_sensitive(self):
        a, b, c = _small_module(0), _small_module(0), _small_module(1)
        assert snapshot_parameters(a) == snapshot_parameters(b)
        assert snapshot_parameters(a) != snapshot_parameters(c)

    def test_detects_single_element_change(self):
        mod = _small_module()
        before = snapshot_parameters(mod)
        with torch.no_grad():
            next(mod.parameters()).view(-1)[0] += 1e-6
        after = snapshot_parameters(mod)
        assert before != after
        assert after.diff(before) == ["0.weight"]

    def test_dtype_and_device_invariant(self):
        mod = _small_module()
        before = snapshot_parameters(mod)
        assert snapshot_parameters(mod.double()) == before

    def test_buffers_excluded(self):
        mod = _small_module()
        before = snapshot_parameters(mod)
        with torch.no_grad():
            mod[1].running_mean += 1.0  # buffer, not a parameter
        assert snapshot_parameters(mod) == before

    def test_json_round_trip(self, tmp_path):
        snap = snapshot_parameters(_small_module())
        path = tmp_path / "snapshot.json"
        snap.save(path)
        loaded = ParameterSnapshot.load(path)
        assert loaded == snap
        manifest = json.loads(path.read_text())
        assert {"checksum", "parameters"} <= set(manifest)
        assert all({"name", "shape", "checksum"} <= set(p) for p in manifest["parameters"])

    def test_entries_sorted_by_name(self):
        snap = snapshot_parameters(_small_module())
        names = [e.name for e in snap]
        assert names == sorted(names)


class TestInitializeParameters:
    def test_norm_layers_identity(self):
        mod = _small_module()
        bn = mod[1]
        assert torch.equal(bn.weight, torch.ones(4))
        assert torch.equal(bn.bias, torch.zeros(4))

    def test_conv_std_scales_with_fan_in(self):
        big = nn.Conv2d(64, 64, 3, padding=1)
        small = nn.Conv2d(4, 64, 3, padding=1)
        initialize_parameters(big, 0)
        initialize_parameters(small, 0)
        # Kaiming fan-in: std ~ sqrt(2 / fan_in)
        assert float(big.weight.detach().std()) == pytest.approx(math.sqrt(2 / (64 * 9)), rel=0.1)
        assert float(small.weight.detach().std()) == pytest.approx(math.sqrt(2 / (4 * 9)), rel=0.1)
