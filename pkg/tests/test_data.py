import numpy as np
import pytest
import torch
from PIL import Image as PILImage

from promptseg.augment import (
    AffineStep,
    AugmentationRecipe,
    ColorJitterStep,
    HorizontalFlipStep,
    glas_recipe,
    make_augmenter,
    monuseg_recipe,
    sample_rng,
)
from promptseg.core import DatasetLayoutError
from promptseg.data import (
    DATASET_DEFAULT_SIZE,
    DatasetSpec,
    load_dataset,
    make_blobs,
    split_train_val,
)


def _write_pair_tree(root, n, size=(24, 24), mask_values=(0, 255)):
    (root / "images").mkdir(parents=True)
    (root / "masks").mkdir()
    rng = np.random.default_rng(40)
    for i in range(n):
        img = rng.integers(0, 256, (*size, 3), dtype=np.uint8)
        PILImage.fromarray(img).save(root / "images" / f"case_{i:02d}.png")
        mask = np.where(rng.random(size) > 0.5, mask_values[1], mask_values[0]).astype(np.uint8)
        PILImage.fromarray(mask, mode="L").save(root / "masks" / f"case_{i:02d}.png")


class TestBlobs:
    def test_deterministic(self):
        a = make_blobs(3, (64, 64), seed=5)
        b = make_blobs(3, (64, 64), seed=5)
        for ra, rb in zip(a, b):
            assert torch.equal(ra.image_data, rb.image_data)
            assert torch.equal(ra.mask_data, rb.mask_data)
        c = make_blobs(3, (64, 64), seed=6)
        assert not torch.equal(a[0].image_data, c[0].image_data)

    def test_masks_binary_and_nonempty(self):
        for ref in make_blobs(6, (64, 64), seed=5):
            mask = ref.mask_data
            assert mask.dtype == torch.uint8
            assert set(mask.unique().tolist()) <= {0, 1}
            frac = float(mask.float().mean())
            assert 0.01 < frac < 0.9

    def test_image_encodes_the_mask(self):
        # the first channel is brighter inside blobs by construction
        for ref in make_blobs(4, (64, 64), seed=7):
            image, mask = ref.image_data, ref.mask_data.bool()
            inside = float(image[0][mask].mean())
            outside = float(image[0][~mask].mean())
            assert inside > outside + 0.1

    def test_loadable_via_spec(self):
        ds = load_dataset(DatasetSpec("synthetic-blobs", synthetic_count=3, resize=(48, 48)))
        assert len(ds) == 3
        item = ds[0]
        assert item["image"].shape == (3, 48, 48)
        assert item["mask"].shape == (48, 48)
        assert ds.ids() == ["blob_000", "blob_001", "blob_002"]


class TestDatasetSpec:
    def test_unknown_name(self):
        with pytest.raises(ValueError, match="unknown dataset"):
            DatasetSpec("imagenet")

    def test_bad_split(self):
        with pytest.raises(ValueError, match="split"):
            DatasetSpec("glas", split="val")

    def test_default_sizes(self):
        assert DatasetSpec("monuseg").size == (512, 512)
        assert DatasetSpec("glas").size == (224, 224)
        assert DatasetSpec("polyp-combined").size == (352, 352)
        assert DatasetSpec("glas", resize=(96, 96)).size == (96, 96)


class TestImageDirLoading:
    def test_pairs_sorted_resized_binary(self, tmp_path):
        _write_pair_tree(tmp_path / "train", 3, size=(30, 20))
        spec = DatasetSpec("glas", root_dir=tmp_path, resize=(24, 24))
        with pytest.warns(UserWarning, match="expected 85"):
            ds = load_dataset(spec)
        assert ds.ids() == ["case_00", "case_01", "case_02"]
        item = ds[0]
        assert item["image"].shape == (3, 24, 24)
        assert float(item["image"].min()) >= 0.0 and float(item["image"].max()) <= 1.0
        assert item["mask"].dtype == torch.uint8
        assert set(item["mask"].unique().tolist()) <= {0, 1}

    def test_zero_one_mask_files(self, tmp_path):
        _write_pair_tree(tmp_path / "train", 2, mask_values=(0, 1))
        spec = DatasetSpec("glas", root_dir=tmp_path, resize=(24, 24))
        with pytest.warns(UserWarning):
            ds = load_dataset(spec)
        masks = [ds[i]["mask"] for i in range(2)]
        assert any(int(m.sum()) > 0 for m in masks)
        assert all(set(m.unique().tolist()) <= {0, 1} for m in masks)

    def test_missing_masks_dir(self, tmp_path):
        (tmp_path / "train" / "images").mkdir(parents=True)
        spec = DatasetSpec("glas", root_dir=tmp_path)
        with pytest.raises(DatasetLayoutError, match="masks"):
            load_dataset(spec)

    def test_missing_mask_for_image(self, tmp_path):
        _write_pair_tree(tmp_path / "train", 2)
        (tmp_path / "train" / "masks" / "case_01.png").unlink()
        spec = DatasetSpec("glas", root_dir=tmp_path)
        with pytest.raises(DatasetLayoutError, match="case_01"):
            load_dataset(spec)

    def test_missing_root(self, tmp_path):
        spec = DatasetSpec("glas", root_dir=tmp_path / "nope")
        with pytest.raises(DatasetLayoutError):
            load_dataset(spec)

    def test_root_dir_required(self):
        with pytest.raises(DatasetLayoutError, match="root_dir"):
            load_dataset(DatasetSpec("glas"))

    def test_polyp_test_needs_variant(self, tmp_path):
        _write_pair_tree(tmp_path / "test", 1)
        spec = DatasetSpec("polyp-combined", root_dir=tmp_path, split="test")
        with pytest.raises(ValueError, match="variant"):
            load_dataset(spec)


class TestVideoLoading:
    def _write_clips(self, root, clips):
        for clip, n in clips.items():
            for sub, writer in (("images", self._img), ("masks", self._msk)):
                d = root / clip / sub
                d.mkdir(parents=True, exist_ok=True)
                for i in range(n):
                    writer(d / f"frame_{i:03d}.png")

    @staticmethod
    def _img(path):
        PILImage.fromarray(np.zeros((20, 20, 3), np.uint8)).save(path)

    @staticmethod
    def _msk(path):
        arr = np.zeros((20, 20), np.uint8)
        arr[5:10, 5:10] = 255
        PILImage.fromarray(arr, mode="L").save(path)

    def test_train_split_flattens_clips(self, tmp_path):
        self._write_clips(tmp_path / "train", {"clip_b": 2, "clip_a": 3})
        spec = DatasetSpec("sunseg", root_dir=tmp_path, resize=(16, 16))
        ds = load_dataset(spec)
        assert len(ds) == 5
        assert ds.ids()[0].startswith("clip_a/")
        assert ds[0]["clip_id"] == "clip_a"

    def test_test_split_requires_variant(self, tmp_path):
        self._write_clips(tmp_path / "test" / "easy", {"c1": 1})
        spec = DatasetSpec("sunseg", root_dir=tmp_path, split="test")
        with pytest.raises(ValueError, match="easy|hard"):
            load_dataset(spec)
        ok = DatasetSpec("sunseg", root_dir=tmp_path, split="test", variant="easy", resize=(16, 16))
        assert len(load_dataset(ok)) == 1

    def test_missing_variant_dir(self, tmp_path):
        (tmp_path / "test").mkdir()
        spec = DatasetSpec("sunseg", root_dir=tmp_path, split="test", variant="hard")
        with pytest.raises(DatasetLayoutError):
            load_dataset(spec)


class TestSplit:
    def test_deterministic_disjoint_and_sized(self):
        ds = load_dataset(DatasetSpec("synthetic-blobs", synthetic_count=10, resize=(32, 32)))
        tr1, va1 = split_train_val(ds, 0.3, seed=1)
        tr2, va2 = split_train_val(ds, 0.3, seed=1)
        assert (tr1, va1) == (tr2, va2)
        assert len(va1) == 3 and len(tr1) == 7
        assert set(tr1).isdisjoint(va1)
        assert sorted(tr1 + va1) == list(range(10))

    def test_zero_fraction(self):
        ds = load_dataset(DatasetSpec("synthetic-blobs", synthetic_count=4, resize=(32, 32)))
        tr, va = split_train_val(ds, 0.0, seed=1)
        assert va == [] and len(tr) == 4

    def test_tiny_dataset_keeps_a_training_sample(self):
        ds = load_dataset(DatasetSpec("synthetic-blobs", synthetic_count=2, resize=(32, 32)))
        tr, va = split_train_val(ds, 0.9, seed=1)
        assert len(tr) >= 1 and len(va) >= 1


class TestAugmentation:
    def _sample(self):
        ref = make_blobs(1, (48, 48), seed=3)[0]
        return ref.image_data, ref.mask_data

    def test_zero_draws_are_identity(self):
        image, mask = self._sample()
        for recipe in (glas_recipe(), monuseg_recipe()):
            out_img, out_mask = recipe.apply_with_draws(image, mask, [0.0] * recipe.n_draws)
            assert torch.equal(out_img, image)
            assert torch.equal(out_mask, mask)

    def test_draw_counts(self):
        assert glas_recipe().n_draws == 9  # jitter 4 + flip 1 + affine 4
        assert monuseg_recipe().n_draws == 9  # affine 4 + flip 1 + jitter 4

    def test_same_rng_key_same_output(self):
        image, mask = self._sample()
        recipe = monuseg_recipe()
        a = recipe.apply(image, mask, sample_rng(5, 2, 7))
        b = recipe.apply(image, mask, sample_rng(5, 2, 7))
        assert torch.equal(a[0], b[0]) and torch.equal(a[1], b[1])
        c = recipe.apply(image, mask, sample_rng(5, 2, 8))
        assert not torch.equal(a[0], c[0])

    def test_mask_stays_binary_under_geometry(self):
        image, mask = self._sample()
        recipe = monuseg_recipe()
        for index in range(10):
            _, out_mask = recipe.apply(image, mask, sample_rng(1, 0, index))
            assert out_mask.dtype == torch.uint8
            assert set(out_mask.unique().tolist()) <= {0, 1}

    def test_image_stays_in_range(self):
        image, mask = self._sample()
        recipe = glas_recipe()
        for index in range(10):
            out_img, _ = recipe.apply(image, mask, sample_rng(2, 0, index))
            assert float(out_img.min()) >= 0.0 and float(out_img.max()) <= 1.0

    def test_flip_probability_extremes(self):
        image, mask = self._sample()
        always = AugmentationRecipe(steps=(HorizontalFlipStep(p=1.0),))
        never = AugmentationRecipe(steps=(HorizontalFlipStep(p=0.0),))
        for index in range(5):
            rng = sample_rng(3, 0, index)
            out_img, _ = always.apply(image, mask, rng)
            assert torch.equal(out_img, torch.flip(image, dims=[-1]))
            rng = sample_rng(3, 0, index)
            out_img, _ = never.apply(image, mask, rng)
            assert torch.equal(out_img, image)

    def test_affine_moves_content(self):
        image, mask = self._sample()
        step = AffineStep(translate=0.25)
        out_img, out_mask = step.apply(image, mask, [0.0, 1.0, 0.0, 0.0])
        assert not torch.equal(out_img, image)
        assert out_mask.dtype == torch.uint8
        assert set(out_mask.unique().tolist()) <= {0, 1}

    def test_jitter_brightness_only(self):
        image, mask = self._sample()
        step = ColorJitterStep(brightness=0.5)
        out_img, out_mask = step.apply(image, mask, [1.0, 0.0, 0.0, 0.0])
        assert torch.equal(out_mask, mask)
        assert float(out_img.mean()) > float(image.mean())

    def test_make_augmenter_defaults_to_identity(self):
        recipe = make_augmenter("polyp-combined")
        assert recipe.steps == ()
        image, mask = self._sample()
        out = recipe.apply(image, mask, sample_rng(0, 0, 0))
        assert torch.equal(out[0], image)
