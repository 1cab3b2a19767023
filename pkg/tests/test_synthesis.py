import os

import numpy as np
import pytest

from app.backend.core.errors import EmptyInk, MissingDigitLabels, SplitMismatch, UnknownPreset
from app.data_processing.ingestion.idx_reader import read_idx
from app.data_processing.synthesis.composer import (
    Dataset,
    DigitSource,
    build_split,
    class_histogram,
    compose_sample,
    dataset_paths,
    load_dataset,
    number_from_digits,
    synthesize,
    synthesize_splits,
    write_dataset,
)
from app.data_processing.synthesis.presets import preset, preset_ids


def small(preset_id: str, train: int = 40, test: int = 20, seed: int = 0):
    return preset(preset_id, seed).model_copy(update={"counts": (train, test)})


class TestPresets:
    def test_ids(self):
        ids = preset_ids()
        assert ids[0] == "II-01" and ids[-1] == "III-10" and len(ids) == 15

    @pytest.mark.parametrize("bad", ["IV-9", "II-06", "III-00", "II-1", "ii-01"])
    def test_unknown(self, bad):
        with pytest.raises(UnknownPreset):
            preset(bad)

    def test_classes(self):
        assert preset("II-03").num_classes == 100
        assert preset("III-02").num_classes == 1000

    @pytest.mark.parametrize("family, levels", [("II", 5), ("III", 10)])
    def test_difficulty_grows_with_level(self, family, levels):
        cfgs = [preset(f"{family}-{level:02d}") for level in range(1, levels + 1)]
        for easier, harder in zip(cfgs, cfgs[1:]):
            a, b = easier.slots[-1], harder.slots[-1]
            assert b.center[0] <= a.center[0]                      # digits move closer
            assert b.scale[0] <= a.scale[0] and b.scale[1] >= a.scale[1]
            assert b.rotation_deg[1] >= a.rotation_deg[1]
            assert b.flip_prob >= a.flip_prob and b.jitter >= a.jitter
            assert harder.noise_std >= easier.noise_std
        assert cfgs[0].noise_std == 0.0 and cfgs[2].noise_std == 0.0 and cfgs[3].noise_std > 0.0

    def test_easiest_level_is_untransformed(self):
        slot = preset("II-01").slots[0]
        assert slot.scale == (1.0, 1.0) and slot.rotation_deg == (0.0, 0.0)
        assert slot.flip_prob == 0.0 and slot.jitter == 0.0

    def test_easiest_slots_do_not_overlap(self):
        cfg = preset("II-01")
        left, right = (s.center[0] * cfg.canvas for s in cfg.slots)
        # MNIST ink boxes are at most 20px wide
        assert right - left >= 20


class TestCompose:
    def test_labels_follow_provenance(self, train_source):
        cfg = small("II-03")
        for sample in synthesize(cfg, train_source, count=30):
            assert sample.pixels.shape == (28, 28)
            assert 0.1 < sample.pixels.max() <= 1.0 and sample.pixels.min() >= 0.0
            digits = tuple(int(train_source.labels[i]) for _, i in sample.provenance)
            assert sample.digit_labels == digits
            assert sample.number_label == number_from_digits(digits)
            assert all(split == "train" for split, _ in sample.provenance)

    def test_number_from_digits(self):
        assert number_from_digits((4, 2)) == 42
        assert number_from_digits((0, 0, 7)) == 7

    def test_sample_is_order_independent(self, train_source):
        cfg = small("II-05")
        streamed = list(synthesize(cfg, train_source, count=6))
        alone = compose_sample(cfg, train_source, 4)
        np.testing.assert_array_equal(alone.pixels, streamed[4].pixels)
        tail = list(synthesize(cfg, train_source, count=2, start=4))
        np.testing.assert_array_equal(tail[0].pixels, streamed[4].pixels)

    def test_seed_changes_samples(self, train_source):
        a = compose_sample(small("II-02", seed=0), train_source, 0)
        b = compose_sample(small("II-02", seed=1), train_source, 0)
        assert not np.array_equal(a.pixels, b.pixels) or a.provenance != b.provenance

    def test_split_mismatch_is_eager(self, train_source):
        with pytest.raises(SplitMismatch):
            synthesize(small("II-01"), train_source, split="test")

    def test_blank_source_exhausts_attempts(self):
        source = DigitSource(np.zeros((3, 28, 28), np.float32), np.arange(3), "train")
        with pytest.raises(EmptyInk):
            compose_sample(small("II-01"), source, 0)

    def test_source_validation(self):
        with pytest.raises(ValueError):
            DigitSource(np.zeros((2, 28, 28)), np.zeros(2), "valid")

    def test_digits_are_uniform(self, train_source):
        cfg = small("II-02")
        data = build_split(cfg, train_source, count=2000, workers=4)
        sigma = np.sqrt(2000 * 0.1 * 0.9)
        for k in range(2):
            counts = np.bincount(data.digit_labels[:, k], minlength=10)
            assert np.all(np.abs(counts - 200) < 5 * sigma)


class TestSplits:
    def test_worker_count_does_not_matter(self, train_source):
        cfg = small("II-04")
        one = build_split(cfg, train_source, count=25, workers=1)
        four = build_split(cfg, train_source, count=25, workers=4)
        np.testing.assert_array_equal(one.images, four.images)
        np.testing.assert_array_equal(one.labels, four.labels)
        assert one.provenance == four.provenance

    def test_split_shapes(self, test_source):
        cfg = small("III-03")
        data = build_split(cfg, test_source)
        assert data.images.shape == (20, 28, 28) and data.images.dtype == np.uint8
        assert data.digit_labels.shape == (20, 3)
        np.testing.assert_array_equal(data.labels, data.digit_labels @ np.array([100, 10, 1]))

    def test_histogram(self):
        np.testing.assert_array_equal(class_histogram(np.array([0, 2, 2]), 4), [1, 0, 2, 0])

    def test_splits_use_their_own_digits(self, mnist_dir):
        splits = synthesize_splits(small("II-01"), mnist_dir, counts=(10, 5))
        assert len(splits["train"].labels) == 10 and len(splits["test"].labels) == 5
        assert all(src == "test" for prov in splits["test"].provenance for src, _ in prov)
        assert all(i < 50 for prov in splits["test"].provenance for _, i in prov)


class TestOnDisk:
    def test_write_and_load(self, tmp_path, train_source):
        cfg = small("II-02")
        data = build_split(cfg, train_source)
        write_dataset(str(tmp_path), cfg, "train", data)
        loaded = load_dataset(str(tmp_path), "train")
        assert loaded.images.shape == (40, 1, 28, 28)
        assert loaded.num_classes == 100 and loaded.dataset_id == "II-02"
        np.testing.assert_array_equal(loaded.labels, data.labels)
        np.testing.assert_array_equal(loaded.digit_labels, data.digit_labels)
        np.testing.assert_array_equal(loaded.images[:, 0], Dataset.from_split(cfg, data).images[:, 0])

    def test_regeneration_is_byte_identical(self, tmp_path, train_source):
        cfg = small("II-05")
        for name in ("a", "b"):
            write_dataset(str(tmp_path / name), cfg, "train", build_split(cfg, train_source))
        a = dataset_paths(str(tmp_path / "a"), cfg.id, "train", 2)
        b = dataset_paths(str(tmp_path / "b"), cfg.id, "train", 2)
        for key, path in a.items():
            other = b[key]
            with open(path, "rb") as f, open(other, "rb") as g:
                assert f.read() == g.read(), key

    def test_three_digit_labels_are_wide(self, tmp_path, test_source):
        cfg = small("III-10")
        data = build_split(cfg, test_source)
        paths = write_dataset(str(tmp_path), cfg, "test", data)
        assert read_idx(paths["labels"]).dtype == np.int32
        assert read_idx(paths["digit0"]).dtype == np.uint8
        loaded = load_dataset(str(tmp_path), "test", "III-10")
        np.testing.assert_array_equal(loaded.labels, data.labels)
        assert loaded.num_classes == 1000

    def test_missing_sidecars(self, tmp_path, train_source):
        cfg = small("II-01")
        paths = write_dataset(str(tmp_path), cfg, "train", build_split(cfg, train_source))
        os.remove(paths["digit1"])
        loaded = load_dataset(str(tmp_path), "train")
        assert loaded.digit_labels is None
        with pytest.raises(MissingDigitLabels):
            loaded.require_digit_labels()

    def test_missing_directory(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_dataset(str(tmp_path / "absent"), "train")

    def test_subset(self, tmp_path, train_source):
        cfg = small("II-01")
        ds = Dataset.from_split(cfg, build_split(cfg, train_source))
        part = ds.subset(7)
        assert len(part) == 7 and part.digit_labels.shape == (7, 2)
        assert ds.subset(None) is ds
