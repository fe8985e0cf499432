"""Manifests, regrouping, augmentation, resampling, synthetic data, image IO."""

import numpy as np
import pytest

from merlib import imageio
from merlib.data import (AugmentConfig, Manifest, Sample, apex_frame, augment,
                         box_smooth, class_counts, class_roi_mask, crop_square,
                         five_emotion_map, load_manifest, load_sample_image,
                         merge_manifests, regroup, resample_balance,
                         rotate_image, save_manifest, shift_colors,
                         synth_dataset)
from merlib.errors import ConfigError, ManifestError, ValidationError

EMOTIONS = ["happiness", "surprise", "anger", "disgust", "sadness"]


def make_samples(counts: dict, subject="s1", database="db"):
    out = []
    for label, n in counts.items():
        for i in range(n):
            out.append(Sample(image=f"{label}_{i}.ppm", subject_id=subject,
                              database_id=database, raw_label=label, label=label))
    return out


class TestManifestFile:
    def _write(self, tmp_path, rows, header="image,subject,database,label,apex,clip_len"):
        path = tmp_path / "manifest.csv"
        path.write_text("\n".join([header] + rows) + "\n")
        return path

    def test_well_formed_rows_load_in_order(self, tmp_path):
        path = self._write(tmp_path, [
            "a.ppm,s1,casme2,happiness,30,60",
            "b.ppm,s2,casme2,anger,,",
            "c.ppm,s1,samm,sadness,5,9",
        ])
        m = load_manifest(path)
        assert [s.subject_id for s in m.samples] == ["s1", "s2", "s1"]
        assert m.samples[1].apex_index is None
        assert m.samples[2].clip_len == 9
        assert m.class_names == ["happiness", "anger", "sadness"]
        # relative paths resolve against the CSV's directory
        assert m.samples[0].image == str(tmp_path / "a.ppm")

    def test_missing_column_is_named(self, tmp_path):
        path = self._write(tmp_path, ["a.ppm,s1,x,happy"],
                           header="image,subject,database,label")
        with pytest.raises(ManifestError, match="apex"):
            load_manifest(path)

    def test_apex_outside_clip_cites_row(self, tmp_path):
        path = self._write(tmp_path, [
            "a.ppm,s1,db,happiness,3,10",
            "b.ppm,s1,db,anger,10,10",
        ])
        with pytest.raises(ManifestError, match=":3"):
            load_manifest(path)

    def test_duplicate_rows_rejected(self, tmp_path):
        path = self._write(tmp_path, [
            "a.ppm,s1,db,happiness,,",
            "a.ppm,s1,db,happiness,,",
        ])
        with pytest.raises(ManifestError, match="duplicate"):
            load_manifest(path)

    def test_non_integer_apex_rejected(self, tmp_path):
        path = self._write(tmp_path, ["a.ppm,s1,db,happiness,peak,10"])
        with pytest.raises(ManifestError, match="apex"):
            load_manifest(path)

    def test_image_validation_flags_missing_files(self, tmp_path):
        path = self._write(tmp_path, ["gone.ppm,s1,db,happiness,,"])
        with pytest.raises(ManifestError, match="gone.ppm"):
            load_manifest(path, validate_images=True)

    def test_save_load_roundtrip(self, tmp_path):
        m = synth_dataset(3, 2, 2, image_size=16, seed=5)
        save_manifest(m, tmp_path / "out")
        back = load_manifest(tmp_path / "out" / "manifest.csv", validate_images=True)
        assert len(back) == len(m)
        assert back.class_names == m.class_names
        assert [s.subject_id for s in back.samples] == [s.subject_id for s in m.samples]
        for orig, loaded in zip(m.samples, back.samples):
            assert np.array_equal(load_sample_image(loaded), orig.image)


class TestRegroup:
    def test_casme2_table_counts(self):
        counts = dict(zip(EMOTIONS, (25, 15, 99, 26, 20)))
        counts["fear"] = 1
        counts["others"] = 69
        m = Manifest(make_samples(counts), list(counts))
        assert len(m) == 255
        out = regroup(m, five_emotion_map())
        assert len(out) == 185
        assert out.class_names == EMOTIONS
        assert class_counts(out) == dict(zip(EMOTIONS, (25, 15, 99, 26, 20)))

    def test_samm_table_counts(self):
        counts = dict(zip(EMOTIONS, (24, 13, 20, 8, 3)))
        counts["fear"] = 7
        counts["others"] = 84
        m = Manifest(make_samples(counts), list(counts))
        assert len(m) == 159
        out = regroup(m, five_emotion_map())
        assert len(out) == 68

    def test_identity_map_keeps_everything(self):
        counts = {"positive": 51, "negative": 70, "surprise": 43}
        m = Manifest(make_samples(counts), list(counts))
        out = regroup(m, {k: k for k in counts})
        assert len(out) == 164
        assert out.class_names == ["positive", "negative", "surprise"]

    def test_unmapped_label_is_listed(self):
        m = Manifest(make_samples({"joy": 2, "rage": 1}), ["joy", "rage"])
        with pytest.raises(ManifestError, match="rage"):
            regroup(m, {"joy": "happiness"})

    def test_subjects_and_databases_untouched(self):
        samples = (make_samples({"happiness": 2}, subject="a", database="d1")
                   + make_samples({"fear": 1}, subject="b", database="d2"))
        m = Manifest(samples, ["happiness", "fear"])
        out = regroup(m, {"happiness": "happiness", "fear": None})
        assert {(s.subject_id, s.database_id) for s in out.samples} == {("a", "d1")}

    def test_empty_vocabulary_rejected(self):
        m = Manifest(make_samples({"x": 1}), ["x"])
        with pytest.raises(ManifestError):
            regroup(m, {"x": None})


class TestApexFrame:
    def test_middle_of_odd_and_even_clips(self):
        s = Sample("a", "s", "d", "x", "x", apex_index=None, clip_len=11)
        assert apex_frame(s, "middle") == 5
        s.clip_len = 10
        assert apex_frame(s, "middle") == 5

    def test_labeled_passthrough(self):
        s = Sample("a", "s", "d", "x", "x", apex_index=42, clip_len=100)
        assert apex_frame(s, "labeled") == 42

    def test_errors_name_the_strategy(self):
        s = Sample("a", "s", "d", "x", "x")
        with pytest.raises(ManifestError, match="apex"):
            apex_frame(s, "labeled")
        with pytest.raises(ManifestError, match="clip"):
            apex_frame(s, "middle")
        with pytest.raises(ValidationError, match="strategy"):
            apex_frame(s, "last")


class TestAugment:
    def _image(self, seed=0, size=16):
        rng = np.random.default_rng(seed)
        return rng.integers(0, 256, (size, size, 3), dtype=np.uint8)

    def test_all_draws_missing_leaves_image_untouched(self):
        img = self._image()
        cfg = AugmentConfig(color_shift_max=20, rotation_max_deg=10,
                            smooth_window_max=6, probability=0.0)
        out = augment(img, cfg, np.random.default_rng(0))
        assert out.tobytes() == img.tobytes()

    def test_zero_rotation_is_identity(self):
        img = self._image(3)
        assert rotate_image(img, 0.0).tobytes() == img.tobytes()

    def test_color_shift_saturates(self):
        img = np.full((4, 4, 3), 255, dtype=np.uint8)
        out = shift_colors(img, (20, 20, 20))
        assert np.all(out == 255)

    def test_color_shift_clamps_at_zero(self):
        img = np.zeros((4, 4, 3), dtype=np.uint8)
        assert np.all(shift_colors(img, (-20, -5, -1)) == 0)

    def test_box_smooth_constant_image_unchanged(self):
        img = np.full((8, 8, 3), 77, dtype=np.uint8)
        for window in range(2, 7):
            assert np.all(box_smooth(img, window) == 77)

    def test_box_smooth_averages_neighbors(self):
        img = np.zeros((3, 3, 1), dtype=np.uint8)
        img[1, 1, 0] = 90
        out = box_smooth(img, 3)
        assert out[1, 1, 0] == 10  # 90 / 9

    def test_crop_corners_and_center(self):
        img = np.arange(6 * 6 * 3, dtype=np.uint8).reshape(6, 6, 3)
        assert np.array_equal(crop_square(img, 4, "top_left"), img[:4, :4])
        assert np.array_equal(crop_square(img, 4, "bottom_right"), img[2:, 2:])
        assert np.array_equal(crop_square(img, 4, "center"), img[1:5, 1:5])

    def test_crop_always_emits_target_size(self):
        img = self._image(5, size=12)
        cfg = AugmentConfig(crop=(12, 8), probability=0.0)
        # the corner draw misses, the output is still 8x8 (center crop)
        out = augment(img, cfg, np.random.default_rng(1))
        assert out.shape == (8, 8, 3)
        assert np.array_equal(out, img[2:10, 2:10])

    def test_crop_rejects_small_images(self):
        img = self._image(6, size=10)
        cfg = AugmentConfig(crop=(12, 8), probability=1.0)
        with pytest.raises(ValidationError):
            augment(img, cfg, np.random.default_rng(0))

    def test_same_seed_same_output(self):
        img = self._image(7, size=20)
        cfg = AugmentConfig(color_shift_max=20, rotation_max_deg=10,
                            smooth_window_max=6, crop=(20, 16))
        a = augment(img, cfg, np.random.default_rng(123))
        b = augment(img, cfg, np.random.default_rng(123))
        assert a.tobytes() == b.tobytes()
        assert a.shape == (16, 16, 3)

    def test_dimensions_preserved_without_crop(self):
        img = self._image(8, size=18)
        cfg = AugmentConfig(color_shift_max=20, rotation_max_deg=10,
                            smooth_window_max=6, probability=1.0)
        assert augment(img, cfg, np.random.default_rng(2)).shape == img.shape

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            AugmentConfig(color_shift_max=-1)
        with pytest.raises(ConfigError):
            AugmentConfig(smooth_window_max=1)
        with pytest.raises(ConfigError):
            AugmentConfig(probability=1.5)
        with pytest.raises(ConfigError):
            AugmentConfig(crop=(10, 12))


class TestResample:
    def test_minority_class_cycled_up(self):
        m = Manifest(make_samples({"a": 3, "b": 1}), ["a", "b"])
        out = resample_balance(m)
        assert class_counts(out) == {"a": 3, "b": 3}
        # originals first, then the cycled duplicates of b's single sample
        assert out.samples[:4] == m.samples
        assert out.samples[4] is m.samples[3]
        assert out.samples[5] is m.samples[3]

    def test_balanced_input_is_a_noop(self):
        m = Manifest(make_samples({"a": 2, "b": 2}), ["a", "b"])
        assert resample_balance(m).samples == m.samples

    def test_pooled_table_counts(self):
        counts = dict(zip(EMOTIONS, (49, 28, 119, 34, 23)))
        m = Manifest(make_samples(counts), EMOTIONS)
        out = resample_balance(m)
        assert class_counts(out) == {name: 119 for name in EMOTIONS}
        assert len(out) == 595

    def test_distinct_sample_sets_unchanged(self):
        m = Manifest(make_samples({"a": 5, "b": 2}), ["a", "b"])
        out = resample_balance(m)
        assert {id(s) for s in out.samples} == {id(s) for s in m.samples}

    def test_empty_manifest_rejected(self):
        with pytest.raises(ManifestError):
            resample_balance(Manifest([], ["a"]))


class TestSynthDataset:
    def test_counts_and_fields(self):
        m = synth_dataset(5, 6, 4, image_size=16, seed=0)
        assert len(m) == 120
        assert m.class_names == [f"class{i}" for i in range(5)]
        assert len({s.subject_id for s in m.samples}) == 6
        per_class = class_counts(m)
        assert all(v == 24 for v in per_class.values())
        for s in m.samples[:5]:
            assert s.image.shape == (16, 16, 3)
            assert s.image.dtype == np.uint8
            assert s.roi_mask.shape == (16, 16)

    def test_same_seed_is_bit_identical(self):
        a = synth_dataset(3, 2, 2, image_size=16, seed=9)
        b = synth_dataset(3, 2, 2, image_size=16, seed=9)
        for sa, sb in zip(a.samples, b.samples):
            assert sa.image.tobytes() == sb.image.tobytes()
        c = synth_dataset(3, 2, 2, image_size=16, seed=10)
        assert any(sa.image.tobytes() != sc.image.tobytes()
                   for sa, sc in zip(a.samples, c.samples))

    def test_class_signal_sits_in_its_quadrant(self):
        # Every subject contributes equally to every class mean, so texture
        # cancels in pairwise class-mean differences; what remains is the two
        # blobs, whose energy must concentrate in the two class quadrants.
        m = synth_dataset(4, 6, 6, image_size=32, seed=3)
        imgs = np.stack([s.image.astype(np.float64) for s in m.samples])
        labels = m.label_indices()
        means = [imgs[labels == c].mean(axis=0) for c in range(4)]
        for c in range(4):
            for d in range(c + 1, 4):
                diff = np.abs(means[c] - means[d]).sum(axis=2)
                union = class_roi_mask(c, 32, 32) | class_roi_mask(d, 32, 32)
                inside = diff[union].mean()
                outside = diff[~union].mean()
                assert inside > 5 * outside, \
                    f"classes {c},{d}: {inside:.2f} vs {outside:.2f}"

    def test_roi_masks_tile_the_image(self):
        masks = [class_roi_mask(c, 16, 16) for c in range(4)]
        total = np.zeros((16, 16), dtype=int)
        for mask in masks:
            total += mask.astype(int)
        assert np.all(total == 1)

    def test_bad_counts_rejected(self):
        with pytest.raises(ConfigError):
            synth_dataset(1, 2, 2)
        with pytest.raises(ConfigError):
            synth_dataset(3, 0, 2)


class TestMerge:
    def test_pooling_keeps_order(self):
        a = Manifest(make_samples({"x": 2}, database="d1"), ["x"])
        b = Manifest(make_samples({"x": 1}, database="d2"), ["x"])
        merged = merge_manifests([a, b])
        assert len(merged) == 3
        assert [s.database_id for s in merged.samples] == ["d1", "d1", "d2"]

    def test_vocabulary_mismatch_rejected(self):
        a = Manifest(make_samples({"x": 1}), ["x"])
        b = Manifest(make_samples({"y": 1}), ["y"])
        with pytest.raises(ManifestError):
            merge_manifests([a, b])


class TestImageIO:
    def test_ppm_roundtrip(self, tmp_path):
        rng = np.random.default_rng(1)
        img = rng.integers(0, 256, (7, 5, 3), dtype=np.uint8)
        path = tmp_path / "img.ppm"
        imageio.write_ppm(path, img)
        assert np.array_equal(imageio.read_image(path), img)

    def test_pgm_reads_as_three_channels(self, tmp_path):
        img = np.arange(12, dtype=np.uint8).reshape(3, 4)
        path = tmp_path / "img.pgm"
        imageio.write_pgm(path, img)
        back = imageio.read_image(path)
        assert back.shape == (3, 4, 3)
        assert np.array_equal(back[:, :, 0], img)
        assert np.array_equal(back[:, :, 1], img)

    def test_header_comments_are_skipped(self, tmp_path):
        path = tmp_path / "c.ppm"
        raster = bytes(range(12))
        path.write_bytes(b"P6\n# a comment\n2 2\n255\n" + raster)
        img = imageio.read_image(path)
        assert img.shape == (2, 2, 3)
        assert img.tobytes() == raster

    def test_wrong_maxval_rejected(self, tmp_path):
        path = tmp_path / "m.ppm"
        path.write_bytes(b"P6\n2 2\n65535\n" + bytes(24))
        with pytest.raises(ValidationError, match="maxval"):
            imageio.read_image(path)

    def test_truncated_raster_rejected(self, tmp_path):
        path = tmp_path / "t.ppm"
        path.write_bytes(b"P6\n2 2\n255\n" + bytes(5))
        with pytest.raises(ValidationError, match="raster"):
            imageio.read_image(path)

    def test_non_pnm_rejected(self, tmp_path):
        path = tmp_path / "x.ppm"
        path.write_bytes(b"JFIF....")
        with pytest.raises(ValidationError):
            imageio.read_image(path)
