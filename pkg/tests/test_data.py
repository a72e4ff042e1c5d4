import numpy as np
import pytest
from PIL import Image
from scipy import ndimage, stats

from mrmil.data import (ALT_ZOOM_RANGE, DEFAULT_ZOOM_RANGE, AugmentParams, DataFormatError, SyntheticSpec,
                        apply_augmentation, area_downsample, augment, format_boxes, generate, ingest, mask_at,
                        parse_boxes, sample_augmentation, upsample_nearest, write_dataset)
from mrmil.metrics import roc_auc


@pytest.fixture(scope="module")
def dataset():
    return generate(SyntheticSpec(seed=5, focal_radius_range=(4.0, 8.0)), 120)


class TestGenerate:
    def test_deterministic(self):
        a = generate(SyntheticSpec(seed=1), 10)
        b = generate(SyntheticSpec(seed=1), 10)
        for s, t in zip(a.samples, b.samples):
            np.testing.assert_array_equal(s.image, t.image)
            np.testing.assert_array_equal(s.labels, t.labels)
            assert s.boxes == t.boxes

    def test_label_counts_binomial_bound(self):
        # P(Bin(100, 0.5) outside [30, 70]) from the exact distribution
        outside = stats.binom.cdf(29, 100, 0.5) + stats.binom.sf(70, 100, 0.5)
        assert outside < 0.01
        for seed in range(10):
            counts = generate(SyntheticSpec(seed=seed), 100).positive_counts()
            assert all(30 <= c <= 70 for c in counts)

    def test_masks_match_labels(self, dataset):
        for s in dataset.samples:
            np.testing.assert_array_equal(s.truth_mask.reshape(2, -1).any(axis=1).astype(int), s.labels)

    def test_boxes_are_tight_and_inside(self, dataset):
        n = dataset[0].image.shape[0]
        for s in dataset.samples:
            for k, x, y, w, h in s.boxes:
                assert s.labels[k] == 1
                assert 0 <= x and 0 <= y and x + w <= n and y + h <= n
                assert s.truth_mask[k][y:y + h, x:x + w].any()
            if s.labels[0]:
                assert 1 <= len(s.boxes_for(0)) <= 3
            if s.labels[1]:
                assert len(s.boxes_for(1)) == 1

    def test_images_in_unit_range_on_8bit_grid(self, dataset):
        imgs = dataset.images()
        assert imgs.min() >= 0 and imgs.max() <= 1
        np.testing.assert_allclose(imgs * 255, np.round(imgs * 255), atol=1e-9)

    def test_focal_solvable_by_local_mean_oracle(self, dataset):
        scores = [ndimage.uniform_filter(s.image, 3).max() for s in dataset.samples]
        assert roc_auc(scores, dataset.labels()[:, 0]) >= 0.8

    def test_spec_validation(self):
        with pytest.raises(ValueError):
            SyntheticSpec(image_size=16, focal_radius_range=(4.0, 8.0))
        with pytest.raises(ValueError):
            SyntheticSpec(diffuse_coverage_range=(0.2, 1.0))
        with pytest.raises(ValueError):
            generate(SyntheticSpec(), 0)

    def test_subset_and_images_shape(self, dataset):
        sub = dataset.subset([0, 2, 4])
        assert sub.images().shape == (3, 1, 64, 64)
        assert sub.labels().shape == (3, 2)


class TestAugment:
    def test_identity(self, dataset):
        img = dataset[0].image
        np.testing.assert_allclose(apply_augmentation(img, AugmentParams.identity()), img, atol=1e-9)

    def test_range_and_determinism(self, dataset):
        img = dataset[1].image
        a = augment(img, np.random.default_rng(3))
        b = augment(img, np.random.default_rng(3))
        np.testing.assert_array_equal(a, b)
        assert a.min() >= 0 and a.max() <= 1

    def test_parameter_ranges(self):
        rng = np.random.default_rng(0)
        draws = [sample_augmentation(rng, 512) for _ in range(10_000)]
        zoom = np.array([d.zoom for d in draws])
        shift = np.array([[d.tx, d.ty] for d in draws])
        angle = np.array([d.angle for d in draws])
        assert DEFAULT_ZOOM_RANGE[0] <= zoom.min() and zoom.max() <= DEFAULT_ZOOM_RANGE[1]
        assert -50 <= shift.min() and shift.max() <= 50
        assert -25 <= angle.min() and angle.max() <= 25
        for values, lo, hi in ((zoom, 0.25, 0.75), (shift[:, 0], -50, 50), (angle, -25, 25)):
            assert stats.kstest(values, stats.uniform(lo, hi - lo).cdf).pvalue > 1e-3
            assert values.min() < lo + 0.01 * (hi - lo) and values.max() > hi - 0.01 * (hi - lo)

    def test_translation_scales_with_size(self):
        rng = np.random.default_rng(1)
        shifts = np.array([[p.tx, p.ty] for p in (sample_augmentation(rng, 64) for _ in range(2000))])
        assert np.abs(shifts).max() <= 50 * 64 / 512

    def test_alternative_zoom_range(self):
        rng = np.random.default_rng(2)
        zooms = [sample_augmentation(rng, 64, ALT_ZOOM_RANGE).zoom for _ in range(500)]
        assert min(zooms) >= 0.75 and max(zooms) <= 1.25

    def test_pure_translation_moves_content(self):
        img = np.zeros((16, 16))
        img[8, 8] = 1.0
        out = apply_augmentation(img, AugmentParams(1.0, 2.0, -3.0, 0.0))
        assert out[5, 10] == pytest.approx(1.0)

    def test_zoom_out_shrinks_and_pads(self):
        img = np.ones((32, 32))
        out = apply_augmentation(img, AugmentParams(0.5, 0.0, 0.0, 0.0))
        assert out[0, 0] == 0.0 and out[16, 16] == 1.0

    def test_rejects_non_square(self):
        with pytest.raises(ValueError):
            apply_augmentation(np.zeros((4, 5)), AugmentParams.identity())


class TestResampling:
    def test_block_constant_downsample_is_lossless(self):
        small = np.random.default_rng(0).uniform(0, 1, (512, 512))
        big = np.kron(small, np.ones((2, 2)))
        np.testing.assert_allclose(area_downsample(big, 512), small, atol=1e-15)

    def test_non_integer_factor(self):
        out = area_downsample(np.full((30, 30), 0.25), 16)
        np.testing.assert_allclose(out, 0.25, atol=1e-6)

    def test_mask_threshold(self):
        m = np.zeros((4, 4), dtype=np.uint8)
        m[:2, :2] = 1
        m[2, 2] = 1
        np.testing.assert_array_equal(mask_at(m, 2), [[1, 0], [0, 0]])

    def test_upsample_nearest(self):
        S = np.array([[0.1, 0.9], [0.4, 0.6]])
        up = upsample_nearest(S, 4)
        assert up.shape == (4, 4) and up[3, 0] == 0.4
        with pytest.raises(ValueError):
            upsample_nearest(S, 5)


class TestDisk:
    def test_round_trip(self, dataset, tmp_path):
        sub = dataset.subset(range(12))
        write_dataset(sub, tmp_path)
        back = ingest(tmp_path)
        assert back.class_names == sub.class_names
        for s, t in zip(sub.samples, back.samples):
            np.testing.assert_array_equal(s.image, t.image)
            np.testing.assert_array_equal(s.labels, t.labels)
            np.testing.assert_array_equal(s.truth_mask, t.truth_mask)
            assert s.boxes == t.boxes and s.name == t.name

    def test_masks_only_for_positives(self, dataset, tmp_path):
        sub = dataset.subset(range(12))
        write_dataset(sub, tmp_path)
        expected = {f"{s.name}_{k}.pgm" for s in sub.samples for k in range(2) if s.labels[k]}
        assert {p.name for p in (tmp_path / "masks").iterdir()} == expected

    def _write_csv(self, root, rows):
        (root / "labels.csv").write_text("\n".join(rows) + "\n")

    def _write_image(self, path, value, size):
        path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(np.full((size, size), value, dtype=np.uint8), mode="L").save(path)

    def test_white_image_scales_to_one(self, tmp_path):
        self._write_image(tmp_path / "images" / "w.png", 255, 8)
        self._write_csv(tmp_path, ["filename,label_1,label_2", "w.png,1,0"])
        np.testing.assert_array_equal(ingest(tmp_path)[0].image, 1.0)

    def test_downsample_on_ingest(self, tmp_path):
        self._write_image(tmp_path / "images" / "a.png", 128, 32)
        self._write_csv(tmp_path, ["filename,label_1,label_2,boxes", "a.png,1,0,0:4:8:6:6"])
        s = ingest(tmp_path, input_size=16)[0]
        assert s.image.shape == (16, 16)
        assert s.boxes == [(0, 2, 4, 3, 3)]

    def test_label_count_mismatch_reports_line(self, tmp_path):
        self._write_image(tmp_path / "images" / "a.png", 10, 8)
        self._write_csv(tmp_path, ["filename,label_1,label_2", "a.png,1,0", "a.png,1"])
        with pytest.raises(DataFormatError, match="line 3"):
            ingest(tmp_path)

    def test_bad_label_value(self, tmp_path):
        self._write_image(tmp_path / "images" / "a.png", 10, 8)
        self._write_csv(tmp_path, ["filename,label_1,label_2", "a.png,1,2"])
        with pytest.raises(DataFormatError, match="line 2"):
            ingest(tmp_path)

    def test_missing_image_reports_line(self, tmp_path):
        self._write_csv(tmp_path, ["filename,label_1,label_2", "nope.png,1,0"])
        with pytest.raises(FileNotFoundError, match="line 2"):
            ingest(tmp_path)

    def test_missing_labels_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            ingest(tmp_path)

    def test_box_format_round_trip(self):
        boxes = [(0, 1, 2, 3, 4), (1, 0, 0, 64, 64)]
        assert parse_boxes(format_boxes(boxes), 2, 1) == boxes
        with pytest.raises(DataFormatError):
            parse_boxes("5:0:0:1:1", 2, 7)
