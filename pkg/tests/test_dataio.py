"""Tests for image records, label parsing, box crops, and synthetic scenes."""

import numpy as np
import pytest
from PIL import Image

from weedvision import dataio
from weedvision.errors import FormatError, ParseError, ValidationError


class TestLoadImage:
    def test_minimal_black_png(self, tmp_path):
        path = tmp_path / "black.png"
        Image.fromarray(np.zeros((1, 1, 3), np.uint8), "RGB").save(path)
        rec = dataio.load_image(path)
        assert rec.width == 1 and rec.height == 1
        np.testing.assert_array_equal(rec.pixels, 0)

    def test_dimensions_preserved(self, tmp_path):
        path = tmp_path / "field.png"
        px = np.random.default_rng(0).integers(0, 256, (1200, 900, 3), dtype=np.uint8)
        Image.fromarray(px, "RGB").save(path)
        rec = dataio.load_image(path)
        assert rec.width == 900 and rec.height == 1200
        np.testing.assert_array_equal(rec.pixels, px)

    def test_missing_file_is_io_error(self, tmp_path):
        with pytest.raises(OSError):
            dataio.load_image(tmp_path / "nope.png")

    def test_truncated_file_is_format_error(self, tmp_path):
        path = tmp_path / "trunc.png"
        good = tmp_path / "good.png"
        Image.fromarray(np.zeros((16, 16, 3), np.uint8), "RGB").save(good)
        path.write_bytes(good.read_bytes()[:40])
        with pytest.raises(FormatError):
            dataio.load_image(path)

    def test_non_rgb_is_format_error(self, tmp_path):
        path = tmp_path / "gray.png"
        Image.fromarray(np.zeros((4, 4), np.uint8), "L").save(path)
        with pytest.raises(FormatError):
            dataio.load_image(path)


class TestLabels:
    def test_single_line(self):
        boxes = dataio.parse_labels("0 0.5 0.5 0.2 0.2")
        assert boxes == [dataio.GroundTruthBox(0, 0.5, 0.5, 0.2, 0.2)]

    def test_empty_file(self):
        assert dataio.parse_labels("") == []
        assert dataio.parse_labels("\n\n") == []

    def test_class_out_of_range(self):
        with pytest.raises(ValidationError):
            dataio.parse_labels("2 0.5 0.5 0.1 0.1", class_count=2)

    def test_malformed_line_reports_line_number(self):
        with pytest.raises(ParseError) as exc:
            dataio.parse_labels("0 0.5 0.5 0.1 0.1\n1 0.2 0.2 0.1")
        assert exc.value.line_number == 2

    def test_non_numeric_field(self):
        with pytest.raises(ParseError):
            dataio.parse_labels("0 a b c d")

    def test_coordinates_out_of_range(self):
        with pytest.raises(ValidationError):
            dataio.parse_labels("0 1.5 0.5 0.1 0.1")
        with pytest.raises(ValidationError):
            dataio.parse_labels("0 0.5 0.5 0.0 0.1")

    def test_round_trip_exact(self):
        boxes = [
            dataio.GroundTruthBox(0, 0.5, 0.5, 0.25, 0.125),
            dataio.GroundTruthBox(1, 0.015625, 1.0, 0.75, 0.0625),
        ]
        assert dataio.parse_labels(dataio.serialize_labels(boxes)) == boxes


class TestCropBoundingBoxes:
    def _record(self, h=100, w=100, seed=0):
        px = np.random.default_rng(seed).integers(0, 256, (h, w, 3), dtype=np.uint8)
        return dataio.ImageRecord(id="img", pixels=px, source_tag="field")

    def test_full_image_box_is_identity(self):
        rec = self._record()
        box = dataio.GroundTruthBox(0, 0.5, 0.5, 1.0, 1.0)
        (crop,) = dataio.crop_bounding_boxes(rec, [box])
        np.testing.assert_array_equal(crop.pixels, rec.pixels)

    def test_centered_half_box(self):
        rec = self._record()
        box = dataio.GroundTruthBox(1, 0.5, 0.5, 0.5, 0.5)
        (crop,) = dataio.crop_bounding_boxes(rec, [box])
        assert crop.pixels.shape == (50, 50, 3)
        np.testing.assert_array_equal(crop.pixels, rec.pixels[25:75, 25:75])
        assert crop.provenance == {"parent_id": "img", "class_id": 1}

    def test_clamped_crop_matches_membership_oracle(self):
        # Oracle: a pixel belongs to the crop iff its center falls inside the
        # denormalized box intersected with the image.
        rec = self._record(h=40, w=60, seed=3)
        cases = [
            dataio.GroundTruthBox(0, 0.02, 0.5, 0.3, 0.4),
            dataio.GroundTruthBox(0, 0.98, 0.1, 0.25, 0.35),
            dataio.GroundTruthBox(0, 0.5, 0.97, 0.2, 0.3),
        ]
        for box in cases:
            (crop,) = dataio.crop_bounding_boxes(rec, [box])
            xs = np.arange(rec.width) + 0.5
            ys = np.arange(rec.height) + 0.5
            in_x = (xs >= (box.cx - box.w / 2) * rec.width) & (
                xs < (box.cx + box.w / 2) * rec.width
            )
            in_y = (ys >= (box.cy - box.h / 2) * rec.height) & (
                ys < (box.cy + box.h / 2) * rec.height
            )
            assert crop.pixels.shape[0] * crop.pixels.shape[1] == (
                in_x.sum() * in_y.sum()
            )

    def test_degenerate_box_skipped(self):
        rec = self._record()
        tiny = dataio.GroundTruthBox(0, 0.001, 0.001, 0.001, 0.001)
        ok = dataio.GroundTruthBox(0, 0.5, 0.5, 0.5, 0.5)
        crops = dataio.crop_bounding_boxes(rec, [tiny, ok, tiny])
        assert len(crops) == 1

    def test_output_count_conservation(self):
        rng = np.random.default_rng(7)
        rec = self._record(seed=7)
        boxes = []
        for _ in range(20):
            w, h = rng.uniform(0.01, 0.9, 2)
            cx, cy = rng.uniform(0.0, 1.0, 2)
            boxes.append(dataio.GroundTruthBox(0, float(cx), float(cy), float(w), float(h)))
        crops = dataio.crop_bounding_boxes(rec, boxes)
        degenerate = 0
        for b in boxes:
            x0, y0, x1, y1 = dataio.box_pixel_bounds(b, rec.width, rec.height)
            if x1 <= x0 or y1 <= y0:
                degenerate += 1
        assert len(crops) == len(boxes) - degenerate


class TestSyntheticScenes:
    def test_fixed_seed_is_byte_identical(self, tmp_path):
        cfg = dataio.SyntheticSceneConfig(seed=7)
        a = dataio.synth_blob_dataset(cfg, 3)
        b = dataio.synth_blob_dataset(cfg, 3)
        for sa, sb in zip(a, b):
            assert sa.record.pixels.tobytes() == sb.record.pixels.tobytes()
            assert sa.boxes == sb.boxes
        d1, d2 = tmp_path / "d1", tmp_path / "d2"
        dataio.write_dataset(a, d1)
        dataio.write_dataset(b, d2)
        for rel in sorted(p.relative_to(d1) for p in d1.rglob("*") if p.is_file()):
            assert (d1 / rel).read_bytes() == (d2 / rel).read_bytes()

    def test_worker_count_does_not_change_output(self):
        cfg = dataio.SyntheticSceneConfig(seed=11)
        a = dataio.synth_blob_dataset(cfg, 6, workers=1)
        b = dataio.synth_blob_dataset(cfg, 6, workers=4)
        for sa, sb in zip(a, b):
            assert sa.record.pixels.tobytes() == sb.record.pixels.tobytes()

    def test_empty_scene(self):
        cfg = dataio.SyntheticSceneConfig(n_crops=0, n_weeds=0, seed=1)
        (sample,) = dataio.synth_blob_dataset(cfg, 1)
        assert sample.boxes == []
        assert dataio.serialize_labels(sample.boxes) == ""

    def test_blob_region_greener_than_background(self):
        from weedvision.curation import green_ratio

        cfg = dataio.SyntheticSceneConfig(seed=5)
        for sample in dataio.synth_blob_dataset(cfg, 4):
            rec = sample.record
            blob_mask = np.zeros((rec.height, rec.width), bool)
            for box in sample.boxes:
                x0, y0, x1, y1 = dataio.box_pixel_bounds(box, rec.width, rec.height)
                blob_mask[y0:y1, x0:x1] = True
            blob_green = green_ratio(rec.pixels[blob_mask][:, None, :])
            bg_green = green_ratio(rec.pixels[~blob_mask][:, None, :])
            assert blob_green > bg_green
            assert blob_green > 0.5
            assert bg_green < 0.1

    def test_boxes_are_tight_within_one_pixel(self):
        # Re-derive each blob's mask as "pixels that differ from a blob-free
        # render" and compare its tight box to the emitted label.
        cfg = dataio.SyntheticSceneConfig(n_crops=1, n_weeds=1, seed=9)
        for idx, sample in enumerate(dataio.synth_blob_dataset(cfg, 3)):
            empty = dataio.render_scene(
                dataio.SyntheticSceneConfig(n_crops=0, n_weeds=0, seed=0),
                np.random.default_rng(cfg.seed ^ idx),
            )
            rec = sample.record
            diff = np.abs(
                rec.pixels.astype(int) - empty.record.pixels.astype(int)
            ).sum(axis=2)
            changed = diff > 30
            for box in sample.boxes:
                x0, y0, x1, y1 = dataio.box_pixel_bounds(box, rec.width, rec.height)
                region = changed[y0:y1, x0:x1]
                # Emitted box must contain changed pixels near all four edges.
                assert region[0].any() or region[1].any()
                assert region[-1].any() or region[-2].any()
                assert region[:, 0].any() or region[:, 1].any()
                assert region[:, -1].any() or region[:, -2].any()

    def test_infeasible_packing_raises(self):
        from weedvision.errors import GenerationError

        cfg = dataio.SyntheticSceneConfig(
            image_size=64, n_crops=8, n_weeds=8, crop_radius_range=(9.0, 10.0),
            weed_radius_range=(9.0, 10.0), seed=2,
        )
        with pytest.raises(GenerationError):
            dataio.synth_blob_dataset(cfg, 1)

    def test_invalid_config_rejected(self):
        with pytest.raises(ValidationError):
            dataio.SyntheticSceneConfig(crop_radius_range=(0.0, 5.0))
        with pytest.raises(ValidationError):
            dataio.SyntheticSceneConfig(image_size=32, crop_radius_range=(6.0, 20.0))


class TestManifest:
    def test_write_and_load_dataset(self, tmp_path):
        cfg = dataio.SyntheticSceneConfig(seed=3)
        samples = dataio.synth_blob_dataset(cfg, 2)
        manifest = dataio.write_dataset(samples, tmp_path)
        ds = dataio.load_dataset(manifest)
        assert [e.id for e in ds.entries] == ["synth_00000", "synth_00001"]
        rec = ds.load_image(ds.entries[0])
        np.testing.assert_array_equal(rec.pixels, samples[0].record.pixels)
        boxes = ds.load_boxes(ds.entries[0], class_count=2)
        assert len(boxes) == len(samples[0].boxes)
        for got, want in zip(boxes, samples[0].boxes):
            assert got.cx == pytest.approx(want.cx, abs=1e-6)

    def test_ids_unique(self, tmp_path):
        cfg = dataio.SyntheticSceneConfig(seed=3)
        samples = dataio.synth_blob_dataset(cfg, 5)
        ds = dataio.load_dataset(dataio.write_dataset(samples, tmp_path))
        ids = [e.id for e in ds.entries]
        assert len(ids) == len(set(ids))

    def test_bad_manifest_is_format_error(self, tmp_path):
        bad = tmp_path / "manifest.json"
        bad.write_text("{not json")
        with pytest.raises(FormatError):
            dataio.load_dataset(bad)
