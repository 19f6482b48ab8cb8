"""Tests for box matching, AP metrics, Tukey HSD letters, and report assembly."""

import json
import math

import numpy as np
import pytest

from weedvision.errors import (
    ConfigError,
    EmptyInputError,
    FormatError,
    ValidationError,
)
from weedvision.evaluation import (
    Detection,
    GroundTruth,
    ReplicationTable,
    average_precision,
    build_report,
    evaluate_detections,
    iou,
    map50,
    map50_95,
    match_detections,
    mean_average_precision,
    precision_recall,
    tukey_hsd_cld,
)
from weedvision.evaluation.report import (
    REPORT_NAME,
    load_predictions,
    write_predictions,
)
from weedvision.evaluation.stats import studentized_range_critical, tukey_hsd


def det(conf, x1, y1, x2, y2, class_id=0, image_id="img"):
    return Detection(image_id=image_id, class_id=class_id, confidence=conf,
                     x1=x1, y1=y1, x2=x2, y2=y2)


def gt(x1, y1, x2, y2, class_id=0, image_id="img"):
    return GroundTruth(image_id=image_id, class_id=class_id,
                       x1=x1, y1=y1, x2=x2, y2=y2)


class TestBoxTypes:
    def test_iou_identical_is_one(self):
        assert iou((0.1, 0.1, 0.4, 0.5), (0.1, 0.1, 0.4, 0.5)) == 1.0

    def test_iou_disjoint_is_zero(self):
        assert iou((0.0, 0.0, 0.2, 0.2), (0.5, 0.5, 0.9, 0.9)) == 0.0
        assert iou((0.0, 0.0, 0.2, 0.2), (0.2, 0.0, 0.4, 0.2)) == 0.0

    def test_iou_known_overlap(self):
        a = (0.0, 0.0, 0.5, 0.5)
        b = (0.25, 0.25, 0.75, 0.75)
        assert iou(a, b) == pytest.approx(1.0 / 7.0, abs=1e-12)

    def test_detection_validation(self):
        with pytest.raises(ValidationError):
            det(1.5, 0.1, 0.1, 0.2, 0.2)
        with pytest.raises(ValidationError):
            det(0.5, 0.3, 0.1, 0.2, 0.2)
        with pytest.raises(ValidationError):
            det(0.5, 0.1, 0.1, 1.2, 0.2)
        with pytest.raises(ValidationError):
            det(0.5, 0.1, 0.1, 0.2, 0.2, class_id=-1)

    def test_ground_truth_from_center_clamps(self):
        g = GroundTruth.from_center_box("i", 1, 0.05, 0.5, 0.2, 0.2)
        assert g.x1 == 0.0 and g.x2 == pytest.approx(0.15)

    def test_detection_dict_roundtrip(self):
        d = det(0.37, 0.12, 0.2, 0.5, 0.8, class_id=1)
        assert Detection.from_dict(json.loads(json.dumps(d.to_dict()))) == d


def reference_match(dets, gts, iou_threshold, conf_threshold):
    """Independent re-statement of the greedy matching contract."""
    considered = [d.confidence >= conf_threshold for d in dets]
    is_tp = [False] * len(dets)
    matched_gt = [-1] * len(dets)
    gt_used = [False] * len(gts)
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].confidence, i))
    for di in order:
        if not considered[di]:
            continue
        best, best_gi = 0.0, -1
        for gi, g in enumerate(gts):
            if gt_used[gi] or g.class_id != dets[di].class_id:
                continue
            v = iou(dets[di].corners, g.corners)
            if v >= iou_threshold and v > best:
                best, best_gi = v, gi
        if best_gi >= 0:
            is_tp[di] = True
            matched_gt[di] = best_gi
            gt_used[best_gi] = True
    return considered, is_tp, matched_gt, gt_used


def random_scene(rng, image_id="img", max_det=6, max_gt=5):
    def box(cls):
        x1 = rng.uniform(0.0, 0.7)
        y1 = rng.uniform(0.0, 0.7)
        w = rng.uniform(0.05, 0.3)
        h = rng.uniform(0.05, 0.3)
        return dict(x1=x1, y1=y1, x2=min(x1 + w, 1.0), y2=min(y1 + h, 1.0),
                    class_id=cls, image_id=image_id)

    gts = [GroundTruth(**box(int(rng.integers(0, 2))))
           for _ in range(int(rng.integers(0, max_gt + 1)))]
    dets = []
    for _ in range(int(rng.integers(0, max_det + 1))):
        if gts and rng.uniform() < 0.6:
            g = gts[int(rng.integers(0, len(gts)))]
            jit = rng.uniform(-0.05, 0.05, size=4)
            x1 = float(np.clip(g.x1 + jit[0], 0.0, 0.9))
            y1 = float(np.clip(g.y1 + jit[1], 0.0, 0.9))
            x2 = float(np.clip(g.x2 + jit[2], x1 + 0.01, 1.0))
            y2 = float(np.clip(g.y2 + jit[3], y1 + 0.01, 1.0))
            b = dict(x1=x1, y1=y1, x2=x2, y2=y2, class_id=g.class_id,
                     image_id=image_id)
        else:
            b = box(int(rng.integers(0, 2)))
        dets.append(Detection(confidence=float(rng.uniform()), **b))
    return dets, gts


class TestMatcher:
    def test_matches_reference_on_random_scenes(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            dets, gts = random_scene(rng)
            res = match_detections(dets, gts, iou_threshold=0.5,
                                   conf_threshold=0.25)
            considered, is_tp, matched_gt, gt_used = reference_match(
                dets, gts, 0.5, 0.25)
            assert res.det_considered.tolist() == considered
            assert res.det_is_tp.tolist() == is_tp
            assert res.det_matched_gt.tolist() == matched_gt
            assert res.gt_matched.tolist() == gt_used

    def test_higher_confidence_claims_contested_truth(self):
        g = [gt(0.1, 0.1, 0.3, 0.3)]
        d = [det(0.6, 0.1, 0.1, 0.3, 0.3), det(0.9, 0.11, 0.1, 0.31, 0.3)]
        res = match_detections(d, g)
        assert res.det_is_tp.tolist() == [False, True]
        assert res.det_matched_gt.tolist() == [-1, 0]

    def test_class_mismatch_never_matches(self):
        g = [gt(0.1, 0.1, 0.3, 0.3, class_id=1)]
        d = [det(0.9, 0.1, 0.1, 0.3, 0.3, class_id=0)]
        res = match_detections(d, g)
        assert res.tp == 0 and res.fp == 1 and res.fn == 1

    def test_below_threshold_not_considered(self):
        g = [gt(0.1, 0.1, 0.3, 0.3)]
        d = [det(0.1, 0.1, 0.1, 0.3, 0.3)]
        res = match_detections(d, g, conf_threshold=0.25)
        assert not res.det_considered[0]
        assert res.tp == 0 and res.fp == 0 and res.fn == 1

    def test_counts_hand_example(self):
        g = [gt(0.1, 0.1, 0.3, 0.3), gt(0.5, 0.5, 0.7, 0.7)]
        d = [
            det(0.9, 0.1, 0.1, 0.3, 0.3),
            det(0.8, 0.8, 0.8, 0.95, 0.95),
            det(0.7, 0.5, 0.5, 0.7, 0.7),
        ]
        res = match_detections(d, g)
        assert (res.tp, res.fp, res.fn) == (2, 1, 0)


class TestPrecisionRecall:
    def test_hand_counts(self):
        pr = precision_recall([True, True, False, True], n_gt=5)
        assert pr.precision == pytest.approx(75.0)
        assert pr.recall == pytest.approx(60.0)
        assert not pr.undefined_precision and not pr.undefined_recall

    def test_zero_denominators_flagged(self):
        pr = precision_recall([], n_gt=0)
        assert pr.precision == 0.0 and pr.recall == 0.0
        assert pr.undefined_precision and pr.undefined_recall

    def test_tp_beyond_gt_rejected(self):
        with pytest.raises(ValidationError):
            precision_recall([True, True], n_gt=1)


class TestAveragePrecision:
    def fixture_scene(self):
        gts = [gt(0.1, 0.1, 0.3, 0.3), gt(0.6, 0.6, 0.8, 0.8)]
        dets = [
            det(0.9, 0.1, 0.1, 0.3, 0.3),
            det(0.8, 0.35, 0.35, 0.55, 0.55),
            det(0.7, 0.6, 0.6, 0.8, 0.8),
        ]
        return dets, gts

    def test_three_detection_fixture_matches_envelope_oracle(self):
        # TP, FP, TP by descending confidence against 2 truths:
        # envelope is 1.0 up to recall 0.5 and 2/3 beyond, so the
        # 101-point mean is (51 + 50 * 2/3) / 101.
        dets, gts = self.fixture_scene()
        assert average_precision(dets, gts) == pytest.approx(253.0 / 303.0,
                                                             abs=1e-9)

    def test_no_detections_gives_zero(self):
        assert average_precision([], [gt(0.1, 0.1, 0.3, 0.3)]) == 0.0

    def test_all_false_positives_give_zero(self):
        dets = [det(0.9, 0.5, 0.5, 0.7, 0.7)]
        assert average_precision(dets, [gt(0.1, 0.1, 0.3, 0.3)]) == 0.0

    def test_no_ground_truths_is_an_error(self):
        with pytest.raises(EmptyInputError):
            average_precision([det(0.9, 0.1, 0.1, 0.3, 0.3)], [])

    def test_perfect_single_class_is_one(self):
        gts = [gt(0.1, 0.1, 0.3, 0.3), gt(0.6, 0.6, 0.8, 0.8)]
        dets = [det(1.0, g.x1, g.y1, g.x2, g.y2) for g in gts]
        assert average_precision(dets, gts) == 1.0

    def test_low_confidence_still_sweeps(self):
        gts = [gt(0.1, 0.1, 0.3, 0.3)]
        dets = [det(0.01, 0.1, 0.1, 0.3, 0.3)]
        assert average_precision(dets, gts) == 1.0


class TestMeanAveragePrecision:
    def test_classes_average_equally(self):
        gts = [gt(0.1, 0.1, 0.3, 0.3, class_id=0),
               gt(0.6, 0.6, 0.8, 0.8, class_id=1)]
        dets = [det(0.9, 0.1, 0.1, 0.3, 0.3, class_id=0)]
        r = mean_average_precision(dets, gts, [0.5])
        assert r.per_class[0] == pytest.approx(100.0)
        assert r.per_class[1] == pytest.approx(0.0)
        assert r.value == pytest.approx(50.0)

    def test_class_without_truths_excluded_and_noted(self):
        gts = [gt(0.1, 0.1, 0.3, 0.3, class_id=0)]
        dets = [det(0.9, 0.1, 0.1, 0.3, 0.3, class_id=0)]
        r = mean_average_precision(dets, gts, [0.5], num_classes=2)
        assert r.excluded_classes == [1]
        assert r.value == pytest.approx(100.0)
        assert any("class 1" in n for n in r.notes)

    def test_no_truths_at_all_is_an_error(self):
        with pytest.raises(EmptyInputError):
            mean_average_precision([det(0.9, 0.1, 0.1, 0.3, 0.3)], [], [0.5])

    def test_strict_sweep_never_beats_iou50(self):
        rng = np.random.default_rng(7)
        checked = 0
        while checked < 100:
            dets, gts = random_scene(rng, image_id=f"s{checked}")
            if not gts:
                continue
            m50 = map50(dets, gts)
            m5095 = map50_95(dets, gts)
            assert m5095 <= m50 + 1e-12
            checked += 1

    def test_perfect_predictions_hit_hundred_exactly(self):
        rng = np.random.default_rng(3)
        gts = []
        for i in range(10):
            for c in (0, 1):
                x1, y1 = rng.uniform(0.0, 0.6, size=2)
                gts.append(gt(float(x1), float(y1), float(x1) + 0.3,
                              float(y1) + 0.3, class_id=c, image_id=f"i{i}"))
        dets = [det(1.0, g.x1, g.y1, g.x2, g.y2, class_id=g.class_id,
                    image_id=g.image_id) for g in gts]
        out = evaluate_detections(dets, gts)
        assert out["metrics"]["Precision"] == 100.0
        assert out["metrics"]["Recall"] == 100.0
        assert out["metrics"]["mAP50"] == 100.0
        assert out["metrics"]["mAP50:95"] == 100.0


class TestEvaluateDetections:
    def scene(self):
        gts = [gt(0.1, 0.1, 0.3, 0.3, image_id="a"),
               gt(0.5, 0.5, 0.7, 0.7, image_id="a"),
               gt(0.2, 0.2, 0.4, 0.4, class_id=1, image_id="b")]
        dets = [det(0.9, 0.1, 0.1, 0.3, 0.3, image_id="a"),
                det(0.6, 0.52, 0.5, 0.72, 0.7, image_id="a"),
                det(0.15, 0.2, 0.2, 0.4, 0.4, class_id=1, image_id="b"),
                det(0.8, 0.7, 0.7, 0.9, 0.9, class_id=1, image_id="b")]
        return dets, gts

    def test_counts_and_metrics_block(self):
        dets, gts = self.scene()
        out = evaluate_detections(dets, gts, conf_threshold=0.25)
        assert out["counts"] == {
            "n_images": 2, "n_detections": 4, "n_ground_truths": 3,
            "tp": 2, "fp": 1, "fn": 1,
        }
        assert out["metrics"]["Precision"] == pytest.approx(100.0 * 2 / 3)
        assert out["metrics"]["Recall"] == pytest.approx(100.0 * 2 / 3)
        assert set(out["per_class_map50"]) == {"0", "1"}

    def test_matching_is_per_image(self):
        # Same-coordinate boxes in different images must not match.
        gts = [gt(0.1, 0.1, 0.3, 0.3, image_id="a")]
        dets = [det(0.9, 0.1, 0.1, 0.3, 0.3, image_id="b")]
        out = evaluate_detections(dets, gts)
        assert out["counts"]["tp"] == 0
        assert out["counts"]["fp"] == 1
        assert out["counts"]["fn"] == 1

    def test_worker_count_does_not_change_results(self):
        rng = np.random.default_rng(11)
        dets, gts = [], []
        for i in range(12):
            d, g = random_scene(rng, image_id=f"img{i}")
            dets.extend(d)
            gts.extend(g)
        if not gts:
            gts = [gt(0.1, 0.1, 0.3, 0.3, image_id="img0")]
        a = evaluate_detections(dets, gts, workers=1)
        b = evaluate_detections(dets, gts, workers=4)
        assert a == b

    def test_no_detections_above_threshold_noted(self):
        gts = [gt(0.1, 0.1, 0.3, 0.3)]
        dets = [det(0.05, 0.1, 0.1, 0.3, 0.3)]
        out = evaluate_detections(dets, gts, conf_threshold=0.25)
        assert out["metrics"]["Precision"] == 0.0
        assert any("precision undefined" in n for n in out["notes"])
        assert out["metrics"]["mAP50"] == pytest.approx(100.0)


class TestStudentizedRange:
    def test_published_values(self):
        assert studentized_range_critical(2, 4) == 3.9265
        assert studentized_range_critical(3, 10) == 3.8768
        assert studentized_range_critical(10, 30) == 4.8241

    def test_large_df_clamps_to_table_bottom(self):
        assert studentized_range_critical(2, 200) == 2.8882

    def test_untabulated_requests_rejected(self):
        with pytest.raises(ConfigError):
            studentized_range_critical(2, 4, alpha=0.01)
        with pytest.raises(ConfigError):
            studentized_range_critical(11, 4)
        with pytest.raises(ConfigError):
            studentized_range_critical(2, 0)


class TestTukeyHsd:
    def separated_table(self):
        return ReplicationTable(
            ("dual", "yolo"), "mAP50",
            np.array([[90.0, 91.0, 90.5], [70.0, 71.0, 70.5]]),
        )

    def overlapping_table(self):
        return ReplicationTable(
            ("dual", "yolo"), "mAP50",
            np.array([[80.0, 81.0, 79.5], [80.2, 80.9, 79.6]]),
        )

    def test_clear_separation_gets_distinct_letters(self):
        letters = tukey_hsd_cld(self.separated_table())
        assert letters == {"dual": "a", "yolo": "b"}

    def test_overlap_shares_one_letter(self):
        letters = tukey_hsd_cld(self.overlapping_table())
        assert letters == {"dual": "a", "yolo": "a"}

    def test_q_statistic_and_critical_value(self):
        hsd = tukey_hsd(self.separated_table())
        assert hsd.df_within == 4
        assert hsd.q_critical == 3.9265
        # means differ by 20 with MSE 0.25 over 3 replications.
        assert hsd.q_statistics[0, 1] == pytest.approx(20.0 / math.sqrt(0.25 / 3),
                                                       rel=1e-12)
        assert hsd.significant[0, 1] and hsd.significant[1, 0]

    def test_chain_overlap_yields_bridging_letters(self):
        table = ReplicationTable(
            ("hi", "mid", "lo"), "m",
            np.array([[11.0, 9.0], [6.5, 4.5], [2.0, 0.0]]),
        )
        letters = tukey_hsd_cld(table)
        assert letters == {"hi": "a", "mid": "ab", "lo": "b"}

    def test_zero_variance_falls_back_to_exact_equality(self):
        same = ReplicationTable(("a1", "a2"), "m",
                                np.array([[5.0, 5.0], [5.0, 5.0]]))
        hsd = tukey_hsd(same)
        assert hsd.exact_fallback
        assert hsd.letters == {"a1": "a", "a2": "a"}
        diff = ReplicationTable(("a1", "a2"), "m",
                                np.array([[5.0, 5.0], [6.0, 6.0]]))
        hsd = tukey_hsd(diff)
        assert hsd.exact_fallback
        assert set(hsd.letters.values()) == {"a", "b"}

    def test_table_validation(self):
        with pytest.raises(ValidationError):
            ReplicationTable(("a", "a"), "m", np.zeros((2, 2)))
        with pytest.raises(ValidationError):
            ReplicationTable(("a", "b"), "m", np.array([[np.nan, 1.0],
                                                        [1.0, 1.0]]))
        with pytest.raises(ValidationError):
            tukey_hsd(ReplicationTable(("a", "b"), "m",
                                       np.array([[1.0], [2.0]])))


def run_dir_with_report(tmp_path, name, model, dataset, metrics,
                        latency=None, params=None):
    d = tmp_path / name
    d.mkdir()
    doc = {"model": model, "dataset": dataset, "metrics": metrics}
    if latency is not None:
        doc["latency_ms"] = latency
    if params is not None:
        doc["param_count"] = params
    (d / REPORT_NAME).write_text(json.dumps(doc))
    return d


def full_metrics(base):
    return {"Precision": base, "Recall": base - 1.0, "mAP50": base + 2.0,
            "mAP50:95": base - 5.0}


class TestReport:
    def test_balanced_runs_get_letters_and_csv(self, tmp_path):
        dirs = [
            run_dir_with_report(tmp_path, "r1", "dual", "synth",
                                full_metrics(90.0), latency=120.0, params=1000),
            run_dir_with_report(tmp_path, "r2", "dual", "synth",
                                full_metrics(91.0), latency=130.0, params=1000),
            run_dir_with_report(tmp_path, "r3", "yolo", "synth",
                                full_metrics(70.0), latency=60.0, params=400),
            run_dir_with_report(tmp_path, "r4", "yolo", "synth",
                                full_metrics(71.0), latency=62.0, params=400),
        ]
        out = tmp_path / "out"
        report = build_report(dirs, out_dir=out)
        assert report["columns"] == ["Precision", "Recall", "mAP50", "mAP50:95",
                                     "Lat.", "Param."]
        rows = report["datasets"]["synth"]["rows"]
        assert [r["model"] for r in rows] == ["dual", "yolo"]
        dual_row = rows[0]
        assert dual_row["metrics"]["Precision"] == pytest.approx(90.5)
        assert dual_row["letters"]["mAP50"] == "a"
        assert rows[1]["letters"]["mAP50"] == "b"
        assert dual_row["latency_ms"] == pytest.approx(125.0)
        assert dual_row["param_count"] == 1000
        assert (out / REPORT_NAME).exists()
        csv_text = (out / "report_synth.csv").read_text().splitlines()
        assert csv_text[0] == "Model,Precision,Recall,mAP50,mAP50:95,Lat.,Param."
        assert csv_text[1].startswith("dual,90.50a,")

    def test_missing_run_listed_absent_without_blocking(self, tmp_path):
        good = run_dir_with_report(tmp_path, "ok", "dual", "synth",
                                   full_metrics(90.0))
        missing = tmp_path / "gone"
        report = build_report([good, missing])
        assert len(report["absent"]) == 1
        assert "report.json" in report["absent"][0]["error"]
        assert len(report["datasets"]["synth"]["rows"]) == 1

    def test_unbalanced_replications_skip_letters(self, tmp_path):
        dirs = [
            run_dir_with_report(tmp_path, "r1", "dual", "synth",
                                full_metrics(90.0)),
            run_dir_with_report(tmp_path, "r2", "dual", "synth",
                                full_metrics(91.0)),
            run_dir_with_report(tmp_path, "r3", "yolo", "synth",
                                full_metrics(70.0)),
        ]
        report = build_report(dirs)
        rows = report["datasets"]["synth"]["rows"]
        assert all(r["letters"] == {} for r in rows)
        assert any("balanced" in n for n in report["datasets"]["synth"]["notes"])

    def test_absent_cells_in_csv(self, tmp_path):
        dirs = [run_dir_with_report(tmp_path, "r1", "dual", "synth",
                                    full_metrics(90.0))]
        out = tmp_path / "out"
        build_report(dirs, out_dir=out)
        line = (out / "report_synth.csv").read_text().splitlines()[1]
        assert line.endswith("absent,absent")

    def test_malformed_report_is_absent(self, tmp_path):
        d = tmp_path / "bad"
        d.mkdir()
        (d / REPORT_NAME).write_text("{not json")
        report = build_report([d])
        assert len(report["absent"]) == 1
        assert report["datasets"] == {}


class TestPredictionFiles:
    def test_roundtrip_preserves_detections(self, tmp_path):
        dets = [det(0.9, 0.1, 0.1, 0.3, 0.3, image_id="a"),
                det(0.4, 0.2, 0.2, 0.5, 0.6, class_id=1, image_id="b")]
        write_predictions(dets, tmp_path / "preds", image_ids=["a", "b", "c"])
        assert (tmp_path / "preds" / "c.json").read_text().strip() == "[]"
        loaded = load_predictions(tmp_path / "preds")
        assert sorted(loaded, key=lambda d: d.image_id) == dets

    def test_missing_directory_rejected(self, tmp_path):
        with pytest.raises(FormatError):
            load_predictions(tmp_path / "nope")

    def test_non_list_payload_rejected(self, tmp_path):
        p = tmp_path / "preds"
        p.mkdir()
        (p / "a.json").write_text('{"image_id": "a"}')
        with pytest.raises(FormatError):
            load_predictions(p)

    def test_bad_json_rejected(self, tmp_path):
        p = tmp_path / "preds"
        p.mkdir()
        (p / "a.json").write_text("[{]")
        with pytest.raises(FormatError):
            load_predictions(p)
