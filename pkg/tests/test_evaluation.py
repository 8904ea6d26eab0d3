"""Metric tests: consensus masks, upsampling, cIoU, AUC, and the
end-to-end evaluate harness on tiny hand-built datasets."""

import numpy as np
import pytest

from avloc.audio import save_wav
from avloc.encoders import default_config, init_params
from avloc.evaluation import (
    EvalConfig,
    auc,
    ciou,
    consensus_mask,
    evaluate,
    format_report,
    random_heatmap_baseline,
    success_curve,
    upsample_heatmap,
)
from avloc.manifest import BBox, Manifest, SampleRecord, read_manifest, write_manifest
from avloc.tensorio import save_tensor


def naive_ciou(pred, gt_values, threshold):
    """Per-pixel triple-loop reimplementation used as the exactness oracle."""
    inside = 0.0
    total = 0.0
    false_pos = 0.0
    rows, cols = pred.shape
    for r in range(rows):
        for c in range(cols):
            g = float(gt_values[r][c])
            p = float(pred[r][c])
            total += g
            if p > threshold:
                if g > 0.0:
                    inside += g
                else:
                    false_pos += 1.0
    return inside / (total + false_pos)


def pseudocode_auc(values):
    """Independent transliteration of the threshold-sweep pseudocode:
    21 uniform thresholds, strict >, trapezoid integration."""
    n = len(values)
    scores = []
    for i in range(21):
        threshold = 0.05 * i
        count = 0
        for v in values:
            if v > threshold:
                count += 1
        scores.append(count / n)
    paired = 0.0
    for i in range(20):
        paired += scores[i] + scores[i + 1]
    return paired / 40.0


def random_gt(rng, size=16):
    """Consensus mask from random annotator boxes, random quorum."""
    groups = []
    for _ in range(int(rng.integers(1, 4))):
        boxes = []
        for _ in range(int(rng.integers(1, 3))):
            x, y = int(rng.integers(0, size - 4)), int(rng.integers(0, size - 4))
            w, h = int(rng.integers(2, 6)), int(rng.integers(2, 6))
            boxes.append(BBox(x, y, w, h))
        groups.append(tuple(boxes))
    return consensus_mask(tuple(groups), size, size, int(rng.integers(1, 5)))


class TestConsensusMask:
    def test_three_identical_full_frames(self):
        box = (BBox(0, 0, 8, 8),)
        gt = consensus_mask((box, box, box), 8, 8, consensus=2)
        np.testing.assert_array_equal(gt.values, 1.0)

    def test_one_of_three_annotators(self):
        marked = (BBox(2, 2, 3, 3),)
        gt = consensus_mask((marked, (), ()), 8, 8, consensus=2)
        assert gt.values[3, 3] == 0.5
        assert gt.values[0, 0] == 0.0

    def test_two_overlapping_boxes_counted_per_pixel(self):
        a, b = (BBox(0, 0, 4, 4),), (BBox(2, 2, 4, 4),)
        gt = consensus_mask((a, b), 8, 8, consensus=2)
        counts = np.zeros((8, 8))
        counts[0:4, 0:4] += 1
        counts[2:6, 2:6] += 1
        np.testing.assert_array_equal(gt.values, np.minimum(counts / 2, 1))
        assert gt.values[3, 3] == 1.0 and gt.values[0, 0] == 0.5

    def test_entries_are_quorum_fractions(self):
        rng = np.random.default_rng(6)
        for _ in range(30):
            gt = random_gt(rng)
            allowed = np.arange(gt.consensus + 1) / gt.consensus
            assert np.isin(gt.values, allowed).all()

    def test_union_within_annotator(self):
        group = (BBox(0, 0, 2, 2), BBox(1, 1, 2, 2))  # overlapping boxes
        gt = consensus_mask((group,), 4, 4, consensus=1)
        assert gt.values[1, 1] == 1.0  # union, not a double vote

    def test_boxes_clamped_to_frame(self):
        gt = consensus_mask(((BBox(6, 6, 10, 10),),), 8, 8, consensus=1)
        assert gt.values[7, 7] == 1.0 and gt.values[5, 5] == 0.0

    def test_zero_annotators_rejected(self):
        with pytest.raises(ValueError, match="at least one annotator"):
            consensus_mask((), 8, 8)

    def test_box_outside_frame_rejected(self):
        with pytest.raises(ValueError, match="degenerate after clamping"):
            consensus_mask(((BBox(10, 10, 3, 3),),), 8, 8)


class TestUpsampleHeatmap:
    def test_constant_maps_to_half(self):
        out = upsample_heatmap(np.full((3, 3), 0.7), 9, 9)
        np.testing.assert_array_equal(out, 0.5)

    def test_hand_bilinear_two_by_two(self):
        grid = np.array([[0.0, 0.0], [0.0, 1.0]])
        out = upsample_heatmap(grid, 4, 4)
        pos = np.array([0.0, 1 / 3, 2 / 3, 1.0])
        np.testing.assert_allclose(out, np.outer(pos, pos), atol=1e-12)
        assert out.argmax() == 15

    def test_identity_when_already_full_resolution(self):
        rng = np.random.default_rng(0)
        grid = rng.uniform(size=(5, 5))
        grid[0, 0], grid[-1, -1] = 0.0, 1.0  # spans both endpoints
        np.testing.assert_array_equal(upsample_heatmap(grid, 5, 5), grid)

    def test_output_spans_unit_interval(self):
        rng = np.random.default_rng(1)
        out = upsample_heatmap(rng.uniform(-1, 1, (4, 4)), 32, 32)
        assert out.min() == 0.0 and out.max() == 1.0

    def test_downscale_rejected(self):
        with pytest.raises(ValueError, match="smaller than source"):
            upsample_heatmap(np.zeros((4, 4)), 2, 8)

    def test_rank_checked(self):
        with pytest.raises(ValueError, match="rank 2"):
            upsample_heatmap(np.zeros(4), 8, 8)


class TestCiou:
    def test_perfect_binary_prediction(self):
        g = np.zeros((8, 8))
        g[2:5, 2:5] = 1.0
        assert ciou(g, g) == 1.0

    def test_full_frame_prediction(self):
        g = np.zeros((4, 4))
        g[:2, :2] = 1.0  # 25% coverage
        assert ciou(np.ones((4, 4)), g) == 0.25

    def test_empty_prediction(self):
        g = np.zeros((4, 4))
        g[0, 0] = 1.0
        assert ciou(np.zeros((4, 4)), g) == 0.0

    def test_matches_triple_loop_exactly(self):
        rng = np.random.default_rng(42)
        for _ in range(200):
            pred = rng.uniform(size=(16, 16))
            gt = random_gt(rng, 16)
            assert ciou(pred, gt) == naive_ciou(pred, gt.values, 0.5)

    def test_partial_credit_from_consensus_weights(self):
        g = np.zeros((2, 2))
        g[0, 0], g[0, 1] = 1.0, 0.5
        pred = np.zeros((2, 2))
        pred[0, 0] = 1.0
        # hits the full-consensus pixel only: 1 / (1.5 + 0)
        assert ciou(pred, g) == 1.0 / 1.5

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError, match="shape mismatch"):
            ciou(np.zeros((2, 2)), np.ones((3, 3)))

    def test_empty_gt_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            ciou(np.zeros((2, 2)), np.zeros((2, 2)))

    def test_bad_threshold_rejected(self):
        with pytest.raises(ValueError, match="threshold"):
            ciou(np.zeros((2, 2)), np.ones((2, 2)), threshold=1.0)


class TestAuc:
    def test_all_ones_anchor(self):
        assert auc([1.0] * 7) == 0.975

    def test_all_zeros_anchor(self):
        assert auc([0.0] * 5) == 0.0

    def test_two_value_hand_trapezoid(self):
        assert auc([0.4, 0.6]) == 0.475

    def test_matches_transliteration_exactly(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            values = rng.uniform(size=int(rng.integers(1, 40))).tolist()
            assert auc(values) == pseudocode_auc(values)

    def test_curve_non_increasing_and_bounds(self):
        rng = np.random.default_rng(9)
        for _ in range(20):
            values = rng.uniform(size=25).tolist()
            curve = success_curve(values)
            assert all(a >= b for a, b in zip(curve, curve[1:]))
            area = auc(values)
            assert 0.0 <= area <= curve[0]

    def test_empty_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            auc([])

    def test_out_of_range_rejected(self):
        with pytest.raises(ValueError, match="outside"):
            auc([0.5, 1.2])


def build_tiny_dataset(tmp_path, n=3, size=32, seconds=0.6, rate=16000, seed=0):
    rng = np.random.default_rng(seed)
    records = []
    for i in range(n):
        sid = f"s{i:04d}"
        image = rng.uniform(size=(3, size, size)).astype(np.float32)
        (tmp_path / "images").mkdir(exist_ok=True)
        (tmp_path / "audio").mkdir(exist_ok=True)
        save_tensor(tmp_path / "images" / f"{sid}.tsr", image)
        wave = rng.uniform(-0.3, 0.3, int(seconds * rate)).astype(np.float32)
        save_wav(tmp_path / "audio" / f"{sid}.wav", wave, rate)
        box = BBox(int(rng.integers(0, size - 10)), int(rng.integers(0, size - 10)), 9, 9)
        records.append(
            SampleRecord(
                sample_id=sid,
                image=f"images/{sid}.tsr",
                audio=f"audio/{sid}.wav",
                class_id=i % 2,
                split="test",
                boxes=((box,), (box,)),
            )
        )
    path = tmp_path / "tiny.txt"
    write_manifest(records, path)
    return read_manifest(path)


class TestEvaluate:
    def setup_method(self):
        self.cfg = default_config()
        self.params = init_params(self.cfg, seed=5)
        self.eval_cfg = EvalConfig(seconds=1.0)

    def test_report_fields_consistent(self, tmp_path):
        manifest = build_tiny_dataset(tmp_path)
        report = evaluate(self.params, self.cfg, manifest, self.eval_cfg)
        assert report.tag == "tiny"
        assert len(report.cious) == len(report.sample_ids) == 3
        assert report.success_at_half == report.curve[10]
        assert report.auc_value == auc(report.cious)
        assert all(0.0 <= v <= 1.0 for v in report.cious)

    def test_deterministic_bytes(self, tmp_path):
        manifest = build_tiny_dataset(tmp_path)
        a = format_report(evaluate(self.params, self.cfg, manifest, self.eval_cfg))
        b = format_report(evaluate(self.params, self.cfg, manifest, self.eval_cfg))
        assert a == b

    def test_perfect_predictions_compose_to_headline_values(self):
        # pixel-exact predictions on binary masks: every cIoU is 1.0,
        # so success@0.5 is 1.0 and the AUC anchor value appears
        rng = np.random.default_rng(11)
        cious = []
        for _ in range(6):
            gt = consensus_mask(
                ((BBox(int(rng.integers(0, 8)), int(rng.integers(0, 8)), 4, 4),),),
                16, 16, consensus=1,
            )
            cious.append(ciou(gt.values.copy(), gt))
        curve = success_curve(cious)
        assert curve[10] == 1.0
        assert auc(cious) == 0.975

    def test_empty_manifest_rejected(self, tmp_path):
        manifest = Manifest(root=tmp_path, records=[], name="none")
        with pytest.raises(ValueError, match="no records"):
            evaluate(self.params, self.cfg, manifest, self.eval_cfg)

    def test_missing_file_names_sample(self, tmp_path):
        manifest = build_tiny_dataset(tmp_path)
        (tmp_path / "audio" / "s0001.wav").unlink()
        with pytest.raises(FileNotFoundError, match="s0001"):
            evaluate(self.params, self.cfg, manifest, self.eval_cfg)

    def test_tag_override(self, tmp_path):
        manifest = build_tiny_dataset(tmp_path)
        report = evaluate(self.params, self.cfg, manifest, self.eval_cfg, tag="unseen")
        assert report.tag == "unseen"


class TestRandomBaseline:
    def test_deterministic_and_bounded(self, tmp_path):
        manifest = build_tiny_dataset(tmp_path)
        kw = dict(image_hw=(32, 32), grid_hw=(4, 4), trials=50, seed=3)
        a = random_heatmap_baseline(manifest, eval_cfg=EvalConfig(), **kw)
        b = random_heatmap_baseline(manifest, eval_cfg=EvalConfig(), **kw)
        assert a == b
        assert 0.0 <= a <= 1.0

    def test_trials_validated(self, tmp_path):
        manifest = build_tiny_dataset(tmp_path)
        with pytest.raises(ValueError, match="trials"):
            random_heatmap_baseline(manifest, (32, 32), (4, 4), trials=0)
