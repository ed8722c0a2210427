import numpy as np
import pytest
import torch

from duostream.core import (DatasetManifest, ImageBuffer, ManifestRecord,
                            MaskBuffer, RngState, save_image, save_mask)
from duostream.errors import ConfigError, ShapeError
from duostream.metrics import (EvalReport, EvalRow, dice_score,
                               evaluate_dataset, iou_score)
from duostream.model import tensor_to_masks

from conftest import rand_mask


def _mask(a):
    return MaskBuffer(np.asarray(a, dtype=np.float64))


class TestScores:
    def test_perfect_match(self):
        m = rand_mask(seed=3)
        assert dice_score(m, m) == 1.0
        assert iou_score(m, m) == 1.0

    def test_total_miss(self):
        pred = _mask(np.ones((4, 4)))
        gt = _mask(np.zeros((4, 4)))
        assert dice_score(pred, gt) == 0.0
        assert iou_score(pred, gt) == 0.0

    def test_empty_vs_empty_scores_one(self):
        z = _mask(np.zeros((4, 4)))
        assert dice_score(z, z) == 1.0
        assert iou_score(z, z) == 1.0

    def test_hand_counted_case(self):
        # pred {0,1}, gt {1,2} of a 1x3 strip: I=1, P=2, G=2, U=3
        pred = _mask([[1.0, 1.0, 0.0]])
        gt = _mask([[0.0, 1.0, 1.0]])
        assert dice_score(pred, gt) == 2.0 * 1 / 4
        assert iou_score(pred, gt) == 1 / 3

    def test_threshold_strictly_greater(self):
        # prediction exactly at the threshold counts as background
        pred = _mask([[0.5, 0.6]])
        gt = _mask([[1.0, 1.0]])
        assert dice_score(pred, gt, threshold=0.5) == 2.0 * 1 / 3
        # ... and at threshold 0.59 the second pixel still fires
        assert dice_score(pred, gt, threshold=0.59) == 2.0 * 1 / 3

    def test_soft_prediction_binarized(self):
        pred = _mask([[0.49, 0.51], [0.51, 0.49]])
        gt = _mask([[0.0, 1.0], [1.0, 0.0]])
        assert dice_score(pred, gt) == 1.0
        assert iou_score(pred, gt) == 1.0

    def test_dice_iou_identity(self):
        # D = 2J / (1 + J) for any pair counted from the same sets
        gen = np.random.default_rng(7)
        for _ in range(200):
            pred = _mask(gen.uniform(size=(8, 8)))
            gt = _mask((gen.uniform(size=(8, 8)) < 0.5).astype(np.float64))
            d = dice_score(pred, gt)
            j = iou_score(pred, gt)
            assert abs(d - 2.0 * j / (1.0 + j)) < 1e-12

    def test_brute_force_pixel_sets(self):
        gen = np.random.default_rng(11)
        for _ in range(100):
            pred = _mask(gen.uniform(size=(8, 8)))
            gt = _mask((gen.uniform(size=(8, 8)) < 0.4).astype(np.float64))
            p_set = {(i, j) for i in range(8) for j in range(8)
                     if pred.data[i, j] > 0.5}
            g_set = {(i, j) for i in range(8) for j in range(8)
                     if gt.data[i, j] > 0.5}
            if p_set or g_set:
                expect_d = 2.0 * len(p_set & g_set) / (len(p_set) + len(g_set))
                expect_j = len(p_set & g_set) / len(p_set | g_set)
            else:
                expect_d = expect_j = 1.0
            assert dice_score(pred, gt) == expect_d
            assert iou_score(pred, gt) == expect_j

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            dice_score(rand_mask(4, 4), rand_mask(4, 5))

    def test_soft_gt_rejected(self):
        with pytest.raises(ConfigError):
            dice_score(rand_mask(), _mask(np.full((8, 8), 0.3)))

    def test_bad_threshold_rejected(self):
        m = rand_mask()
        gt = _mask((rand_mask(seed=1).data > 0.5).astype(np.float64))
        for threshold in (-0.1, 1.0, 1.5):
            with pytest.raises(ConfigError):
                dice_score(m, gt, threshold=threshold)


class TestEvalReport:
    def _report(self):
        rows = (EvalRow("a.png", "dom1", 0.8, 0.7),
                EvalRow("b.png", "dom1", 0.6, 0.5),
                EvalRow("c.png", "dom2", 1.0, 1.0))
        return EvalReport(rows, threshold=0.5, skipped=2)

    def test_overall(self):
        o = self._report().overall
        assert o.n == 3
        assert abs(o.mean_dice - 0.8) < 1e-12
        assert abs(o.mean_iou - (0.7 + 0.5 + 1.0) / 3) < 1e-12

    def test_by_domain(self):
        d = self._report().by_domain()
        assert set(d) == {"dom1", "dom2"}
        assert d["dom1"].n == 2
        assert abs(d["dom1"].mean_dice - 0.7) < 1e-12
        assert d["dom2"].mean_dice == 1.0

    def test_image_csv(self, tmp_path):
        path = self._report().to_image_csv(tmp_path / "per_image.csv")
        lines = path.read_text().splitlines()
        assert lines[0] == "# threshold=0.5"
        assert lines[1] == "# empty_vs_empty=1.0"
        assert lines[2] == "# skipped_records=2"
        assert lines[3] == "id,domain,dice,iou"
        assert lines[4] == "a.png,dom1,0.800000,0.700000"
        assert len(lines) == 7

    def test_summary_csv(self, tmp_path):
        path = self._report().to_summary_csv(tmp_path / "summary.csv")
        lines = path.read_text().splitlines()
        assert lines[3] == "domain,n,mean_dice,mean_iou"
        assert lines[4].startswith("dom1,2,0.700000,")
        assert lines[5].startswith("dom2,1,1.000000,")
        assert lines[6].startswith("overall,3,0.800000,")


class _StubModel:
    """Callable mask head: returns a constant map regardless of input."""

    def __init__(self, value):
        self.value = value
        self.training = True
        self.eval_calls = 0

    def eval(self):
        self.eval_calls += 1
        self.training = False

    def train(self):
        self.training = True

    def forward_mask(self, x):
        b, _, h, w = x.shape
        return torch.full((b, 1, h, w), self.value)


def _write_dataset(root, specs):
    """specs: list of (name, domain, gt_value or None)."""
    records = []
    (root / "images").mkdir(parents=True)
    (root / "masks").mkdir()
    for name, domain, gt in specs:
        img = ImageBuffer(np.full((8, 8, 3), 0.5))
        save_image(img, root / "images" / f"{name}.png")
        mask_path = None
        if gt is not None:
            save_mask(MaskBuffer(np.full((8, 8), float(gt))),
                      root / "masks" / f"{name}.png")
            mask_path = f"masks/{name}.png"
        records.append(ManifestRecord(f"images/{name}.png", mask_path,
                                      domain, "val"))
    return DatasetManifest(tuple(records), root=root)


class TestEvaluateDataset:
    def test_constant_zero_model_split_by_domain(self, tmp_path):
        # domain A has empty ground truth (perfect score for an all-zero
        # prediction); domain B is fully foreground (total miss)
        manifest = _write_dataset(tmp_path, [
            ("a0", "A", 0), ("a1", "A", 0), ("b0", "B", 1), ("b1", "B", 1)])
        report = evaluate_dataset(_StubModel(0.0), manifest)
        by_dom = report.by_domain()
        assert by_dom["A"].mean_dice == 1.0
        assert by_dom["B"].mean_dice == 0.0
        assert report.overall.mean_dice == 0.5
        assert report.skipped == 0

    def test_constant_one_model(self, tmp_path):
        manifest = _write_dataset(tmp_path, [("x", "A", 1)])
        report = evaluate_dataset(_StubModel(1.0), manifest)
        assert report.overall.mean_dice == 1.0
        assert report.overall.mean_iou == 1.0

    def test_maskless_records_skipped(self, tmp_path):
        manifest = _write_dataset(tmp_path, [
            ("m", "A", 1), ("u0", "A", None), ("u1", "A", None)])
        report = evaluate_dataset(_StubModel(1.0), manifest)
        assert report.skipped == 2
        assert len(report.rows) == 1

    def test_all_maskless_rejected(self, tmp_path):
        manifest = _write_dataset(tmp_path, [("u", "A", None)])
        with pytest.raises(ConfigError):
            evaluate_dataset(_StubModel(1.0), manifest)

    def test_training_mode_restored(self, tmp_path):
        manifest = _write_dataset(tmp_path, [("x", "A", 1)])
        model = _StubModel(1.0)
        evaluate_dataset(model, manifest)
        assert model.eval_calls == 1
        assert model.training

    def test_rows_carry_paths_and_domains(self, tmp_path):
        manifest = _write_dataset(tmp_path, [("x", "left", 1), ("y", "right", 0)])
        report = evaluate_dataset(_StubModel(1.0), manifest)
        assert [r.image_id for r in report.rows] == ["images/x.png", "images/y.png"]
        assert [r.domain_tag for r in report.rows] == ["left", "right"]

    def test_real_model_runs(self, tmp_path, toy_dataset):
        from duostream.model import build_model
        from conftest import TINY_MODEL
        model = build_model(TINY_MODEL, RngState(0))
        report = evaluate_dataset(model, toy_dataset)
        assert len(report.rows) == 6
        assert all(0.0 <= r.dice <= 1.0 for r in report.rows)
