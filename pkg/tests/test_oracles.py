import ast
from pathlib import Path

import numpy as np
import pytest

import reppoints.oracles as O
from instances import ap_instance
from reppoints.pipeline import nms


class TestFiniteDifferences:
    def test_square_at_three(self):
        res = O.fd_gradient(lambda x: float(x[0] ** 2), [3.0])
        assert res.gradient[0] == pytest.approx(6.0, abs=1e-6)
        assert res.smooth

    def test_abs_kink_flagged(self):
        res = O.fd_gradient(lambda x: float(abs(x[0])), [0.0])
        assert res.nondifferentiable.tolist() == [True]
        assert not res.smooth

    def test_abs_away_from_kink_smooth(self):
        res = O.fd_gradient(lambda x: float(abs(x[0])), [2.0])
        assert res.smooth and res.gradient[0] == pytest.approx(1.0)

    def test_multivariate(self):
        res = O.fd_gradient(lambda x: float(np.sin(x[0, 0]) * x[1, 1] + x[0, 1]), np.array([[0.3, 1.0], [2.0, 1.5]]))
        np.testing.assert_allclose(res.gradient, [[np.cos(0.3) * 1.5, 1.0], [0.0, np.sin(0.3)]], atol=1e-7)

    def test_non_finite_reports_coordinate(self):
        def f(x):
            return float(np.log(x[1])) if x[1] > 0 else float("nan")

        with pytest.raises(FloatingPointError, match=r"coordinate \(1,\)"):
            O.fd_gradient(f, [1.0, 0.0001], O.FiniteDiffSpec(step=1e-3))

    def test_bad_step(self):
        with pytest.raises(ValueError):
            O.FiniteDiffSpec(step=0.0)

    def test_relative_error(self):
        assert O.relative_error([1.0, 2.0], [1.0, 2.0]) == 0.0
        assert O.relative_error([1.0, 2.0], [1.0, 2.2]) == pytest.approx(0.2 / 2.2)
        assert O.relative_error([0.0], [0.0]) == 0.0


class TestCaps:
    def test_nms_cap(self):
        n = O.MAX_NMS_BOXES + 1
        with pytest.raises(ValueError, match="capped"):
            O.brute_nms(np.tile([0, 0, 1, 1], (n, 1)), np.zeros(n), np.zeros(n))

    def test_ap_detection_cap(self):
        coco = {"images": [{"id": 1}], "annotations": [], "categories": [{"id": 1}]}
        dets = [{"image_id": 1, "category_id": 1, "bbox": [0, 0, 1, 1], "score": 0.5}] * (O.MAX_AP_DETECTIONS + 1)
        with pytest.raises(ValueError, match="capped"):
            O.brute_ap(dets, coco)

    def test_ap_gt_cap(self):
        anns = [{"image_id": 1, "category_id": 1, "bbox": [0, 0, 1, 1]}] * (O.MAX_AP_GTS + 1)
        coco = {"images": [{"id": 1}], "annotations": anns, "categories": [{"id": 1}]}
        with pytest.raises(ValueError, match="capped"):
            O.brute_ap([], coco)


def test_brute_nms_smallest_case():
    boxes, scores, classes = [[0, 0, 10, 10], [1, 1, 10, 10]], [0.7, 0.9], [0, 0]
    assert O.brute_nms(boxes, scores, classes) == nms(boxes, scores, classes).tolist() == [1]


def test_brute_ap_hand_example():
    coco = {"images": [{"id": 1}], "annotations": [{"image_id": 1, "category_id": 1, "bbox": [0, 0, 10, 10]}],
            "categories": [{"id": 1}]}
    dets = [{"image_id": 1, "category_id": 1, "bbox": [0, 0, 10, 10], "score": 0.5}]
    assert O.brute_ap(dets, coco) == {"AP": 1.0, "AP50": 1.0, "AP75": 1.0}


def test_brute_ap_random_within_caps():
    rng = np.random.default_rng(5)
    for _ in range(20):
        coco, dets = ap_instance(rng)
        res = O.brute_ap(dets, coco)
        assert 0 <= res["AP"] <= res["AP50"] <= 1


def test_oracles_share_no_production_code():
    tree = ast.parse(Path(O.__file__).read_text())
    imported = set()
    for node in ast.walk(tree):
        if isinstance(node, ast.Import):
            imported |= {a.name.split(".")[0] for a in node.names}
        elif isinstance(node, ast.ImportFrom):
            assert node.level == 0, "oracles must not import sibling modules"
            imported.add(node.module.split(".")[0])
    assert imported <= {"__future__", "itertools", "math", "dataclasses", "typing", "numpy"}
