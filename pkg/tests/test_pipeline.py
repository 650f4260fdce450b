import numpy as np
import pytest
import torch

from instances import nms_instance
from reppoints.baseline import BBoxDet
from reppoints.data import Dataset, generate_dataset
from reppoints.geometry import pseudo_box_minmax
from reppoints.losses import LossConfig
from reppoints.model import ModelConfig, RPDet
from reppoints.oracles import brute_nms
from reppoints.pipeline import (Detection, InferConfig, TrainConfig, TrainingDiverged, export_detections, infer,
                                load_weights, lr_at, nms, nms_detections, read_checkpoint, save_checkpoint,
                                set_determinism, train)

TINY = ModelConfig(base_channels=8, head_channels=8, stacked_convs=1)


class TestNMS:
    def test_identical_boxes_keep_higher(self):
        keep = nms([[0, 0, 10, 10], [0, 0, 10, 10]], [0.8, 0.9], [0, 0])
        assert keep.tolist() == [1]

    def test_disjoint_both_kept(self):
        keep = nms([[0, 0, 10, 10], [20, 20, 30, 30]], [0.9, 0.8], [0, 0])
        assert keep.tolist() == [0, 1]

    def test_other_class_not_suppressed(self):
        keep = nms([[0, 0, 10, 10], [0, 0, 10, 10]], [0.9, 0.8], [0, 1])
        assert keep.tolist() == [0, 1]

    def test_iou_exactly_threshold_kept(self):
        keep = nms([[0, 0, 20, 20], [0, 0, 10, 20]], [0.9, 0.8], [0, 0], 0.5)
        assert keep.tolist() == [0, 1]

    def test_score_ties_broken_by_index(self):
        keep = nms([[0, 0, 10, 10], [0, 0, 10, 10]], [0.5, 0.5], [0, 0])
        assert keep.tolist() == [0]

    def test_empty(self):
        assert nms(np.zeros((0, 4)), [], []).tolist() == []

    def test_non_finite_score_rejected(self):
        with pytest.raises(ValueError):
            nms([[0, 0, 1, 1]], [float("nan")], [0])

    def test_fifty_random_boxes_match_oracle(self):
        rng = np.random.default_rng(0)
        base = np.array([[10, 10, 40, 40], [30, 20, 70, 50], [60, 60, 90, 95]], dtype=float)
        boxes = base[rng.integers(3, size=50)] + rng.uniform(-6, 6, (50, 4))
        scores = rng.random(50)
        classes = rng.integers(0, 2, 50)
        assert nms(boxes, scores, classes).tolist() == brute_nms(boxes, scores, classes)

    def test_random_instances_with_ties_match_oracle(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            boxes, scores, classes = nms_instance(rng)
            thr = float(rng.choice([0.3, 0.5, 0.7]))
            assert nms(boxes, scores, classes, thr).tolist() == brute_nms(boxes, scores, classes, thr)

    def test_idempotent(self):
        rng = np.random.default_rng(2)
        for _ in range(30):
            boxes, scores, classes = nms_instance(rng)
            keep = nms(boxes, scores, classes)
            again = nms(boxes[keep], scores[keep], classes[keep])
            assert again.tolist() == list(range(len(keep)))

    def test_detection_wrapper(self):
        dets = [Detection(0, 0, 0.6, (0, 0, 10, 10)), Detection(0, 0, 0.9, (1, 0, 11, 10))]
        assert [d.score for d in nms_detections(dets)] == [0.9]


@pytest.fixture(scope="module")
def tiny_data():
    return generate_dataset(4, seed=0)


@pytest.fixture(scope="module")
def trained(tiny_data, tmp_path_factory):
    out = tmp_path_factory.mktemp("train")
    set_determinism(0)
    model = RPDet(TINY)
    cfg = TrainConfig(iterations=6, batch_size=2, warmup_iters=2, checkpoint_every=3, log_every=0)
    lines = train(model, tiny_data, cfg, out_dir=out)
    return model, lines, out


class TestTrain:
    def test_log_and_checkpoints_written(self, trained):
        _, lines, out = trained
        assert len(lines) == 6
        assert (out / "metrics.log").read_text().splitlines() == lines
        for name in ("checkpoint_000003.npz", "checkpoint_000006.npz", "checkpoint_final.npz"):
            assert (out / name).exists()

    def test_log_line_fields(self, trained):
        fields = trained[1][0].split(", ")
        assert fields[0] == "0" and len(fields) == 5
        assert all(np.isfinite(float(f)) for f in fields[1:])

    def test_same_seed_identical_curves(self, tiny_data, trained):
        set_determinism(0)
        cfg = TrainConfig(iterations=6, batch_size=2, warmup_iters=2, log_every=0)
        assert train(RPDet(TINY), tiny_data, cfg) == trained[1]

    def test_empty_dataset_rejected(self):
        empty = Dataset(np.zeros((0, 128, 128, 3), np.uint8), [], [], [])
        with pytest.raises(ValueError):
            train(RPDet(TINY), empty, TrainConfig(iterations=1))

    def test_divergence_aborts(self, tiny_data):
        def bad_loss(*args):
            return torch.tensor(float("nan")), {"total": float("nan"), "cls": 0.0, "loc1": 0.0, "loc2": 0.0}

        with pytest.raises(TrainingDiverged, match="iteration 0"):
            train(RPDet(TINY), tiny_data, TrainConfig(iterations=3, batch_size=2), loss_fn=bad_loss)

    def test_lr_schedule(self):
        cfg = TrainConfig(lr=0.01, warmup_iters=10, lr_steps=(20, 30))
        assert lr_at(0, cfg) == pytest.approx(0.001)
        assert lr_at(15, cfg) == pytest.approx(0.01)
        assert lr_at(25, cfg) == pytest.approx(0.001)
        assert lr_at(35, cfg) == pytest.approx(0.0001)

    def test_bad_config(self):
        with pytest.raises(ValueError):
            TrainConfig(iterations=0)

    def test_single_image_overfit(self):
        set_determinism(0)
        one = generate_dataset(1, seed=0)
        model = RPDet(ModelConfig(base_channels=8, head_channels=32, stacked_convs=1))
        cfg = TrainConfig(iterations=500, batch_size=1, lr=0.01, lr_steps=(), warmup_iters=20, flip=False, log_every=0)
        losses = [float(line.split(", ")[1]) for line in train(model, one, cfg)]
        assert losses[-1] < 0.05

    def test_batch_of_one_runs(self):
        # the 1x1 top level must still normalize with a single image
        RPDet(TINY).train()(torch.zeros(1, 3, 128, 128))

    def test_box_baseline_trains(self, tiny_data):
        set_determinism(0)
        lines = train(BBoxDet(TINY), tiny_data, TrainConfig(iterations=3, batch_size=2, log_every=0))
        assert len(lines) == 3


class TestCheckpoint:
    def test_round_trip_bitwise(self, trained, tiny_data):
        model, _, out = trained
        arrays, snapshot = read_checkpoint(out / "checkpoint_final.npz")
        assert "train" in snapshot and "loss" in snapshot
        restored = load_weights(RPDet(TINY), arrays).eval()
        for (k, a), (_, b) in zip(model.state_dict().items(), restored.state_dict().items()):
            assert torch.equal(a, b), k
        a = infer(model, tiny_data.images[:2])
        b = infer(restored, tiny_data.images[:2])
        assert [[(d.score, d.box) for d in x] for x in a] == [[(d.score, d.box) for d in x] for x in b]

    def test_same_weights_same_file(self, trained, tmp_path):
        model = trained[0]
        save_checkpoint(tmp_path / "a.npz", model, {"x": 1})
        save_checkpoint(tmp_path / "b.npz", model, {"x": 1})
        assert (tmp_path / "a.npz").read_bytes() == (tmp_path / "b.npz").read_bytes()

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            read_checkpoint(tmp_path / "none.npz")


@pytest.fixture(scope="module")
def model():
    torch.manual_seed(0)
    return RPDet(TINY).eval()


class TestInfer:
    def test_detections_well_formed(self, model, tiny_data):
        per_image = infer(model, tiny_data.images[:2], InferConfig(score_thresh=0.0), [7, 9])
        assert len(per_image) == 2
        for image_id, dets in zip([7, 9], per_image):
            assert 0 < len(dets) <= 100
            for d in dets:
                assert d.image_id == image_id and 0 <= d.class_id < 3
                assert 0.0 <= d.score <= 1.0
                assert d.points.shape == (9, 2) and d.points_stage1.shape == (9, 2)
                np.testing.assert_allclose(d.box, pseudo_box_minmax(torch.from_numpy(d.points)).numpy(), atol=1e-4)

    def test_deterministic(self, model, tiny_data):
        a = infer(model, tiny_data.images[:2])
        b = infer(model, tiny_data.images[:2])
        assert [[(d.class_id, d.score, d.box) for d in x] for x in a] == \
               [[(d.class_id, d.score, d.box) for d in x] for x in b]

    def test_higher_threshold_gives_subset(self, model, tiny_data):
        low = infer(model, tiny_data.images[:1], InferConfig(score_thresh=0.0, nms_thresh=1.0))[0]
        high = infer(model, tiny_data.images[:1], InferConfig(score_thresh=0.0105, nms_thresh=1.0))[0]
        key = {(d.class_id, d.score, d.box) for d in low}
        assert len(high) <= len(low)
        assert all((d.class_id, d.score, d.box) in key for d in high)

    def test_non_finite_weights_rejected(self, tiny_data):
        model = RPDet(TINY)
        with torch.no_grad():
            model.head.cls_out.bias[0] = float("inf")
        with pytest.raises(ValueError, match="non-finite"):
            infer(model, tiny_data.images[:1])

    def test_export_format(self, model, tiny_data, tmp_path):
        dets = infer(model, tiny_data.images[:1], InferConfig(score_thresh=0.0))[0][:3]
        records = export_detections(dets, tmp_path / "d.json")
        assert set(records[0]) == {"image_id", "category_id", "bbox", "score"}
        x0, y0, x1, y1 = dets[0].box
        assert records[0]["bbox"] == [x0, y0, x1 - x0, y1 - y0]
        assert (tmp_path / "d.json").exists()
