import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from reppoints.deform import grid_template
from reppoints.losses import LossConfig
from reppoints.model import Backbone, LevelOutputs, ModelConfig, RPDet, decode_points
from reppoints.oracles import FiniteDiffSpec, fd_gradient, relative_error
from reppoints.pipeline import detector_loss

TINY = ModelConfig(base_channels=8, head_channels=8, stacked_convs=1)


@pytest.fixture
def model():
    torch.manual_seed(0)
    return RPDet(TINY).eval()


@pytest.fixture
def images():
    torch.manual_seed(1)
    return torch.randn(2, 3, 128, 128)


def test_pyramid_sizes(images):
    feats = Backbone(8, 8)(images)
    assert [f.shape[-1] for f in feats] == [16, 8, 4, 2, 1]


def test_pyramid_doubles_with_input():
    feats = Backbone(8, 8)(torch.zeros(1, 3, 256, 256))
    assert [f.shape[-1] for f in feats] == [32, 16, 8, 4, 2]


def test_pyramid_deterministic(images):
    net = Backbone(8, 8)
    a = net(images[:1])
    b = net(images[:1].clone())
    assert all(torch.equal(x, y) for x, y in zip(a, b))


def test_non_divisible_rejected():
    with pytest.raises(ValueError):
        Backbone(8, 8)(torch.zeros(1, 3, 120, 128))


def test_shape_contract(model, images):
    for out in model.forward_levels(images):
        assert out.cls_logits.shape[1] == TINY.num_classes
        assert out.stage1_offsets.shape[1] == 18 and out.stage2_offsets.shape[1] == 18


def test_head_weights_shared_across_levels(model, images):
    feats = model.backbone(images)
    levels = model.forward_levels(images)
    for f, out in zip(feats, levels):
        torch.testing.assert_close(model.head(f).cls_logits, out.cls_logits)
    assert len(list(model.head.parameters())) == len({id(p) for p in model.head.parameters()})


def test_cls_bias_prior(model):
    assert torch.allclose(model.head.cls_out.bias, torch.tensor(-math.log(99.0)))
    assert torch.sigmoid(model.head.cls_out.bias[0]).item() == pytest.approx(0.01)


def test_grid_points_make_deformable_convs_standard(model, images):
    head = model.head
    with torch.no_grad():
        head.pts_init[-1].weight.zero_()
        head.pts_init[-1].bias.copy_(grid_template().reshape(-1))
    feat = model.backbone(images)[0]
    out = head(feat)
    assert out.offset_field.abs().max() == 0
    cls_feat = head.cls_convs(feat)
    ref = head.cls_out(F.relu(F.conv2d(cls_feat, head.cls_dcn.weight, head.cls_dcn.bias, padding=1)))
    assert float((out.cls_logits - ref).abs().max().detach()) < 1e-5


def _outputs(stage1, stage2, h=2, w=3):
    return LevelOutputs(torch.zeros(1, 3, h, w), stage1.reshape(1, 18, h, w), stage2.reshape(1, 18, h, w))


def test_decode_zero_offsets_at_centers():
    p1, p2 = decode_points(_outputs(torch.zeros(18 * 6), torch.zeros(18 * 6)), 3)
    # location (iy=1, ix=2) at stride 8 -> center (20, 12)
    assert (p1[0, 1 * 3 + 2] == torch.tensor([20.0, 12.0])).all()
    assert torch.equal(p1, p2)


def test_decode_scalar_hand_computation():
    s1 = torch.zeros(1, 18, 2, 3)
    s1[0, 2 * 4, 0, 1] = 0.5  # point 4, x offset, location (0, 1)
    s1[0, 2 * 4 + 1, 0, 1] = -1.0
    p1, _ = decode_points(LevelOutputs(torch.zeros(1, 3, 2, 3), s1, torch.zeros(1, 18, 2, 3)), 4)
    # stride 16: center (24, 8) + 16 * (0.5, -1)
    assert p1[0, 1, 4].tolist() == [32.0, -8.0]


def test_decode_stage2_unit_offset_moves_one_stride():
    s2 = torch.zeros(1, 18, 2, 3)
    s2[0, 0::2] = 1.0
    p1, p2 = decode_points(LevelOutputs(torch.zeros(1, 3, 2, 3), torch.zeros(1, 18, 2, 3), s2), 3)
    torch.testing.assert_close(p2 - p1, torch.tensor([8.0, 0.0]).expand_as(p1))


def _gt():
    boxes = [np.array([[20.0, 24.0, 60.0, 70.0], [70.0, 60.0, 110.0, 96.0]]), np.array([[30.0, 30.0, 70.0, 62.0]])]
    return boxes, [np.array([0, 2]), np.array([1])]


def _grad_norms(model, images, loss_cfg):
    model.zero_grad()
    boxes, labels = _gt()
    loss, _ = detector_loss(model, images, boxes, labels, loss_cfg)
    loss.backward()
    back = sum(float(p.grad.abs().sum()) for p in model.backbone.parameters() if p.grad is not None)
    pts = float(model.head.pts_init[-1].weight.grad.abs().sum())
    return back, pts


def test_gradient_reaches_backbone_through_both_paths(model, images):
    model.train()
    cls_only, _ = _grad_norms(model, images, LossConfig(loc_weight_stage1=0, loc_weight_stage2=0))
    loc_only, _ = _grad_norms(model, images, LossConfig(cls_weight=0))
    assert cls_only > 0 and loc_only > 0


def test_recognition_feedback_reaches_stage1_offsets(images):
    torch.manual_seed(0)
    with_feedback = RPDet(TINY).train()
    _, pts = _grad_norms(with_feedback, images, LossConfig(loc_weight_stage1=0, loc_weight_stage2=0))
    assert pts > 0
    torch.manual_seed(0)
    cut = RPDet(ModelConfig(base_channels=8, head_channels=8, stacked_convs=1, rec_feedback=False)).train()
    _, pts = _grad_norms(cut, images, LossConfig(loc_weight_stage1=0, loc_weight_stage2=0))
    assert pts == 0


def _fd_check(names, loss_cfg, seed=3):
    torch.manual_seed(seed)
    model = RPDet(TINY).double().train()
    images = torch.randn(2, 3, 128, 128, dtype=torch.float64)
    boxes, labels = _gt()
    params = dict(model.named_parameters())
    rng = np.random.default_rng(0)
    picks = []
    for n in names:
        flat = rng.choice(params[n].numel(), size=min(3, params[n].numel()), replace=False)
        picks += [(n, tuple(int(v) for v in np.unravel_index(k, params[n].shape))) for k in flat]

    def loss_at():
        return detector_loss(model, images, boxes, labels, loss_cfg)[0]

    model.zero_grad()
    loss_at().backward()
    analytic = np.array([params[n].grad[i].item() for n, i in picks])

    def f(v):
        with torch.no_grad():
            old = [params[n][i].item() for n, i in picks]
            for (n, i), x in zip(picks, v):
                params[n][i] = x
            out = float(loss_at())
            for (n, i), x in zip(picks, old):
                params[n][i] = x
        return out

    x0 = np.array([params[n][i].item() for n, i in picks])
    numeric = fd_gradient(f, x0, FiniteDiffSpec(step=1e-6)).gradient
    return relative_error(analytic, numeric)


def test_loss_gradient_matches_finite_differences_without_stage2_term():
    # stage-2 points refine a detached copy of stage-1, so with the stage-2 term
    # present the finite differences see a path autograd deliberately cuts
    names = ("backbone.stem.0.0.weight", "backbone.p6.weight", "head.loc_convs.0.0.weight", "head.pts_init.2.weight",
             "head.pts_init.2.bias", "head.cls_convs.0.0.weight", "head.cls_dcn.weight", "head.cls_out.bias")
    assert _fd_check(names, LossConfig(loc_weight_stage2=0.0)) < 1e-3


def test_loss_gradient_matches_finite_differences_in_refinement_branch():
    names = ("head.pts_refine_dcn.weight", "head.pts_refine_dcn.bias", "head.pts_refine_out.weight",
             "head.pts_refine_out.bias")
    assert _fd_check(names, LossConfig()) < 1e-3


def test_config_rejects_bad_values():
    with pytest.raises(ValueError):
        ModelConfig(converter="hull")
    with pytest.raises(ValueError):
        ModelConfig(num_points=5)
