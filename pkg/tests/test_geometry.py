import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from reppoints import geometry as G
from reppoints.oracles import FiniteDiffSpec, fd_gradient, relative_error

coords = st.floats(-100, 100, allow_nan=False, width=64)
point_sets = arrays(np.float64, st.tuples(st.integers(2, 12), st.just(2)), elements=coords)


def t(x):
    return torch.tensor(x, dtype=torch.float64)


class TestIoU:
    def test_identical(self):
        assert float(G.iou(t([0, 0, 4, 3]), t([0, 0, 4, 3]))) == 1.0

    def test_disjoint(self):
        assert float(G.iou(t([0, 0, 1, 1]), t([2, 2, 3, 3]))) == 0.0

    def test_partial_overlap(self):
        # intersection 1, union 4 + 4 - 1 = 7
        assert float(G.iou(t([0, 0, 2, 2]), t([1, 1, 3, 3]))) == pytest.approx(1 / 7, abs=1e-12)

    def test_zero_union(self):
        assert float(G.iou(t([1, 1, 1, 1]), t([1, 1, 1, 1]))) == 0.0

    def test_invalid_box(self):
        with pytest.raises(ValueError):
            G.iou(t([2, 0, 1, 1]), t([0, 0, 1, 1]))

    def test_matrix_shape(self):
        m = G.iou_matrix(t([[0, 0, 1, 1], [0, 0, 2, 2]]), t([[0, 0, 1, 1], [5, 5, 6, 6], [0, 0, 2, 2]]))
        assert m.shape == (2, 3)
        assert float(m[1, 2]) == 1.0


class TestMinMax:
    def test_degenerate(self):
        box = G.pseudo_box_minmax(t([[3.0, 4.0]] * 9))
        assert box.tolist() == [3, 4, 3, 4]

    def test_extremes(self):
        pts = t([[1, 3], [5, 2], [2, 7], [3, 3], [4, 4], [2, 5], [3, 6], [4, 2.5], [1.5, 3]])
        assert G.pseudo_box_minmax(pts).tolist() == [1, 2, 5, 7]

    def test_non_extreme_point_has_zero_gradient(self):
        pts = np.array([[1, 3], [5, 2], [2, 7], [3, 3], [4, 4], [2, 5], [3, 6], [4, 2.5], [1.5, 3.5]])

        def f(x):
            return float(G.pseudo_box_minmax(t(x.reshape(9, 2))).sum())

        fd = fd_gradient(f, pts.reshape(-1), FiniteDiffSpec(step=1e-4)).gradient.reshape(9, 2)
        np.testing.assert_allclose(fd[3], 0.0, atol=1e-12)
        moved = pts.copy()
        moved[3] += 0.1
        assert G.pseudo_box_minmax(t(moved)).tolist() == G.pseudo_box_minmax(t(pts)).tolist()

    def test_tie_routes_gradient_to_lowest_index(self):
        pts = t([[0.0, 0.0], [0.0, 1.0], [2.0, 1.0]]).requires_grad_()
        G.pseudo_box_minmax(pts)[0].backward()
        assert pts.grad[:, 0].tolist() == [1.0, 0.0, 0.0]

    def test_batched(self):
        pts = torch.rand(4, 7, 9, 2, dtype=torch.float64)
        assert G.pseudo_box_minmax(pts).shape == (4, 7, 4)

    def test_rejects_nonfinite(self):
        with pytest.raises(ValueError):
            G.pseudo_box_minmax(t([[0.0, math.nan]]))


class TestPartialMinMax:
    def test_full_subset_equals_minmax(self):
        pts = torch.rand(9, 2, dtype=torch.float64)
        assert torch.equal(G.pseudo_box_partial_minmax(pts, range(9)), G.pseudo_box_minmax(pts))

    def test_singleton(self):
        pts = torch.rand(9, 2, dtype=torch.float64)
        pts[0] = t([2.0, 3.0])
        assert G.pseudo_box_partial_minmax(pts, [0]).tolist() == [2, 3, 2, 3]

    def test_empty_subset(self):
        with pytest.raises(ValueError):
            G.pseudo_box_partial_minmax(torch.rand(9, 2), [])

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            G.pseudo_box_partial_minmax(torch.rand(9, 2), [9])

    def test_containment_randomized(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            pts = t(rng.normal(size=(9, 2)) * 20)
            k = int(rng.integers(1, 10))
            subset = sorted(rng.choice(9, size=k, replace=False).tolist())
            part = G.pseudo_box_partial_minmax(pts, subset)
            full = G.pseudo_box_minmax(pts)
            assert part[0] >= full[0] and part[1] >= full[1] and part[2] <= full[2] and part[3] <= full[3]


class TestMoment:
    def test_collapsed_set(self):
        box = G.pseudo_box_moment(t([[2.0, -1.0]] * 9), t([0.7, -0.3]))
        assert box.tolist() == [2, -1, 2, -1]

    def test_collapsed_set_gradient_is_finite(self):
        pts = t([[2.0, -1.0]] * 9).requires_grad_()
        G.pseudo_box_moment(pts).sum().backward()
        assert torch.isfinite(pts.grad).all()

    def test_square_corners(self):
        # population std of {-1, -1, 1, 1} is exactly 1
        pts = t([[-1, -1], [-1, 1], [1, -1], [1, 1]])
        assert G.pseudo_box_moment(pts, t([0.0, 0.0])).tolist() == [-1, -1, 1, 1]

    def test_multiplier_scales_extent(self):
        pts = t([[-1, -1], [-1, 1], [1, -1], [1, 1]])
        box = G.pseudo_box_moment(pts, t([math.log(2.0), 0.0]))
        assert box.tolist() == pytest.approx([-2, -1, 2, 1])

    def test_needs_two_points(self):
        with pytest.raises(ValueError):
            G.pseudo_box_moment(t([[0.0, 0.0]]))

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(3)
        x = np.concatenate([rng.uniform(0, 30, 18), [0.2, -0.4]])
        for k in range(4):
            def f(v, k=k):
                return G.pseudo_box_moment(v[:18].reshape(9, 2), v[18:])[k]

            xt = t(x).requires_grad_()
            f(xt).backward()
            num = fd_gradient(lambda v: float(f(t(v))), x).gradient
            assert relative_error(xt.grad.numpy(), num) < 1e-4

    def test_multipliers_module(self):
        m = G.MomentMultipliers()
        assert m().tolist() == [0.0, 0.0]
        assert m.log_scale.requires_grad


class TestRefine:
    def test_zero_offsets(self):
        pts = torch.rand(9, 2)
        assert torch.equal(G.refine_points(pts, torch.zeros(9, 2)), pts)

    def test_translation(self):
        pts = torch.rand(9, 2, dtype=torch.float64)
        out = G.refine_points(pts, t([[3.0, -2.0]]).expand(9, 2))
        torch.testing.assert_close(out - pts, t([[3.0, -2.0]]).expand(9, 2))

    def test_composition(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            p, o1, o2 = (t(rng.normal(size=(9, 2))) for _ in range(3))
            torch.testing.assert_close(G.refine_points(G.refine_points(p, o1), o2), G.refine_points(p, o1 + o2))

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            G.refine_points(torch.zeros(9, 2), torch.zeros(8, 2))

    def test_axis_swap_symmetry(self):
        p, o = torch.rand(9, 2), torch.rand(9, 2)
        swapped = G.refine_points(p.flip(-1), o.flip(-1))
        assert torch.equal(swapped, G.refine_points(p, o).flip(-1))


class TestBoxRegression:
    def test_identity(self):
        b = t([1, 2, 5, 9])
        assert G.bbox_regression_target(b, b).tolist() == [0, 0, 0, 0]

    def test_known_delta(self):
        # proposal center (1, 1) size 2x2, target center (2, 2) size 4x4
        d = G.bbox_regression_target(t([0, 0, 2, 2]), t([0, 0, 4, 4]))
        assert d.tolist() == pytest.approx([0.5, 0.5, math.log(2), math.log(2)])

    def test_zero_delta(self):
        b = t([1, 2, 5, 9])
        assert G.apply_bbox_regression(b, t([0, 0, 0, 0])).tolist() == b.tolist()

    def test_log_doubling(self):
        out = G.apply_bbox_regression(t([0, 0, 3, 5]), t([0, 0, math.log(2), math.log(2)]))
        w, h = float(out[2] - out[0]), float(out[3] - out[1])
        assert (w, h) == pytest.approx((6, 10), abs=1e-12)

    def test_round_trip(self):
        rng = np.random.default_rng(2)
        xy = rng.uniform(-50, 50, (1000, 2, 2))
        wh = rng.uniform(0.5, 60, (1000, 2, 2))
        p = t(np.concatenate([xy[:, 0], xy[:, 0] + wh[:, 0]], axis=1))
        q = t(np.concatenate([xy[:, 1], xy[:, 1] + wh[:, 1]], axis=1))
        back = G.apply_bbox_regression(p, G.bbox_regression_target(p, q))
        assert float((back - q).abs().max()) < 1e-9

    def test_zero_size_rejected(self):
        with pytest.raises(ValueError):
            G.bbox_regression_target(t([0, 0, 0, 2]), t([0, 0, 1, 1]))
        with pytest.raises(ValueError):
            G.bbox_regression_target(t([0, 0, 1, 1]), t([0, 0, 1, 0]))

    def test_nonfinite_delta_rejected(self):
        with pytest.raises(ValueError):
            G.apply_bbox_regression(t([0, 0, 1, 1]), t([0, math.inf, 0, 0]))


@settings(max_examples=200, deadline=None)
@given(point_sets)
def test_minmax_contains_every_point(pts):
    box = G.pseudo_box_minmax(t(pts)).numpy()
    assert (pts[:, 0] >= box[0]).all() and (pts[:, 0] <= box[2]).all()
    assert (pts[:, 1] >= box[1]).all() and (pts[:, 1] <= box[3]).all()


@settings(max_examples=200, deadline=None)
@given(point_sets, coords, coords)
def test_adding_a_point_never_shrinks_minmax(pts, x, y):
    before = G.pseudo_box_minmax(t(pts)).numpy()
    after = G.pseudo_box_minmax(t(np.vstack([pts, [[x, y]]]))).numpy()
    assert after[0] <= before[0] and after[1] <= before[1]
    assert after[2] >= before[2] and after[3] >= before[3]


@settings(max_examples=200, deadline=None)
@given(point_sets, st.floats(-50, 50), st.floats(-50, 50), st.sampled_from(G.CONVERTERS))
def test_converters_are_translation_equivariant(pts, tx, ty, converter):
    subset = [0, 1]
    lam = t([0.3, -0.2])
    base = G.convert(t(pts), converter, lam, subset)
    moved = G.convert(t(pts + [tx, ty]), converter, lam, subset)
    torch.testing.assert_close(moved, base + t([tx, ty, tx, ty]), atol=1e-9, rtol=0)


def test_convert_rejects_unknown():
    with pytest.raises(ValueError):
        G.convert(torch.zeros(9, 2), "hull")


def test_center_size_round_trip():
    b = t([[1, 2, 4, 8], [-3, -3, 0, 1]])
    torch.testing.assert_close(G.to_corners(G.to_center_size(b)), b)
