import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dfrnet import losses as L
from dfrnet.losses import (
    AppearanceTarget,
    ClusteringConfig,
    DetectionPreds,
    LocalizationTarget,
    batch_grouped_losses,
    box2d_iou_loss,
    box_iou,
    category_loss,
    grouped_losses,
    loss_terms,
    rotation_loss,
    smooth_l1,
    wrap_angle,
)
from dfrnet.tensor import ConfigurationError, ContractError, DimensionError, Tensor

ALL_CONFIGS = [ClusteringConfig(r, w) for r, w in itertools.product(L.STREAMS, L.STREAMS)]


def random_sample(rng):
    preds = DetectionPreds(
        logits=Tensor(rng.normal(size=4)), rot=Tensor(rng.uniform(-3, 3)), dims=Tensor(rng.uniform(0.5, 4, size=3)),
        box2d=Tensor(np.array([1.0, 2.0, 8.0, 9.0]) + rng.uniform(-1, 1, size=4)),
        center3d=Tensor(rng.normal(scale=5, size=3)),
    )
    app = AppearanceTarget(int(rng.integers(4)), float(rng.uniform(-3, 3)), tuple(rng.uniform(0.5, 4, size=3)))
    u, v = rng.uniform(0, 5, size=2)
    loc = LocalizationTarget((u, v, u + rng.uniform(1, 8), v + rng.uniform(1, 8)), tuple(rng.normal(scale=5, size=3)))
    return preds, app, loc


class TestSmoothL1:
    def test_zero(self):
        assert smooth_l1(Tensor([1.0, -2.0]), [1.0, -2.0]).item() == 0.0

    def test_quadratic_region(self):
        assert smooth_l1(Tensor([0.5]), [0.0]).item() == pytest.approx(0.125)

    def test_linear_region(self):
        assert smooth_l1(Tensor([-2.0]), [0.0]).item() == pytest.approx(1.5)

    def test_mean_over_elements(self):
        assert smooth_l1(Tensor([0.5, -2.0]), [0.0, 0.0]).item() == pytest.approx((0.125 + 1.5) / 2)

    @settings(max_examples=80, deadline=None)
    @given(st.floats(-50, 50))
    def test_matches_piecewise_oracle(self, d):
        a = abs(d)
        expected = 0.5 * a * a if a < 1 else a - 0.5
        assert smooth_l1(Tensor([d]), [0.0]).item() == pytest.approx(expected, abs=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            smooth_l1(Tensor([1.0, 2.0]), [1.0])


class TestRotation:
    @pytest.mark.parametrize("d,expected", [(math.pi, math.pi), (-math.pi, math.pi), (0.0, 0.0),
                                            (3 * math.pi / 2, -math.pi / 2), (-7.0, -7.0 + 2 * math.pi)])
    def test_wrap(self, d, expected):
        assert wrap_angle(d) == pytest.approx(expected, abs=1e-12)

    @settings(max_examples=80, deadline=None)
    @given(st.floats(-100, 100))
    def test_wrap_range(self, d):
        w = wrap_angle(d)
        assert -math.pi < w <= math.pi + 1e-12
        assert math.sin(w) == pytest.approx(math.sin(d), abs=1e-9)

    def test_across_the_seam(self):
        out = rotation_loss(Tensor(math.pi - 0.1), -math.pi + 0.1)
        assert out.item() == pytest.approx(0.5 * 0.2 ** 2, abs=1e-12)


class TestCategory:
    def test_uniform(self):
        assert category_loss(Tensor([0.0, 0.0, 0.0]), 1).item() == pytest.approx(math.log(3.0), abs=1e-15)

    def test_confident(self):
        out = category_loss(Tensor([10.0, 0.0, 0.0]), 0).item()
        assert out == pytest.approx(math.log(1 + 2 * math.exp(-10.0)), rel=1e-12)
        assert out == pytest.approx(9.08e-5, rel=1e-3)

    def test_large_logits_stable(self):
        out = category_loss(Tensor([1000.0, -1000.0]), 1).item()
        assert out == pytest.approx(2000.0)

    def test_target_range(self):
        with pytest.raises(ContractError):
            category_loss(Tensor([0.0, 1.0]), 2)


class TestBoxIou:
    def test_identical(self):
        box = [1.0, 2.0, 5.0, 6.0]
        assert box_iou(Tensor(box), box).item() == pytest.approx(1.0)
        assert box2d_iou_loss(Tensor(box), box).item() == pytest.approx(0.0, abs=1e-12)

    def test_half_overlap(self):
        # intersection 2x4 = 8, union 16 + 16 - 8 = 24
        assert box_iou(Tensor([0.0, 0.0, 4.0, 4.0]), [2.0, 0.0, 6.0, 4.0]).item() == pytest.approx(1 / 3)

    def test_disjoint_floor(self):
        out = box2d_iou_loss(Tensor([0.0, 0.0, 1.0, 1.0]), [5.0, 5.0, 6.0, 6.0]).item()
        assert out == pytest.approx(-math.log(1e-6), abs=1e-9)
        assert out == pytest.approx(13.8155, abs=1e-4)

    def test_shape(self):
        with pytest.raises(DimensionError):
            box_iou(Tensor([0.0, 0.0, 1.0]), [0.0, 0.0, 1.0, 1.0])


class TestGrouping:
    def test_default_membership(self):
        p, a, l = random_sample(np.random.default_rng(0))
        t = loss_terms(p, a, l)
        l_app, l_loc = grouped_losses(p, a, l)
        assert l_app.item() == pytest.approx(t["class"].item() + t["rot"].item() + t["whl"].item())
        assert l_loc.item() == pytest.approx(t["uvuv"].item() + t["xyz"].item())

    def test_moved_terms(self):
        p, a, l = random_sample(np.random.default_rng(1))
        t = loss_terms(p, a, l)
        l_app, l_loc = grouped_losses(p, a, l, ClusteringConfig("localization", "appearance"))
        assert l_app.item() == pytest.approx(t["class"].item() + t["whl"].item())
        assert l_loc.item() == pytest.approx(t["uvuv"].item() + t["xyz"].item() + t["rot"].item())

    def test_conservation(self):
        rng = np.random.default_rng(2)
        for _ in range(25):
            p, a, l = random_sample(rng)
            totals = [sum(x.item() for x in grouped_losses(p, a, l, c)) for c in ALL_CONFIGS]
            assert max(totals) - min(totals) <= 1e-12 * max(1.0, abs(totals[0]))

    def test_invalid_stream(self):
        with pytest.raises(ConfigurationError):
            ClusteringConfig("depth", "appearance")

    def test_batch_average(self):
        rng = np.random.default_rng(3)
        samples = [random_sample(rng) for _ in range(3)]
        l_app, l_loc = batch_grouped_losses(samples)
        singles = [grouped_losses(*s) for s in samples]
        assert l_app.item() == pytest.approx(np.mean([s[0].item() for s in singles]))
        assert l_loc.item() == pytest.approx(np.mean([s[1].item() for s in singles]))

    def test_empty_batch(self):
        with pytest.raises(ContractError):
            batch_grouped_losses([])

    def test_target_validation(self):
        with pytest.raises(ValueError):
            LocalizationTarget((5.0, 0.0, 1.0, 1.0), (0.0, 0.0, 1.0))
        with pytest.raises(ValueError):
            AppearanceTarget(0, 0.0, (1.0, 0.0, 1.0))
