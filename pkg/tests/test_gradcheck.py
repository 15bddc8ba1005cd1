import numpy as np
import pytest

from dfrnet import gradcheck
from dfrnet.tensor import PRIMITIVES, corrupt_adjoint


class TestRegistry:
    def test_every_primitive_registered(self):
        names = [c.name for c in gradcheck.PRIMITIVE_CASES]
        assert sorted(names) == sorted(PRIMITIVES)

    def test_composites(self):
        names = {c.name for c in gradcheck.COMPOSITE_CASES}
        assert {"conv2d", "alfr_forward", "trading_loss", "smooth_l1", "category_loss", "box2d_iou_loss"} <= names

    def test_unique(self):
        names = gradcheck.registered_ops()
        assert len(names) == len(set(names))


class TestChecks:
    @pytest.mark.parametrize("name", ["softmax", "conv2d", "alfr_forward", "box2d_iou_loss"])
    def test_case_passes(self, name):
        case = next(c for c in gradcheck.CASES if c.name == name)
        rep = gradcheck.check_case(case, np.random.default_rng(1), trials=4)
        assert rep.passed, rep.line()

    def test_corrupted_adjoint_detected(self):
        case = next(c for c in gradcheck.CASES if c.name == "exp")
        with corrupt_adjoint("exp"):
            rep = gradcheck.check_case(case, np.random.default_rng(0), trials=2)
        assert not rep.passed
        assert rep.worst_rel > 0.1

    def test_corruption_propagates_to_composites(self):
        case = next(c for c in gradcheck.CASES if c.name == "trading_loss")
        with corrupt_adjoint("log"):
            assert not gradcheck.check_case(case, np.random.default_rng(0), trials=2).passed

    def test_report_line(self):
        rep = gradcheck.OpReport("mul", 20, 1e-9, 1e-12, True)
        assert rep.line().startswith("mul") and rep.line().endswith("ok")

    def test_kink_draws_rejected(self):
        # a relu input pinned to zero can never be drawn away from the kink
        case = gradcheck.Case("pinned", lambda rng, i: ([np.zeros(2)], lambda t: gradcheck.T.relu(t[0])))
        with pytest.raises(RuntimeError, match="kink"):
            gradcheck.check_case(case, np.random.default_rng(0), trials=1)
