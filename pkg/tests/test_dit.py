import math

import numpy as np
import pytest

from dfrnet.dit import (
    VARIANTS,
    DitParams,
    TradingScores,
    score_variant,
    trading_loss,
    trading_score,
)
from dfrnet.tensor import SGD, ConfigurationError, DimensionError, DomainError, Tensor, backward


def np_score(f, head):
    pooled = f.reshape(f.shape[0], -1).mean(axis=1)
    hidden = np.maximum(head.w1.data @ pooled + head.b1.data, 0)
    logit = head.w2.data @ hidden + head.b2.data
    return 1.0 / (1.0 + math.exp(-logit[0]))


class TestTradingLoss:
    def test_worked_example(self):
        # 0.5*2 + 0.5*3 - log(0.25) = 2.5 + 2 ln 2
        out = trading_loss(Tensor(2.0), Tensor(3.0), TradingScores(Tensor(0.5), Tensor(0.5)))
        assert out.item() == pytest.approx(2.5 + 2 * math.log(2.0), abs=1e-12)
        assert out.item() == pytest.approx(3.8862944, abs=1e-7)

    def test_unit_scores_reduce_to_sum(self):
        out = trading_loss(Tensor(1.25), Tensor(0.75), TradingScores(Tensor(1.0), Tensor(1.0)))
        assert out.item() == pytest.approx(2.0, abs=1e-15)

    @pytest.mark.parametrize("s", [0.0, -0.1, 1.2])
    def test_score_domain(self, s):
        with pytest.raises(DomainError):
            trading_loss(Tensor(1.0), Tensor(1.0), TradingScores(Tensor(s), Tensor(0.5)))

    @pytest.mark.parametrize("l_app,l_loc", [(1.5, 2.0), (4.0, 1.2)])
    def test_stationary_point(self, l_app, l_loc):
        s_app = Tensor(1.0 / l_app, requires_grad=True)
        s_loc = Tensor(1.0 / l_loc, requires_grad=True)
        backward(trading_loss(Tensor(l_app), Tensor(l_loc), TradingScores(s_app, s_loc)))
        assert abs(s_app.grad) < 1e-12 and abs(s_loc.grad) < 1e-12

    def test_loss_gradient_is_score(self):
        l_app, l_loc = Tensor(2.0, requires_grad=True), Tensor(3.0, requires_grad=True)
        backward(trading_loss(l_app, l_loc, TradingScores(Tensor(0.3), Tensor(0.8))))
        assert l_app.grad == pytest.approx(0.3) and l_loc.grad == pytest.approx(0.8)

    def test_sgd_converges_to_inverse_loss(self):
        params = DitParams.create(4, 2, 0, variant="init")
        opt = SGD(params.parameters(), lr=0.5)
        for _ in range(800):
            s = score_variant("init", None, None, None, params)
            backward(trading_loss(Tensor(2.0), Tensor(4.0), s))
            opt.step()
        s = score_variant("init", None, None, None, params)
        assert s.s_app.item() == pytest.approx(0.5, abs=1e-3)
        assert s.s_loc.item() == pytest.approx(0.25, abs=1e-3)


class TestScoreHead:
    def test_matches_oracle(self):
        params = DitParams.create(8, 4, 1)
        f = np.random.default_rng(2).normal(size=(8, 3, 5))
        s = trading_score(Tensor(f), params.head_app)
        assert s.shape == ()
        assert s.item() == pytest.approx(np_score(f, params.head_app), abs=1e-14)

    def test_open_unit_interval(self):
        params = DitParams.create(8, 4, 3)
        rng = np.random.default_rng(4)
        for _ in range(20):
            v = trading_score(Tensor(rng.normal(scale=5, size=(8, 2, 2))), params.head_loc).item()
            assert 0.0 < v < 1.0

    def test_channel_mismatch(self):
        params = DitParams.create(8, 4, 0)
        with pytest.raises(DimensionError):
            trading_score(Tensor(np.ones((4, 2, 2))), params.head_app)


class TestVariants:
    def setup_method(self):
        rng = np.random.default_rng(5)
        self.fa, self.fl, self.fs = (Tensor(rng.normal(size=(8, 2, 3))) for _ in range(3))

    def test_learned(self):
        p = DitParams.create(8, 4, 6)
        s = score_variant("learned", self.fa, self.fl, self.fs, p)
        assert s.s_app.item() == pytest.approx(np_score(self.fa.data, p.head_app))
        assert s.s_loc.item() == pytest.approx(np_score(self.fl.data, p.head_loc))

    def test_cross(self):
        p = DitParams.create(8, 4, 6, variant="cross")
        s = score_variant("cross", self.fa, self.fl, self.fs, p)
        assert s.s_app.item() == pytest.approx(np_score(self.fl.data, p.head_app))
        assert s.s_loc.item() == pytest.approx(np_score(self.fa.data, p.head_loc))

    def test_shared(self):
        p = DitParams.create(8, 4, 6, variant="shared")
        s = score_variant("shared", self.fa, self.fl, self.fs, p)
        assert s.s_app.item() == pytest.approx(np_score(self.fs.data, p.head_app))

    def test_init_defaults_to_half(self):
        p = DitParams.create(8, 4, 6, variant="init")
        s = score_variant("init", self.fa, self.fl, self.fs, p)
        assert s.s_app.item() == 0.5 and s.s_loc.item() == 0.5
        assert [q.name for q in p.parameters()] == ["dit.init_app_raw", "dit.init_loc_raw"]

    def test_unknown_variant(self):
        with pytest.raises(ConfigurationError):
            DitParams.create(8, 4, 0, variant="mystery")
        with pytest.raises(ConfigurationError):
            score_variant("mystery", self.fa, self.fl, self.fs, DitParams.create(8, 4, 0))

    def test_bad_init_values(self):
        with pytest.raises(ConfigurationError):
            DitParams.create(8, 4, 0, variant="init", init_values=(1.0, 0.5))

    def test_variant_list(self):
        assert set(VARIANTS) == {"learned", "init", "cross", "shared"}
