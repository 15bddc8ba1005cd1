"""Dynamic intra-trading: learned per-task confidence scores and the trading loss."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import (
    ConfigurationError,
    DimensionError,
    DomainError,
    Parameter,
    Tensor,
    as_tensor,
    global_avg_pool,
    init_uniform,
    log,
    matmul,
    relu,
    reshape,
    sigmoid,
)

VARIANTS = ("learned", "init", "cross", "shared")


@dataclass
class TradingHead:
    """pool -> affine C->C/r -> relu -> affine C/r->1 -> sigmoid."""

    w1: Parameter
    b1: Parameter
    w2: Parameter
    b2: Parameter

    @classmethod
    def create(cls, rng: np.random.Generator, channels: int, reduction: int, name: str) -> "TradingHead":
        hidden = channels // reduction
        if hidden < 1:
            raise ConfigurationError(f"hidden width {channels}//{reduction} must be at least 1")
        return cls(
            Parameter(init_uniform(rng, (hidden, channels), channels), f"{name}.w1"),
            Parameter(np.zeros(hidden), f"{name}.b1"),
            Parameter(init_uniform(rng, (1, hidden), hidden), f"{name}.w2"),
            Parameter(np.zeros(1), f"{name}.b2"),
        )

    def parameters(self) -> list[Parameter]:
        return [self.w1, self.b1, self.w2, self.b2]


@dataclass
class DitParams:
    head_app: TradingHead
    head_loc: TradingHead
    # free logits used by the 'init' variant
    init_app_raw: Parameter
    init_loc_raw: Parameter
    variant: str = "learned"

    @classmethod
    def create(cls, channels: int, reduction: int = 8, seed: int | np.random.Generator = 0,
               variant: str = "learned", init_values: tuple[float, float] = (0.5, 0.5),
               prefix: str = "dit") -> "DitParams":
        if variant not in VARIANTS:
            raise ConfigurationError(f"unknown trading variant {variant!r}; expected one of {VARIANTS}")
        for v in init_values:
            if not 0.0 < v < 1.0:
                raise ConfigurationError(f"initial trading score {v} must lie in (0, 1)")
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        logit = [np.log(v / (1.0 - v)) for v in init_values]
        return cls(
            head_app=TradingHead.create(rng, channels, reduction, f"{prefix}.head_app"),
            head_loc=TradingHead.create(rng, channels, reduction, f"{prefix}.head_loc"),
            init_app_raw=Parameter(np.asarray(logit[0]), f"{prefix}.init_app_raw"),
            init_loc_raw=Parameter(np.asarray(logit[1]), f"{prefix}.init_loc_raw"),
            variant=variant,
        )

    def parameters(self) -> list[Parameter]:
        if self.variant == "init":
            return [self.init_app_raw, self.init_loc_raw]
        return self.head_app.parameters() + self.head_loc.parameters()


@dataclass
class TradingScores:
    s_app: Tensor
    s_loc: Tensor


def trading_score(f_star: Tensor, head: TradingHead) -> Tensor:
    """Confidence in (0, 1) for one warped stream feature; returns a 0-d tensor."""
    c = head.w1.shape[1]
    if f_star.ndim != 3 or f_star.shape[0] != c:
        raise DimensionError(f"trading head expects {c} channels, got feature {f_star.shape}")
    pooled = reshape(global_avg_pool(f_star), (c, 1))
    hidden = relu(matmul(head.w1, pooled) + reshape(head.b1, (-1, 1)))
    logit = matmul(head.w2, hidden) + reshape(head.b2, (1, 1))
    return reshape(sigmoid(logit), ())


def score_variant(variant: str, f_star_app: Tensor, f_star_loc: Tensor, f_shared: Tensor,
                  params: DitParams) -> TradingScores:
    if variant == "learned":
        return TradingScores(trading_score(f_star_app, params.head_app),
                             trading_score(f_star_loc, params.head_loc))
    if variant == "cross":
        return TradingScores(trading_score(f_star_loc, params.head_app),
                             trading_score(f_star_app, params.head_loc))
    if variant == "shared":
        return TradingScores(trading_score(f_shared, params.head_app),
                             trading_score(f_shared, params.head_loc))
    if variant == "init":
        return TradingScores(sigmoid(params.init_app_raw), sigmoid(params.init_loc_raw))
    raise ConfigurationError(f"unknown trading variant {variant!r}; expected one of {VARIANTS}")


def trading_loss(l_app, l_loc, scores: TradingScores) -> Tensor:
    """``s_app * l_app + s_loc * l_loc - log(s_app * s_loc)``."""
    s_app, s_loc = as_tensor(scores.s_app), as_tensor(scores.s_loc)
    for name, s in (("s_app", s_app), ("s_loc", s_loc)):
        v = s.item()
        if not 0.0 < v <= 1.0:
            raise DomainError(f"trading score {name}={v} outside (0, 1]")
    return s_app * l_app + s_loc * l_loc - log(s_app * s_loc)
