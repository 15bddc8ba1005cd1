"""Appearance/localization feature-reflecting attention block.

The shared feature is split into an appearance stream and a localization
stream. Each stream builds a self-reflect affinity map from its own
projections and a mutual-reflect map that pairs one of its projections with
the other stream's, mixes the two maps with a learnable convex weight, warps a
value projection of the shared feature with the mixed map, and adds the result
back through a learnable residual scale.
"""
from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .tensor import (
    ConfigurationError,
    ContractError,
    DimensionError,
    Parameter,
    Tensor,
    conv2d,
    init_uniform,
    matmul,
    relu,
    reshape,
    sigmoid,
    softmax,
    transpose,
)

FLOWS = ("both", "app_to_loc", "loc_to_app", "none")


@dataclass
class Conv1x1:
    """A 1x1 channel transform ``C_in -> C_out`` with bias."""

    weight: Parameter  # C_out x C_in x 1 x 1
    bias: Parameter  # C_out

    @classmethod
    def create(cls, rng: np.random.Generator, c_in: int, c_out: int, name: str) -> "Conv1x1":
        w = init_uniform(rng, (c_out, c_in, 1, 1), fan_in=c_in)
        return cls(Parameter(w, f"{name}.weight"), Parameter(np.zeros(c_out), f"{name}.bias"))

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, padding="same")

    def parameters(self) -> list[Parameter]:
        return [self.weight, self.bias]


@dataclass
class AlfrParams:
    """Learnable state of one block.

    ``mix_*_raw`` are squashed through a sigmoid to give the convex weights;
    ``res_*`` scale the warped feature before the residual add. Both start at
    zero, so a freshly created block is the identity on both streams.
    """

    sep_app: Conv1x1
    sep_loc: Conv1x1
    proj_app1: Conv1x1
    proj_app2: Conv1x1
    proj_loc1: Conv1x1
    proj_loc2: Conv1x1
    value_app: Conv1x1
    value_loc: Conv1x1
    mix_app_raw: Parameter
    mix_loc_raw: Parameter
    res_app: Parameter
    res_loc: Parameter
    reduction: int

    @classmethod
    def create(cls, channels: int, reduction: int = 8, seed: int | np.random.Generator = 0,
               prefix: str = "alfr") -> "AlfrParams":
        if reduction < 1 or channels % reduction:
            raise ConfigurationError(
                f"channels ({channels}) must be divisible by the reduction ratio ({reduction})")
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        c, cr = channels, channels // reduction

        def conv(c_out, name):
            return Conv1x1.create(rng, c, c_out, f"{prefix}.{name}")

        def scalar(name):
            return Parameter(np.zeros(()), f"{prefix}.{name}")

        return cls(
            sep_app=conv(c, "sep_app"), sep_loc=conv(c, "sep_loc"),
            proj_app1=conv(cr, "proj_app1"), proj_app2=conv(cr, "proj_app2"),
            proj_loc1=conv(cr, "proj_loc1"), proj_loc2=conv(cr, "proj_loc2"),
            value_app=conv(c, "value_app"), value_loc=conv(c, "value_loc"),
            mix_app_raw=scalar("mix_app_raw"), mix_loc_raw=scalar("mix_loc_raw"),
            res_app=scalar("res_app"), res_loc=scalar("res_loc"),
            reduction=reduction,
        )

    @property
    def channels(self) -> int:
        return self.sep_app.weight.shape[1]

    def parameters(self) -> list[Parameter]:
        out: list[Parameter] = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, Conv1x1):
                out.extend(v.parameters())
            elif isinstance(v, Parameter):
                out.append(v)
        return out


@dataclass
class StreamOutputs:
    f_star_app: Tensor
    f_star_loc: Tensor
    w_app: Tensor
    w_loc: Tensor


def separate(f_s: Tensor, params: AlfrParams) -> tuple[Tensor, Tensor]:
    """Split the shared feature into appearance and localization features (relu activated)."""
    if f_s.ndim != 3 or f_s.shape[0] != params.channels:
        raise DimensionError(f"shared feature {f_s.shape} does not have {params.channels} channels")
    return relu(params.sep_app(f_s)), relu(params.sep_loc(f_s))


def _flat(x: Tensor) -> Tensor:
    c, h, w = x.shape
    return reshape(x, (c, h * w))


def _affinity(f1: Tensor, f2: Tensor) -> Tensor:
    if f1.ndim != 2 or f1.shape != f2.shape:
        raise DimensionError(f"attention operands must share a C x N shape, got {f1.shape} and {f2.shape}")
    if f1.shape[1] == 0:
        raise ContractError("attention over zero positions")
    # row i: output position, column j: attended position
    return softmax(matmul(transpose(f1), f2), axis=1)


def self_reflect(f1: Tensor, f2: Tensor) -> Tensor:
    """Row-softmax of ``f1^T f2`` for two projections of the same stream."""
    return _affinity(f1, f2)


def mutual_reflect(f_other1: Tensor, f_self2: Tensor) -> Tensor:
    """Row-softmax of ``f_other1^T f_self2``: the other stream's first projection
    against this stream's second."""
    return _affinity(f_other1, f_self2)


def combine(w_s: Tensor, w_m: Tensor, mix_raw: Tensor | float, lam: float | None = None) -> Tensor:
    """``lam * w_s + (1 - lam) * w_m`` with ``lam = sigmoid(mix_raw)`` unless forced."""
    if w_s.shape != w_m.shape:
        raise DimensionError(f"combine: attention maps {w_s.shape} and {w_m.shape} differ")
    if lam is not None:
        return w_s * float(lam) + w_m * (1.0 - float(lam))
    weight = sigmoid(mix_raw)
    return weight * w_s + (1.0 - weight) * w_m


def warp_and_residual(f_s: Tensor, w: Tensor, value: Conv1x1, res: Tensor | float) -> Tensor:
    c, h, wd = f_s.shape
    n = h * wd
    if w.shape != (n, n):
        raise DimensionError(f"attention map {w.shape} does not match {n} positions")
    warped = matmul(_flat(value(f_s)), transpose(w))
    return f_s + res * reshape(warped, (c, h, wd))


def alfr_forward(f_s: Tensor, params: AlfrParams, flow: str = "both", *,
                 self_reflect_on: bool = True, force_lambda: float | None = None) -> StreamOutputs:
    """Run both streams of the block.

    ``flow`` picks the active mutual directions: ``app_to_loc`` feeds appearance
    projections into the localization map, ``loc_to_app`` the reverse. A stream
    whose mutual direction is off uses its self map alone. With
    ``self_reflect_on=False`` the mutual map is used alone (needs ``flow='both'``).
    ``force_lambda`` replaces the learned mixing weight on streams that mix.
    """
    if flow not in FLOWS:
        raise ConfigurationError(f"unknown flow {flow!r}; expected one of {FLOWS}")
    if not self_reflect_on and flow != "both":
        raise ConfigurationError("disabling self-reflect requires flow='both'")
    f_app, f_loc = separate(f_s, params)
    a1, a2 = _flat(params.proj_app1(f_app)), _flat(params.proj_app2(f_app))
    l1, l2 = _flat(params.proj_loc1(f_loc)), _flat(params.proj_loc2(f_loc))

    def stream_map(p1, p2, other1, mutual_on, mix_raw):
        if not self_reflect_on:
            return mutual_reflect(other1, p2)
        w_self = self_reflect(p1, p2)
        if not mutual_on:
            return w_self
        return combine(w_self, mutual_reflect(other1, p2), mix_raw, force_lambda)

    w_app = stream_map(a1, a2, l1, flow in ("both", "loc_to_app"), params.mix_app_raw)
    w_loc = stream_map(l1, l2, a1, flow in ("both", "app_to_loc"), params.mix_loc_raw)
    return StreamOutputs(
        f_star_app=warp_and_residual(f_s, w_app, params.value_app, params.res_app),
        f_star_loc=warp_and_residual(f_s, w_loc, params.value_loc, params.res_loc),
        w_app=w_app,
        w_loc=w_loc,
    )
