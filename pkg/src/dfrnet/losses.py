"""Per-term detection losses and their grouping into appearance / localization sums."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .tensor import (
    ConfigurationError,
    ContractError,
    DimensionError,
    Tensor,
    as_tensor,
    div,
    exp,
    log,
    mean,
    relu,
    sum as tsum,
)

IOU_EPS = 1e-6
STREAMS = ("appearance", "localization")


@dataclass(frozen=True)
class AppearanceTarget:
    category: int
    rot: float
    dims: tuple[float, float, float]  # w, h, l

    def __post_init__(self):
        if min(self.dims) <= 0:
            raise ValueError(f"dimensions must be positive, got {self.dims}")


@dataclass(frozen=True)
class LocalizationTarget:
    box2d: tuple[float, float, float, float]  # u, v, u', v'
    center3d: tuple[float, float, float]

    def __post_init__(self):
        u, v, u2, v2 = self.box2d
        if not (u < u2 and v < v2):
            raise ValueError(f"2D box {self.box2d} is not well ordered")
        if not math.isfinite(self.center3d[2]):
            raise ValueError("depth must be finite")


@dataclass(frozen=True)
class ClusteringConfig:
    """Which stream owns the rotation and dimension terms.

    Category always belongs to appearance; the 2D box and 3D centre always to
    localization.
    """

    rot_stream: str = "appearance"
    whl_stream: str = "appearance"

    def __post_init__(self):
        for key in ("rot_stream", "whl_stream"):
            if getattr(self, key) not in STREAMS:
                raise ConfigurationError(f"tasks.{key} must be one of {STREAMS}, got {getattr(self, key)!r}")


@dataclass
class DetectionPreds:
    logits: Tensor  # n_c (+ background)
    rot: Tensor  # 0-d
    dims: Tensor  # w, h, l
    box2d: Tensor  # u, v, u', v'
    center3d: Tensor  # x, y, z


def _abs(d: Tensor) -> Tensor:
    return relu(d) + relu(-d)


def smooth_l1(pred, target) -> Tensor:
    """Mean smooth-L1 with transition at 1: ``0.5 d^2`` inside, ``|d| - 0.5`` outside."""
    pred = as_tensor(pred)
    target = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=np.float64)
    if pred.shape != target.shape:
        raise DimensionError(f"smooth_l1: prediction {pred.shape} and target {target.shape} differ")
    a = _abs(pred - target)
    m = a - relu(a - 1.0)  # min(|d|, 1)
    return mean(0.5 * m * m + (a - m))


def wrap_angle(d: float) -> float:
    """Map an angle to (-pi, pi]."""
    return d - 2.0 * math.pi * math.ceil((d - math.pi) / (2.0 * math.pi))


def rotation_loss(pred_rot, target_rot: float) -> Tensor:
    """Smooth-L1 on the yaw residual wrapped to (-pi, pi]."""
    pred_rot = as_tensor(pred_rot)
    d = pred_rot - float(target_rot)
    shift = wrap_angle(d.item()) - d.item()  # constant multiple of 2*pi
    return smooth_l1(d + shift, np.zeros(d.shape))


def category_loss(logits, target: int) -> Tensor:
    """Cross-entropy ``-log softmax(logits)[target]`` with max subtraction."""
    logits = as_tensor(logits)
    if logits.ndim != 1 or logits.shape[0] < 2:
        raise DimensionError(f"category_loss needs a vector of at least 2 logits, got {logits.shape}")
    if not 0 <= int(target) < logits.shape[0]:
        raise ContractError(f"category {target} outside [0, {logits.shape[0]})")
    shifted = logits - float(logits.data.max())
    return log(tsum(exp(shifted))) - shifted[int(target)]


def _minimum(a: Tensor, b) -> Tensor:
    return a - relu(a - b)


def _maximum(a: Tensor, b) -> Tensor:
    return a + relu(b - a)


def box_iou(pred, target) -> Tensor:
    """Differentiable axis-aligned IoU; disordered or empty boxes have zero area."""
    pred = as_tensor(pred)
    t = np.asarray(target, dtype=np.float64)
    if pred.shape != (4,) or t.shape != (4,):
        raise DimensionError("boxes must be (u, v, u', v')")
    u, v, u2, v2 = pred[0], pred[1], pred[2], pred[3]
    iw = relu(_minimum(u2, t[2]) - _maximum(u, t[0]))
    ih = relu(_minimum(v2, t[3]) - _maximum(v, t[1]))
    inter = iw * ih
    area_p = relu(u2 - u) * relu(v2 - v)
    area_t = float((t[2] - t[0]) * (t[3] - t[1]))
    union = area_p + area_t - inter
    if union.item() <= 0.0:
        return Tensor(0.0)
    return div(inter, union)


def box2d_iou_loss(pred, target) -> Tensor:
    """``-log(max(IoU, 1e-6))``."""
    iou = box_iou(pred, target)
    return -log(IOU_EPS + relu(iou - IOU_EPS))


def loss_terms(preds: DetectionPreds, app: AppearanceTarget, loc: LocalizationTarget) -> dict[str, Tensor]:
    return {
        "class": category_loss(preds.logits, app.category),
        "rot": rotation_loss(preds.rot, app.rot),
        "whl": smooth_l1(preds.dims, np.asarray(app.dims)),
        "uvuv": box2d_iou_loss(preds.box2d, np.asarray(loc.box2d)),
        "xyz": smooth_l1(preds.center3d, np.asarray(loc.center3d)),
    }


def group_terms(terms: dict[str, Tensor], cfg: ClusteringConfig) -> tuple[Tensor, Tensor]:
    app = [terms["class"]]
    loc = [terms["uvuv"], terms["xyz"]]
    (app if cfg.rot_stream == "appearance" else loc).append(terms["rot"])
    (app if cfg.whl_stream == "appearance" else loc).append(terms["whl"])

    def total(items):
        out = items[0]
        for t in items[1:]:
            out = out + t
        return out

    return total(app), total(loc)


def grouped_losses(preds: DetectionPreds, app: AppearanceTarget, loc: LocalizationTarget,
                   cfg: ClusteringConfig = ClusteringConfig()) -> tuple[Tensor, Tensor]:
    """Return ``(l_app, l_loc)`` for one sample."""
    return group_terms(loss_terms(preds, app, loc), cfg)


def batch_grouped_losses(samples: Sequence[tuple[DetectionPreds, AppearanceTarget, LocalizationTarget]],
                         cfg: ClusteringConfig = ClusteringConfig()) -> tuple[Tensor, Tensor]:
    """Per-sample grouped losses averaged over the batch."""
    if not samples:
        raise ContractError("empty batch")
    pairs = [grouped_losses(p, a, l, cfg) for p, a, l in samples]
    n = float(len(pairs))
    l_app, l_loc = pairs[0]
    for a, b in pairs[1:]:
        l_app, l_loc = l_app + a, l_loc + b
    return l_app * (1.0 / n), l_loc * (1.0 / n)
