"""Finite-difference verification of every differentiable operation.

Each registered case draws random inputs, reduces the op's output to a scalar
with random weights, and compares the reverse-mode gradient of every input
against central differences. Draws that put a relu input within
``KINK_MARGIN`` of its kink are redrawn, since a difference quotient across a
kink measures neither one-sided derivative.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, fields, is_dataclass, replace
from typing import Callable

import numpy as np

from . import alfr as alfr_mod
from . import losses
from . import tensor as T
from .alfr import AlfrParams
from .dit import DitParams, TradingScores, trading_loss, trading_score
from .tensor import Tensor, backward, current_tape, finite_difference_grad

H = 1e-4
REL_TOL = 1e-4
ABS_TOL = 1e-6
KINK_MARGIN = 1e-3
TRIALS = 20


@dataclass
class Case:
    name: str
    # rng, trial index -> (input arrays, function of input tensors returning any-shaped tensor)
    build: Callable[[np.random.Generator, int], tuple[list[np.ndarray], Callable[[list[Tensor]], Tensor]]]


@dataclass
class OpReport:
    name: str
    trials: int
    worst_rel: float
    worst_abs: float
    passed: bool

    def line(self) -> str:
        status = "ok" if self.passed else "FAIL"
        return f"{self.name:<18} trials={self.trials:<3d} worst_rel={self.worst_rel:.3e} worst_abs={self.worst_abs:.3e} {status}"


def _signed(rng, shape, lo=0.05, hi=2.0):
    """Values bounded away from zero with random sign."""
    return rng.uniform(lo, hi, size=shape) * rng.choice([-1.0, 1.0], size=shape)


def _leaves(obj) -> list[Tensor]:
    if isinstance(obj, Tensor):
        return [obj]
    if is_dataclass(obj):
        return [t for f in fields(obj) for t in _leaves(getattr(obj, f.name))]
    return []


def _rebuild(obj, it):
    """Copy of a parameter dataclass whose tensors are taken from ``it`` in field order."""
    if isinstance(obj, Tensor):
        return next(it)
    if is_dataclass(obj):
        kw = {f.name: _rebuild(getattr(obj, f.name), it) for f in fields(obj)
              if isinstance(getattr(obj, f.name), Tensor) or is_dataclass(getattr(obj, f.name))}
        return replace(obj, **kw)
    return obj


# ---------------------------------------------------------------------------
# cases


def _unary(fn, domain=_signed, shape=(3, 4)):
    def build(rng, i):
        return [domain(rng, shape)], lambda t: fn(t[0])
    return build


def _binary(fn, shape=(3, 4), rhs=_signed):
    def build(rng, i):
        return [rng.normal(size=shape), rhs(rng, shape)], lambda t: fn(t[0], t[1])
    return build


def _positive(rng, shape):
    return rng.uniform(0.2, 3.0, size=shape)


def _matmul(rng, i):
    m, k, n = rng.integers(1, 5, size=3)
    return [rng.normal(size=(m, k)), rng.normal(size=(k, n))], lambda t: T.matmul(t[0], t[1])


def _softmax(rng, i):
    axis = i % 2
    return [rng.normal(scale=2.0, size=(3, 4))], lambda t: T.softmax(t[0], axis=axis)


def _index(rng, i):
    key = (slice(0, 2), int(rng.integers(4))) if i % 2 else (np.array([0, 2, 2]),)
    return [rng.normal(size=(3, 4))], lambda t: t[0][key]


def _stack(rng, i):
    return [rng.normal(size=(2, 3)) for _ in range(3)], lambda t: T.stack(t)


def _add_bias(rng, i):
    return [rng.normal(size=(3, 2, 4)), rng.normal(size=3)], lambda t: T.add_bias(t[0], t[1])


def _unfold(rng, i):
    k, pad = (3, "same") if i % 2 else (3, "valid")
    return [rng.normal(size=(2, 4, 5))], lambda t: T.unfold(t[0], k, pad)


def _conv2d(rng, i):
    k = (1, 3)[i % 2]
    pad = ("same", "valid")[(i // 2) % 2]
    x = rng.normal(size=(2, 4, 4))
    w = rng.normal(size=(3, 2, k, k))
    b = rng.normal(size=3)
    return [x, w, b], lambda t: T.conv2d(t[0], t[1], t[2], padding=pad)


def _alfr(rng, i):
    flow = alfr_mod.FLOWS[i % len(alfr_mod.FLOWS)]
    self_on = not (flow == "both" and i % 8 == 4)
    params = AlfrParams.create(4, 2, rng)
    template = _leaves(params)
    # leave the identity initialisation so every path carries gradient
    arrays = [rng.normal(scale=0.7, size=p.shape) for p in template]
    x = rng.normal(size=(4, 3, 3))

    def fn(t):
        p = _rebuild(params, iter(t[1:]))
        out = alfr_mod.alfr_forward(t[0], p, flow, self_reflect_on=self_on)
        return T.stack([out.f_star_app, out.f_star_loc])

    return [x] + arrays, fn


def _trading_score(rng, i):
    params = DitParams.create(6, 2, rng)
    head = params.head_app
    template = _leaves(head)
    arrays = [rng.normal(size=p.shape) for p in template]
    x = rng.normal(size=(6, 3, 3))

    def fn(t):
        return trading_score(t[0], _rebuild(head, iter(t[1:])))

    return [x] + arrays, fn


def _trading_loss(rng, i):
    arrays = [rng.uniform(0.1, 5.0, size=()), rng.uniform(0.1, 5.0, size=()),
              rng.uniform(0.05, 0.95, size=()), rng.uniform(0.05, 0.95, size=())]
    return arrays, lambda t: trading_loss(t[0], t[1], TradingScores(t[2], t[3]))


def _smooth_l1(rng, i):
    target = rng.normal(size=5)
    return [target + rng.uniform(-3, 3, size=5)], lambda t: losses.smooth_l1(t[0], target)


def _rotation_loss(rng, i):
    target = float(rng.uniform(-math.pi, math.pi))
    while True:
        d = float(rng.uniform(-6.0, 6.0))
        if abs(abs(d) - math.pi) > KINK_MARGIN:
            break
    return [np.asarray(target + d)], lambda t: losses.rotation_loss(t[0], target)


def _category_loss(rng, i):
    n = int(rng.integers(2, 6))
    target = int(rng.integers(n))
    return [rng.normal(scale=2.0, size=n)], lambda t: losses.category_loss(t[0], target)


def _box_iou_loss(rng, i):
    u, v = rng.uniform(0, 10, size=2)
    target = np.array([u, v, u + rng.uniform(2, 6), v + rng.uniform(2, 6)])
    pred = target + rng.uniform(-1.5, 1.5, size=4)
    return [pred], lambda t: losses.box2d_iou_loss(t[0], target)


PRIMITIVE_CASES = [
    Case("add", _binary(T.add)),
    Case("sub", _binary(T.sub)),
    Case("mul", _binary(T.mul)),
    Case("div", _binary(T.div)),
    Case("sigmoid", _unary(T.sigmoid)),
    Case("exp", _unary(T.exp)),
    Case("log", _unary(T.log, _positive)),
    Case("relu", _unary(T.relu)),
    Case("matmul", _matmul),
    Case("softmax", _softmax),
    Case("reshape", _unary(lambda x: T.reshape(x, (4, 3)))),
    Case("transpose", _unary(T.transpose)),
    Case("index", _index),
    Case("stack", _stack),
    Case("sum", _unary(T.sum)),
    Case("mean", _unary(T.mean)),
    Case("add_bias", _add_bias),
    Case("unfold", _unfold),
    Case("global_avg_pool", _unary(T.global_avg_pool, shape=(3, 2, 4))),
    Case("avg_pool2x2", _unary(T.avg_pool2x2, shape=(2, 4, 6))),
]
COMPOSITE_CASES = [
    Case("conv2d", _conv2d),
    Case("alfr_forward", _alfr),
    Case("trading_score", _trading_score),
    Case("trading_loss", _trading_loss),
    Case("smooth_l1", _smooth_l1),
    Case("rotation_loss", _rotation_loss),
    Case("category_loss", _category_loss),
    Case("box2d_iou_loss", _box_iou_loss),
]
CASES = PRIMITIVE_CASES + COMPOSITE_CASES


def _near_kink() -> bool:
    for node in current_tape().nodes:
        if node.op == "relu" and np.min(np.abs(node.inputs[0].data)) < KINK_MARGIN:
            return True
    return False


def _draw(case: Case, rng: np.random.Generator, trial: int):
    """Inputs, scalarized function and analytic gradients for one kink-free draw."""
    for _ in range(100):
        arrays, fn = case.build(rng, trial)
        with T.no_grad():
            out_shape = fn([Tensor(a) for a in arrays]).shape
        weights = rng.normal(size=out_shape)

        def scalar(ts, fn=fn, weights=weights):
            return T.sum(fn(ts) * Tensor(weights))

        leaves = [Tensor(a, requires_grad=True) for a in arrays]
        out = scalar(leaves)
        if _near_kink():
            current_tape().clear()
            continue
        backward(out)
        grads = [np.zeros_like(a) if t.grad is None else t.grad for a, t in zip(arrays, leaves)]
        return arrays, scalar, grads
    raise RuntimeError(f"{case.name}: could not draw inputs away from relu kinks")


def check_case(case: Case, rng: np.random.Generator, trials: int = TRIALS) -> OpReport:
    worst_rel = worst_abs = 0.0
    passed = True
    for trial in range(trials):
        arrays, scalar, grads = _draw(case, rng, trial)
        for j, (arr, g) in enumerate(zip(arrays, grads)):
            def f(t, j=j):
                ts = [Tensor(a) for a in arrays]
                ts[j] = t
                return scalar(ts)

            num = finite_difference_grad(f, arr, H)
            err = np.abs(g - num)
            scale = np.maximum(np.maximum(np.abs(g), np.abs(num)), np.finfo(float).tiny)
            rel = err / scale
            ok = (rel < REL_TOL) | (err < ABS_TOL)
            passed &= bool(np.all(ok))
            if err.size:
                worst_abs = max(worst_abs, float(err.max()))
                worst_rel = max(worst_rel, float(np.where(err < ABS_TOL, 0.0, rel).max()))
    return OpReport(case.name, trials, worst_rel, worst_abs, passed)


def run_gradcheck(seed: int = 0, trials: int = TRIALS, log: Callable[[str], None] | None = print) -> list[OpReport]:
    rng = np.random.default_rng(seed)
    reports = []
    t0 = time.perf_counter()
    for case in CASES:
        rep = check_case(case, rng, trials)
        reports.append(rep)
        if log:
            log(rep.line())
    if log:
        bad = [r.name for r in reports if not r.passed]
        summary = "all ops within tolerance" if not bad else "FAILED: " + ", ".join(bad)
        log(f"{len(reports)} ops checked in {time.perf_counter() - t0:.1f}s; {summary}")
    return reports


def registered_ops() -> list[str]:
    return [c.name for c in CASES]
