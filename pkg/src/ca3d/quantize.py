"""Numeric-mode machinery: pre-parameter training, QAT, static quantization.

The pre-parameter scheme stores optimizer state in a scaled space: weights are
materialized as w = round16(theta / T) and weight gradients enter the
optimizer as grad_theta = round16(T * grad_w), which conserves the relative
magnitude of gradients w.r.t. the optimization variables and makes the scheme
step-for-step identical to plain SGD on w whenever rounding is disabled.
Dividing by T < 1 shifts the representable magnitude window of the weight
space upward by 1/T (large values stop overflowing; the smallest ones are
lost), which is the mechanism the pure-float16 training relies on.
"""

from dataclasses import dataclass, field

import numpy as np

from . import backend
from . import tensor as tc
from .tensor import Tensor

HALF_MAX = 65504.0


@dataclass
class TrainingHealth:
    """Per-step numeric-event counters; reset between steps."""

    overflow_count: int = 0
    underflow_to_zero_count: int = 0
    nan_count: int = 0
    grad_norm: float = 0.0
    totals: dict = field(default_factory=lambda: {"overflow": 0, "underflow": 0, "nan": 0})

    def reset(self):
        for key, val in (("overflow", self.overflow_count),
                         ("underflow", self.underflow_to_zero_count),
                         ("nan", self.nan_count)):
            self.totals[key] += val
        self.overflow_count = 0
        self.underflow_to_zero_count = 0
        self.nan_count = 0
        self.grad_norm = 0.0

    def observe_incoming(self, g):
        self.nan_count += int(np.isnan(g).sum())
        self.overflow_count += int(np.isinf(g).sum())

    def observe_rounding(self, pre, post):
        self.overflow_count += int((np.isfinite(pre) & np.isinf(post)).sum())
        self.underflow_to_zero_count += int(((pre != 0) & np.isfinite(pre) & (post == 0)).sum())


def _round_if(arr, mode):
    return backend.round_half(arr) if mode.rounds_arithmetic else np.asarray(arr, dtype=np.float64)


def map_preparams(theta, t_scale, mode, health=None):
    """Materialize weights w = theta / T (rounded through binary16 in pure16)."""
    if not (t_scale > 0):
        raise ValueError("scale T must be positive")
    pre = np.asarray(theta, dtype=np.float64) / t_scale
    post = _round_if(pre, mode)
    if health is not None and mode.rounds_arithmetic:
        health.observe_rounding(pre, post)
    return post


def backmap_grads(grad_w, t_scale, mode, health=None):
    """Back-map weight gradients into pre-parameter space: T * grad_w."""
    if not (t_scale > 0):
        raise ValueError("scale T must be positive")
    pre = t_scale * np.asarray(grad_w, dtype=np.float64)
    post = _round_if(pre, mode)
    if health is not None and mode.rounds_arithmetic:
        health.observe_rounding(pre, post)
    return post


@dataclass
class GradBuffers:
    """Weight-space gradients alongside their back-mapped pre-parameter view."""

    grad_w: np.ndarray
    grad_theta: np.ndarray

    @classmethod
    def back_map(cls, grad_w, t_scale, mode, health=None):
        grad_w = np.asarray(grad_w, dtype=np.float64)
        return cls(grad_w, backmap_grads(grad_w, t_scale, mode, health))


class PreParamStore:
    """Pre-parameters theta with scale T; owns the materialized weights.

    `params` maps names to the model's weight tensors; their .data buffers are
    refreshed in place between optimizer steps (never during a forward pass).
    """

    def __init__(self, params, t_scale, mode):
        if not (t_scale > 0 and np.isfinite(t_scale)):
            raise ValueError("scale T must be a positive finite real")
        self.params = dict(params)
        self.t_scale = float(t_scale)
        self.mode = mode
        self.theta = {}
        self.velocity = {}
        for name, w in self.params.items():
            self.theta[name] = _round_if(self.t_scale * w.data, mode)
            self.velocity[name] = np.zeros_like(w.data)
        self.refresh()

    def refresh(self, health=None):
        for name, w in self.params.items():
            w.data = map_preparams(self.theta[name], self.t_scale, self.mode, health)


def sgd_step_preparam(store, grads, lr, momentum=0.0, health=None):
    """One SGD step in pre-parameter space; weights re-materialized afterwards.

    Non-finite gradient coordinates are counted and skipped (treated as zero);
    the step still applies to the finite coordinates.
    """
    if not (lr > 0):
        raise ValueError("learning rate must be positive")
    mode = store.mode
    for name, w in store.params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if health is not None:
            health.observe_incoming(g)
            health.grad_norm += float(np.sum(g[np.isfinite(g)] ** 2))
        g = np.where(np.isfinite(g), g, 0.0)
        gt = GradBuffers.back_map(g, store.t_scale, mode, health).grad_theta
        if momentum:
            v = _round_if(momentum * store.velocity[name], mode)
            v = _round_if(v + gt, mode)
            store.velocity[name] = v
            step = v
        else:
            step = gt
        upd_pre = lr * step
        upd = _round_if(upd_pre, mode)
        if health is not None and mode.rounds_arithmetic:
            health.observe_rounding(upd_pre, upd)
        store.theta[name] = _round_if(store.theta[name] - upd, mode)
    store.refresh(health)


def sgd_step_direct(params, grads, lr, momentum, mode, velocity, health=None):
    """Plain SGD directly on the weights (full32 / qat / naive float16)."""
    if not (lr > 0):
        raise ValueError("learning rate must be positive")
    for name, w in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if health is not None:
            health.observe_incoming(g)
            health.grad_norm += float(np.sum(g[np.isfinite(g)] ** 2))
        g = np.where(np.isfinite(g), g, 0.0)
        g = _round_if(g, mode)
        if momentum:
            v = _round_if(momentum * velocity[name], mode)
            v = _round_if(v + g, mode)
            velocity[name] = v
            step = v
        else:
            step = g
        upd_pre = lr * step
        upd = _round_if(upd_pre, mode)
        if health is not None and mode.rounds_arithmetic:
            health.observe_rounding(upd_pre, upd)
        w.data = _round_if(w.data - upd, mode)


def fake_quantize(t):
    """Binary16 rounding in the forward pass, straight-through backward."""
    out = backend.round_half(t.data)
    if not tc._recording(t):
        return Tensor._wrap(out, t.mode)

    def bwd(g):
        tc._accum(t, g)

    return Tensor._wrap(out, t.mode, (t,), bwd, True)


def static_quantize_model(model):
    """Round a trained model's parameters to binary16 for pure16 inference.

    Raises on parameters outside the binary16 finite range, naming them.
    """
    from .model import Ca3dModel
    from .tensor import STATIC_POST_QUANT, NumericMode

    offending = []
    for name, p in model.parameters().items():
        rounded = tc.f16_round(p.data)
        if np.any(np.isinf(rounded) & np.isfinite(p.data)):
            offending.append(name)
    if offending:
        raise ValueError(
            "parameters exceed the binary16 finite range (|x| <= 65504): "
            + ", ".join(sorted(offending))
        )
    target = NumericMode(STATIC_POST_QUANT, model.mode.scale_t)
    return Ca3dModel.from_state(model.config, target, model.state_dict())
