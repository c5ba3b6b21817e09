"""Neural layers for CAST blocks.

Feature maps are (batch, channels, time, height, width). Spatial convolutions
act per frame (kt == 1), temporal convolutions act per spatial location
(kh == kw == 1). Convolutions are lowered to im2col + matmul, so the per-MAC
binary16 rounding of the pure16 modes applies inside the kernels and the
backward pass falls out of the autodiff graph.
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as tc
from .tensor import QAT, Tensor


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: tuple  # (kt, kh, kw)
    stride: tuple = (1, 1, 1)
    padding: tuple = (0, 0, 0)
    bias: bool = True

    def __post_init__(self):
        kt, kh, kw = self.kernel
        if self.in_channels <= 0 or self.out_channels <= 0:
            raise ValueError("channel counts must be positive")
        if min(self.kernel) <= 0 or min(self.stride) <= 0 or min(self.padding) < 0:
            raise ValueError("bad kernel/stride/padding")
        if kt != 1 and (kh != 1 or kw != 1):
            raise ValueError("convolutions are spatial (kt==1) or temporal (kh==kw==1)")

    @classmethod
    def spatial(cls, cin, cout, k, stride=1, padding=0, bias=True):
        return cls(cin, cout, (1, k, k), (1, stride, stride), (0, padding, padding), bias)

    @classmethod
    def temporal(cls, cin, cout, k, stride=1, padding=0, bias=True):
        return cls(cin, cout, (k, 1, 1), (stride, 1, 1), (padding, 0, 0), bias)


def _fake_quant(t):
    """Straight-through binary16 rounding (QAT simulation)."""
    from .quantize import fake_quantize

    return fake_quantize(t)


def _maybe_qat(t):
    return _fake_quant(t) if t.mode.kind == QAT else t


def _qat_out(t):
    """Simulated-quantization of layer outputs (activations) in QAT mode."""
    return _fake_quant(t) if t.mode.kind == QAT else t


def _out_len(n, k, s, p):
    return (n + 2 * p - k) // s + 1


def _im2col_spatial(x, kh, kw, sh, sw, ph, pw):
    """(B,C,T,H,W) -> (B,T,Ho,Wo,C,kh,kw) patch gather (pure data movement)."""
    if ph or pw:
        x = tc.pad_constant(x, ((0, 0), (0, 0), (0, 0), (ph, ph), (pw, pw)))
    b, c, t, hp, wp = x.shape
    ho = (hp - kh) // sh + 1
    wo = (wp - kw) // sw + 1
    if ho <= 0 or wo <= 0:
        raise ValueError("spatial extent smaller than kernel after padding")
    patches = []
    for i in range(kh):
        for j in range(kw):
            patches.append(x[:, :, :, i : i + sh * (ho - 1) + 1 : sh, j : j + sw * (wo - 1) + 1 : sw])
    col = tc.stack(patches, axis=0)  # (kh*kw, B, C, T, Ho, Wo)
    col = col.reshape(kh, kw, b, c, t, ho, wo)
    return col.transpose(2, 4, 5, 6, 3, 0, 1)  # (B,T,Ho,Wo,C,kh,kw)


def _im2col_temporal(x, kt, st, pt):
    """(B,C,T,H,W) -> (B,To,H,W,C,kt) patch gather along time."""
    if pt:
        x = tc.pad_constant(x, ((0, 0), (0, 0), (pt, pt), (0, 0), (0, 0)))
    b, c, t, h, w = x.shape
    to = (t - kt) // st + 1
    if to <= 0:
        raise ValueError("temporal extent smaller than kernel after padding")
    patches = [x[:, :, i : i + st * (to - 1) + 1 : st] for i in range(kt)]
    col = tc.stack(patches, axis=0)  # (kt, B, C, To, H, W)
    return col.transpose(1, 3, 4, 5, 2, 0)  # (B,To,H,W,C,kt)


def conv_spatial(x, spec, weight, bias=None):
    """Per-frame 2-D cross-correlation; H' = (H+2p-k)//s + 1 and same for W."""
    kt, kh, kw = spec.kernel
    if kt != 1:
        raise ValueError("spatial convolution requires kt == 1")
    b, c, t, h, w = x.shape
    if c != spec.in_channels:
        raise ValueError(f"expected {spec.in_channels} input channels, got {c}")
    _, sh, sw = spec.stride
    _, ph, pw = spec.padding
    col = _im2col_spatial(x, kh, kw, sh, sw, ph, pw)
    bb, tt, ho, wo = col.shape[:4]
    k = spec.in_channels * kh * kw
    weight = _maybe_qat(weight)
    wmat = weight.reshape(spec.out_channels, k).transpose(1, 0)
    out = tc.matmul(col.reshape(bb * tt * ho * wo, k), wmat)
    if bias is not None:
        out = out + _maybe_qat(bias)
    out = out.reshape(bb, tt, ho, wo, spec.out_channels)
    return _qat_out(out.transpose(0, 4, 1, 2, 3))


def conv_temporal(x, spec, weight, bias=None):
    """1-D cross-correlation along time, independent per spatial location."""
    kt, kh, kw = spec.kernel
    if kh != 1 or kw != 1:
        raise ValueError("temporal convolution requires kh == kw == 1")
    b, c, t, h, w = x.shape
    if c != spec.in_channels:
        raise ValueError(f"expected {spec.in_channels} input channels, got {c}")
    st = spec.stride[0]
    pt = spec.padding[0]
    col = _im2col_temporal(x, kt, st, pt)
    bb, to, hh, ww = col.shape[:4]
    k = spec.in_channels * kt
    weight = _maybe_qat(weight)
    wmat = weight.reshape(spec.out_channels, k).transpose(1, 0)
    out = tc.matmul(col.reshape(bb * to * hh * ww, k), wmat)
    if bias is not None:
        out = out + _maybe_qat(bias)
    out = out.reshape(bb, to, hh, ww, spec.out_channels)
    return _qat_out(out.transpose(0, 4, 1, 2, 3))


def linear(x, weight, bias=None):
    """x (N, in) with weight (out, in): x @ W^T + b."""
    weight = _maybe_qat(weight)
    out = tc.matmul(x, weight.transpose(1, 0))
    if bias is not None:
        out = out + _maybe_qat(bias)
    return _qat_out(out)


def relu(x):
    return tc.relu(x)


def max_pool_temporal(x, size, stride):
    """Max over temporal windows; T' = (T - size)//stride + 1."""
    b, c, t, h, w = x.shape
    if t < size:
        raise ValueError(f"temporal extent {t} smaller than pool size {size}")
    to = (t - size) // stride + 1
    slices = [x[:, :, i : i + stride * (to - 1) + 1 : stride] for i in range(size)]
    win = tc.stack(slices, axis=3)  # (B,C,To,size,H,W)
    return tc.tmax(win, axis=3)


def global_avg_pool(x):
    """(B,C,T,H,W) -> (B,C) mean over time and space."""
    return _qat_out(x.mean(axis=(2, 3, 4)))


def dropout(x, rate, training, rng=None):
    """Inverted dropout: identity in eval; expectation-preserving in training."""
    if not (0.0 <= rate < 1.0):
        raise ValueError("dropout rate must be in [0, 1)")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("training-mode dropout needs a seeded rng")
    keep = (rng.random(x.shape) >= rate).astype(np.float64)
    mask = Tensor(keep * (1.0 / (1.0 - rate)), x.mode)
    return x * mask


def cross_entropy(logits, labels):
    """Mean over batch of -log softmax(logits)[label], max-stabilized."""
    labels = np.asarray(labels, dtype=np.int64)
    b, k = logits.shape
    if labels.shape != (b,):
        raise ValueError("labels must be one integer per batch row")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"label out of range [0, {k})")
    m = tc.tmax(logits, axis=1, keepdims=True)
    zs = logits - m
    lse = tc.log(tc.exp(zs).sum(axis=1))
    return (lse - tc.pick(zs, labels)).mean()


def softmax(logits):
    m = tc.tmax(logits, axis=1, keepdims=True)
    e = tc.exp(logits - m)
    return e / e.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# parameterized layers
# ---------------------------------------------------------------------------


def kaiming_normal(rng, shape, fan_in):
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


class Conv:
    """Spatial or temporal convolution layer owning its parameters."""

    def __init__(self, spec, rng, mode, name):
        self.spec = spec
        self.name = name
        kt, kh, kw = spec.kernel
        fan_in = spec.in_channels * kt * kh * kw
        if kt == 1:
            wshape = (spec.out_channels, spec.in_channels, kh, kw)
        else:
            wshape = (spec.out_channels, spec.in_channels, kt)
        self.weight = Tensor(kaiming_normal(rng, wshape, fan_in), mode, requires_grad=True)
        self.bias = Tensor(np.zeros(spec.out_channels), mode, requires_grad=True) if spec.bias else None

    @property
    def temporal(self):
        return self.spec.kernel[0] != 1

    def parameters(self):
        yield "weight", self.weight
        if self.bias is not None:
            yield "bias", self.bias

    def __call__(self, x, training=False):
        if self.temporal:
            return conv_temporal(x, self.spec, self.weight, self.bias)
        return conv_spatial(x, self.spec, self.weight, self.bias)


class BatchNorm:
    """Per-channel batch normalization over (B, T, H, W) with running stats."""

    def __init__(self, channels, rng, mode, name, eps=None, momentum=0.1):
        self.channels = channels
        self.name = name
        self.mode = mode
        # binary16 cannot hold variance guards much below 1e-4
        self.eps = eps if eps is not None else (1e-3 if mode.rounds_arithmetic else 1e-5)
        self.momentum = momentum
        self.gamma = Tensor(np.ones(channels), mode, requires_grad=True)
        self.beta = Tensor(np.zeros(channels), mode, requires_grad=True)
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)

    def parameters(self):
        yield "gamma", self.gamma
        yield "beta", self.beta

    def _round(self, arr):
        return tc.f16_round(arr) if self.mode.rounds_arithmetic else arr

    def __call__(self, x, training=False):
        b, c, t, h, w = x.shape
        if c != self.channels:
            raise ValueError(f"expected {self.channels} channels, got {c}")
        shape = (1, c, 1, 1, 1)
        if training:
            n = b * t * h * w
            if n < 2:
                raise ValueError("batchnorm needs a per-channel population of at least 2")
            mean = x.mean(axis=(0, 2, 3, 4))
            xc = x - mean.reshape(shape)
            var = (xc * xc).mean(axis=(0, 2, 3, 4))
            m = self.momentum
            self.running_mean = self._round(
                self._round((1.0 - m) * self.running_mean) + self._round(m * mean.data)
            )
            self.running_var = self._round(
                self._round((1.0 - m) * self.running_var) + self._round(m * var.data)
            )
        else:
            mean = Tensor(self.running_mean, x.mode)
            var = Tensor(self.running_var, x.mode)
            xc = x - mean.reshape(shape)
        inv = 1.0 / tc.sqrt(var + self.eps)
        y = xc * inv.reshape(shape)
        gamma, beta = _maybe_qat(self.gamma), _maybe_qat(self.beta)
        return _qat_out(y * gamma.reshape(shape) + beta.reshape(shape))


class Linear:
    def __init__(self, in_features, out_features, rng, mode, name):
        self.in_features = in_features
        self.out_features = out_features
        self.name = name
        self.weight = Tensor(
            kaiming_normal(rng, (out_features, in_features), in_features), mode, requires_grad=True
        )
        self.bias = Tensor(np.zeros(out_features), mode, requires_grad=True)

    def parameters(self):
        yield "weight", self.weight
        yield "bias", self.bias

    def __call__(self, x, training=False):
        return linear(x, self.weight, self.bias)
