"""Token-centered local temporal attention with linear complexity.

Each temporal token attends to the <= k tokens of the window centered on
itself (truncated at sequence ends, no wraparound or phantom padding tokens),
independently at every spatial location. The implementation walks the k
window offsets and gathers only in-window keys, so no TxT score matrix is
ever materialized and the multiply count is affine in T.

`full_attention_reference` is the deliberately quadratic oracle: explicit
masked TxT scores per location, used by the equivalence tests and the
complexity benchmark.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as tc
from .layers import kaiming_normal, linear
from .tensor import Tensor


@dataclass(frozen=True)
class AttentionConfig:
    channels: int
    heads: int
    head_dim: int
    window: int
    max_t: int

    def __post_init__(self):
        if self.channels != self.heads * self.head_dim:
            raise ValueError(
                f"channels ({self.channels}) must equal heads*head_dim "
                f"({self.heads}x{self.head_dim})"
            )
        if self.window < 1 or self.window % 2 == 0:
            raise ValueError("window must be an odd positive integer")
        if self.max_t < 1:
            raise ValueError("max_t must be positive")


class AttentionParams:
    """QKV/output projections plus the additive positional embedding table."""

    def __init__(self, cfg, rng, mode):
        c = cfg.channels
        self.wq = Tensor(kaiming_normal(rng, (c, c), c), mode, requires_grad=True)
        self.bq = Tensor(np.zeros(c), mode, requires_grad=True)
        self.wk = Tensor(kaiming_normal(rng, (c, c), c), mode, requires_grad=True)
        self.bk = Tensor(np.zeros(c), mode, requires_grad=True)
        self.wv = Tensor(kaiming_normal(rng, (c, c), c), mode, requires_grad=True)
        self.bv = Tensor(np.zeros(c), mode, requires_grad=True)
        self.wo = Tensor(kaiming_normal(rng, (c, c), c), mode, requires_grad=True)
        self.bo = Tensor(np.zeros(c), mode, requires_grad=True)
        self.pos_emb = Tensor(rng.normal(0.0, 0.02, size=(cfg.max_t, c)), mode, requires_grad=True)

    def parameters(self):
        for name in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo", "pos_emb"):
            yield name, getattr(self, name)


def build_window_mask(t_len, window):
    """Boolean TxT matrix: mask[t, s] iff |t - s| <= (window-1)/2."""
    if window < 1 or window % 2 == 0:
        raise ValueError("window must be an odd positive integer")
    idx = np.arange(t_len)
    return np.abs(idx[:, None] - idx[None, :]) <= (window - 1) // 2


def add_positional_embedding(x, pos_emb):
    """x[b,c,t,h,w] + pos_emb[t,c], broadcast over batch and space."""
    b, c, t, h, w = x.shape
    if t > pos_emb.shape[0]:
        raise ValueError(f"temporal length {t} exceeds embedding capacity {pos_emb.shape[0]}")
    table = pos_emb[:t].transpose(1, 0).reshape(1, c, t, 1, 1)
    return x + table


def _to_tokens(x):
    """(B,C,T,H,W) -> (N=B*H*W, T, C) token map per spatial location."""
    b, c, t, h, w = x.shape
    return x.transpose(0, 3, 4, 2, 1).reshape(b * h * w, t, c)


def _from_tokens(tok, b, h, w):
    n, t, c = tok.shape
    return tok.reshape(b, h, w, t, c).transpose(0, 4, 3, 1, 2)


def local_temporal_mhsa(x, params, cfg, qkv_hook=None):
    """Windowed multi-head self-attention along time at each spatial location.

    Gathers only the <= window in-window keys per query (cost affine in T).
    `qkv_hook`, when given, receives the per-head q/k/v arrays (tests).
    """
    b, c, t, h, w = x.shape
    if c != cfg.channels:
        raise ValueError(f"expected {cfg.channels} channels, got {c}")
    if t > cfg.max_t:
        raise ValueError(f"temporal length {t} exceeds max_t {cfg.max_t}")

    x = add_positional_embedding(x, params.pos_emb)
    tok = _to_tokens(x)
    n = tok.shape[0]
    flat = tok.reshape(n * t, c)

    heads, d = cfg.heads, cfg.head_dim
    scale = 1.0 / math.sqrt(d)

    def split_heads(m2d):
        return m2d.reshape(n, t, heads, d).transpose(0, 2, 1, 3)  # (N, heads, T, d)

    q = split_heads(linear(flat, params.wq, params.bq)) * scale
    k = split_heads(linear(flat, params.wk, params.bk))
    v = split_heads(linear(flat, params.wv, params.bv))
    if qkv_hook is not None:
        qkv_hook(q.data, k.data, v.data)

    radius = (cfg.window - 1) // 2
    offsets = [o for o in range(-radius, radius + 1) if t - abs(o) > 0]

    bands = []
    for o in offsets:
        t0, t1 = max(0, -o), t - max(0, o)
        qs = q[:, :, t0:t1, :]
        ks = k[:, :, t0 + o : t1 + o, :]
        scores = (qs * ks).sum(axis=3)  # (N, heads, t1-t0)
        bands.append(tc.pad_constant(scores, ((0, 0), (0, 0), (t0, t - t1)), -np.inf))
    band = tc.stack(bands, axis=3)  # (N, heads, T, n_offsets)

    peak = tc.tmax(band, axis=3, keepdims=True)
    weights = tc.exp(band - peak)  # exp(-inf) == 0: out-of-window excluded
    weights = weights / weights.sum(axis=3, keepdims=True)

    mixed = None
    for i, o in enumerate(offsets):
        t0, t1 = max(0, -o), t - max(0, o)
        wslice = weights[:, :, t0:t1, i : i + 1]
        vs = v[:, :, t0 + o : t1 + o, :]
        contrib = tc.pad_constant(wslice * vs, ((0, 0), (0, 0), (t0, t - t1), (0, 0)))
        mixed = contrib if mixed is None else mixed + contrib

    merged = mixed.transpose(0, 2, 1, 3).reshape(n * t, c)
    out = linear(merged, params.wo, params.bo)
    return _from_tokens(out.reshape(n, t, c), b, h, w)


class TemporalLocalAttention:
    """Layer wrapper owning an AttentionConfig and its parameters."""

    def __init__(self, cfg, rng, mode, name):
        self.cfg = cfg
        self.name = name
        self.params = AttentionParams(cfg, rng, mode)

    def parameters(self):
        yield from self.params.parameters()

    def __call__(self, x, training=False):
        return local_temporal_mhsa(x, self.params, self.cfg)


# ---------------------------------------------------------------------------
# quadratic reference (oracle)
# ---------------------------------------------------------------------------


def full_attention_reference(x, params, cfg):
    """Explicit masked TxT attention in plain float64 NumPy.

    Returns (output array, multiply count). The count includes the QKV/output
    projections, the query scaling, the full TxT score and value paths, and
    the softmax normalization divisions, mirroring the banded path's counting
    convention but with quadratic score/value terms.
    """
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    b, c, t, h, w = x.shape
    if t > cfg.max_t:
        raise ValueError("temporal length exceeds max_t")

    def arr(p):
        return np.asarray(p.data if isinstance(p, Tensor) else p, dtype=np.float64)

    pos = arr(params.pos_emb)[:t]
    tok = np.transpose(x, (0, 3, 4, 2, 1)).reshape(b * h * w, t, c) + pos
    n = tok.shape[0]
    heads, d = cfg.heads, cfg.head_dim

    def proj(wname, bname):
        return tok @ arr(getattr(params, wname)).T + arr(getattr(params, bname))

    q = proj("wq", "bq").reshape(n, t, heads, d).transpose(0, 2, 1, 3) / math.sqrt(d)
    k = proj("wk", "bk").reshape(n, t, heads, d).transpose(0, 2, 1, 3)
    v = proj("wv", "bv").reshape(n, t, heads, d).transpose(0, 2, 1, 3)

    mask = build_window_mask(t, cfg.window)
    scores = np.einsum("nhtd,nhsd->nhts", q, k)
    scores = np.where(mask[None, None, :, :], scores, -np.inf)
    scores -= scores.max(axis=3, keepdims=True)
    e = np.exp(scores)
    attn = e / e.sum(axis=3, keepdims=True)
    mixed = np.einsum("nhts,nhsd->nhtd", attn, v)

    merged = mixed.transpose(0, 2, 1, 3).reshape(n, t, c)
    out = merged @ arr(params.wo).T + arr(params.bo)
    out = out.reshape(b, h, w, t, c).transpose(0, 4, 3, 1, 2)

    macs = (
        4 * n * t * c * c  # QKV + output projections
        + n * t * c  # query scaling
        + 2 * n * heads * t * t * d  # TxT scores and value mixing
        + n * heads * t * t  # softmax normalization divisions
    )
    return out, macs
