"""CAST block assembly and the CA3D / CA3D-L architectures.

A CAST block is a spatial part (strided conv -> ReLU -> BatchNorm -> residual
column) followed by an optional temporal part (windowed temporal attention ->
BatchNorm -> residual column of temporal convolutions) and an optional
temporal max pool. Residual stages use pre-activation ordering; zeroing the
final conv of every stage turns each column into the identity map.

The layer-count convention counts convolutions, attention blocks (one each)
and the classifier, ignoring nonlinearities, normalization and pooling: the
default 4-block network counts 5 + 5 + 10 + 10 + 1 = 31 layers.
"""

import struct
import zlib
from dataclasses import dataclass

import numpy as np

from . import tensor as tc
from .attention import AttentionConfig, TemporalLocalAttention
from .layers import BatchNorm, Conv, ConvSpec, Linear, dropout, global_avg_pool, max_pool_temporal, relu
from .tensor import NumericMode, Tensor

CHECKPOINT_MAGIC = b"CA3DCKP1"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class CastBlockConfig:
    channels: int
    spatial_kernel: int
    spatial_stride: int
    spatial_column_stages: int
    has_temporal_attention: bool = False
    heads: int = 0
    head_dim: int = 0
    attn_window: int = 3
    temporal_column_stages: int = 0
    temporal_pool: tuple = None
    bottleneck_columns: bool = False

    def __post_init__(self):
        if self.channels <= 0 or self.spatial_kernel <= 0 or self.spatial_stride <= 0:
            raise ValueError("bad block geometry")
        if self.spatial_column_stages < 0 or self.temporal_column_stages < 0:
            raise ValueError("column stages must be >= 0")
        if self.has_temporal_attention and self.heads * self.head_dim != self.channels:
            raise ValueError(
                f"heads*head_dim ({self.heads}x{self.head_dim}) must equal channels "
                f"({self.channels})"
            )
        if self.temporal_pool is not None:
            size, stride = self.temporal_pool
            if size <= 0 or stride <= 0:
                raise ValueError("bad temporal pool")


@dataclass(frozen=True)
class ModelConfig:
    blocks: tuple
    num_classes: int
    dropout_rate: float = 0.5
    input_shape: tuple = (3, 16, 112, 112)

    def __post_init__(self):
        if self.num_classes <= 0:
            raise ValueError("num_classes must be positive")
        if not (0.0 <= self.dropout_rate < 1.0):
            raise ValueError("dropout_rate must be in [0, 1)")
        if len(self.input_shape) != 4:
            raise ValueError("input_shape is (channels, T, H, W)")


def ca3d_config(num_classes=101, input_shape=(3, 16, 112, 112), bottleneck=False,
                column_stages=(2, 2, 2, 2), attn_window=3):
    """The default 4-block architecture (31 layers with 2-stage columns)."""
    s1, s2, s3, s4 = column_stages
    blocks = (
        CastBlockConfig(64, 7, 2, s1, bottleneck_columns=bottleneck),
        CastBlockConfig(128, 3, 2, s2, temporal_pool=(2, 2), bottleneck_columns=bottleneck),
        CastBlockConfig(256, 3, 2, s3, has_temporal_attention=True, heads=4, head_dim=64,
                        attn_window=attn_window, temporal_column_stages=s3,
                        temporal_pool=(2, 2), bottleneck_columns=bottleneck),
        CastBlockConfig(512, 3, 2, s4, has_temporal_attention=True, heads=8, head_dim=64,
                        attn_window=attn_window, temporal_column_stages=s4,
                        bottleneck_columns=bottleneck),
    )
    return ModelConfig(blocks, num_classes, 0.5, input_shape)


def ca3d_l_config(num_classes=400, input_shape=(3, 16, 112, 112), bottleneck=False):
    """Depth variant: 4-stage columns at block 3 and 8-stage at block 4."""
    return ca3d_config(num_classes, input_shape, bottleneck, column_stages=(2, 2, 4, 8))


def tiny_config(num_classes=4, input_shape=(3, 8, 16, 16), attn_window=3):
    """Desk-scale variant: the same structure with channels 8/16/32/64."""
    blocks = (
        CastBlockConfig(8, 7, 2, 2),
        CastBlockConfig(16, 3, 2, 2, temporal_pool=(2, 2)),
        CastBlockConfig(32, 3, 2, 2, has_temporal_attention=True, heads=4, head_dim=8,
                        attn_window=attn_window, temporal_column_stages=2, temporal_pool=(2, 2)),
        CastBlockConfig(64, 3, 2, 2, has_temporal_attention=True, heads=8, head_dim=8,
                        attn_window=attn_window, temporal_column_stages=2),
    )
    return ModelConfig(blocks, num_classes, 0.5, input_shape)


def _conv_out(n, k, s, p):
    return (n + 2 * p - k) // s + 1


def shape_schedule(config):
    """Per-block (C, T, H, W) after each block, from the configured input."""
    c, t, h, w = config.input_shape
    out = []
    for blk in config.blocks:
        pad = blk.spatial_kernel // 2
        h = _conv_out(h, blk.spatial_kernel, blk.spatial_stride, pad)
        w = _conv_out(w, blk.spatial_kernel, blk.spatial_stride, pad)
        c = blk.channels
        if blk.temporal_pool is not None:
            size, stride = blk.temporal_pool
            t = (t - size) // stride + 1
        out.append((c, t, h, w))
    return out


def _attention_t(config, index):
    """Temporal length seen by block `index`'s attention (pools apply at block ends)."""
    t = config.input_shape[1]
    for blk in config.blocks[:index]:
        if blk.temporal_pool is not None:
            size, stride = blk.temporal_pool
            t = (t - size) // stride + 1
    return t


class ResidualStage:
    """Pre-activation residual stage: x + conv2(relu(bn2(conv1(relu(bn1(x)))))).

    Bottleneck variant uses three convolutions (1x1 reduce, 3 mix, 1x1 expand)
    at a quarter of the width.
    """

    def __init__(self, channels, temporal, rng, mode, name, bottleneck=False):
        self.name = name
        self.units = []
        make = ConvSpec.temporal if temporal else ConvSpec.spatial
        if bottleneck:
            width = max(channels // 4, 1)
            plan = [(channels, width, 1, 0), (width, width, 3, 1), (width, channels, 1, 0)]
        else:
            plan = [(channels, channels, 3, 1), (channels, channels, 3, 1)]
        for i, (cin, cout, k, pad) in enumerate(plan, 1):
            bn = BatchNorm(cin, rng, mode, f"{name}.bn{i}")
            conv = Conv(make(cin, cout, k, 1, pad), rng, mode, f"{name}.conv{i}")
            self.units.append((bn, conv))
        # stages start as identity: keeps activation variance flat with depth
        # and tames the early-layer gradient blowup of deep residual stacks
        self.units[-1][1].weight.data[:] = 0.0

    @property
    def conv_count(self):
        return len(self.units)

    def parameters(self):
        for bn, conv in self.units:
            for pname, p in bn.parameters():
                yield f"{bn.name}.{pname}", p
            for pname, p in conv.parameters():
                yield f"{conv.name}.{pname}", p

    def batchnorms(self):
        for bn, _ in self.units:
            yield bn

    def __call__(self, x, training=False):
        h = x
        for bn, conv in self.units:
            h = conv(relu(bn(h, training)), training)
        return x + h


class CastBlock:
    def __init__(self, in_channels, cfg, attn_t, rng, mode, name):
        self.cfg = cfg
        self.name = name
        pad = cfg.spatial_kernel // 2
        self.head = Conv(
            ConvSpec.spatial(in_channels, cfg.channels, cfg.spatial_kernel, cfg.spatial_stride, pad),
            rng, mode, f"{name}.conv",
        )
        self.head_bn = BatchNorm(cfg.channels, rng, mode, f"{name}.bn")
        self.spatial_column = [
            ResidualStage(cfg.channels, False, rng, mode, f"{name}.scol{i + 1}", cfg.bottleneck_columns)
            for i in range(cfg.spatial_column_stages)
        ]
        self.attn = None
        self.attn_bn = None
        self.temporal_column = []
        if cfg.has_temporal_attention:
            acfg = AttentionConfig(cfg.channels, cfg.heads, cfg.head_dim, cfg.attn_window, attn_t)
            self.attn = TemporalLocalAttention(acfg, rng, mode, f"{name}.attn")
            self.attn_bn = BatchNorm(cfg.channels, rng, mode, f"{name}.attn_bn")
            self.temporal_column = [
                ResidualStage(cfg.channels, True, rng, mode, f"{name}.tcol{i + 1}", cfg.bottleneck_columns)
                for i in range(cfg.temporal_column_stages)
            ]

    def parameters(self):
        for pname, p in self.head.parameters():
            yield f"{self.head.name}.{pname}", p
        for pname, p in self.head_bn.parameters():
            yield f"{self.head_bn.name}.{pname}", p
        for stage in self.spatial_column:
            yield from stage.parameters()
        if self.attn is not None:
            for pname, p in self.attn.parameters():
                yield f"{self.attn.name}.{pname}", p
            for pname, p in self.attn_bn.parameters():
                yield f"{self.attn_bn.name}.{pname}", p
            for stage in self.temporal_column:
                yield from stage.parameters()

    def batchnorms(self):
        yield self.head_bn
        for stage in self.spatial_column:
            yield from stage.batchnorms()
        if self.attn_bn is not None:
            yield self.attn_bn
            for stage in self.temporal_column:
                yield from stage.batchnorms()

    def layer_count(self):
        n = 1 + sum(s.conv_count for s in self.spatial_column)
        if self.attn is not None:
            n += 1 + sum(s.conv_count for s in self.temporal_column)
        return n

    def __call__(self, x, training=False):
        x = self.head_bn(relu(self.head(x, training)), training)
        for stage in self.spatial_column:
            x = stage(x, training)
        if self.attn is not None:
            x = self.attn_bn(self.attn(x, training), training)
            for stage in self.temporal_column:
                x = stage(x, training)
        if self.cfg.temporal_pool is not None:
            size, stride = self.cfg.temporal_pool
            x = max_pool_temporal(x, size, stride)
        return x


class Ca3dModel:
    """Instantiated network: ordered parameters plus block structure."""

    def __init__(self, config, mode, rng):
        self.config = config
        self.mode = mode
        self.blocks = []
        cin = config.input_shape[0]
        for i, blk in enumerate(config.blocks):
            self.blocks.append(
                CastBlock(cin, blk, _attention_t(config, i), rng, mode, f"block{i + 1}")
            )
            cin = blk.channels
        self.classifier = Linear(cin, config.num_classes, rng, mode, "classifier")
        self._params = dict(self._iter_params())

    def _iter_params(self):
        for block in self.blocks:
            yield from block.parameters()
        for pname, p in self.classifier.parameters():
            yield f"classifier.{pname}", p

    def parameters(self):
        return dict(self._params)

    def batchnorms(self):
        for block in self.blocks:
            yield from block.batchnorms()

    def forward(self, clip, training=False, rng=None, shapes=None):
        """(B, C, T, H, W) clip -> (B, num_classes) logits."""
        x = clip if isinstance(clip, Tensor) else Tensor(clip, self.mode)
        if x.ndim != 5 or x.shape[1:] != tuple(self.config.input_shape):
            raise ValueError(
                f"expected clips shaped (B, {', '.join(map(str, self.config.input_shape))}), "
                f"got {x.shape}"
            )
        if self.mode.kind == tc.QAT:
            from .quantize import fake_quantize

            x = fake_quantize(x)
        for block in self.blocks:
            x = block(x, training)
            if shapes is not None:
                shapes.append(x.shape[1:])
        x = global_avg_pool(x)
        x = dropout(x, self.config.dropout_rate, training, rng)
        return self.classifier(x, training)

    def __call__(self, clip, training=False, rng=None):
        return self.forward(clip, training, rng)

    # -- accounting ----------------------------------------------------------

    def count_params(self):
        return sum(p.data.size for p in self._params.values())

    def count_layers(self):
        return sum(b.layer_count() for b in self.blocks) + 1

    def estimate_flops(self, input_shape=None):
        """Analytic forward GFLOPs (2 * MACs) for one clip.

        Counts convolutions, linear layers and the attention QKV / windowed
        score / value / output paths.
        """
        shape = tuple(input_shape) if input_shape is not None else tuple(self.config.input_shape)
        c, t, h, w = shape
        macs = 0
        for blk in self.config.blocks:
            pad = blk.spatial_kernel // 2
            ho = _conv_out(h, blk.spatial_kernel, blk.spatial_stride, pad)
            wo = _conv_out(w, blk.spatial_kernel, blk.spatial_stride, pad)
            macs += t * ho * wo * blk.channels * (c * blk.spatial_kernel ** 2)
            c, h, w = blk.channels, ho, wo
            stage_specs = (
                [(c, max(c // 4, 1), 1), (max(c // 4, 1), max(c // 4, 1), 3), (max(c // 4, 1), c, 1)]
                if blk.bottleneck_columns
                else [(c, c, 3), (c, c, 3)]
            )
            for cin, cout, k in stage_specs * blk.spatial_column_stages:
                macs += t * h * w * cout * (cin * k * k)
            if blk.has_temporal_attention:
                n = h * w
                macs += 4 * n * t * c * c  # QKV + output projections
                window_pairs = sum(max(t - abs(o), 0) for o in range(-(blk.attn_window // 2), blk.attn_window // 2 + 1))
                macs += 2 * n * blk.heads * window_pairs * blk.head_dim  # scores + value mix
                for cin, cout, k in (
                    [(c, max(c // 4, 1), 1), (max(c // 4, 1), max(c // 4, 1), 1), (max(c // 4, 1), c, 3)]
                    if blk.bottleneck_columns
                    else [(c, c, 3), (c, c, 3)]
                ) * blk.temporal_column_stages:
                    macs += t * h * w * cout * (cin * k)
            if blk.temporal_pool is not None:
                size, stride = blk.temporal_pool
                t = (t - size) // stride + 1
        macs += c * self.config.num_classes
        return 2.0 * macs / 1e9

    # -- state ----------------------------------------------------------------

    def state_dict(self):
        state = {f"p:{name}": np.array(p.data) for name, p in self._params.items()}
        for bn in self.batchnorms():
            state[f"r:{bn.name}.mean"] = np.array(bn.running_mean)
            state[f"r:{bn.name}.var"] = np.array(bn.running_var)
        return state

    def load_state(self, state):
        rounder = tc.f16_round if self.mode.rounds_arithmetic else lambda a: a
        for name, p in self._params.items():
            arr = np.asarray(state[f"p:{name}"], dtype=np.float64)
            if arr.shape != p.data.shape:
                raise ValueError(f"shape mismatch for {name}: {arr.shape} vs {p.data.shape}")
            p.data = np.asarray(rounder(arr))
        for bn in self.batchnorms():
            bn.running_mean = np.asarray(rounder(np.asarray(state[f"r:{bn.name}.mean"], dtype=np.float64)))
            bn.running_var = np.asarray(rounder(np.asarray(state[f"r:{bn.name}.var"], dtype=np.float64)))

    @classmethod
    def from_state(cls, config, mode, state):
        model = cls(config, mode, np.random.default_rng(0))
        model.load_state(state)
        return model


def build_model(config, seed, mode):
    """Instantiate all layers with seeded initialization (deterministic)."""
    return Ca3dModel(config, mode, np.random.default_rng(seed))


# ---------------------------------------------------------------------------
# config text round-trip (used by the checkpoint format)
# ---------------------------------------------------------------------------


def config_to_text(config):
    lines = [
        f"num_classes = {config.num_classes}",
        f"dropout_rate = {config.dropout_rate!r}",
        "input_shape = " + ",".join(map(str, config.input_shape)),
    ]
    for i, blk in enumerate(config.blocks, 1):
        p = f"block.{i}."
        lines.append(f"{p}channels = {blk.channels}")
        lines.append(f"{p}spatial_kernel = {blk.spatial_kernel}")
        lines.append(f"{p}spatial_stride = {blk.spatial_stride}")
        lines.append(f"{p}spatial_column_stages = {blk.spatial_column_stages}")
        lines.append(f"{p}has_temporal_attention = {int(blk.has_temporal_attention)}")
        lines.append(f"{p}heads = {blk.heads}")
        lines.append(f"{p}head_dim = {blk.head_dim}")
        lines.append(f"{p}attn_window = {blk.attn_window}")
        lines.append(f"{p}temporal_column_stages = {blk.temporal_column_stages}")
        pool = "none" if blk.temporal_pool is None else ",".join(map(str, blk.temporal_pool))
        lines.append(f"{p}temporal_pool = {pool}")
        lines.append(f"{p}bottleneck_columns = {int(blk.bottleneck_columns)}")
    return "\n".join(lines) + "\n"


def config_from_text(text):
    kv = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, val = line.partition("=")
        kv[key.strip()] = val.strip()
    nblocks = max(int(k.split(".")[1]) for k in kv if k.startswith("block."))
    blocks = []
    for i in range(1, nblocks + 1):
        p = f"block.{i}."
        pool = kv[f"{p}temporal_pool"]
        blocks.append(CastBlockConfig(
            channels=int(kv[f"{p}channels"]),
            spatial_kernel=int(kv[f"{p}spatial_kernel"]),
            spatial_stride=int(kv[f"{p}spatial_stride"]),
            spatial_column_stages=int(kv[f"{p}spatial_column_stages"]),
            has_temporal_attention=bool(int(kv[f"{p}has_temporal_attention"])),
            heads=int(kv[f"{p}heads"]),
            head_dim=int(kv[f"{p}head_dim"]),
            attn_window=int(kv[f"{p}attn_window"]),
            temporal_column_stages=int(kv[f"{p}temporal_column_stages"]),
            temporal_pool=None if pool == "none" else tuple(int(v) for v in pool.split(",")),
            bottleneck_columns=bool(int(kv[f"{p}bottleneck_columns"])),
        ))
    return ModelConfig(
        blocks=tuple(blocks),
        num_classes=int(kv["num_classes"]),
        dropout_rate=float(kv["dropout_rate"]),
        input_shape=tuple(int(v) for v in kv["input_shape"].split(",")),
    )


# ---------------------------------------------------------------------------
# checkpoints: magic, version, config text, per-parameter records, checksum
# ---------------------------------------------------------------------------


def checkpoint_save(model, path):
    """Write a checkpoint; pure16/static modes store binary16 payloads."""
    half = model.mode.rounds_arithmetic
    dtype_tag, np_dtype = (1, "<f2") if half else (0, "<f4")
    buf = bytearray()
    buf += CHECKPOINT_MAGIC
    buf += struct.pack("<H", CHECKPOINT_VERSION)
    kind = model.mode.kind.encode()
    buf += struct.pack("<H", len(kind)) + kind
    buf += struct.pack("<d", model.mode.scale_t)
    cfg = config_to_text(model.config).encode()
    buf += struct.pack("<I", len(cfg)) + cfg
    state = model.state_dict()
    buf += struct.pack("<I", len(state))
    for name, arr in state.items():
        nb = name.encode()
        buf += struct.pack("<H", len(nb)) + nb
        buf += struct.pack("<BB", dtype_tag, arr.ndim)
        for dim in arr.shape:
            buf += struct.pack("<I", dim)
        buf += np.ascontiguousarray(arr, dtype=np_dtype).tobytes()
    buf += struct.pack("<I", zlib.crc32(bytes(buf)) & 0xFFFFFFFF)
    with open(path, "wb") as fh:
        fh.write(bytes(buf))


def checkpoint_load(path, mode=None, expect_num_classes=None):
    """Read a checkpoint back into a model; verifies checksum and config."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < len(CHECKPOINT_MAGIC) + 6:
        raise ValueError("checkpoint truncated")
    body, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise ValueError("checkpoint corrupt: checksum mismatch")
    if not raw.startswith(CHECKPOINT_MAGIC):
        raise ValueError("not a checkpoint file (bad magic)")
    off = len(CHECKPOINT_MAGIC)

    def take(fmt):
        nonlocal off
        size = struct.calcsize(fmt)
        vals = struct.unpack_from(fmt, body, off)
        off += size
        return vals

    (version,) = take("<H")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    (klen,) = take("<H")
    kind = body[off : off + klen].decode()
    off += klen
    (scale_t,) = take("<d")
    (clen,) = take("<I")
    config = config_from_text(body[off : off + clen].decode())
    off += clen
    if expect_num_classes is not None and config.num_classes != expect_num_classes:
        raise ValueError(
            f"checkpoint has num_classes={config.num_classes}, expected {expect_num_classes}"
        )
    (nentries,) = take("<I")
    state = {}
    for _ in range(nentries):
        (nlen,) = take("<H")
        name = body[off : off + nlen].decode()
        off += nlen
        dtype_tag, ndim = take("<BB")
        shape = tuple(take("<" + "I" * ndim)) if ndim else ()
        np_dtype = "<f2" if dtype_tag == 1 else "<f4"
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        nbytes = count * (2 if dtype_tag == 1 else 4)
        arr = np.frombuffer(body, dtype=np_dtype, count=count, offset=off).reshape(shape)
        off += nbytes
        state[name] = arr.astype(np.float64)
    final_mode = mode if mode is not None else NumericMode(kind, scale_t)
    return Ca3dModel.from_state(config, final_mode, state)
