"""Command-line interface: train, eval, bench-attn, bench-flops, bench-kernels, report.

Configuration comes from flags and an optional flat `key = value` config file
(`#` starts a comment); flags override file values. Every command writes its
artifacts under --out and is reproducible given the same arguments and seed:
time-derived values (timestamp, measured throughput) are isolated to the
single header line of each file.
"""

import argparse
import os
import sys
import time

import numpy as np

from . import backend
from . import tensor as tc
from .attention import AttentionConfig, AttentionParams, full_attention_reference, local_temporal_mhsa
from .data import FrameFolderDataset, generate_synthetic
from .model import (build_model, ca3d_config, ca3d_l_config, checkpoint_load,
                    checkpoint_save, tiny_config)
from .quantize import static_quantize_model
from .tensor import FULL32, NumericMode, Tensor
from .train import TrainOptions, evaluate, shuffle_frames_control, train

COMMANDS = ("train", "eval", "bench-attn", "bench-flops", "bench-kernels", "report")
MODELS = ("ca3d", "ca3d-l", "tiny")

# reference figures reported for the full architecture (headline comparison)
REFERENCE_PARAMS = 7e6
REFERENCE_GFLOPS = 6.3

CONFIG_KEYS = {
    "model": str, "mode": str, "scale-t": float, "seed": int, "data": str,
    "epochs": int, "lr": float, "batch": int, "window": int, "out": str,
    "ckpt": str, "t-values": str, "train-samples": int, "test-samples": int,
    "clip-norm": float,
}


def parse_config_file(path):
    """Flat `key = value` lines; unknown keys are rejected."""
    values = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value'")
            key, _, val = line.partition("=")
            key = key.strip()
            if key not in CONFIG_KEYS:
                raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
            values[key] = CONFIG_KEYS[key](val.strip())
    return values


def _build_parser():
    parser = argparse.ArgumentParser(prog="ca3d", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="flat key = value config file")
        p.add_argument("--model", choices=MODELS, default=None)
        p.add_argument("--mode", default=None, help="full32|qat|f16|f16-naive|static")
        p.add_argument("--scale-t", dest="scale_t", type=float, default=None)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--data", default=None, help="'synthetic' or a frame-folder path")
        p.add_argument("--epochs", type=int, default=None)
        p.add_argument("--lr", type=float, default=None)
        p.add_argument("--batch", type=int, default=None)
        p.add_argument("--window", type=int, default=None)
        p.add_argument("--out", default=None)
        p.add_argument("--ckpt", default=None, help="checkpoint path (eval)")
        p.add_argument("--t-values", dest="t_values", default=None,
                       help="comma-separated temporal lengths (bench-attn)")
        p.add_argument("--train-samples", dest="train_samples", type=int, default=None)
        p.add_argument("--test-samples", dest="test_samples", type=int, default=None)
        p.add_argument("--clip-norm", dest="clip_norm", type=float, default=None)
    return parser


_DEFAULTS = dict(
    model="tiny", mode="full32", scale_t=0.1, seed=0, data="synthetic",
    epochs=30, lr=0.01, batch=8, window=3, out="runs", ckpt=None,
    t_values="4,8,16,32", train_samples=512, test_samples=128, clip_norm=2.0,
)


class RunConfig:
    """Validated, merged (defaults < config file < flags) run settings."""

    def __init__(self, args):
        merged = dict(_DEFAULTS)
        if args.config:
            file_vals = parse_config_file(args.config)
            merged.update({k.replace("-", "_"): v for k, v in file_vals.items()})
        for key in _DEFAULTS:
            flag = getattr(args, key, None)
            if flag is not None:
                merged[key] = flag
        self.command = args.command
        self.model = merged["model"]
        self.mode = NumericMode.parse(merged["mode"], merged["scale_t"])
        self.seed = int(merged["seed"])
        self.data = merged["data"]
        self.epochs = int(merged["epochs"])
        self.lr = float(merged["lr"])
        self.batch = int(merged["batch"])
        self.window = int(merged["window"])
        self.out = merged["out"]
        self.ckpt = merged["ckpt"]
        self.train_samples = int(merged["train_samples"])
        self.test_samples = int(merged["test_samples"])
        self.clip_norm = float(merged["clip_norm"])
        self.t_values = tuple(int(v) for v in str(merged["t_values"]).split(","))
        if self.model not in MODELS:
            raise ValueError(f"unknown model {self.model!r}")
        if self.epochs < 0 or self.batch <= 0 or self.lr <= 0:
            raise ValueError("epochs must be >= 0, batch and lr positive")
        if self.window < 1 or self.window % 2 == 0:
            raise ValueError("window must be an odd positive integer")
        if min(self.t_values) < 1:
            raise ValueError("t-values must be positive")


def _datasets(cfg):
    if cfg.data == "synthetic":
        if cfg.model == "tiny":
            t, h = 8, 16
        else:
            t, h = 16, 112
        train_ds = generate_synthetic(cfg.seed, cfg.train_samples, t=t, h=h, w=h)
        test_ds = generate_synthetic(cfg.seed + 1, cfg.test_samples, t=t, h=h, w=h)
        return train_ds, test_ds, (3, t, h, h), 4
    ds = FrameFolderDataset(cfg.data)
    n = len(ds)
    split = max(1, int(0.8 * n))
    rng = np.random.default_rng(cfg.seed)
    order = rng.permutation(n)

    class _Subset:
        def __init__(self, base, idx):
            self.base, self.idx = base, np.asarray(idx)
            self.num_classes = base.num_classes

        def __len__(self):
            return len(self.idx)

        def get(self, i):
            return self.base.get(int(self.idx[i]))

        def batch(self, indices):
            return self.base.batch(self.idx[np.asarray(indices)])

    return _Subset(ds, order[:split]), _Subset(ds, order[split:]), (3, 16, 112, 112), ds.num_classes


def _model_config(cfg, input_shape, num_classes):
    if cfg.model == "ca3d":
        return ca3d_config(num_classes, input_shape, attn_window=cfg.window)
    if cfg.model == "ca3d-l":
        return ca3d_l_config(num_classes, input_shape)
    return tiny_config(num_classes, input_shape, attn_window=cfg.window)


def _write(path, lines):
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def _cmd_train(cfg):
    train_ds, test_ds, input_shape, num_classes = _datasets(cfg)
    mcfg = _model_config(cfg, input_shape, num_classes)
    train_mode = NumericMode(FULL32, cfg.mode.scale_t) if cfg.mode.kind == tc.STATIC_POST_QUANT else cfg.mode
    opts = TrainOptions(epochs=cfg.epochs, lr=cfg.lr, momentum=0.9, batch_size=cfg.batch,
                        seed=cfg.seed, augment=(cfg.data != "synthetic"),
                        clip_norm=cfg.clip_norm)
    model, report = train(mcfg, train_ds, train_mode, opts)
    if cfg.mode.kind == tc.STATIC_POST_QUANT:
        model = static_quantize_model(model)
        report.mode = cfg.mode.kind
    res = evaluate(model, test_ds)
    report.add_final("test", res.accuracy, res.halfwidth, res.loss)
    checkpoint_save(model, os.path.join(cfg.out, "model.ckpt"))
    _write(os.path.join(cfg.out, "metrics.kv"), report.to_kv().splitlines())
    header = (f"# run completed {time.strftime('%Y-%m-%dT%H:%M:%S')} "
              f"frames/s={report.frames_per_sec:.1f}")
    log = [header] + report.summary_lines()
    _write(os.path.join(cfg.out, "train.log"), log)
    print("\n".join(report.summary_lines()[-3:]))
    return 0


def _cmd_eval(cfg):
    ckpt = cfg.ckpt or os.path.join(cfg.out, "model.ckpt")
    model = checkpoint_load(ckpt)
    _, test_ds, input_shape, num_classes = _datasets(cfg)
    if tuple(model.config.input_shape) != tuple(input_shape):
        raise ValueError(
            f"checkpoint expects clips {model.config.input_shape}, dataset provides {input_shape}"
        )
    res = evaluate(model, test_ds)
    shuffled = shuffle_frames_control(model, test_ds, seed=cfg.seed)
    lines = [
        f"checkpoint={ckpt} mode={model.mode.kind}",
        f"accuracy={res.accuracy:.4f} halfwidth={res.halfwidth:.4f} loss={res.loss:.4f}",
        f"frame_shuffled_accuracy={shuffled:.4f}",
    ]
    _write(os.path.join(cfg.out, "eval.txt"), lines)
    print("\n".join(lines))
    return 0


def _cmd_bench_attn(cfg):
    channels, heads = 16, 4
    acfg_any = lambda max_t: AttentionConfig(channels, heads, channels // heads, cfg.window, max_t)
    rng = np.random.default_rng(cfg.seed)
    params = AttentionParams(acfg_any(max(cfg.t_values)), rng, NumericMode(FULL32))
    lines = [f"window={cfg.window} channels={channels} heads={heads}"]
    local_counts = {}
    oracle_counts = {}
    for t_len in cfg.t_values:
        x = Tensor(rng.normal(size=(1, channels, t_len, 2, 2)), NumericMode(FULL32))
        acfg = acfg_any(max(cfg.t_values))
        with tc.no_grad():
            with tc.op_counter as counter:
                local_temporal_mhsa(x, params, acfg)
        local_counts[t_len] = counter.macs
        _, oracle_counts[t_len] = full_attention_reference(x.data, params, acfg)
        lines.append(
            f"T={t_len} local_macs={local_counts[t_len]} full_attention_macs={oracle_counts[t_len]}"
        )
    ts = sorted(local_counts)
    if len(ts) >= 2:
        slope = (local_counts[ts[1]] - local_counts[ts[0]]) / (ts[1] - ts[0])
        intercept = local_counts[ts[0]] - slope * ts[0]
        exact = all(local_counts[t] == slope * t + intercept for t in ts)
        lines.append(f"affine_fit macs = {slope:.1f}*T + {intercept:.1f} exact={exact}")
        if len(ts) >= 2 and ts[-1] == 2 * ts[-2]:
            ratio = oracle_counts[ts[-1]] / oracle_counts[ts[-2]]
            lines.append(f"full_attention_ratio MAC({ts[-1]})/MAC({ts[-2]})={ratio:.3f}")
    _write(os.path.join(cfg.out, "bench_attn.txt"), lines)
    print("\n".join(lines))
    return 0


def _cmd_bench_flops(cfg):
    input_shape = (3, 16, 112, 112) if cfg.model != "tiny" else (3, 8, 16, 16)
    mcfg = _model_config(cfg, input_shape, 101 if cfg.model != "tiny" else 4)
    model = build_model(mcfg, cfg.seed, NumericMode(FULL32))
    params = model.count_params()
    gflops = model.estimate_flops()
    lines = [
        f"model={cfg.model} input={'x'.join(map(str, input_shape))}",
        f"layers={model.count_layers()}",
        f"parameters={params}",
        f"gflops_per_clip={gflops:.3f}",
    ]
    if cfg.model in ("ca3d", "ca3d-l"):
        lines += [
            f"reference_parameters={int(REFERENCE_PARAMS)} (headline figure for the 4-block model)",
            f"reference_gflops={REFERENCE_GFLOPS}",
            f"parameters_ratio_vs_reference={params / REFERENCE_PARAMS:.2f}",
            f"gflops_ratio_vs_reference={gflops / REFERENCE_GFLOPS:.2f}",
            "note=full-width 3x3 residual columns exceed the headline figures; "
            "see README (bottleneck columns give a smaller variant)",
        ]
        bcfg = ca3d_config(101, input_shape, bottleneck=True) if cfg.model == "ca3d" \
            else ca3d_l_config(101, input_shape, bottleneck=True)
        bmodel = build_model(bcfg, cfg.seed, NumericMode(FULL32))
        lines.append(f"bottleneck_variant_parameters={bmodel.count_params()}")
        lines.append(f"bottleneck_variant_gflops={bmodel.estimate_flops():.3f}")
    _write(os.path.join(cfg.out, "bench_flops.txt"), lines)
    print("\n".join(lines))
    return 0


def _cmd_bench_kernels(cfg):
    impls = backend.implementations()
    rng = np.random.default_rng(cfg.seed)
    sizes = [(2048, 147, 8), (1024, 288, 32), (512, 576, 64)]
    lines = [f"active_backend={backend.BACKEND}"]
    for n, k, m in sizes:
        a = impls["fallback"].round_half(rng.normal(size=(n, k)))
        b = impls["fallback"].round_half(rng.normal(size=(k, m)))
        ref = None
        row = [f"matmul {n}x{k}x{m}:"]
        for name, impl in sorted(impls.items()):
            t0 = time.perf_counter()
            out = impl.matmul_half(a, b, 1)
            dt_s = time.perf_counter() - t0
            if ref is None:
                ref = out
            agree = bool(np.array_equal(out, ref, equal_nan=True))
            row.append(f"{name}={n * k * m / dt_s / 1e6:.0f}MMAC/s bitexact={agree}")
        lines.append(" ".join(row))
    _write(os.path.join(cfg.out, "bench_kernels.txt"), lines)
    print("\n".join(lines))
    return 0


def _cmd_report(cfg):
    from .train import TrainReport

    path = os.path.join(cfg.out, "metrics.kv")
    with open(path) as fh:
        report = TrainReport.from_kv(fh.read())
    print("\n".join(report.summary_lines()))
    totals = report.health_totals()
    print(f"health totals: overflows={totals['overflows']} "
          f"underflows={totals['underflows']} nans={totals['nans']}")
    return 0


_HANDLERS = {
    "train": _cmd_train,
    "eval": _cmd_eval,
    "bench-attn": _cmd_bench_attn,
    "bench-flops": _cmd_bench_flops,
    "bench-kernels": _cmd_bench_kernels,
    "report": _cmd_report,
}


def run(argv):
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = RunConfig(args)
        os.makedirs(cfg.out, exist_ok=True)
        return _HANDLERS[cfg.command](cfg)
    except (ValueError, FileNotFoundError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main():
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
