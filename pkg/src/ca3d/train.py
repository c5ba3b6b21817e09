"""Training loop, evaluation, frame-shuffle control, and experiment reports."""

import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tc
from .layers import cross_entropy
from .model import build_model
from .quantize import PreParamStore, TrainingHealth, sgd_step_direct, sgd_step_preparam
from .tensor import PURE16_PREPARAM


@dataclass
class TrainOptions:
    epochs: int = 30
    lr: float = 0.01
    momentum: float = 0.9
    batch_size: int = 8
    seed: int = 0
    augment: bool = False
    clip_norm: float = 2.0  # global gradient-norm clip; 0 disables
    val_every: int = 0  # 0 disables per-epoch validation


@dataclass
class EvalResult:
    accuracy: float
    halfwidth: float
    loss: float


@dataclass
class TrainReport:
    mode: str = "full32"
    scale_t: float = 0.1
    seed: int = 0
    param_count: int = 0
    gflops: float = 0.0
    records: list = field(default_factory=list)
    finals: list = field(default_factory=list)
    frames_per_sec: float = 0.0

    def add_epoch(self, epoch, split, acc, loss, overflows=0, underflows=0, nans=0):
        self.records.append(
            dict(epoch=epoch, split=split, acc=acc, loss=loss,
                 overflows=overflows, underflows=underflows, nans=nans)
        )

    def add_final(self, split, acc, halfwidth, loss):
        self.finals.append(dict(split=split, acc=acc, halfwidth=halfwidth, loss=loss))

    def health_totals(self):
        out = {"overflows": 0, "underflows": 0, "nans": 0}
        for rec in self.records:
            for key in out:
                out[key] += rec[key]
        return out

    def to_kv(self):
        lines = [
            f"meta mode={self.mode} scale_t={self.scale_t!r} seed={self.seed} "
            f"params={self.param_count} gflops={self.gflops!r} "
            f"frames_per_sec={self.frames_per_sec!r}"
        ]
        for r in self.records:
            lines.append(
                f"epoch={r['epoch']} split={r['split']} acc={r['acc']!r} loss={r['loss']!r} "
                f"overflows={r['overflows']} underflows={r['underflows']} nans={r['nans']}"
            )
        for f in self.finals:
            lines.append(
                f"final split={f['split']} acc={f['acc']!r} halfwidth={f['halfwidth']!r} "
                f"loss={f['loss']!r}"
            )
        return "\n".join(lines) + "\n"

    @classmethod
    def from_kv(cls, text):
        report = cls()
        for line in text.splitlines():
            line = line.strip()
            if not line:
                continue
            head, *pairs = line.split(" ")
            kv = dict(p.split("=", 1) for p in pairs)
            if head.startswith("meta"):
                report.mode = kv["mode"]
                report.scale_t = float(kv["scale_t"])
                report.seed = int(kv["seed"])
                report.param_count = int(kv["params"])
                report.gflops = float(kv["gflops"])
                report.frames_per_sec = float(kv["frames_per_sec"])
            elif head.startswith("final"):
                report.add_final(kv["split"], float(kv["acc"]), float(kv["halfwidth"]),
                                 float(kv["loss"]))
            else:
                kv["epoch"] = head.split("=", 1)[1]
                report.add_epoch(int(kv["epoch"]), kv["split"], float(kv["acc"]),
                                 float(kv["loss"]), int(kv["overflows"]),
                                 int(kv["underflows"]), int(kv["nans"]))
        return report

    def summary_lines(self):
        lines = [
            f"mode={self.mode} seed={self.seed} params={self.param_count:,} "
            f"gflops={self.gflops:.4f}"
        ]
        for r in self.records:
            lines.append(
                f"epoch {r['epoch']:>3} [{r['split']}] acc={r['acc']:.4f} "
                f"loss={r['loss']:.4f} overflows={r['overflows']} "
                f"underflows={r['underflows']} nans={r['nans']}"
            )
        for f in self.finals:
            lines.append(
                f"final [{f['split']}] acc={f['acc']:.4f} +-{f['halfwidth']:.4f} "
                f"loss={f['loss']:.4f}"
            )
        return lines


def _augment_clips(clips, rng):
    """Horizontal flip and random 4px-shift spatial crop, per clip."""
    out = np.array(clips)
    b, _, _, h, w = out.shape
    pad = 4
    for i in range(b):
        if rng.random() < 0.5:
            out[i] = out[i, :, :, :, ::-1]
        padded = np.pad(out[i], ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        dy, dx = rng.integers(0, 2 * pad + 1, size=2)
        out[i] = padded[:, :, dy : dy + h, dx : dx + w]
    return out


def train(config, dataset, mode, options=None, val_dataset=None):
    """Mini-batch SGD training; returns (model, report). Deterministic by seed."""
    opts = options or TrainOptions()
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    model = build_model(config, opts.seed, mode)
    params = model.parameters()
    rng = np.random.default_rng([opts.seed, 0xCA3D])
    health = TrainingHealth()
    report = TrainReport(
        mode=mode.kind, scale_t=mode.scale_t, seed=opts.seed,
        param_count=model.count_params(), gflops=model.estimate_flops(),
    )
    preparam = mode.kind == PURE16_PREPARAM
    store = PreParamStore(params, mode.scale_t, mode) if preparam else None
    velocity = None if preparam else {n: np.zeros_like(p.data) for n, p in params.items()}

    frames = 0
    clip_t = config.input_shape[1]
    started = time.perf_counter()
    for epoch in range(1, opts.epochs + 1):
        order = rng.permutation(len(dataset))
        losses = []
        correct = 0
        seen = 0
        counts = {"overflows": 0, "underflows": 0, "nans": 0}
        for start in range(0, len(dataset) - opts.batch_size + 1, opts.batch_size):
            idx = order[start : start + opts.batch_size]
            clips, labels = dataset.batch(idx)
            if opts.augment:
                clips = _augment_clips(clips, rng)
            logits = model.forward(clips, training=True, rng=rng)
            loss = cross_entropy(logits, labels)
            grads = tc.gradients(loss, params)
            if opts.clip_norm:
                sq = sum(float(np.sum(g[np.isfinite(g)] ** 2)) for g in grads.values())
                norm = np.sqrt(sq)
                if norm > opts.clip_norm:
                    scale = opts.clip_norm / norm
                    grads = {n: g * scale for n, g in grads.items()}
            if preparam:
                sgd_step_preparam(store, grads, opts.lr, opts.momentum, health)
            else:
                sgd_step_direct(params, grads, opts.lr, opts.momentum, mode, velocity, health)
            counts["overflows"] += health.overflow_count
            counts["underflows"] += health.underflow_to_zero_count
            counts["nans"] += health.nan_count
            health.reset()
            losses.append(loss.item())
            pred = np.argmax(logits.data, axis=1)
            correct += int((pred == labels).sum())
            seen += len(idx)
            frames += len(idx) * clip_t
        report.add_epoch(epoch, "train", correct / max(seen, 1),
                         float(np.mean(losses)) if losses else float("nan"),
                         counts["overflows"], counts["underflows"], counts["nans"])
        if val_dataset is not None and opts.val_every and epoch % opts.val_every == 0:
            res = evaluate(model, val_dataset)
            report.add_epoch(epoch, "val", res.accuracy, res.loss)
    elapsed = time.perf_counter() - started
    report.frames_per_sec = frames / elapsed if elapsed > 0 else 0.0
    return model, report


def evaluate(model, dataset, batch_size=16):
    """Single-crop, single-clip accuracy with a 95% binomial half-width."""
    n = len(dataset)
    if n == 0:
        raise ValueError("dataset is empty")
    correct = 0
    loss_sum = 0.0
    with tc.no_grad():
        for start in range(0, n, batch_size):
            idx = np.arange(start, min(start + batch_size, n))
            clips, labels = dataset.batch(idx)
            logits = model.forward(clips, training=False)
            loss_sum += cross_entropy(logits, labels).item() * len(idx)
            correct += int((np.argmax(logits.data, axis=1) == labels).sum())
    acc = correct / n
    halfwidth = 1.96 * np.sqrt(acc * (1.0 - acc) / n)
    return EvalResult(acc, float(halfwidth), loss_sum / n)


def shuffle_frames_control(model, dataset, seed=0, batch_size=16):
    """Evaluate with each clip's frames randomly permuted in time (seeded)."""
    rng = np.random.default_rng(seed)
    n = len(dataset)
    correct = 0
    with tc.no_grad():
        for start in range(0, n, batch_size):
            idx = np.arange(start, min(start + batch_size, n))
            clips, labels = dataset.batch(idx)
            clips = np.array(clips)
            for i in range(len(idx)):
                clips[i] = clips[i][:, rng.permutation(clips.shape[2])]
            logits = model.forward(clips, training=False)
            correct += int((np.argmax(logits.data, axis=1) == labels).sum())
    return correct / n
