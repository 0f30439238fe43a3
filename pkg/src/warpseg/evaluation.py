"""Segmentation metrics, key-frame-distance sweeps, MAC counts and latency."""
from __future__ import annotations

import csv
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .data import IGNORE
from .models import (BackboneConfig, conv_specs, correction_specs, frozen, keyframe_contexts,
                     nkfc_conv_names, nkfc_forward, predict)


class EmptyEvaluationError(ValueError):
    pass


class ConfusionMatrix:
    """K×K counts, rows = ground truth, columns = prediction."""

    def __init__(self, num_classes, counts=None):
        self.num_classes = num_classes
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64) if counts is None else counts

    def update(self, pred, gt, ignore_index=IGNORE):
        pred = np.asarray(pred).ravel()
        gt = np.asarray(gt).ravel()
        if pred.shape != gt.shape:
            raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
        keep = gt != ignore_index
        k = self.num_classes
        idx = gt[keep].astype(np.int64) * k + pred[keep].astype(np.int64)
        self.counts += np.bincount(idx, minlength=k * k).reshape(k, k)
        return self

    def __add__(self, other):
        return ConfusionMatrix(self.num_classes, self.counts + other.counts)

    @property
    def total(self):
        return int(self.counts.sum())

    def iou(self):
        tp = np.diag(self.counts).astype(np.float64)
        union = self.counts.sum(0) + self.counts.sum(1) - tp
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(union > 0, tp / np.maximum(union, 1), np.nan)

    def miou(self):
        if self.total == 0:
            raise EmptyEvaluationError("no scored pixels")
        return float(np.nanmean(self.iou()))

    def pixel_accuracy(self):
        if self.total == 0:
            raise EmptyEvaluationError("no scored pixels")
        return float(np.trace(self.counts) / self.total)


@dataclass
class EvalReport:
    per_class_iou: np.ndarray
    miou: float
    pixel_accuracy: float
    per_t: list = field(default_factory=list)       # rows (T, variant, mIoU)
    macs: dict = field(default_factory=dict)
    latency: dict = field(default_factory=dict)

    @classmethod
    def from_confusion(cls, cm):
        return cls(cm.iou(), cm.miou(), cm.pixel_accuracy())


def miou(preds, gts, num_classes):
    """mIoU over classes with a non-empty union; 255 labels are ignored."""
    preds, gts = list(preds), list(gts)
    if not preds:
        raise EmptyEvaluationError("no label maps given")
    cm = ConfusionMatrix(num_classes)
    for p, g in zip(preds, gts, strict=True):
        cm.update(p, g)
    return EvalReport.from_confusion(cm)


# --------------------------------------------------------------------------
# key-frame distance sweep

@dataclass
class Variant:
    name: str
    params: dict
    layer: int
    use_cfr: bool = False
    use_rga: bool = False


def raw_warp_variant(key_params):
    """Plain warping of the key frame's final decoder features (no heads, no fusion)."""
    return Variant("warp", frozen(key_params), 3)


@dataclass
class SweepResult:
    t_max: int
    key: ConfusionMatrix
    per_t: dict            # (T, variant) -> ConfusionMatrix
    pooled: dict           # variant -> ConfusionMatrix over T = 1..t_max

    def table(self):
        rows = [(0, name, self.key.miou()) for name in self.pooled]
        for t in range(1, self.t_max + 1):
            rows.extend((t, name, self.per_t[t, name].miou()) for name in self.pooled)
        return rows

    def miou(self, variant, t=None):
        if t == 0:
            return self.key.miou()
        cm = self.pooled[variant] if t is None else self.per_t[t, variant]
        return cm.miou()

    def __add__(self, other):
        return SweepResult(self.t_max, self.key + other.key,
                           {k: v + other.per_t[k] for k, v in self.per_t.items()},
                           {k: v + other.pooled[k] for k, v in self.pooled.items()})


def _sweep_one(seq, key_params, variants, t_max, backbone):
    k = seq.class_count
    key_cm = ConfusionMatrix(k)
    per_t = {(t, v.name): ConfusionMatrix(k) for t in range(1, t_max + 1) for v in variants}
    pooled = {v.name: ConfusionMatrix(k) for v in variants}
    for g in range(0, len(seq.frames), seq.gop_length):
        if g + t_max >= len(seq.frames):
            break
        key = seq.frames[g]
        logits, ctxs = keyframe_contexts(key.image, key_params, backbone)
        key_cm.update(predict(logits), key.label)
        for v in variants:
            cfg = backbone.with_layer(v.layer)
            ctx = ctxs[v.layer]
            for t in range(1, t_max + 1):
                f = seq.frames[g + t]
                logits, ctx = nkfc_forward(f.image, ctx, f.motion, f.residual, v.params, cfg,
                                           use_cfr=v.use_cfr, use_rga=v.use_rga)
                pred = predict(logits)
                per_t[t, v.name].update(pred, f.label)
                pooled[v.name].update(pred, f.label)
    return SweepResult(t_max, key_cm, per_t, pooled)


def sweep_T(sequences, key_params, variants, t_max, backbone=None, jobs=1):
    """Chain 1..t_max non-key frames from every GOP's I-frame, scoring each distance.

    ``variants`` is a list of :class:`Variant`. Frames at distance exactly T
    from their GOP's key frame are pooled into the T row.
    """
    backbone = backbone or BackboneConfig()
    sequences = list(sequences)
    if not sequences:
        raise EmptyEvaluationError("no sequences to evaluate")
    for seq in sequences:
        if t_max >= seq.gop_length:
            raise ValueError(f"t_max {t_max} must be < gop_length {seq.gop_length}")
    if t_max < 0:
        raise ValueError("t_max must be >= 0")
    key = frozen(key_params)
    variants = [Variant(v.name, frozen(v.params), v.layer, v.use_cfr, v.use_rga) for v in variants]
    if jobs > 1:
        with ThreadPoolExecutor(jobs) as pool:
            parts = list(pool.map(lambda s: _sweep_one(s, key, variants, t_max, backbone), sequences))
    else:
        parts = [_sweep_one(s, key, variants, t_max, backbone) for s in sequences]
    out = parts[0]
    for p in parts[1:]:
        out = out + p
    return out


def write_per_t(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["T", "variant", "mIoU"])
        for t, name, value in rows:
            w.writerow([t, name, f"{value:.6f}"])


def write_per_class(named_cms, class_names, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["variant"] + list(class_names) + ["mIoU"])
        for name, cm in named_cms.items():
            w.writerow([name] + [f"{x:.6f}" for x in cm.iou()] + [f"{cm.miou():.6f}"])


# --------------------------------------------------------------------------
# cost accounting

_OUT_STRIDE = {"enc.h1.a": 2, "enc.h1.b": 2, "enc.h2.a": 4, "enc.h2.b": 4, "enc.h3.a": 8,
               "enc.h3.b": 8, "dec.lat3": 8, "dec.lat2": 4, "dec.fuse2": 4, "dec.lat1": 2,
               "dec.fuse1": 2, "dec.cls": 2}


def _conv_macs(spec, height, width, stride):
    o, i, k, _, _ = spec
    return o * i * k * k * (height // stride) * (width // stride)


def flop_breakdown(config, path="nkfc", use_cfr=False, use_rga=False, height=96, width=128):
    """Multiply-accumulates per conv (plus bilinear warping) for one frame."""
    specs = conv_specs(config)
    if path == "key":
        return {n: _conv_macs(s, height, width, _OUT_STRIDE[n]) for n, s in specs.items()}
    if path != "nkfc":
        raise ValueError(f"path must be 'key' or 'nkfc', got {path!r}")
    out = {n: _conv_macs(specs[n], height, width, _OUT_STRIDE[n]) for n in nkfc_conv_names(config)}
    s = config.context_stride()
    out["warp"] = 4 * config.context_channels() * (height // s) * (width // s)
    extra = correction_specs(config)
    if use_cfr:
        out["cfr"] = _conv_macs(extra["cfr"], height, width, s)
    if use_rga:
        out["rga"] = _conv_macs(extra["rga"], height, width, s)
    return out


def count_flops(config, path="nkfc", use_cfr=False, use_rga=False, height=96, width=128):
    return sum(flop_breakdown(config, path, use_cfr, use_rga, height, width).values())


# --------------------------------------------------------------------------
# latency

def _stats(samples):
    a = np.asarray(samples) * 1e3
    return {"median_ms": float(np.median(a)), "p95_ms": float(np.percentile(a, 95)),
            "samples": len(a)}


def bench(seq, key_params, nkfc_params, config, use_cfr=False, use_rga=False, repeats=20, warmup=2):
    """Per-frame wall clock for the key and non-key paths, timed separately.

    Non-key frames are chained from their GOP's key frame, as in inference.
    Sub-timers (heads, warp, correction, fusion) are per-frame medians.
    """
    key = frozen(key_params)
    nk = frozen(nkfc_params)
    keys = [f for f in seq.frames if f.kind == "I"]
    if not keys:
        raise ValueError("sequence has no key frames")
    for _ in range(warmup):
        keyframe_contexts(keys[0].image, key, config)
    key_t, nk_t, subs = [], [], []
    i = 0
    frames = seq.frames
    ctx = None
    while len(key_t) < repeats or len(nk_t) < repeats:
        f = frames[i % len(frames)]
        i += 1
        if f.kind == "I":
            t0 = time.perf_counter()
            ctx = keyframe_contexts(f.image, key, config)[1][config.warp_layer]
            dt = time.perf_counter() - t0
            if len(key_t) < repeats:
                key_t.append(dt)
            continue
        sub = {}
        t0 = time.perf_counter()
        _, ctx = nkfc_forward(f.image, ctx, f.motion, f.residual, nk, config,
                              use_cfr=use_cfr, use_rga=use_rga, timer=sub)
        dt = time.perf_counter() - t0
        if len(nk_t) < repeats:
            nk_t.append(dt)
            subs.append(sub)
    names = ("heads", "warp", "correction", "fusion")
    return {"key": _stats(key_t), "nonkey": _stats(nk_t),
            "subtimers_ms": {n: float(np.median([s.get(n, 0.0) for s in subs]) * 1e3) for n in names},
            "subtimer_totals_s": {n: float(sum(s.get(n, 0.0) for s in subs)) for n in names},
            "nonkey_total_s": float(sum(nk_t))}


def bench_key(seq, key_params, config, repeats=20, warmup=2):
    """Per-frame wall clock of the key path alone (over the sequence's I-frames)."""
    key = frozen(key_params)
    keys = [f for f in seq.frames if f.kind == "I"]
    if not keys:
        raise ValueError("sequence has no key frames")
    for _ in range(warmup):
        keyframe_contexts(keys[0].image, key, config)
    samples = []
    for i in range(repeats):
        t0 = time.perf_counter()
        keyframe_contexts(keys[i % len(keys)].image, key, config)
        samples.append(time.perf_counter() - t0)
    return _stats(samples)


def bench_interleaved(seq, key_params, paths, config, repeats=40, warmup=2):
    """Median/p95 per-frame latency of the key path and several non-key paths.

    ``paths`` maps a name to ``(nkfc_params, warp_layer, use_cfr, use_rga)``.
    Each round times every path once, so slow drifts in machine load hit all
    paths alike. Non-key frames are chained from the GOP's key frame.
    """
    key = frozen(key_params)
    keys = [f for f in seq.frames if f.kind == "I"]
    if not keys:
        raise ValueError("sequence has no key frames")
    setups = {n: (frozen(p), config.with_layer(layer), cfr, rga) for n, (p, layer, cfr, rga) in paths.items()}
    samples = {"key": [], **{n: [] for n in setups}}
    ctx = {}
    i = 0
    for r in range(warmup + repeats):
        f = seq.frames[i % len(seq.frames)]
        i += 1
        if f.kind == "I":
            t0 = time.perf_counter()
            ctxs = keyframe_contexts(f.image, key, config)[1]
            dt = time.perf_counter() - t0
            ctx = {n: ctxs[cfg.warp_layer] for n, (_, cfg, _, _) in setups.items()}
            f = seq.frames[i % len(seq.frames)]
            i += 1
        else:
            t0 = time.perf_counter()
            keyframe_contexts(f.image, key, config)
            dt = time.perf_counter() - t0
        if r >= warmup:
            samples["key"].append(dt)
        for n, (p, cfg, cfr, rga) in setups.items():
            t0 = time.perf_counter()
            _, ctx[n] = nkfc_forward(f.image, ctx[n], f.motion, f.residual, p, cfg, use_cfr=cfr, use_rga=rga)
            if r >= warmup:
                samples[n].append(time.perf_counter() - t0)
    return {n: _stats(v) for n, v in samples.items()}


def write_bench(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["path", "variant", "macs", "median_ms", "p95_ms"])
        for r in rows:
            w.writerow([r["path"], r["variant"], r["macs"], f"{r['median_ms']:.4f}", f"{r['p95_ms']:.4f}"])
