"""Two-step training: the per-frame network first, then the non-key-frame
network against the frozen per-frame network."""
from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .data import IGNORE, substream
from .models import (BackboneConfig, FeatureMap, frozen, init_keyframe_params,
                     init_nkfc_params, keyframe_forward, nkfc_forward)
from .tensor import Tensor
from .warp import warp_features

log = logging.getLogger(__name__)

CURVE_FIELDS = ("iteration", "cls", "reg", "consist", "total")


@dataclass
class TrainConfig:
    lr: float = 1e-3
    weight_decay: float = 1e-7      # lambda0
    consistency: float = 10.0       # lambda1
    iterations: int = 500
    batch_size: int = 2
    seed: int = 0
    warp_layer: int = 1
    use_cfr: bool = True
    use_rga: bool = True
    fine_tune_heads: bool = True
    flip: bool = False
    crop: int = 0                   # square random crop for step one, 0 = full frame
    context_age: int = 1            # step two: input context is up to this many frames old
    unroll: int = 1                 # step two: consecutive frames per sample, gradient through all

    def __post_init__(self):
        if self.weight_decay < 0 or self.consistency < 0:
            raise ValueError("loss weights must be non-negative")
        if self.iterations <= 0 or self.batch_size <= 0:
            raise ValueError("iterations and batch_size must be positive")
        if self.unroll < 1:
            raise ValueError("unroll must be >= 1")
        if self.context_age < 1:
            raise ValueError("context_age must be >= 1")
        if self.use_rga and not self.use_cfr:
            raise ValueError("use_rga requires use_cfr")

    def as_dict(self):
        return asdict(self)


def _labeled_frames(sequences):
    return [f for seq in sequences for f in seq.frames if f.label is not None]


def _pairs(sequences):
    out = []
    for seq in sequences:
        for i in range(1, len(seq.frames)):
            prev, cur = seq.frames[i - 1], seq.frames[i]
            if cur.kind == "P" and cur.label is not None:
                out.append((seq, i))
    return out


def _reg(params, names):
    return T.weight_decay([params[n] for n in names if n.endswith(".w")])


def _random_crop(images, labels, size, rng):
    h, w = labels.shape[1:]
    if size % 8 or size > min(h, w):
        raise ValueError(f"crop {size} must be a multiple of 8 no larger than {min(h, w)}")
    out_i, out_l = [], []
    for img, lab in zip(images, labels):
        y = int(rng.integers(0, h - size + 1))
        x = int(rng.integers(0, w - size + 1))
        out_i.append(img[y:y + size, x:x + size])
        out_l.append(lab[y:y + size, x:x + size])
    return np.stack(out_i), np.stack(out_l)


def train_keyframe(sequences, config, backbone=None):
    """Minimise cls + lambda0·reg over labelled frames. Returns (params, curve)."""
    backbone = backbone or BackboneConfig(warp_layer=config.warp_layer)
    frames = _labeled_frames(sequences)
    if not frames:
        raise ValueError("no labelled frames to train on")
    params = init_keyframe_params(backbone, substream(config.seed, "init"))
    shuffle = substream(config.seed, "shuffle")
    state = T.AdamState.for_params(params, lr=config.lr)
    curve = []
    for it in range(config.iterations):
        idx = shuffle.choice(len(frames), size=config.batch_size, replace=len(frames) < config.batch_size)
        images = np.stack([frames[i].image for i in idx])
        labels = np.stack([frames[i].label for i in idx])
        if config.crop:
            images, labels = _random_crop(images, labels, config.crop, shuffle)
        if config.flip:
            flips = shuffle.random(len(idx)) < 0.5
            images[flips] = images[flips][:, :, ::-1]
            labels[flips] = labels[flips][:, :, ::-1]
        for p in params.values():
            p.zero_grad()
        logits, _ = keyframe_forward(images, params, backbone)
        cls = T.softmax_cross_entropy(logits, labels)
        reg = _reg(params, params)
        total = cls + reg * config.weight_decay
        total.backward()
        T.adam_step(params, state)
        curve.append({"iteration": it, "cls": cls.item(), "reg": reg.item(), "consist": 0.0,
                      "total": total.item()})
        if it % 100 == 0:
            log.info("keyframe it=%d loss=%.4f", it, total.item())
    return params, curve


def key_contexts(sequences, key_params, backbone):
    """Frozen per-frame context for every frame, keyed by (sequence index, frame index)."""
    fixed = frozen(key_params)
    out = {}
    for s, seq in enumerate(sequences):
        for i, f in enumerate(seq.frames):
            out[s, i] = keyframe_forward(f.image, fixed, backbone)[1].tensor.data[0]
    return out


def trainable_names(params, config):
    names = []
    for n in params:
        if n.startswith("dec."):
            names.append(n)
        elif n.startswith("enc.") and config.fine_tune_heads:
            names.append(n)
        elif n.startswith("cfr.") and config.use_cfr:
            names.append(n)
        elif n.startswith("rga.") and config.use_rga:
            names.append(n)
    return names


def _gop_start(seq, i):
    return i - i % seq.gop_length


def aged_context(seq, contexts, s, i, age):
    """Context for frame i-1 built from the frozen context of frame i-age,
    carried forward by plain warping along the stored motion (age-1 warps)."""
    ctx = contexts[s, i - age]
    if age == 1:
        return ctx
    # motion is given at full resolution; its stride follows from the context size
    stride = seq.shape[0] // ctx.shape[-2]
    fmap = FeatureMap(Tensor(ctx[None]), stride)
    for j in range(i - age + 1, i):
        fmap = warp_features(fmap, seq.frames[j].motion)
    return fmap.tensor.data[0]


def train_nkfc(sequences, key_params, config, backbone=None, contexts=None):
    """Train the non-key-frame network on (t-1, t) pairs with the key network frozen.

    Loss: cls + lambda0·reg + lambda1·consist, where consist compares the
    corrected context with the frozen network's context on frame t.

    Gradients never cross a frame boundary. With ``config.context_age`` > 1
    the context fed in for t-1 is the frozen context of an earlier frame of
    the same GOP warped forward (see :func:`aged_context`), so the correction
    also sees accumulated warping error. Returns (params, curve).
    """
    backbone = (backbone or BackboneConfig()).with_layer(config.warp_layer)
    pairs = _pairs(sequences)
    if not pairs:
        raise ValueError("no consecutive labelled (I/P, P) pairs to train on")
    params = init_nkfc_params(key_params, backbone, substream(config.seed, "init"))
    if contexts is None:
        contexts = key_contexts(sequences, key_params, backbone)
    names = trainable_names(params, config)
    train = {n: params[n] for n in names}
    live = {n: (p if n in train else Tensor(p.data)) for n, p in params.items()}
    state = T.AdamState.for_params(train, lr=config.lr)
    index = {id(seq): s for s, seq in enumerate(sequences)}
    shuffle = substream(config.seed, "shuffle")
    ages = substream(config.seed, "age")
    stride = backbone.context_stride()
    curve = []
    for it in range(config.iterations):
        idx = shuffle.choice(len(pairs), size=config.batch_size, replace=len(pairs) < config.batch_size)
        batch = [pairs[k] for k in idx]
        # window start: up to `unroll` frames back, never before the GOP's first P-frame
        starts = [max(i - config.unroll + 1, _gop_start(seq, i) + 1) for seq, i in batch]
        steps = min(i - a for (_, i), a in zip(batch, starts)) + 1
        starts = [i - steps + 1 for (_, i) in batch]
        prev_ctx = []
        for (seq, _), a in zip(batch, starts):
            age = int(ages.integers(1, min(config.context_age, a - _gop_start(seq, a)) + 1))
            prev_ctx.append(aged_context(seq, contexts, index[id(seq)], a, age))
        ctx = FeatureMap(Tensor(np.stack(prev_ctx)), stride)
        for p in train.values():
            p.zero_grad()
        cls = consist = None
        for k in range(steps):
            frames = [seq.frames[a + k] for (seq, _), a in zip(batch, starts)]
            images = np.stack([f.image for f in frames])
            labels = np.stack([f.label if f.label is not None
                               else np.full(f.image.shape[:2], IGNORE, np.uint8) for f in frames])
            residuals = np.stack([f.residual for f in frames])
            target = np.stack([contexts[index[id(seq)], a + k] for (seq, _), a in zip(batch, starts)])
            logits, ctx = nkfc_forward(images, ctx, [f.motion for f in frames], residuals, live,
                                       backbone, use_cfr=config.use_cfr, use_rga=config.use_rga)
            step_cls = T.softmax_cross_entropy(logits, labels)
            step_consist = T.l2_consistency(ctx.tensor, target)
            cls = step_cls if cls is None else cls + step_cls
            consist = step_consist if consist is None else consist + step_consist
        cls = cls * (1.0 / steps)
        consist = consist * (1.0 / steps)
        reg = _reg(live, names)
        total = cls + reg * config.weight_decay + consist * config.consistency
        if total.requires_grad:
            total.backward()
        for p in train.values():
            if p.grad is None:
                p.grad = np.zeros_like(p.data)
        T.adam_step(train, state)
        curve.append({"iteration": it, "cls": cls.item(), "reg": reg.item(),
                      "consist": consist.item(), "total": total.item()})
        if it % 100 == 0:
            log.info("nkfc it=%d loss=%.4f consist=%.4f", it, total.item(), consist.item())
    return params, curve


def write_curve(curve, path):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CURVE_FIELDS, lineterminator="\n")
        w.writeheader()
        for row in curve:
            w.writerow({k: repr(row[k]) if isinstance(row[k], float) else row[k] for k in CURVE_FIELDS})
