"""Key-frame CNN, non-key-frame CNN and the feature correction modules.

Encoder: three head stages (two 3×3 convs each, the first with stride 2)
giving features at strides 2, 4 and 8. Decoder: FPN-style conv-add fusion

    p3 = relu(lat3(h3))                       stride 8
    c1 = up(p3)                               stride 4   <- Layer1 context
    p2 = relu(fuse2(c1 + lat2(h2)))
    c2 = up(p2)                               stride 2   <- Layer2 context
    p1 = relu(fuse1(c2 + lat1(h1)))           stride 2   <- Layer3 context
    logits = up(cls(p1))                      full res

A context is taken just before the lateral fusion at its level, so the
non-key-frame network keeps exactly the heads whose laterals still follow
(Layer1: h1, h2; Layer2: h1; Layer3: none) and the spatial features f_t
handed to the rectifier are the lateral projection at the context level.
"""
from __future__ import annotations

import struct
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor
from .warp import FeatureMap, warp_features

HEADS_KEPT = {1: 2, 2: 1, 3: 0}


@dataclass
class BackboneConfig:
    head_channels: tuple = (16, 32, 64)
    decoder_channels: tuple = (16, 32, 16)   # levels at stride 2, 4, 8
    class_count: int = 4
    warp_layer: int = 1

    def __post_init__(self):
        if self.warp_layer not in HEADS_KEPT:
            raise ValueError(f"warp_layer must be 1, 2 or 3, got {self.warp_layer}")

    @property
    def heads_kept(self):
        return HEADS_KEPT[self.warp_layer]

    def context_stride(self, layer=None):
        return {1: 4, 2: 2, 3: 2}[layer or self.warp_layer]

    def context_channels(self, layer=None):
        d1, d2, d3 = self.decoder_channels
        return {1: d3, 2: d2, 3: d1}[layer or self.warp_layer]

    def with_layer(self, layer):
        return BackboneConfig(self.head_channels, self.decoder_channels, self.class_count, layer)


def conv_specs(config):
    """Name -> (out, in, kernel, stride, padding) for every key-frame conv."""
    c1, c2, c3 = config.head_channels
    d1, d2, d3 = config.decoder_channels
    return {
        "enc.h1.a": (c1, 3, 3, 2, 1), "enc.h1.b": (c1, c1, 3, 1, 1),
        "enc.h2.a": (c2, c1, 3, 2, 1), "enc.h2.b": (c2, c2, 3, 1, 1),
        "enc.h3.a": (c3, c2, 3, 2, 1), "enc.h3.b": (c3, c3, 3, 1, 1),
        "dec.lat3": (d3, c3, 1, 1, 0),
        "dec.lat2": (d3, c2, 1, 1, 0),
        "dec.fuse2": (d2, d3, 3, 1, 1),
        "dec.lat1": (d2, c1, 1, 1, 0),
        "dec.fuse1": (d1, d2, 3, 1, 1),
        "dec.cls": (config.class_count, d1, 1, 1, 0),
    }


def correction_specs(config):
    """Convs added by the correction stage at the configured warp layer."""
    ctx = config.context_channels()
    spatial = {1: config.decoder_channels[2], 2: config.decoder_channels[1], 3: 0}[config.warp_layer]
    return {
        "cfr": (ctx, ctx + spatial, 3, 1, 1),
        "rga": (1, 6, 1, 1, 0),
    }


def nkfc_conv_names(config):
    keep = {1: ["enc.h1.a", "enc.h1.b", "enc.h2.a", "enc.h2.b", "dec.lat2", "dec.fuse2",
                "dec.lat1", "dec.fuse1", "dec.cls"],
            2: ["enc.h1.a", "enc.h1.b", "dec.lat1", "dec.fuse1", "dec.cls"],
            3: ["dec.cls"]}
    return keep[config.warp_layer]


def _init_conv(params, rng, name, spec, scale=1.0):
    o, i, k, _, _ = spec
    params[name + ".w"] = Tensor(scale * T.kaiming_uniform(rng, (o, i, k, k)), requires_grad=True)
    params[name + ".b"] = Tensor(np.zeros(o), requires_grad=True)


CFR_INIT_SCALE = 0.05
# the gate starts mostly open, so the gated path begins at the corrected path
RGA_INIT_BIAS = 2.0


def init_keyframe_params(config, rng):
    params = {}
    for name, spec in conv_specs(config).items():
        _init_conv(params, rng, name, spec)
    return params


def init_nkfc_params(key_params, config, rng):
    """NKFC parameters: copies of the retained key-frame convs plus fresh correction convs."""
    params = {}
    for name in nkfc_conv_names(config):
        for suffix in (".w", ".b"):
            if name + suffix not in key_params:
                raise KeyError(f"key-frame parameters lack {name + suffix}")
            params[name + suffix] = Tensor(key_params[name + suffix].data.copy(), requires_grad=True)
    # a near-zero CFR starts the corrected path at the plain warped path
    for name, spec in correction_specs(config).items():
        _init_conv(params, rng, name, spec, scale=CFR_INIT_SCALE if name == "cfr" else 1.0)
    if "rga.b" in params:
        params["rga.b"].data[:] = RGA_INIT_BIAS
    return params


def frozen(params):
    return {k: Tensor(v.data) for k, v in params.items()}


def _conv(x, params, name, stride=None, padding=None):
    w = params[name + ".w"]
    k = w.shape[-1]
    if stride is None:
        stride = 2 if name.endswith(".a") else 1
    if padding is None:
        padding = k // 2
    return T.conv2d(x, w, params[name + ".b"], stride=stride, padding=padding)


def image_tensor(image):
    """H×W×3 (or N×H×W×3) image in [0,1] -> centred N×3×H×W tensor."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3:
        img = img[None]
    return Tensor(img.transpose(0, 3, 1, 2) - 0.5)


def _check_dims(x):
    h, w = x.shape[-2:]
    if h % 8 or w % 8:
        raise ShapeError(f"image {h}x{w} must be divisible by 8")


def _head(x, params, level):
    x = T.relu(_conv(x, params, f"enc.h{level}.a"))
    return T.relu(_conv(x, params, f"enc.h{level}.b"))


def _logits(p1, params, out_hw):
    return T.bilinear_resize(_conv(p1, params, "dec.cls"), *out_hw)


def keyframe_forward(image, params, config, layer=None):
    """Full per-frame network. Returns (logits N×K×H×W, context FeatureMap)."""
    logits, ctxs = keyframe_contexts(image, params, config)
    return logits, ctxs[layer or config.warp_layer]


def keyframe_contexts(image, params, config):
    """Like :func:`keyframe_forward` but returns the contexts of all three layers."""
    x = image if isinstance(image, Tensor) else image_tensor(image)
    _check_dims(x)
    h1 = _head(x, params, 1)
    h2 = _head(h1, params, 2)
    h3 = _head(h2, params, 3)
    c1 = T.upsample2x(T.relu(_conv(h3, params, "dec.lat3")))
    p2 = T.relu(_conv(c1 + _conv(h2, params, "dec.lat2"), params, "dec.fuse2"))
    c2 = T.upsample2x(p2)
    p1 = T.relu(_conv(c2 + _conv(h1, params, "dec.lat1"), params, "dec.fuse1"))
    logits = _logits(p1, params, x.shape[-2:])
    return logits, {1: FeatureMap(c1, 4), 2: FeatureMap(c2, 2), 3: FeatureMap(p1, 2)}


def cfr(warped, spatial, params):
    """Feature-space residual from the warped context and current spatial features."""
    if spatial is None:
        return _conv(warped.tensor, params, "cfr")
    if warped.stride != spatial.stride or warped.spatial != spatial.spatial:
        raise ShapeError(f"warped (stride {warped.stride}, {warped.spatial}) and spatial "
                         f"(stride {spatial.stride}, {spatial.spatial}) features disagree")
    return _conv(T.concat([warped.tensor, spatial.tensor]), params, "cfr")


def _residual_batch(residual_img):
    r = np.asarray(residual_img, dtype=np.float64)
    if r.ndim == 3:
        r = r[None]
    return r.transpose(0, 3, 1, 2)


def rga_attention(residual_img, target, params):
    """Single-channel sigmoid gate computed from the image-space residual.

    The residual is resized to the target resolution twice: as signed colour
    differences and as magnitudes, so a 1×1 conv can respond to either.
    """
    r = _residual_batch(residual_img)
    h, w = target.spatial
    signed = T.bilinear_resize(Tensor(r), h, w)
    magnitude = T.bilinear_resize(Tensor(np.abs(r)), h, w)
    return T.sigmoid(_conv(T.concat([signed, magnitude]), params, "rga"))


def rga_apply(warped, res_feat, attention):
    """F_t = warped + attention ⊙ residual (attention broadcast over channels)."""
    if res_feat.shape != warped.shape:
        raise ShapeError(f"residual {res_feat.shape} vs warped {warped.shape}")
    n, _, h, w = warped.shape
    if attention.shape not in ((n, 1, h, w), (n, warped.channels, h, w)):
        raise ShapeError(f"attention {attention.shape} does not broadcast to {warped.shape}")
    return FeatureMap(warped.tensor + attention * res_feat, warped.stride)


class _Timer:
    def __init__(self, sink):
        self.sink = sink
        self.t = time.perf_counter()

    def lap(self, name):
        now = time.perf_counter()
        if self.sink is not None:
            self.sink[name] = self.sink.get(name, 0.0) + now - self.t
        self.t = now


def nkfc_forward(image, prev_context, mv, residual, params, config,
                 use_cfr=False, use_rga=False, timer=None):
    """Non-key frame: retained heads, warped context, optional correction, fusion.

    Returns (logits, corrected context F_t) where F_t is what the next frame warps.
    ``timer`` (a dict) accumulates seconds under heads/warp/correction/fusion.
    """
    if use_rga and not use_cfr:
        raise ValueError("RGA gates the CFR residual; enable use_cfr as well")
    layer = config.warp_layer
    stride = config.context_stride()
    if prev_context.stride != stride:
        raise ShapeError(f"context stride {prev_context.stride} does not match Layer{layer} "
                         f"(stride {stride})")
    clock = _Timer(timer)
    x = image if isinstance(image, Tensor) else image_tensor(image)
    _check_dims(x)
    heads = []
    for level in range(1, config.heads_kept + 1):
        heads.append(_head(heads[-1] if heads else x, params, level))
    spatial = None
    if layer == 1:
        spatial = FeatureMap(_conv(heads[1], params, "dec.lat2"), 4)
    elif layer == 2:
        spatial = FeatureMap(_conv(heads[0], params, "dec.lat1"), 2)
    clock.lap("heads")
    warped = warp_features(prev_context, mv)
    clock.lap("warp")
    ctx = warped
    if use_cfr:
        res_feat = cfr(warped, spatial, params)
        if use_rga:
            ctx = rga_apply(warped, res_feat, rga_attention(residual, warped, params))
        else:
            ctx = FeatureMap(warped.tensor + res_feat, warped.stride)
    clock.lap("correction")
    out_hw = x.shape[-2:]
    y = ctx.tensor
    if layer == 1:
        y = T.upsample2x(T.relu(_conv(y + spatial.tensor, params, "dec.fuse2")))
        y = T.relu(_conv(y + _conv(heads[0], params, "dec.lat1"), params, "dec.fuse1"))
    elif layer == 2:
        y = T.relu(_conv(y + spatial.tensor, params, "dec.fuse1"))
    logits = _logits(y, params, out_hw)
    clock.lap("fusion")
    return logits, ctx


def predict(logits):
    return np.argmax(logits.data, axis=1).astype(np.uint8)


# --------------------------------------------------------------------------
# checkpoints: magic, version, count, then (name, shape, f64 payload) records

CKPT_MAGIC = b"TWCK"
CKPT_VERSION = 1


def encode_params(params, meta=None):
    import json
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode()
    out = [struct.pack("<4sHI", CKPT_MAGIC, CKPT_VERSION, len(params)),
           struct.pack("<I", len(meta_bytes)), meta_bytes]
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name].data, dtype="<f8")
        nb = name.encode()
        out.append(struct.pack("<H", len(nb)) + nb)
        out.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.tobytes())
    return b"".join(out)


def decode_params(buf):
    import json
    magic, version, count = struct.unpack_from("<4sHI", buf, 0)
    if magic != CKPT_MAGIC:
        raise ValueError("not a checkpoint file")
    if version != CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    off = struct.calcsize("<4sHI")
    (mlen,) = struct.unpack_from("<I", buf, off)
    off += 4
    meta = json.loads(buf[off:off + mlen].decode())
    off += mlen
    params = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", buf, off)
        off += 2
        name = buf[off:off + nlen].decode()
        off += nlen
        (ndim,) = struct.unpack_from("<B", buf, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", buf, off)
        off += 4 * ndim
        n = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(buf, dtype="<f8", count=n, offset=off).reshape(shape).astype(np.float64)
        off += 8 * n
        params[name] = Tensor(arr, requires_grad=True)
    if off != len(buf):
        raise ValueError("trailing bytes in checkpoint")
    return params, meta


def save_params(params, path, meta=None):
    """Write-then-rename so an interrupted run never leaves a partial checkpoint."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_params(params, meta))
    tmp.replace(path)


def load_params(path):
    return decode_params(Path(path).read_bytes())
