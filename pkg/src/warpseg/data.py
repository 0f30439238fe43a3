"""Synthetic compressed-domain video: scenes, GOP sequences and their container.

Images are quantised to multiples of 1/256 so that the codec identity
``frame == warp(prev, mv) + residual`` holds bit-exactly in float32.
"""
from __future__ import annotations

import colorsys
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .warp import MotionMap, warp_image

IGNORE = 255
CLASS_NAMES = ("background", "box", "ball", "blob")
RIGID_CLASSES = (1, 2)
NONRIGID_CLASSES = (3,)

MAGIC = b"MVSQ"
VERSION = 1
_HEADER = struct.Struct("<4sHIIIII")
_RECORD = struct.Struct("<cBI")
_HAS_MOTION, _HAS_RESIDUAL, _HAS_LABEL = 1, 2, 4


class ContainerError(Exception):
    pass


class MalformedHeaderError(ContainerError):
    pass


class VersionError(ContainerError):
    pass


class TruncatedError(ContainerError):
    pass


class ChecksumError(ContainerError):
    def __init__(self, frame_index):
        super().__init__(f"checksum mismatch in frame {frame_index}")
        self.frame_index = frame_index


def substream(seed, name):
    """Independent generator for a named purpose ("data", "init", "shuffle", ...)."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode())])


def quantize(img):
    return (np.clip(np.round(np.asarray(img) * 256.0), 0, 255) / 256.0).astype(np.float32)


@dataclass(eq=False)
class Frame:
    kind: str
    image: np.ndarray
    motion: MotionMap | None = None
    residual: np.ndarray | None = None
    label: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in ("I", "P"):
            raise ValueError(f"frame kind must be 'I' or 'P', got {self.kind!r}")
        if self.kind == "I" and (self.motion is not None or self.residual is not None):
            raise ValueError("I-frames carry no motion or residual")
        if self.kind == "P" and (self.motion is None or self.residual is None):
            raise ValueError("P-frames need both motion and residual")

    def __eq__(self, other):
        if not isinstance(other, Frame) or self.kind != other.kind:
            return False
        return (_same(self.image, other.image) and self.motion == other.motion
                and _same(self.residual, other.residual) and _same(self.label, other.label))


def _same(a, b):
    if a is None or b is None:
        return a is None and b is None
    return a.dtype == b.dtype and np.array_equal(a, b)


@dataclass(eq=False)
class GopSequence:
    frames: list
    gop_length: int = 12
    class_count: int = 4

    def __len__(self):
        return len(self.frames)

    def __eq__(self, other):
        return (isinstance(other, GopSequence) and self.gop_length == other.gop_length
                and self.class_count == other.class_count
                and len(self.frames) == len(other.frames)
                and all(a == b for a, b in zip(self.frames, other.frames)))

    @property
    def shape(self):
        return self.frames[0].image.shape[:2]

    def validate(self):
        for i, f in enumerate(self.frames):
            expect = "I" if i % self.gop_length == 0 else "P"
            if f.kind != expect:
                raise ValueError(f"frame {i} should be an {expect}-frame")
            if f.label is not None:
                bad = (f.label >= self.class_count) & (f.label != IGNORE)
                if bad.any():
                    raise ValueError(f"frame {i} has labels outside [0, {self.class_count})")


def schedule(seq):
    """Yield ``(frame, is_key)``; every I-frame is a key frame."""
    for frame in seq.frames:
        yield frame, frame.kind == "I"


# --------------------------------------------------------------------------
# scenes

@dataclass
class Sprite:
    cls: int
    shape: str                      # box | ball | blob
    center: tuple                   # (y, x)
    radius: tuple                   # (ry, rx)
    velocity: tuple = (0, 0)        # (vy, vx) pixels per frame
    color: tuple = (0.8, 0.2, 0.2)
    jitter: float = 0.0             # relative axis oscillation, blobs only
    jitter_freq: float = 0.9
    phase: float = 0.0

    @property
    def rigid(self):
        return self.shape != "blob"


@dataclass
class SceneSpec:
    height: int = 96
    width: int = 128
    class_count: int = 4
    background_class: int = 0
    sprites: list = field(default_factory=list)
    noise: float = 0.0
    seed: int = 0
    gop_length: int = 12
    background: str = "texture"     # texture | plain
    block_size: int = 0             # 0 → dense motion, else block-constant

    def validate(self):
        if self.height < 1 or self.width < 1:
            raise ValueError("canvas must be non-empty")
        if self.gop_length < 1:
            raise ValueError("gop_length must be >= 1")
        if not 0 <= self.background_class < self.class_count:
            raise ValueError("background_class must be < class_count")
        for s in self.sprites:
            if not 0 <= s.cls < self.class_count:
                raise ValueError(f"sprite class {s.cls} >= class_count {self.class_count}")
            if s.shape not in ("box", "ball", "blob"):
                raise ValueError(f"unknown sprite shape {s.shape!r}")
        if self.block_size and (self.height % self.block_size or self.width % self.block_size):
            raise ValueError("block_size must divide the canvas")
        if self.background not in ("texture", "plain"):
            raise ValueError(f"unknown background {self.background!r}")


# base hue per sprite class; colours are drawn around it with overlapping spread
_CLASS_HUE = {"box": 0.0, "ball": 1 / 3, "blob": 2 / 3}


def random_scene(seed, height=96, width=128, boxes=3, balls=3, blobs=3, max_speed=3,
                 noise=0.01, gop_length=12, block_size=0, size=(0.08, 0.14), hue_spread=0.2,
                 jitter=0.6):
    """Default four-class scene: background, rigid boxes, rigid balls, deforming blobs.

    Sprite hue is only a hint of the class (neighbouring classes overlap), so
    shape still matters.
    """
    rng = substream(seed, "scene")
    sprites = []
    shorter = min(height, width)
    kinds = ["box"] * boxes + ["ball"] * balls + ["blob"] * blobs
    rng.shuffle(kinds)
    for kind in kinds:
        r = float(rng.uniform(*size) * shorter)
        if kind == "box":
            radius = (r, r * float(rng.uniform(0.8, 1.25)))
        elif kind == "ball":
            radius = (r, r)
        else:
            a = float(rng.uniform(1.4, 1.8))
            radius = (r, r * a) if rng.random() < 0.5 else (r * a, r)
        while True:
            v = rng.integers(-max_speed, max_speed + 1, size=2)
            if np.abs(v).max() >= 1:
                break
        sprites.append(Sprite(
            cls=CLASS_NAMES.index(kind),
            shape=kind,
            center=(float(rng.uniform(0.2, 0.8) * height), float(rng.uniform(0.2, 0.8) * width)),
            radius=radius,
            velocity=(int(v[0]), int(v[1])),
            color=colorsys.hsv_to_rgb((_CLASS_HUE[kind] + rng.uniform(-hue_spread, hue_spread)) % 1.0,
                                      rng.uniform(0.45, 0.9), rng.uniform(0.55, 0.95)),
            jitter=jitter if kind == "blob" else 0.0,
            jitter_freq=float(rng.uniform(0.7, 1.2)),
            phase=float(rng.uniform(0, 2 * np.pi)),
        ))
    return SceneSpec(height=height, width=width, sprites=sprites, noise=noise, seed=seed,
                     gop_length=gop_length, block_size=block_size)


def _background(spec):
    h, w = spec.height, spec.width
    if spec.background == "plain":
        return np.full((h, w, 3), 0.5)
    rng = substream(spec.seed, "background")
    ys, xs = np.mgrid[0:h, 0:w] / max(h, w)
    img = np.full((h, w, 3), 0.45)
    for _ in range(4):
        fy, fx = rng.uniform(1, 6, size=2)
        ph = rng.uniform(0, 2 * np.pi)
        amp = rng.uniform(0.02, 0.06, size=3)
        img += amp * np.sin(2 * np.pi * (fy * ys + fx * xs) + ph)[..., None]
    return img


def _tracks(spec, n_frames):
    """Per-sprite centres and axes for every frame, bouncing off the canvas edges."""
    tracks = []
    for s in spec.sprites:
        pos = np.array(s.center, dtype=np.float64)
        vel = np.array(s.velocity, dtype=np.float64)
        lo = np.array([0.0, 0.0])
        hi = np.array([spec.height - 1.0, spec.width - 1.0])
        centers, axes = [], []
        for t in range(n_frames):
            if t > 0:
                nxt = pos + vel
                out = (nxt < lo) | (nxt > hi)
                vel[out] = -vel[out]
                pos = pos + vel
            centers.append(pos.copy())
            if s.jitter:
                k = 1.0 + s.jitter * np.sin(s.jitter_freq * t + s.phase)
                k2 = 1.0 + s.jitter * np.sin(s.jitter_freq * t + s.phase + 2.0)
                axes.append((s.radius[0] * k, s.radius[1] * k2))
            else:
                axes.append(tuple(s.radius))
        tracks.append((np.array(centers), axes))
    return tracks


def _mask(shape, kind, center, axes):
    h, w = shape
    ys, xs = np.mgrid[0:h, 0:w]
    u = (ys - center[0]) / axes[0]
    v = (xs - center[1]) / axes[1]
    if kind == "box":
        return (np.abs(u) <= 1.0) & (np.abs(v) <= 1.0)
    return u * u + v * v <= 1.0


def _render(spec, tracks, t, bg):
    img = bg.copy()
    owner = np.full((spec.height, spec.width), -1, dtype=np.int64)
    ys, xs = np.mgrid[0:spec.height, 0:spec.width]
    for i, (s, (centers, axes)) in enumerate(zip(spec.sprites, tracks)):
        m = _mask(owner.shape, s.shape, centers[t], axes[t])
        # shading is anchored to the sprite so rigid motion moves it exactly
        shade = 1.0 + 0.25 * (ys - centers[t][0]) / s.radius[0] - 0.15 * (xs - centers[t][1]) / s.radius[1]
        img[m] = np.clip(np.array(s.color)[None, :] * shade[m][:, None], 0.0, 1.0)
        owner[m] = i
    label = np.full(owner.shape, spec.background_class, dtype=np.uint8)
    classes = np.array([s.cls for s in spec.sprites], dtype=np.uint8)
    label[owner >= 0] = classes[owner[owner >= 0]] if len(classes) else spec.background_class
    return img, owner, label


def _motion(spec, tracks, t, owner):
    disp = np.zeros((len(spec.sprites) + 1, 2), dtype=np.float32)
    for i, (centers, _) in enumerate(tracks):
        disp[i] = centers[t] - centers[t - 1]
    idx = np.where(owner >= 0, owner, len(spec.sprites))
    if spec.block_size:
        b = spec.block_size
        h, w = owner.shape
        blocks = idx.reshape(h // b, b, w // b, b).transpose(0, 2, 1, 3).reshape(h // b, w // b, -1)
        major = np.apply_along_axis(lambda a: np.bincount(a).argmax(), 2, blocks)
        idx = np.repeat(np.repeat(major, b, axis=0), b, axis=1)
    return MotionMap(disp[idx, 1].copy(), disp[idx, 0].copy())


def generate_sequence(spec, num_gops):
    """Render ``num_gops`` GOPs with exact motion, residual and label side data."""
    spec.validate()
    if num_gops < 1:
        raise ValueError("num_gops must be >= 1")
    n = num_gops * spec.gop_length
    tracks = _tracks(spec, n)
    bg = _background(spec)
    noise_rng = substream(spec.seed, "noise")
    frames = []
    prev = None
    for t in range(n):
        img, owner, label = _render(spec, tracks, t, bg)
        if spec.noise:
            img = img + spec.noise * noise_rng.standard_normal(img.shape)
        img = quantize(img)
        if t % spec.gop_length == 0:
            frames.append(Frame("I", img, label=label))
        else:
            mv = _motion(spec, tracks, t, owner)
            res = img - warp_image(prev, mv, "nearest")
            frames.append(Frame("P", img, motion=mv, residual=res, label=label))
        prev = img
    return GopSequence(frames, gop_length=spec.gop_length, class_count=spec.class_count)


def make_dataset(seed, count, num_gops=1, **scene_kw):
    """``count`` independent random scenes derived from one seed."""
    rng = substream(seed, "data")
    seeds = rng.integers(0, 2**31 - 1, size=count)
    return [generate_sequence(random_scene(int(s), **scene_kw), num_gops) for s in seeds]


# --------------------------------------------------------------------------
# container

def _frame_payload(frame):
    flags = 0
    parts = [np.ascontiguousarray(frame.image.transpose(2, 0, 1), dtype="<f4").tobytes()]
    if frame.motion is not None:
        flags |= _HAS_MOTION
        parts.append(np.ascontiguousarray(frame.motion.dx, dtype="<f4").tobytes())
        parts.append(np.ascontiguousarray(frame.motion.dy, dtype="<f4").tobytes())
    if frame.residual is not None:
        flags |= _HAS_RESIDUAL
        parts.append(np.ascontiguousarray(frame.residual.transpose(2, 0, 1), dtype="<f4").tobytes())
    if frame.label is not None:
        flags |= _HAS_LABEL
        parts.append(np.ascontiguousarray(frame.label, dtype=np.uint8).tobytes())
    return flags, b"".join(parts)


def encode_sequence(seq):
    h, w = seq.shape
    out = [_HEADER.pack(MAGIC, VERSION, h, w, seq.gop_length, seq.class_count, len(seq.frames))]
    for frame in seq.frames:
        flags, payload = _frame_payload(frame)
        out.append(_RECORD.pack(frame.kind.encode(), flags, len(payload)))
        out.append(payload)
        out.append(struct.pack("<I", zlib.crc32(payload)))
    return b"".join(out)


def decode_sequence(buf):
    if len(buf) < _HEADER.size:
        raise MalformedHeaderError("file shorter than the header")
    magic, version, h, w, gop, classes, count = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise MalformedHeaderError(f"bad magic {magic!r}")
    if version != VERSION:
        raise VersionError(f"unsupported container version {version}")
    if h == 0 or w == 0 or gop == 0:
        raise MalformedHeaderError("zero-sized dimension in header")
    plane = h * w * 4
    off = _HEADER.size
    frames = []
    for i in range(count):
        if off + _RECORD.size > len(buf):
            raise TruncatedError(f"frame {i} record header truncated")
        kind, flags, size = _RECORD.unpack_from(buf, off)
        off += _RECORD.size
        if off + size + 4 > len(buf):
            raise TruncatedError(f"frame {i} payload truncated")
        payload = buf[off:off + size]
        (crc,) = struct.unpack_from("<I", buf, off + size)
        off += size + 4
        if zlib.crc32(payload) != crc:
            raise ChecksumError(i)
        expect = 3 * plane
        expect += 2 * plane if flags & _HAS_MOTION else 0
        expect += 3 * plane if flags & _HAS_RESIDUAL else 0
        expect += h * w if flags & _HAS_LABEL else 0
        if size != expect or kind not in (b"I", b"P"):
            raise MalformedHeaderError(f"frame {i} record is inconsistent with the header")
        pos = 0

        def take(nbytes, dtype, shape):
            nonlocal pos
            arr = np.frombuffer(payload, dtype=dtype, count=nbytes // np.dtype(dtype).itemsize,
                                offset=pos).reshape(shape)
            pos += nbytes
            return arr

        image = take(3 * plane, "<f4", (3, h, w)).transpose(1, 2, 0).astype(np.float32)
        motion = residual = label = None
        if flags & _HAS_MOTION:
            dx = take(plane, "<f4", (h, w)).astype(np.float32)
            dy = take(plane, "<f4", (h, w)).astype(np.float32)
            motion = MotionMap(dx, dy)
        if flags & _HAS_RESIDUAL:
            residual = take(3 * plane, "<f4", (3, h, w)).transpose(1, 2, 0).astype(np.float32)
        if flags & _HAS_LABEL:
            label = take(h * w, np.uint8, (h, w)).copy()
        frames.append(Frame(kind.decode(), image, motion, residual, label))
    if off != len(buf):
        raise MalformedHeaderError("trailing bytes after the last frame")
    return GopSequence(frames, gop_length=gop, class_count=classes)


def save_sequence(seq, path):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_sequence(seq))
    tmp.replace(path)


def load_sequence(path):
    return decode_sequence(Path(path).read_bytes())
