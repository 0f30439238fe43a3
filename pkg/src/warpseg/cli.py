"""Command line: generate, train, eval, bench, experiment, replay.

Every command writes ``<primary output>.manifest.json`` recording the exact
argument vector, the resolved configuration and sha256 checksums of inputs
and outputs; ``warpseg replay MANIFEST`` reruns it and compares checksums.

Exit codes: 0 ok, 1 usage, 2 data error, 3 internal error.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import data as D
from .evaluation import (EmptyEvaluationError, Variant, bench, bench_key, count_flops, raw_warp_variant,
                         sweep_T, write_bench, write_per_class, write_per_t)
from .models import BackboneConfig, load_params, save_params
from .tensor import ShapeError
from .training import TrainConfig, key_contexts, train_keyframe, train_nkfc, write_curve

log = logging.getLogger("warpseg")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3
MANIFEST_VERSION = 1


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# --------------------------------------------------------------------------
# helpers

def sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _atomic_text(path, text):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


def _write_csv_atomic(writer, rows, path, *extra):
    """Run one of the evaluation CSV writers through a temp file."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    writer(rows, *extra, tmp) if extra else writer(rows, tmp)
    tmp.replace(path)


def _coerce(text, like):
    if isinstance(like, bool):
        low = text.strip().lower()
        if low not in ("1", "0", "true", "false", "yes", "no", "on", "off"):
            raise ValueError(f"not a boolean: {text!r}")
        return low in ("1", "true", "yes", "on")
    if isinstance(like, int):
        return int(text)
    if isinstance(like, float):
        return float(text)
    if isinstance(like, tuple):
        return tuple(float(x) for x in text.replace(",", " ").split())
    return text.strip()


def read_config(path, section, defaults):
    """Key-value config file -> dict of overrides, typed after ``defaults``."""
    if path is None:
        return {}
    parser = configparser.ConfigParser()
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except (OSError, configparser.Error) as e:
        raise DataError(f"cannot read config {path}: {e}") from e
    if not parser.has_section(section):
        raise DataError(f"config {path} has no [{section}] section")
    out = {}
    for key, text in parser.items(section):
        if key not in defaults:
            raise DataError(f"config {path}: unknown key '{key}' in [{section}]")
        try:
            out[key] = _coerce(text, defaults[key])
        except ValueError as e:
            raise DataError(f"config {path}: bad value for '{key}': {e}") from e
    return out


SCENE_DEFAULTS = {"height": 96, "width": 128, "boxes": 3, "balls": 3, "blobs": 3, "max_speed": 3,
                  "noise": 0.01, "gop_length": 12, "block_size": 0, "size": (0.08, 0.14),
                  "hue_spread": 0.2, "count": 1}


def _sequence_paths(data):
    p = Path(data)
    if p.is_dir():
        paths = sorted(p.glob("*.mvsq"))
        if not paths:
            raise DataError(f"no .mvsq files in {p}")
        return paths
    if not p.exists():
        raise DataError(f"no such data path: {p}")
    return [p]


def _load_sequences(data):
    paths = _sequence_paths(data)
    seqs = []
    for p in paths:
        try:
            seqs.append(D.load_sequence(p))
        except D.ContainerError as e:
            raise DataError(f"{p}: {e}") from e
    return paths, seqs


def _backbone_from_meta(meta):
    try:
        return BackboneConfig(tuple(meta["head_channels"]), tuple(meta["decoder_channels"]),
                              int(meta["class_count"]), int(meta["warp_layer"]))
    except KeyError as e:
        raise DataError(f"checkpoint metadata lacks {e}") from e


def _load_ckpt(path, role):
    if path is None:
        raise UsageError(f"--{role}-ckpt is required")
    try:
        params, meta = load_params(path)
    except OSError as e:
        raise DataError(f"cannot read checkpoint {path}: {e}") from e
    except (ValueError, KeyError) as e:
        raise DataError(f"{path}: {e}") from e
    if meta.get("phase") != role.replace("key", "keyframe"):
        raise DataError(f"{path} is a {meta.get('phase')!r} checkpoint, expected {role}")
    return params, meta


def _check_compatible(backbone, seqs, ckpt):
    for seq in seqs:
        if seq.class_count != backbone.class_count:
            raise DataError(f"{ckpt}: checkpoint has {backbone.class_count} classes, data has "
                            f"{seq.class_count}")
        h, w = seq.shape
        if h % 8 or w % 8:
            raise DataError(f"frame size {h}x{w} is not divisible by 8")


def _backbone_meta(backbone):
    return {"head_channels": list(backbone.head_channels),
            "decoder_channels": list(backbone.decoder_channels),
            "class_count": backbone.class_count, "warp_layer": backbone.warp_layer}


# --------------------------------------------------------------------------
# manifest

def write_manifest(path, command, argv, config, seed, inputs, outputs, started, deterministic=None):
    """``deterministic`` maps an output to a checksum of its reproducible content
    when the file also carries measurements (wall-clock timings)."""
    manifest = {
        "version": MANIFEST_VERSION,
        "command": command,
        "argv": list(argv),
        "cwd": os.getcwd(),
        "config": config,
        "seed": seed,
        "inputs": {str(p): sha256(p) for p in inputs},
        "outputs": {str(p): sha256(p) for p in outputs},
        "reproducible": {str(p): c for p, c in (deterministic or {}).items()},
        "started": started,
        "finished": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
    }
    _atomic_text(path, json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def _now():
    return time.strftime("%Y-%m-%dT%H:%M:%S%z")


# --------------------------------------------------------------------------
# commands

def cmd_generate(args):
    if args.gops < 1:
        raise UsageError("--gops must be >= 1")
    started = _now()
    scene = dict(SCENE_DEFAULTS)
    scene.update(read_config(args.spec, "scene", SCENE_DEFAULTS))
    count = scene.pop("count")
    if count < 1:
        raise DataError(f"config {args.spec}: 'count' must be >= 1")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        seqs = D.make_dataset(args.seed, count, num_gops=args.gops, **scene)
        for s in seqs:
            s.validate()
    except ValueError as e:
        raise DataError(f"invalid scene spec: {e}") from e
    paths = []
    for i, seq in enumerate(seqs):
        p = out / f"seq_{i:04d}.mvsq"
        D.save_sequence(seq, p)
        paths.append(p)
    frames = sum(len(s) for s in seqs)
    res = np.concatenate([np.abs(f.residual).ravel() for s in seqs for f in s.frames if f.kind == "P"]) \
        if any(f.kind == "P" for s in seqs for f in s.frames) else np.zeros(1)
    print(f"sequences {len(seqs)}  frames {frames} ({frames // len(seqs)} per sequence)  "
          f"classes {seqs[0].class_count}")
    print(f"residual |r|: mean {res.mean():.5f}  p99 {np.percentile(res, 99):.5f}  "
          f"max {res.max():.5f}  nonzero {np.mean(res > 0):.4f}")
    write_manifest(out / "manifest.json", "generate", args.argv,
                   {"scene": {k: list(v) if isinstance(v, tuple) else v for k, v in scene.items()},
                    "count": count, "gops": args.gops},
                   args.seed, [args.spec] if args.spec else [], paths, started)
    return EXIT_OK


def _train_config(args):
    defaults = {f.name: f.default for f in fields(TrainConfig)}
    cfg = dict(defaults)
    cfg.update(read_config(args.config, "train", defaults))
    flags = {"lr": args.lr, "weight_decay": args.lambda0, "consistency": args.lambda1,
             "iterations": args.iters, "batch_size": args.batch_size, "seed": args.seed,
             "warp_layer": args.warp_layer, "crop": args.crop, "context_age": args.context_age,
             "unroll": args.unroll}
    cfg.update({k: v for k, v in flags.items() if v is not None})
    if args.no_cfr:
        cfg["use_cfr"] = False
    if args.no_rga:
        cfg["use_rga"] = False
    if args.frozen_heads:
        cfg["fine_tune_heads"] = False
    if cfg["use_rga"] and not cfg["use_cfr"]:
        raise UsageError("RGA gates the CFR output: --no-cfr requires --no-rga")
    try:
        return TrainConfig(**cfg)
    except ValueError as e:
        raise UsageError(str(e)) from e


def cmd_train(args):
    started = _now()
    tc = _train_config(args)
    paths, seqs = _load_sequences(args.data)
    out = Path(args.out)
    inputs = list(paths)
    if args.phase == "keyframe":
        backbone = BackboneConfig(class_count=seqs[0].class_count, warp_layer=tc.warp_layer)
        _check_compatible(backbone, seqs, "data")
        params, curve = train_keyframe(seqs, tc, backbone)
    else:
        if args.key_ckpt is None:
            raise UsageError("train nkfc needs --key-ckpt")
        key, meta = _load_ckpt(args.key_ckpt, "key")
        backbone = _backbone_from_meta(meta).with_layer(tc.warp_layer)
        _check_compatible(backbone, seqs, args.key_ckpt)
        inputs.append(Path(args.key_ckpt))
        contexts = key_contexts(seqs, key, backbone)
        params, curve = train_nkfc(seqs, key, tc, backbone, contexts=contexts)
    meta = {"phase": args.phase, "train": tc.as_dict(), **_backbone_meta(backbone)}
    save_params(params, out, meta)
    curve_path = out.with_name(out.name + ".loss.csv")
    _write_csv_atomic(write_curve, curve, curve_path)
    last = curve[-1]
    print(f"{args.phase}: {tc.iterations} iterations, final loss {last['total']:.5f} "
          f"(cls {last['cls']:.5f}, consist {last['consist']:.5f}) -> {out}")
    write_manifest(out.with_name(out.name + ".manifest.json"), "train", args.argv,
                   {"phase": args.phase, "train": tc.as_dict(), "backbone": _backbone_meta(backbone)},
                   tc.seed, inputs, [out, curve_path], started)
    return EXIT_OK


def _variants(args, key):
    wanted = [v.strip() for v in args.variants.split(",") if v.strip()]
    nkfc = {}
    for path in args.nkfc_ckpt or []:
        params, meta = _load_ckpt(path, "nkfc")
        tr = meta["train"]
        name = "rga" if tr["use_rga"] else "cfr" if tr["use_cfr"] else "nkfc"
        nkfc[name] = (path, params, meta)
    out, used = [], []
    for name in wanted:
        if name == "warp":
            out.append(raw_warp_variant(key))
        elif name in ("nkfc", "cfr", "rga"):
            if name not in nkfc:
                raise UsageError(f"variant {name!r} needs a matching --nkfc-ckpt")
            path, params, meta = nkfc[name]
            out.append(Variant(name, params, meta["warp_layer"], meta["train"]["use_cfr"],
                               meta["train"]["use_rga"]))
            used.append((path, meta))
        else:
            raise UsageError(f"unknown variant {name!r} (choose from warp,nkfc,cfr,rga)")
    return out, used


def cmd_eval(args):
    started = _now()
    paths, seqs = _load_sequences(args.data)
    key, kmeta = _load_ckpt(args.key_ckpt, "key")
    backbone = _backbone_from_meta(kmeta)
    _check_compatible(backbone, seqs, args.key_ckpt)
    variants, used = _variants(args, key)
    for path, meta in used:
        _check_compatible(_backbone_from_meta(meta), seqs, path)
    if args.sweep_t < 0:
        raise UsageError("--sweep-T must be >= 0")
    if args.sweep_t == 0:
        variants = []
    try:
        result = sweep_T(seqs, key, variants, args.sweep_t, backbone, jobs=args.jobs)
    except EmptyEvaluationError as e:
        raise DataError(str(e)) from e
    except ValueError as e:
        raise UsageError(str(e)) from e
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    per_t, per_class = out / "per_t.csv", out / "per_class.csv"
    rows = [(0, "key", result.key.miou())]
    rows += [row for row in result.table() if row[0] > 0]
    _write_csv_atomic(write_per_t, rows, per_t)
    cms = {"key": result.key, **result.pooled}
    _write_csv_atomic(write_per_class, cms, per_class, D.CLASS_NAMES[:backbone.class_count])
    print(f"key frames: mIoU {result.key.miou():.4f}")
    for v in variants:
        by_t = " ".join(f"{result.miou(v.name, t):.3f}" for t in range(1, args.sweep_t + 1))
        print(f"{v.name:>5}: pooled mIoU {result.miou(v.name):.4f} | per T {by_t}")
    inputs = list(paths) + [Path(args.key_ckpt)] + [Path(p) for p, _ in used]
    write_manifest(out / "manifest.json", "eval", args.argv,
                   {"sweep_T": args.sweep_t, "variants": [v.name for v in variants], "jobs": args.jobs},
                   None, inputs, [per_t, per_class], started)
    return EXIT_OK


def _reproducible_bench_digest(path):
    """Checksum over the columns that do not depend on wall-clock time."""
    with open(path, newline="") as fh:
        rows = [(r["path"], r["variant"], r["macs"]) for r in csv.DictReader(fh)]
    return hashlib.sha256(json.dumps(rows).encode()).hexdigest()


def cmd_bench(args):
    started = _now()
    if args.repeats < 1:
        raise UsageError("--repeats must be >= 1")
    paths, seqs = _load_sequences(args.data)
    key, kmeta = _load_ckpt(args.key_ckpt, "key")
    base = _backbone_from_meta(kmeta)
    _check_compatible(base, seqs, args.key_ckpt)
    seq = seqs[0]
    h, w = seq.shape
    rows = []
    key_stats = None
    inputs = [paths[0], Path(args.key_ckpt)]
    for path in args.nkfc_ckpt or []:
        params, meta = _load_ckpt(path, "nkfc")
        cfg = _backbone_from_meta(meta)
        tr = meta["train"]
        stats = bench(seq, key, params, cfg, tr["use_cfr"], tr["use_rga"], repeats=args.repeats)
        key_stats = key_stats or stats["key"]
        name = ("rga" if tr["use_rga"] else "cfr" if tr["use_cfr"] else "nkfc") + f"@L{cfg.warp_layer}"
        rows.append({"path": "nonkey", "variant": name,
                     "macs": count_flops(cfg, "nkfc", tr["use_cfr"], tr["use_rga"], h, w),
                     **stats["nonkey"]})
        inputs.append(Path(path))
        sub = " ".join(f"{k} {v:.2f}" for k, v in stats["subtimers_ms"].items())
        print(f"{name}: median {stats['nonkey']['median_ms']:.2f} ms ({sub})")
    if key_stats is None:
        key_stats = bench_key(seq, key, base, repeats=args.repeats)
    rows.insert(0, {"path": "key", "variant": "key", "macs": count_flops(base, "key", height=h, width=w),
                    **key_stats})
    for r in rows:
        print(f"{r['path']:>6} {r['variant']:<10} MACs {r['macs']:>11,d} ({r['macs'] / rows[0]['macs']:.3f} "
              f"of key)  median {r['median_ms']:.2f} ms  p95 {r['p95_ms']:.2f} ms  n={r['samples']}")
    out = Path(args.out)
    _write_csv_atomic(write_bench, rows, out)
    write_manifest(out.with_name(out.name + ".manifest.json"), "bench", args.argv,
                   {"repeats": args.repeats}, None, inputs, [out], started,
                   deterministic={out: _reproducible_bench_digest(out)})
    return EXIT_OK


def cmd_experiment(args):
    from .experiments import BenchmarkConfig, run_benchmark, write_report
    started = _now()
    defaults = {f.name: f.default for f in fields(BenchmarkConfig) if f.name != "scene"}
    cfg = dict(read_config(args.config, "experiment", defaults))
    if args.seeds:
        cfg["seeds"] = tuple(args.seeds)
    cfg["seeds"] = tuple(int(s) for s in cfg.get("seeds", (0, 1, 2)))
    bc = BenchmarkConfig(**cfg)
    result = run_benchmark(bc)
    out = Path(args.out)
    # timings vary run to run; keep them out of the reproducible report
    seconds = result["summary"].pop("seconds")
    for r in result["runs"]:
        r.pop("seconds")
    tmp = out.with_name(out.name + ".tmp")
    write_report(result, tmp)
    tmp.replace(out)
    s = result["summary"]
    print(json.dumps({"median_pooled": s["median_pooled"], "checks": s["checks"],
                      "lambda_sweep": s["lambda_sweep"]}, indent=2))
    print(f"{seconds:.0f} s")
    write_manifest(out.with_name(out.name + ".manifest.json"), "experiment", args.argv,
                   bc.as_dict(), None, [args.config] if args.config else [], [out], started)
    return EXIT_OK


def cmd_replay(args):
    try:
        manifest = json.loads(Path(args.manifest).read_text())
    except (OSError, ValueError) as e:
        raise DataError(f"cannot read manifest {args.manifest}: {e}") from e
    if manifest.get("version") != MANIFEST_VERSION:
        raise DataError(f"unsupported manifest version {manifest.get('version')}")
    mpath = Path(args.manifest).resolve()
    here = os.getcwd()
    # relative paths in the recorded argv resolve against the recorded cwd
    os.chdir(manifest["cwd"])
    try:
        for path, digest in manifest["inputs"].items():
            if not Path(path).exists() or sha256(path) != digest:
                raise DataError(f"input {path} is missing or changed since the recorded run")
        saved = mpath.read_bytes()
        code = main(manifest["argv"], _replaying=True)
        replayed = json.loads(mpath.read_text())
        if not args.keep_manifest:
            mpath.write_bytes(saved)
        if code != EXIT_OK:
            return code
        return _compare_outputs(manifest, replayed)
    finally:
        os.chdir(here)


def _compare_outputs(manifest, replayed):
    bad = []
    for path, digest in manifest["outputs"].items():
        want = manifest.get("reproducible", {}).get(path)
        if want is not None:
            got = _reproducible_bench_digest(path)
        else:
            want, got = digest, replayed["outputs"].get(path)
        print(f"{'same' if got == want else 'DIFF'} {path}")
        if got != want:
            bad.append(path)
    if bad:
        print(f"replay differs in {len(bad)} artifact(s)", file=sys.stderr)
        return EXIT_INTERNAL
    return EXIT_OK


# --------------------------------------------------------------------------
# parser

def build_parser():
    p = _Parser(prog="warpseg", description="Warping-based video segmentation on synthetic clips.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="render synthetic GOP sequences")
    g.add_argument("spec", nargs="?", help="scene config file with a [scene] section")
    g.add_argument("out", help="output directory for seq_XXXX.mvsq files")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--gops", type=int, default=1)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train the key-frame or non-key-frame network")
    t.add_argument("phase", choices=("keyframe", "nkfc"))
    t.add_argument("data", help="a .mvsq file or a directory of them")
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--config", help="config file with a [train] section")
    t.add_argument("--key-ckpt")
    t.add_argument("--warp-layer", type=int, choices=(1, 2, 3))
    t.add_argument("--lambda1", type=float, help="consistency weight (default 10)")
    t.add_argument("--lambda0", type=float, help="weight decay")
    t.add_argument("--no-cfr", action="store_true")
    t.add_argument("--no-rga", action="store_true")
    t.add_argument("--frozen-heads", action="store_true", help="do not fine-tune the retained heads")
    t.add_argument("--iters", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--crop", type=int)
    t.add_argument("--context-age", type=int, help="oldest key context used as a step-two input")
    t.add_argument("--unroll", type=int, help="consecutive step-two frames per sample")
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="key-frame distance sweep and per-class IoU")
    e.add_argument("data")
    e.add_argument("--key-ckpt", required=True)
    e.add_argument("--nkfc-ckpt", action="append", help="repeatable; variant taken from its flags")
    e.add_argument("--sweep-T", dest="sweep_t", type=int, default=11)
    e.add_argument("--variants", default="warp,nkfc,cfr,rga")
    e.add_argument("--out-dir", required=True)
    e.add_argument("--jobs", type=int, default=1)
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench", help="MACs and per-frame latency")
    b.add_argument("data")
    b.add_argument("--key-ckpt", required=True)
    b.add_argument("--nkfc-ckpt", action="append")
    b.add_argument("--repeats", type=int, default=20)
    b.add_argument("--out", required=True)
    b.set_defaults(func=cmd_bench)

    x = sub.add_parser("experiment", help="full synthetic benchmark over seeds")
    x.add_argument("--config", help="config file with an [experiment] section")
    x.add_argument("--seeds", type=int, nargs="+")
    x.add_argument("--out", required=True, help="JSON report path")
    x.set_defaults(func=cmd_experiment)

    r = sub.add_parser("replay", help="rerun a manifest and compare artifact checksums")
    r.add_argument("manifest")
    r.add_argument("--keep-manifest", action="store_true",
                   help="keep the manifest written by the replay instead of restoring the original")
    r.set_defaults(func=cmd_replay)
    return p


def main(argv=None, _replaying=False):
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
        if _replaying and args.command == "replay":
            raise UsageError("a manifest cannot replay another replay")
        args.argv = argv
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, D.ContainerError, ShapeError, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except Exception as e:   # noqa: BLE001 - last-resort exit code
        log.exception("internal error")
        print(f"internal error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
