"""Synthetic benchmark: train every variant per seed, sweep key-frame distance,
aggregate medians over seeds and evaluate the trend checks."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import CLASS_NAMES, NONRIGID_CLASSES, RIGID_CLASSES, make_dataset
from .evaluation import Variant, count_flops, raw_warp_variant, sweep_T
from .models import BackboneConfig
from .training import TrainConfig, key_contexts, train_keyframe, train_nkfc

log = logging.getLogger(__name__)

MAIN_VARIANTS = ("warp", "nkfc", "cfr", "rga")


@dataclass
class BenchmarkConfig:
    seeds: tuple = (0, 1, 2)
    train_sequences: int = 40
    test_sequences: int = 8
    scene: dict = field(default_factory=dict)       # random_scene overrides
    key_iterations: int = 1500
    key_batch: int = 4
    key_crop: int = 48
    nkfc_iterations: int = 300
    nkfc_batch: int = 2
    lr: float = 3e-3
    lambda1: float = 10.0
    lambda_sweep: tuple = (0.0, 1.0, 10.0, 20.0)
    context_age: int = 11
    unroll: int = 2
    warp_layer: int = 1
    t_max: int = 11
    margin_t: int = 6
    degradation_t: int = 8

    def as_dict(self):
        return asdict(self)


def _variant_flags(name):
    return {"nkfc": (False, False), "cfr": (True, False), "rga": (True, True)}[name]


def run_seed(seed, cfg):
    """Train the key network and every non-key variant for one seed and sweep them."""
    t0 = time.perf_counter()
    train = make_dataset(seed, cfg.train_sequences, **cfg.scene)
    test = make_dataset(seed + 1000, cfg.test_sequences, **cfg.scene)
    backbone = BackboneConfig(warp_layer=cfg.warp_layer)
    key, _ = train_keyframe(train, TrainConfig(
        lr=cfg.lr, iterations=cfg.key_iterations, batch_size=cfg.key_batch, seed=seed,
        crop=cfg.key_crop, warp_layer=cfg.warp_layer))
    contexts = key_contexts(train, key, backbone)

    def fit(name, lam):
        use_cfr, use_rga = _variant_flags(name)
        tc = TrainConfig(lr=cfg.lr, iterations=cfg.nkfc_iterations, batch_size=cfg.nkfc_batch,
                         seed=seed, consistency=lam, use_cfr=use_cfr, use_rga=use_rga,
                         warp_layer=cfg.warp_layer, context_age=cfg.context_age,
                         unroll=cfg.unroll)
        params, _ = train_nkfc(train, key, tc, backbone, contexts=contexts)
        return Variant(name if lam == cfg.lambda1 else f"rga@{lam:g}", params, cfg.warp_layer,
                       use_cfr, use_rga)

    variants = [raw_warp_variant(key)]
    variants += [fit(name, cfg.lambda1) for name in ("nkfc", "cfr", "rga")]
    variants += [fit("rga", lam) for lam in cfg.lambda_sweep if lam != cfg.lambda1]
    sweep = sweep_T(test, key, variants, cfg.t_max, backbone)
    out = {
        "seed": seed,
        "key_miou": sweep.key.miou(),
        "pooled": {v.name: sweep.miou(v.name) for v in variants},
        "per_t": {v.name: [sweep.miou(v.name, t) for t in range(1, cfg.t_max + 1)] for v in variants},
        "per_class": {v.name: [float(x) for x in sweep.pooled[v.name].iou()] for v in variants},
        "seconds": time.perf_counter() - t0,
    }
    out["lambda"] = {f"{lam:g}": out["pooled"]["rga" if lam == cfg.lambda1 else f"rga@{lam:g}"]
                     for lam in cfg.lambda_sweep}
    log.info("seed %d done in %.0fs: %s", seed, out["seconds"], out["pooled"])
    return out


def _median(values):
    return float(np.median(values))


def summarize(runs, cfg):
    """Median-over-seeds table plus one boolean per trend check."""
    names = list(runs[0]["pooled"])
    med = {n: _median([r["pooled"][n] for r in runs]) for n in names}
    med_t = {n: [_median([r["per_t"][n][t] for r in runs]) for t in range(cfg.t_max)] for n in names}
    lam = {k: _median([r["lambda"][k] for r in runs]) for k in runs[0]["lambda"]}

    def degradation(name):
        return _median([r["per_t"][name][0] - r["per_t"][name][cfg.degradation_t - 1] for r in runs])

    def gain(run, cls):
        return run["per_class"]["rga"][cls] - run["per_class"]["warp"][cls]

    nonrigid = _median([np.mean([gain(r, c) for c in NONRIGID_CLASSES]) for r in runs])
    rigid = _median([_median([gain(r, c) for c in RIGID_CLASSES]) for r in runs])
    margin = med_t["rga"][cfg.margin_t - 1] - med_t["warp"][cfg.margin_t - 1]
    ordering = [med[n] for n in MAIN_VARIANTS]
    checks = {
        "ordering": all(a <= b for a, b in zip(ordering, ordering[1:])),
        "margin": margin >= 0.03,
        "degradation": degradation("rga") <= 0.5 * degradation("warp"),
        "lambda": lam[f"{cfg.lambda1:g}"] >= lam["0"] if "0" in lam else None,
        "nonrigid": nonrigid > rigid,
    }
    return {
        "median_pooled": med,
        "median_per_t": med_t,
        "key_miou": _median([r["key_miou"] for r in runs]),
        "margin_at_t": margin,
        "degradation": {"warp": degradation("warp"), "rga": degradation("rga")},
        "lambda_sweep": lam,
        "class_gain": {"nonrigid": nonrigid, "rigid_median": rigid,
                       "per_class": {CLASS_NAMES[c]: _median([gain(r, c) for r in runs])
                                     for c in range(len(CLASS_NAMES))}},
        "checks": checks,
    }


def run_benchmark(cfg=None):
    cfg = cfg or BenchmarkConfig()
    t0 = time.perf_counter()
    runs = [run_seed(s, cfg) for s in cfg.seeds]
    summary = summarize(runs, cfg)
    summary["seconds"] = time.perf_counter() - t0
    return {"config": cfg.as_dict(), "runs": runs, "summary": summary}


def cost_table(height=96, width=128, backbone=None):
    """Analytic MACs for the key path and every (layer, correction) non-key path."""
    backbone = backbone or BackboneConfig()
    rows = {"key": count_flops(backbone, "key", height=height, width=width)}
    for layer in (1, 2, 3):
        cfg = backbone.with_layer(layer)
        for name in ("nkfc", "cfr", "rga"):
            use_cfr, use_rga = _variant_flags(name)
            rows[f"L{layer}.{name}"] = count_flops(cfg, "nkfc", use_cfr, use_rga, height, width)
    return rows


def write_report(result, path):
    with open(path, "w") as fh:
        json.dump(result, fh, indent=2, sort_keys=True)
        fh.write("\n")
