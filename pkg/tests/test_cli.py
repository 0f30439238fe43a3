import csv
import json

import pytest

from warpseg import cli
from warpseg.cli import main


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    spec = root / "scene.ini"
    spec.write_text("[scene]\nheight = 32\nwidth = 40\ncount = 2\nboxes = 1\nballs = 1\nblobs = 1\n")
    data = root / "data"
    assert main(["generate", str(spec), str(data), "--seed", "3"]) == 0
    key = root / "key.ckpt"
    assert main(["train", "keyframe", str(data), "--out", str(key), "--iters", "3", "--seed", "1"]) == 0
    ckpts = {}
    for name, flags in (("nkfc", ["--no-cfr", "--no-rga"]), ("cfr", ["--no-rga"]), ("rga", [])):
        path = root / f"{name}.ckpt"
        assert main(["train", "nkfc", str(data), "--key-ckpt", str(key), "--out", str(path),
                     "--iters", "2", *flags]) == 0
        ckpts[name] = path
    return root, spec, data, key, ckpts


def test_generate_reports_frames(tmp_path, capsys):
    assert main(["generate", str(tmp_path / "d"), "--gops", "2"]) == 0
    out = capsys.readouterr().out
    assert "frames 24 (24 per sequence)" in out
    assert (tmp_path / "d" / "seq_0000.mvsq").exists()
    assert (tmp_path / "d" / "manifest.json").exists()


def test_generate_same_seed_same_bytes(workspace, tmp_path):
    _, spec, data, _, _ = workspace
    assert main(["generate", str(spec), str(tmp_path / "again"), "--seed", "3"]) == 0
    for p in sorted(data.glob("*.mvsq")):
        assert cli.sha256(p) == cli.sha256(tmp_path / "again" / p.name)


def test_generate_zero_gops_is_usage_error(tmp_path):
    assert main(["generate", str(tmp_path / "x"), "--gops", "0"]) == cli.EXIT_USAGE


def test_generate_bad_spec_names_key(tmp_path, capsys):
    spec = tmp_path / "bad.ini"
    spec.write_text("[scene]\nheigth = 32\n")
    assert main(["generate", str(spec), str(tmp_path / "x")]) == cli.EXIT_DATA
    assert "heigth" in capsys.readouterr().err


def test_generate_bad_value(tmp_path, capsys):
    spec = tmp_path / "bad.ini"
    spec.write_text("[scene]\nheight = tall\n")
    assert main(["generate", str(spec), str(tmp_path / "x")]) == cli.EXIT_DATA
    assert "height" in capsys.readouterr().err


def test_unknown_command_is_usage_error():
    assert main(["fly"]) == cli.EXIT_USAGE


def test_train_writes_checkpoint_curve_manifest(workspace):
    root, _, _, key, _ = workspace
    manifest = json.loads((root / "key.ckpt.manifest.json").read_text())
    assert manifest["command"] == "train"
    assert str(key) in manifest["outputs"]
    with open(root / "key.ckpt.loss.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == ["iteration", "cls", "reg", "consist", "total"]
    assert len(rows) == 3
    assert not list(root.glob("*.tmp"))


def test_default_lambda1_in_manifest(workspace):
    root = workspace[0]
    manifest = json.loads((root / "rga.ckpt.manifest.json").read_text())
    assert manifest["config"]["train"]["consistency"] == 10.0
    assert manifest["config"]["train"]["weight_decay"] == 1e-7


def test_nkfc_without_key_is_usage_error(workspace, tmp_path):
    data = workspace[2]
    assert main(["train", "nkfc", str(data), "--out", str(tmp_path / "n.ckpt")]) == cli.EXIT_USAGE


def test_no_cfr_with_rga_is_usage_error(workspace, tmp_path):
    _, _, data, key, _ = workspace
    code = main(["train", "nkfc", str(data), "--key-ckpt", str(key), "--out", str(tmp_path / "n.ckpt"),
                 "--no-cfr"])
    assert code == cli.EXIT_USAGE


@pytest.mark.parametrize("layer,code", [("1", 0), ("3", 0), ("0", 1), ("4", 1)])
def test_warp_layer_choices(workspace, tmp_path, layer, code):
    _, _, data, key, _ = workspace
    assert main(["train", "nkfc", str(data), "--key-ckpt", str(key), "--out", str(tmp_path / "n.ckpt"),
                 "--iters", "1", "--warp-layer", layer]) == code


def test_train_missing_data_is_data_error(tmp_path):
    assert main(["train", "keyframe", str(tmp_path / "none"), "--out", str(tmp_path / "k")]) == cli.EXIT_DATA


def test_eval_four_rows_per_t(workspace, tmp_path):
    root, _, data, key, ck = workspace
    out = tmp_path / "ev"
    args = ["eval", str(data), "--key-ckpt", str(key), "--sweep-T", "3", "--out-dir", str(out)]
    for p in ck.values():
        args += ["--nkfc-ckpt", str(p)]
    assert main(args) == 0
    with open(out / "per_t.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == ["T", "variant", "mIoU"]
    for t in (1, 2, 3):
        assert sorted(r["variant"] for r in rows if r["T"] == str(t)) == ["cfr", "nkfc", "rga", "warp"]
    with open(out / "per_class.csv") as fh:
        header = next(csv.reader(fh))
    assert header == ["variant", "background", "box", "ball", "blob", "mIoU"]


def test_eval_sweep_bounds(workspace, tmp_path):
    _, _, data, key, _ = workspace
    base = ["eval", str(data), "--key-ckpt", str(key), "--variants", "warp", "--out-dir", str(tmp_path)]
    assert main(base + ["--sweep-T", "11"]) == 0
    assert main(base + ["--sweep-T", "12"]) == cli.EXIT_USAGE


def test_eval_key_only_matches_per_frame(workspace, tmp_path):
    import numpy as np
    from warpseg.data import load_sequence
    from warpseg.evaluation import miou
    from warpseg.models import load_params, keyframe_forward, predict, BackboneConfig
    _, _, data, key, _ = workspace
    assert main(["eval", str(data), "--key-ckpt", str(key), "--sweep-T", "0", "--variants", "",
                 "--out-dir", str(tmp_path)]) == 0
    with open(tmp_path / "per_t.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 1 and rows[0]["variant"] == "key"
    params, _ = load_params(key)
    frames = [load_sequence(p).frames[0] for p in sorted(data.glob("*.mvsq"))]
    preds = [predict(keyframe_forward(f.image, params, BackboneConfig())[0])[0] for f in frames]
    expect = miou(preds, [f.label for f in frames], 4).miou
    assert float(rows[0]["mIoU"]) == pytest.approx(expect, abs=1e-6)


def test_eval_variant_without_ckpt_is_usage_error(workspace, tmp_path):
    _, _, data, key, _ = workspace
    assert main(["eval", str(data), "--key-ckpt", str(key), "--variants", "warp,cfr",
                 "--out-dir", str(tmp_path)]) == cli.EXIT_USAGE


def test_eval_class_mismatch_is_data_error(workspace, tmp_path):
    _, _, _, key, _ = workspace
    from warpseg import data as D
    seq = D.generate_sequence(D.SceneSpec(height=32, width=32, class_count=5, background="plain"), 1)
    D.save_sequence(seq, tmp_path / "five.mvsq")
    code = main(["eval", str(tmp_path / "five.mvsq"), "--key-ckpt", str(key), "--variants", "warp",
                 "--out-dir", str(tmp_path / "o")])
    assert code == cli.EXIT_DATA


def test_eval_corrupt_data_is_data_error(workspace, tmp_path):
    _, _, data, key, _ = workspace
    bad = tmp_path / "bad.mvsq"
    bad.write_bytes((data / "seq_0000.mvsq").read_bytes()[:-7])
    assert main(["eval", str(bad), "--key-ckpt", str(key), "--variants", "warp",
                 "--out-dir", str(tmp_path / "o")]) == cli.EXIT_DATA


def test_bench_schema_and_repeats(workspace, tmp_path, capsys):
    _, _, data, key, ck = workspace
    out = tmp_path / "bench.csv"
    assert main(["bench", str(data), "--key-ckpt", str(key), "--nkfc-ckpt", str(ck["rga"]),
                 "--repeats", "5", "--out", str(out)]) == 0
    with open(out) as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == ["path", "variant", "macs", "median_ms", "p95_ms"]
    assert [r["path"] for r in rows] == ["key", "nonkey"]
    assert int(rows[1]["macs"]) < int(rows[0]["macs"])
    assert "n=5" in capsys.readouterr().out


def test_bench_key_only(workspace, tmp_path):
    _, _, data, key, _ = workspace
    out = tmp_path / "bench.csv"
    assert main(["bench", str(data), "--key-ckpt", str(key), "--repeats", "1", "--out", str(out)]) == 0
    with open(out) as fh:
        rows = list(csv.DictReader(fh))
    assert rows[0]["median_ms"] == rows[0]["p95_ms"]


def _replay_ok(manifest_path):
    manifest = json.loads(manifest_path.read_text())
    before = dict(manifest["outputs"])
    for path in before:
        __import__("os").remove(path)
    assert main(["replay", str(manifest_path)]) == 0
    for path, digest in before.items():
        if path not in manifest["reproducible"]:
            assert cli.sha256(path) == digest


def test_replay_generate(workspace):
    _replay_ok(workspace[2] / "manifest.json")


def test_replay_train(workspace):
    root = workspace[0]
    _replay_ok(root / "key.ckpt.manifest.json")
    _replay_ok(root / "rga.ckpt.manifest.json")


def test_replay_eval_and_bench(workspace, tmp_path):
    _, _, data, key, ck = workspace
    args = ["eval", str(data), "--key-ckpt", str(key), "--sweep-T", "2", "--out-dir", str(tmp_path / "ev")]
    for p in ck.values():
        args += ["--nkfc-ckpt", str(p)]
    assert main(args) == 0
    _replay_ok(tmp_path / "ev" / "manifest.json")
    out = tmp_path / "b.csv"
    assert main(["bench", str(data), "--key-ckpt", str(key), "--nkfc-ckpt", str(ck["nkfc"]),
                 "--repeats", "2", "--out", str(out)]) == 0
    _replay_ok(tmp_path / "b.csv.manifest.json")


def test_replay_detects_changed_input(workspace, tmp_path):
    _, spec, _, _, _ = workspace
    local = tmp_path / "s.ini"
    local.write_text(spec.read_text())
    assert main(["generate", str(local), str(tmp_path / "d")]) == 0
    local.write_text(spec.read_text() + "noise = 0.5\n")
    assert main(["replay", str(tmp_path / "d" / "manifest.json")]) == cli.EXIT_DATA


def test_replay_detects_different_output(workspace, tmp_path):
    _, _, data, key, _ = workspace
    out = tmp_path / "k.ckpt"
    assert main(["train", "keyframe", str(data), "--out", str(out), "--iters", "2"]) == 0
    mpath = tmp_path / "k.ckpt.manifest.json"
    manifest = json.loads(mpath.read_text())
    manifest["outputs"][str(out)] = "0" * 64
    mpath.write_text(json.dumps(manifest))
    assert main(["replay", str(mpath)]) == cli.EXIT_INTERNAL


def test_replay_relative_paths_from_elsewhere(tmp_path, monkeypatch):
    work = tmp_path / "work"
    work.mkdir()
    monkeypatch.chdir(work)
    assert main(["generate", "d", "--seed", "5"]) == 0
    digest = cli.sha256(work / "d" / "seq_0000.mvsq")
    (work / "d" / "seq_0000.mvsq").unlink()
    monkeypatch.chdir(tmp_path)
    assert main(["replay", "work/d/manifest.json"]) == 0
    assert cli.sha256(work / "d" / "seq_0000.mvsq") == digest
