import json

import pytest

from mvsdiff.cli import OUTPUT_ROOT_ENV, main

TINY = ["model.num_init_hypotheses=8", "model.feature_channels=[8, 8, 8]", "model.context_dim=8",
        "model.hidden_dim=8", "model.unet_width=8", "model.costreg_base=4"]


def sets(items):
    return [a for it in items for a in ("--set", it)]


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    common = sets(TINY + ["generate.height=32", "generate.width=48", "generate.num_scenes=2"])
    assert main(["gen-data", "--out", str(root / "data"), *common]) == 0
    assert main(["train", "--manifest", str(root / "data" / "manifest.json"), "--out", str(root / "run"),
                 *common, *sets(["train.epochs=1", "train.batch_size=2", "train.log_every=0"])]) == 0
    for name in ("inf1", "inf2"):
        assert main(["infer", "--checkpoint", str(root / "run" / "checkpoint.pt"),
                     "--manifest", str(root / "data" / "manifest.json"), "--out", str(root / name), *common]) == 0
    assert main(["fuse", "--input", str(root / "inf1"), "--out", str(root / "fused"), *common,
                 *sets(["fusion.min_views=1", "fusion.conf_min=0.01", "fusion.rel_depth_max=0.5",
                        "fusion.reproj_max=50.0"])]) == 0
    return root


def test_gen_data_layout(run):
    man = json.loads((run / "data" / "manifest.json").read_text())
    assert len(man["scenes"]) == 2
    d = run / "data" / man["scenes"][0]
    assert len(list((d / "images").glob("*.png"))) == 3 and len(list((d / "depths").glob("*.pfm"))) == 3
    assert (run / "data" / "config.json").exists()


def test_train_outputs(run):
    assert (run / "run" / "checkpoint.pt").exists()
    lines = (run / "run" / "metrics.jsonl").read_text().splitlines()
    assert json.loads(lines[0])["step"] == 1


def test_infer_reproducible(run):
    man = json.loads((run / "inf1" / "manifest.json").read_text())
    assert len(man["scenes"]) == 2 and "config_hash" in man
    for e in man["scenes"]:
        for p in e["depths"] + e["confidences"]:
            assert (run / "inf1" / p).read_bytes() == (run / "inf2" / p).read_bytes()


def test_fuse_and_eval(run, capsys):
    fused = json.loads((run / "fused" / "fused.json").read_text())
    assert len(fused["clouds"]) == 2 and all(c["num_points"] > 0 for c in fused["clouds"])
    assert main(["eval", "--input", str(run / "fused")]) == 0
    assert "mean" in capsys.readouterr().out
    m = json.loads((run / "fused" / "metrics.json").read_text())
    assert m["mean"]["overall"] == pytest.approx(0.5 * (m["mean"]["accuracy"] + m["mean"]["completeness"]))


def test_output_root_env(tmp_path, monkeypatch):
    monkeypatch.setenv(OUTPUT_ROOT_ENV, str(tmp_path))
    assert main(["gen-data", "--out", "rel", *sets(["generate.height=16", "generate.width=16",
                                                    "generate.num_scenes=1"])]) == 0
    assert (tmp_path / "rel" / "manifest.json").exists()


def test_usage_errors(tmp_path, capsys):
    assert main([]) == 1
    assert main(["frobnicate"]) == 1
    assert main(["gen-data"]) == 1
    assert main(["train"]) == 1                      # no manifest given
    bad = tmp_path / "bad.toml"
    bad.write_text("seed = 1\n[model]\ncolour = 3\n")
    assert main(["gen-data", "--out", str(tmp_path / "x"), "--config", str(bad)]) == 1
    assert "model.colour" in capsys.readouterr().err


def test_runtime_errors(tmp_path):
    assert main(["infer", "--checkpoint", str(tmp_path / "missing.pt"), "--manifest", str(tmp_path / "m.json")]) == 2
    assert main(["fuse", "--input", str(tmp_path)]) == 2
    (tmp_path / "fused.json").write_text("{}")
    assert main(["eval", "--input", str(tmp_path)]) == 2
