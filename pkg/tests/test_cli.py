import json

import numpy as np
import pandas as pd
import pytest

from cli import main
from config import SNAPSHOT_NAME, NetConfig
from data_io import file_sha256, load_superpixels, save_image, save_labels, save_superpixels
from esm_net import ESMNet
from spix_core import SuperpixelMap, init_grid

TINY_NET = ["--set", "net.channels=4,4,4,4,4", "--set", "net.head_channels=4"]
SMALL_SCENES = ["--set", "synth.height=32", "--set", "synth.width=32", "--set", "synth.region_range=2,3"]


def _zero_checkpoint(path):
    net = ESMNet(NetConfig(channels=(4, 4, 4, 4, 4), head_channels=4))
    for layer in net.weight_layers():
        layer.weight.data[...] = 0.0
        layer.bias.data[...] = 0.0
    return net.save_checkpoint(path)


def test_csf_table(tmp_path):
    out = tmp_path / "csf"
    assert main(["csf", "--out", str(out)]) == 0
    table = pd.read_csv(out / "csf.csv")
    assert len(table) == 121
    assert table.iloc[0]["f"] == 0.0
    assert table.iloc[0]["H"] == pytest.approx(0.4992)
    assert (out / "csf.html").exists()
    assert json.loads((out / SNAPSHOT_NAME).read_text())["bal"]["C"] == 50


def test_unknown_flag_fails_before_writing(tmp_path, capsys):
    out = tmp_path / "never"
    assert main(["csf", "--bogus", "--out", str(out)]) == 1
    assert not out.exists()
    assert "error=UsageError code=1" in capsys.readouterr().err


def test_unknown_config_key_is_a_usage_error(tmp_path, capsys):
    out = tmp_path / "never"
    assert main(["csf", "--out", str(out), "--set", "loss.momentum=0.9"]) == 1
    assert not out.exists()
    assert "loss.momentum" in capsys.readouterr().err


def test_missing_subcommand_is_a_usage_error():
    assert main([]) == 1


def test_missing_manifest_is_a_data_error(tmp_path, capsys):
    assert main(["eval", "--out", str(tmp_path / "out"), "--manifest", str(tmp_path / "none.csv")]) == 2
    assert "error=ManifestError code=2" in capsys.readouterr().err


def test_synth_then_train(tmp_path):
    corpus = tmp_path / "corpus"
    assert main(["synth", "--out", str(corpus), "--count", "3"] + SMALL_SCENES) == 0
    assert (corpus / "manifest.csv").exists()
    assert len(list((corpus / "images").glob("*.png"))) == 3

    run = tmp_path / "run"
    args = ["train", "--out", str(run), "--manifest", str(corpus / "manifest.csv"),
            "--set", "train.iterations=2", "--set", "loss.batch=1", "--set", "loss.crop=32"] + TINY_NET
    assert main(args) == 0
    log = pd.read_csv(run / "loss_log.csv")
    assert log["iteration"].tolist() == [0, 1]
    assert (run / "checkpoint_final.bspx").exists()
    assert (run / "loss_curve.html").exists()
    assert ESMNet.load_checkpoint(run / "checkpoint_final.bspx").cfg.channels == (4, 4, 4, 4, 4)


def test_train_on_generated_scenes(tmp_path):
    run = tmp_path / "run"
    args = ["train", "--out", str(run), "--synthetic", "2", "--set", "train.iterations=1",
            "--set", "loss.batch=1", "--set", "loss.crop=32"] + TINY_NET + SMALL_SCENES
    assert main(args) == 0
    assert len(pd.read_csv(run / "loss_log.csv")) == 1


def test_zero_weight_network_infers_the_grid(tmp_path, scene_32):
    checkpoint = _zero_checkpoint(tmp_path / "zero.bspx")
    image_path = save_image(tmp_path / "scene.png", scene_32[0])
    out = tmp_path / "sp"
    assert main(["infer", "--out", str(out), "--checkpoint", str(checkpoint), str(image_path)]) == 0
    sp = load_superpixels(out / "scene.png")
    np.testing.assert_array_equal(sp.labels, init_grid(32, 32, 16).owner_map())
    meta = json.loads((out / "scene.json").read_text())
    assert meta == {"count": 4, "S": 16, "source_sha256": file_sha256(image_path)}


def test_superpixel_count_selects_the_interval(tmp_path, scene_32):
    checkpoint = _zero_checkpoint(tmp_path / "zero.bspx")
    image_path = save_image(tmp_path / "scene.png", scene_32[0])
    out = tmp_path / "sp"
    args = ["infer", "--out", str(out), "--checkpoint", str(checkpoint), "--spix-count", "16", str(image_path)]
    assert main(args) == 0
    sp = load_superpixels(out / "scene.png")
    np.testing.assert_array_equal(sp.labels, init_grid(32, 32, 8).owner_map())


def test_eval_writes_metrics_and_report(tmp_path, scene_32):
    _, labels = scene_32
    save_labels(tmp_path / "gt.png", labels)
    save_superpixels(tmp_path / "pred.png", SuperpixelMap(init_grid(32, 32, 8).owner_map(), 16), 8)
    manifest = tmp_path / "eval.csv"
    pd.DataFrame({"prediction": ["pred.png"], "label": ["gt.png"]}).to_csv(manifest, index=False)
    out = tmp_path / "eval"
    assert main(["eval", "--out", str(out), "--manifest", str(manifest), "--pdf", "--tol", "1"]) == 0
    metrics = pd.read_csv(out / "metrics.csv")
    assert metrics.loc[0, "name"] == "pred"
    assert metrics.loc[0, "superpixel_count"] == 16
    assert metrics.loc[0, "boundary_tolerance"] == 1
    record = json.loads((out / "pred.metrics.json").read_text())
    assert record["asa"] == pytest.approx(metrics.loc[0, "asa"])
    assert (out / "report.pdf").read_bytes().startswith(b"%PDF")


def test_eval_sweep_with_grid_method(tmp_path):
    corpus = tmp_path / "corpus"
    assert main(["synth", "--out", str(corpus), "--count", "2"] + SMALL_SCENES) == 0
    out = tmp_path / "sweep"
    args = ["eval", "--out", str(out), "--manifest", str(corpus / "manifest.csv"), "--method", "grid",
            "--intervals", "16,8"]
    assert main(args) == 0
    summary = pd.read_csv(out / "sweep_summary.csv")
    assert summary["superpixel_count"].tolist() == [4, 16]
    assert len(pd.read_csv(out / "sweep.csv")) == 4
    assert (out / "sweep.html").exists()


def test_bal_outputs(tmp_path, scene_32):
    labels_path = save_labels(tmp_path / "labels.png", scene_32[1])
    out = tmp_path / "bal"
    assert main(["bal", "--out", str(out), "--labels", str(labels_path), "--analysis"]) == 0
    with np.load(out / "bal_target.npz") as target:
        assert int(target["K"]) == 491
        np.testing.assert_allclose(target["values"].sum(axis=0), 1.0)
    assert (out / "entropy_heatmap.png").exists()
    assert (out / "sigma_heatmap.png").exists()
    fit = json.loads((out / "ce_fit.json").read_text())
    assert fit["r2"] >= 0.95
    assert (out / "ce_analysis.csv").exists()


def test_bal_needs_an_input(tmp_path):
    assert main(["bal", "--out", str(tmp_path / "bal")]) == 1


def test_viz_overlay(tmp_path, scene_32):
    image_path = save_image(tmp_path / "scene.png", scene_32[0])
    sp_path, _ = save_superpixels(tmp_path / "sp.png", SuperpixelMap(init_grid(32, 32, 16).owner_map(), 4), 16)
    out = tmp_path / "viz"
    assert main(["viz", "--out", str(out), "--image", str(image_path), "--superpixels", str(sp_path)]) == 0
    assert (out / "scene_overlay.png").exists()


def test_viz_rejects_mismatched_maps(tmp_path, scene_32):
    image_path = save_image(tmp_path / "scene.png", scene_32[0])
    sp_path, _ = save_superpixels(tmp_path / "sp.png", SuperpixelMap(np.zeros((16, 16), dtype=int), 1), 16)
    assert main(["viz", "--out", str(tmp_path / "viz"), "--image", str(image_path),
                 "--superpixels", str(sp_path)]) == 1


def _eval_manifest(tmp_path, labels):
    save_labels(tmp_path / "gt.png", labels)
    save_superpixels(tmp_path / "pred.png", SuperpixelMap(init_grid(32, 32, 8).owner_map(), 16), 8)
    manifest = tmp_path / "eval.csv"
    pd.DataFrame({"prediction": ["pred.png"], "label": ["gt.png"]}).to_csv(manifest, index=False)
    return manifest


def test_eval_reruns_are_byte_identical(tmp_path, scene_32):
    manifest = _eval_manifest(tmp_path, scene_32[1])
    for name in ("first", "second"):
        assert main(["eval", "--out", str(tmp_path / name), "--manifest", str(manifest), "--workers", "2"]) == 0
    assert (tmp_path / "first" / "metrics.csv").read_bytes() == (tmp_path / "second" / "metrics.csv").read_bytes()


def test_infer_reruns_are_byte_identical(tmp_path, scene_32):
    checkpoint = ESMNet(NetConfig(channels=(4, 4, 4, 4, 4), head_channels=4), seed=3).save_checkpoint(
        tmp_path / "net.bspx")
    image_path = save_image(tmp_path / "scene.png", scene_32[0])
    for name in ("first", "second"):
        args = ["infer", "--out", str(tmp_path / name), "--checkpoint", str(checkpoint), "--interval", "11",
                str(image_path)]
        assert main(args) == 0
    assert (tmp_path / "first" / "scene.png").read_bytes() == (tmp_path / "second" / "scene.png").read_bytes()


def test_incomplete_checkpoint_is_a_data_error(tmp_path, scene_32, capsys):
    encoded = json.dumps({"version": 1, "tensors": []}).encode("utf-8")
    checkpoint = tmp_path / "bad.bspx"
    checkpoint.write_bytes(b"BSPX" + len(encoded).to_bytes(4, "little") + encoded)
    image_path = save_image(tmp_path / "scene.png", scene_32[0])
    assert main(["infer", "--out", str(tmp_path / "sp"), "--checkpoint", str(checkpoint), str(image_path)]) == 2
    assert "error=UnreadableFileError code=2" in capsys.readouterr().err


def test_unwritable_output_is_a_data_error(tmp_path, capsys):
    blocker = tmp_path / "taken"
    blocker.write_text("not a directory")
    assert main(["csf", "--out", str(blocker / "csf")]) == 2
    assert "error=DataError code=2" in capsys.readouterr().err
