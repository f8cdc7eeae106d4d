import os

import numpy as np
import pytest

from vesselseg.checkpoint import load_checkpoint
from vesselseg.cli import EXIT_CONFIG, EXIT_IO, EXIT_OK, main
from vesselseg.imagefiles import (
    ImageIOError,
    ManifestRow,
    read_image,
    read_manifest,
    read_mask,
    write_image,
    write_manifest,
)


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    out = str(root / "data")
    assert main(["synth", "--out", out, "--count", "12", "--size", "64",
                 "--seed", "3"]) == EXIT_OK
    return root, os.path.join(out, "manifest.tsv")


class TestImageFiles:
    def test_png_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        img = rng.integers(0, 256, (20, 24, 3)).astype(np.uint8)
        p = str(tmp_path / "x.png")
        write_image(p, img)
        assert np.array_equal(read_image(p), img)

    def test_ppm_round_trip(self, tmp_path):
        rng = np.random.default_rng(1)
        img = rng.integers(0, 256, (10, 12, 3)).astype(np.uint8)
        p = str(tmp_path / "x.ppm")
        write_image(p, img)
        assert np.array_equal(read_image(p), img)

    def test_tiff_round_trip(self, tmp_path):
        rng = np.random.default_rng(2)
        img = rng.integers(0, 256, (10, 12, 3)).astype(np.uint8)
        p = str(tmp_path / "x.tif")
        write_image(p, img)
        assert np.array_equal(read_image(p), img)

    def test_jpeg_rejected_with_pointer(self, tmp_path):
        p = str(tmp_path / "x.jpg")
        open(p, "wb").write(b"\xff\xd8\xff")
        with pytest.raises(ImageIOError, match="convert to PNG"):
            read_image(p)

    def test_mask_threshold(self, tmp_path):
        arr = np.array([[0, 127, 128, 255]], dtype=np.uint8)
        p = str(tmp_path / "m.png")
        write_image(p, arr)
        assert read_mask(p).tolist() == [[0, 0, 1, 1]]

    def test_manifest_round_trip(self, tmp_path):
        rows = [ManifestRow("ds", str(tmp_path / "a.png"), str(tmp_path / "b.png"))]
        p = str(tmp_path / "m.tsv")
        write_manifest(p, rows)
        back = read_manifest(p)
        assert back[0].dataset == "ds"
        assert back[0].image_path == rows[0].image_path

    def test_manifest_bad_header_rejected(self, tmp_path):
        p = str(tmp_path / "bad.tsv")
        open(p, "w").write("nope\n")
        with pytest.raises(ImageIOError, match="header"):
            read_manifest(p)


class TestCliCommands:
    def test_synth_writes_manifest_and_files(self, dataset):
        _, manifest = dataset
        rows = read_manifest(manifest)
        assert len(rows) == 12
        assert all(os.path.exists(r.image_path) for r in rows)

    def test_splits_cv5(self, dataset):
        root, manifest = dataset
        out = str(root / "splits")
        assert main(["splits", "--manifest", manifest, "--protocol", "cv5",
                     "--k", "3", "--out", out]) == EXIT_OK
        lines = open(os.path.join(out, "folds.tsv")).read().splitlines()
        assert lines[0] == "fold\trole\tid"
        held = [l for l in lines[1:] if l.split("\t")[1] == "held_out"]
        assert len(held) == 12

    def test_train_eval_infer_pipeline(self, dataset):
        root, manifest = dataset
        run = str(root / "run")
        assert main(["train", "--config", "toy", "--manifest", manifest,
                     "--epochs", "2", "--out", run, "--seed", "5"]) == EXIT_OK
        ckpt = os.path.join(run, "last.ckpt")
        assert os.path.exists(ckpt)
        assert os.path.exists(os.path.join(run, "runlog.tsv"))

        report = str(root / "report")
        assert main(["eval", "--checkpoint", ckpt, "--manifest", manifest,
                     "--tta", "0", "--out", report]) == EXIT_OK
        with open(os.path.join(report, "per_image.tsv")) as fh:
            rows = fh.read().splitlines()[1:]
        assert len(rows) == 12  # one row per manifest image

        rows_m = read_manifest(manifest)
        infer = str(root / "infer")
        assert main(["infer", "--checkpoint", ckpt, "--image",
                     rows_m[0].image_path, "--out", infer]) == EXIT_OK
        outs = sorted(os.listdir(infer))
        assert any(n.endswith("_prob.png") for n in outs)
        assert any(n.endswith("_mask.png") for n in outs)

    def test_train_twice_same_seed_bitwise_identical(self, dataset):
        root, manifest = dataset
        runs = []
        for tag in ("da", "db"):
            out = str(root / tag)
            assert main(["train", "--config", "toy", "--manifest", manifest,
                         "--epochs", "1", "--out", out, "--seed", "9"]) == EXIT_OK
            runs.append(os.path.join(out, "last.ckpt"))
        assert open(runs[0], "rb").read() == open(runs[1], "rb").read()

    def test_constant_half_probability_thresholds_to_ones(self, dataset, tmp_path):
        # zero every head and the final bias: fused logit 0 -> prob 0.5 ->
        # the inclusive threshold yields an all-ones mask
        from vesselseg.checkpoint import save_checkpoint
        root, manifest = dataset
        run = str(root / "run")
        ckpt = os.path.join(run, "last.ckpt")
        cfg_text, meta, arrays = load_checkpoint(ckpt)
        for name in arrays:
            if ".head." in name and not name.startswith("adam."):
                arrays[name] = np.zeros_like(arrays[name])
        stub = str(tmp_path / "stub.ckpt")
        save_checkpoint(stub, cfg_text, meta, arrays)

        rows_m = read_manifest(manifest)
        out = str(tmp_path / "inf")
        assert main(["infer", "--checkpoint", stub, "--image",
                     rows_m[0].image_path, "--out", out]) == EXIT_OK
        mask = read_mask(os.path.join(
            out, os.path.basename(rows_m[0].image_path).replace(".png", "_mask.png")))
        assert mask.min() == 1

    def test_missing_manifest_exits_io(self):
        assert main(["splits", "--manifest", "/does/not/exist.tsv",
                     "--out", "/tmp/x"]) == EXIT_IO

    def test_bad_config_exits_config(self, dataset, tmp_path):
        root, manifest = dataset
        bad = str(tmp_path / "bad.cfg")
        open(bad, "w").write("loss.dice_weight = 0.9\n")
        assert main(["train", "--config", bad, "--manifest", manifest,
                     "--out", str(tmp_path / "r")]) == EXIT_CONFIG

    def test_eval_with_tta(self, dataset):
        root, manifest = dataset
        ckpt = os.path.join(str(root / "run"), "last.ckpt")
        out = str(root / "report_tta")
        assert main(["eval", "--checkpoint", ckpt, "--manifest", manifest,
                     "--tta", "8", "--out", out]) == EXIT_OK
        assert os.path.exists(os.path.join(out, "roc_points.tsv"))

    def test_eval_lists_missing_images(self, dataset, tmp_path):
        root, manifest = dataset
        ckpt = os.path.join(str(root / "run"), "last.ckpt")
        rows = read_manifest(manifest)
        broken = rows[:3] + [ManifestRow("synth", str(tmp_path / "ghost.png"),
                                         rows[0].mask_path)]
        bad_manifest = str(tmp_path / "broken.tsv")
        write_manifest(bad_manifest, broken)
        out = str(tmp_path / "rep")
        assert main(["eval", "--checkpoint", ckpt, "--manifest", bad_manifest,
                     "--tta", "0", "--out", out]) == EXIT_OK
        text = open(os.path.join(out, "summary.txt")).read()
        assert "MISSING" in text and "ghost.png" in text

    def test_runlog_reproducibility_header(self, dataset):
        root, _ = dataset
        first = open(os.path.join(str(root / "run"), "runlog.tsv")).readline()
        assert first.startswith("# config_hash=")
        assert "seed=" in first and "version=" in first
