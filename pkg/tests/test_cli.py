import json
import os
import subprocess
import sys

import numpy as np
import pytest

from kneeoa.cli import build_parser, main, resolve
from kneeoa.dataset import read_manifest
from kneeoa.imaging import GrayImage, read_image, read_rgb, write_image
from kneeoa.synthetic import write_radiograph_tree


def parse(argv, env=None):
    parser = build_parser()
    return resolve(parser, parser.parse_args(argv), env if env is not None else {})


class TestResolution:
    def test_defaults(self):
        args = parse(["experiment", "--results", "r"])
        assert (args.seed, args.ddim_steps, args.eta, args.per_class_count) == (0, 50, 0.0, 200)
        assert (args.batch, args.lr, args.epochs_stage1 + args.epochs_stage2) == (8, 1e-3, 10)
        assert args.data is None

    def test_precedence(self, tmp_path):
        cfg = tmp_path / "k.ini"
        cfg.write_text("[experiment]\nseed = 7\nlr = 0.01\ndata = /from/config\n", encoding="utf-8")
        env = {"OA_DATA_ROOT": "/from/env"}
        args = parse(["--config", str(cfg), "experiment", "--results", "r", "--seed", "3"], env)
        assert args.seed == 3 and args.lr == 0.01 and str(args.data) == "/from/config"
        args = parse(["experiment", "--results", "r"], env)
        assert str(args.data) == "/from/env"
        args = parse(["experiment", "--results", "r", "--data", "/flag"], env)
        assert str(args.data) == "/flag"

    def test_dashed_config_keys(self, tmp_path):
        cfg = tmp_path / "k.ini"
        cfg.write_text("[train]\nepochs-stage1 = 2\nunfreeze_last = 3\n", encoding="utf-8")
        args = parse(["--config", str(cfg), "train", "--out", "m"])
        assert args.epochs_stage1 == 2 and args.unfreeze_last == 3

    def test_missing_data_root(self, tmp_path, monkeypatch, capsys):
        monkeypatch.delenv("OA_DATA_ROOT", raising=False)
        with pytest.raises(SystemExit):
            main(["assemble", "--out", str(tmp_path / "m.tsv")])
        assert "OA_DATA_ROOT" in capsys.readouterr().err


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    write_radiograph_tree(root / "data", {0: 10, 1: 8, 2: 8, 3: 6, 4: 6}, size=16, seed=2)
    return root


class TestCommands:
    def test_prep(self, corpus, tmp_path, capsys):
        assert main(["prep", "--in", str(corpus / "data"), "--out", str(tmp_path / "pre")]) == 0
        assert read_image(tmp_path / "pre" / "4" / "k00000.pgm").width == 16
        assert "38 images" in capsys.readouterr().out

    def test_pipeline(self, corpus, tmp_path, capsys):
        d, w = str(corpus / "data"), tmp_path
        assert main(["diff-train", "--data", d, "--out", str(w / "dm"), "--grade", "4", "--epochs", "1",
                     "--base-channels", "4", "--embed-dim", "8", "--diffusion-size", "8", "--timesteps", "20"]) == 0
        assert main(["diff-sample", "--model", str(w / "dm" / "grade4.nngc"), "--grade", "4", "--count", "3",
                     "--timesteps", "20", "--ddim-steps", "4", "--out", str(w / "raw")]) == 0
        assert main(["upscale", "--in", str(w / "raw"), "--out", str(w / "gen"), "--upscale-size", "32",
                     "--final-size", "16"]) == 0
        assert read_image(w / "gen" / "4" / "00002.pgm").width == 16
        for g in (1, 2, 3):
            (w / "gen" / str(g)).mkdir()
        assert main(["assemble", "--data", d, "--generated", str(w / "gen"), "--per-class-count", "3",
                     "--out", str(w / "m.tsv")]) == 0
        assert main(["pretrain", "--out", str(w / "pre.nngc"), "--epochs", "1", "--per-class", "2",
                     "--size", "16"]) == 0
        assert main(["train", "--manifest", str(w / "m.tsv"), "--pretrained", str(w / "pre.nngc"), "--size", "16",
                     "--epochs-stage1", "1", "--epochs-stage2", "1", "--lora-rank", "4",
                     "--out", str(w / "clf.nngc")]) == 0
        capsys.readouterr()
        assert main(["eval", "--checkpoint", str(w / "clf.nngc"), "--manifest", str(w / "m.tsv")]) == 0
        metrics = json.loads(capsys.readouterr().out)
        assert np.array(metrics["confusion"]).sum() == len(read_manifest(w / "m.tsv").split("test"))
        img = corpus / "data" / "2" / "k00001.pgm"
        assert main(["gradcam", "--checkpoint", str(w / "clf.nngc"), "--image", str(img), "--class", "2",
                     "--layer", "2", "--blend", "0.4", "--out", str(w / "cam.ppm")]) == 0
        assert read_rgb(w / "cam.ppm").shape == (16, 16, 3)

    def test_assemble_missing_grade(self, corpus, tmp_path, capsys):
        (tmp_path / "gen" / "1").mkdir(parents=True)
        code = main(["assemble", "--data", str(corpus / "data"), "--generated", str(tmp_path / "gen"),
                     "--out", str(tmp_path / "m.tsv")])
        assert code == 2 and "grade 2" in capsys.readouterr().err

    def test_experiment_and_report(self, corpus, tmp_path, capsys):
        res = tmp_path / "res"
        assert main(["experiment", "--data", str(corpus / "data"), "--variant", "original", "--results", str(res),
                     "--size", "16", "--epochs-stage1", "1", "--epochs-stage2", "1", "--model-name", "Tiny"]) == 0
        capsys.readouterr()
        assert main(["report", "--results", str(res), "--format", "csv", "--out", str(tmp_path / "t.csv")]) == 0
        lines = (tmp_path / "t.csv").read_text(encoding="utf-8").splitlines()
        assert lines[0] == "Model,Original,Preprocessed,Augmented"
        assert lines[1].startswith("Tiny,") and lines[1].endswith(",-,-")

    def test_upscale_failure_exit_code(self, tmp_path):
        (tmp_path / "in").mkdir()
        write_image(tmp_path / "in" / "a.pgm", GrayImage(np.zeros((4, 4))))
        template = f"{sys.executable} -c \"import sys; sys.exit(1)\" {{in}} {{out}}"
        assert main(["upscale", "--in", str(tmp_path / "in"), "--out", str(tmp_path / "o"),
                     "--command", template]) == 1


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "kneeoa.cli", "--help"], capture_output=True, text=True,
                         env={**os.environ})
    assert out.returncode == 0
    for name in ("prep", "diff-train", "diff-sample", "upscale", "assemble", "pretrain", "train", "eval",
                 "gradcam", "experiment", "report"):
        assert name in out.stdout
