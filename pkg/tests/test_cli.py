import json

import numpy as np
import pytest

from egoav.asd import PredictionRow, write_predictions
from egoav.cli import main
from egoav.config import load_run_config
from egoav.scenes import read_manifest


@pytest.fixture(autouse=True)
def clean_environment(monkeypatch):
    monkeypatch.delenv("EGOAV_TRAIN__MASKING__R", raising=False)


def corpus_args(out):
    return ["generate", "--out", str(out), "--scenes", "3", "--seconds", "2"]


def test_generate(tmp_path, capsys):
    out = tmp_path / "corpus"
    assert main(["--workdir", str(tmp_path), "--seed", "1", *corpus_args("corpus")]) == 0
    assert len(read_manifest(out / "manifest.jsonl")) == 6
    assert (out / "config.ini").is_file()
    assert (out / "run.log").is_file()

    config = load_run_config(out / "config.ini", environ={})
    assert config.corpus.n_scenes == 3
    assert config.corpus.seed == 1
    printed = capsys.readouterr().out
    assert f"# config {config.hash()}" in printed


def test_usage_errors_exit_2(tmp_path, capsys):
    assert main(["generate"]) == 2
    assert main(["--workdir", str(tmp_path), "pretrain", "--manifest", "m.jsonl", "--mask-r", "1.5"]) == 2
    assert "r out of range" in capsys.readouterr().err
    assert main(["--workdir", str(tmp_path), "sweep-r", "--manifest", "m.jsonl", "--r"]) == 2
    assert main(["--workdir", str(tmp_path), "eval-asd", "--checkpoint", "missing.pt"]) == 2
    assert main(["--workdir", str(tmp_path), "stats", "--manifest", "missing.jsonl"]) == 2


def test_missing_config_file_exits_2(tmp_path):
    assert main(["--config", str(tmp_path / "absent.ini"), *corpus_args(tmp_path / "c")]) == 2


def test_eval_denoise_identity_mask(small_corpus, tmp_path):
    argv = ["--workdir", str(tmp_path), "eval-denoise", "--manifest", str(small_corpus), "--mask", "all-ones-debug"]
    assert main(argv) == 0
    report = json.loads((tmp_path / "eval-denoise" / "report.json").read_text())
    assert report["mask"] == "all-ones-debug"
    assert report["si_sdri_mean"] == pytest.approx(0.0, abs=1e-2)


def test_finetune_asd_from_scratch(small_corpus, tmp_path, capsys):
    argv = ["--workdir", str(tmp_path), "finetune-asd", "--manifest", str(small_corpus), "--tiny"]
    assert main([*argv, "--steps", "1"]) == 2
    assert "--checkpoint is required" in capsys.readouterr().err

    assert main([*argv, "--steps", "1", "--from-scratch"]) == 0
    assert (tmp_path / "asd" / "asd.pt").is_file()
    assert "asd.pt" in capsys.readouterr().out


def test_pretrain_then_attend(small_corpus, tmp_path):
    workdir = ["--workdir", str(tmp_path)]
    assert main([*workdir, "pretrain", "--manifest", str(small_corpus), "--tiny", "--steps", "1", "--name", "pre"]) == 0
    checkpoint = tmp_path / "pre" / "checkpoints" / "last.pt"
    assert checkpoint.is_file()

    argv = [*workdir, "attend", "--manifest", str(small_corpus), "--checkpoint", str(checkpoint)]
    assert main(argv) == 0
    clip_id = read_manifest(small_corpus, split="test")[0].clip_id
    grid = np.load(tmp_path / "attend" / f"{clip_id}.npy")
    assert grid.ndim == 2
    assert grid.min() >= 0.0 and grid.max() <= 1.0
    assert (tmp_path / "attend" / f"{clip_id}.png").is_file()

    assert main([*argv, "--clip", "nope"]) == 2
    assert main([*argv, "--index", "99"]) == 2


def test_sweep_inpaint(small_corpus, tmp_path, capsys):
    argv = ["--workdir", str(tmp_path), "sweep-r", "--manifest", str(small_corpus), "--tiny"]
    assert main([*argv, "--r", "0", "100", "--steps", "1", "--task", "inpaint"]) == 0

    table = (tmp_path / "sweep" / "sweep.csv").read_text().splitlines()
    assert table[0] == "r,metric,value,checkpoint"
    assert [line.split(",")[:2] for line in table[1:]] == [["0", "channel_mse"], ["100", "channel_mse"]]
    assert (tmp_path / "sweep" / "r100" / "inpaint" / "report.json").is_file()
    assert "r (%)" in capsys.readouterr().out


def test_denoise_round_trip(small_corpus, tmp_path, capsys):
    workdir = ["--workdir", str(tmp_path)]
    argv = [*workdir, "finetune-denoise", "--manifest", str(small_corpus), "--tiny", "--steps", "1"]
    assert main([*argv, "--from-scratch", "--vision", "none", "--snr", "2.5"]) == 0
    checkpoint = tmp_path / "denoise" / "denoise.pt"
    assert checkpoint.is_file()
    capsys.readouterr()

    argv = [*workdir, "eval-denoise", "--manifest", str(small_corpus), "--checkpoint", str(checkpoint)]
    assert main([*argv, "--write-audio", "--snr", "5"]) == 0
    report = json.loads((tmp_path / "eval-denoise" / "report.json").read_text())
    assert report["mode"] == "none" and report["snr_db"] == 5.0
    assert report["n_clips"] == 2
    assert list((tmp_path / "eval-denoise" / "audio").glob("*.wav"))
    assert "SI-SDRi" in capsys.readouterr().out


def test_eval_asd_scores_predictions_file(tmp_path, capsys):
    path = tmp_path / "predictions.csv"
    write_predictions([PredictionRow("c", "a", 0, 0.9, 1), PredictionRow("c", "a", 1, 0.2, 0)], path)
    assert main(["--workdir", str(tmp_path), "eval-asd", "--predictions", "predictions.csv"]) == 0
    assert "mAP 100.00" in capsys.readouterr().out
