import json
import os

import numpy as np
import pytest

from fflab import cli
from fflab import data as D
from fflab import model as M


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("ds") / "data"
    code = cli.main(["gen-data", "--out", str(out), "--count", "2",
                     "--size", "64", "--seed", "5"])
    assert code == 0
    return out


@pytest.fixture(scope="module")
def trained(tmp_path_factory, dataset):
    out = tmp_path_factory.mktemp("run") / "tiny"
    code = cli.main(["train", "--data", str(dataset), "--out", str(out),
                     "--preset", "tiny", "--steps", "2", "--batch-size", "2",
                     "--crop", "64", "--seed", "1"])
    assert code == 0
    return out


def test_gen_data_deterministic(tmp_path):
    argv = ["gen-data", "--count", "3", "--size", "64", "--seed", "1"]
    assert cli.main(argv + ["--out", str(tmp_path / "a")]) == 0
    assert cli.main(argv + ["--out", str(tmp_path / "b")]) == 0
    names = sorted(os.listdir(tmp_path / "a"))
    assert names == sorted(os.listdir(tmp_path / "b"))
    assert "run_config.json" in names
    for name in names:
        assert ((tmp_path / "a" / name).read_bytes()
                == (tmp_path / "b" / name).read_bytes()), name


def test_gen_data_echo_contents(dataset):
    echo = json.loads((dataset / "run_config.json").read_text())
    assert echo["command"] == "gen-data"
    assert echo["count"] == 2
    assert echo["scene"]["seed"] == 5
    assert "out" not in echo


def test_gen_data_rejects_bad_scene_param(tmp_path, capsys):
    code = cli.main(["gen-data", "--out", str(tmp_path / "x"),
                     "--parent-rate", "-1"])
    assert code == cli.EXIT_BAD_CONFIG
    assert "error:" in capsys.readouterr().err


def test_train_outputs(trained):
    for name in ("run_config.json", "model_config.json",
                 "checkpoint.ffck", "loss_curve.csv"):
        assert (trained / name).exists(), name
    echo = json.loads((trained / "run_config.json").read_text())
    assert echo["command"] == "train"
    assert echo["train"]["steps"] == 2
    cfg = M.FFNetConfig.from_json((trained / "model_config.json").read_text())
    assert cfg == M.tiny_config()


def test_train_fusion_and_ftm_overrides(tmp_path, dataset):
    out = tmp_path / "run"
    code = cli.main(["train", "--data", str(dataset), "--out", str(out),
                     "--preset", "tiny", "--fusion", "add", "--no-ftm",
                     "--steps", "1", "--batch-size", "1", "--crop", "64"])
    assert code == 0
    cfg = M.FFNetConfig.from_json((out / "model_config.json").read_text())
    assert cfg.fusion == "add"
    assert not cfg.use_ftm


def test_train_missing_data(tmp_path, capsys):
    code = cli.main(["train", "--data", str(tmp_path / "nope"),
                     "--out", str(tmp_path / "out"), "--preset", "tiny",
                     "--steps", "1"])
    assert code == cli.EXIT_MISSING_INPUT


def test_train_invalid_config_file(tmp_path, dataset):
    bad = tmp_path / "bad.json"
    bad.write_text('{"stage_width": [1, 2, 3]}')
    code = cli.main(["train", "--data", str(dataset), "--out",
                     str(tmp_path / "out"), "--config", str(bad), "--steps", "1"])
    assert code == cli.EXIT_BAD_CONFIG


def test_eval_prints_and_writes(trained, dataset, tmp_path, capsys):
    out = tmp_path / "metrics"
    code = cli.main(["eval", "--data", str(dataset),
                     "--checkpoint", str(trained / "checkpoint.ffck"),
                     "--out", str(out)])
    assert code == 0
    text = capsys.readouterr().out
    assert "MAE" in text and "N 2" in text
    metrics = json.loads((out / "metrics.json").read_text())
    assert metrics["n_images"] == 2
    assert len(metrics["rows"]) == 2


def test_eval_missing_checkpoint(dataset, tmp_path, capsys):
    code = cli.main(["eval", "--data", str(dataset),
                     "--checkpoint", str(tmp_path / "no.ffck")])
    assert code == cli.EXIT_MISSING_INPUT


def test_eval_corrupt_checkpoint(trained, dataset, tmp_path):
    bad = tmp_path / "bad.ffck"
    bad.write_bytes(b"JUNK" + (trained / "checkpoint.ffck").read_bytes()[4:])
    config = trained / "model_config.json"
    code = cli.main(["eval", "--data", str(dataset), "--checkpoint", str(bad),
                     "--model-config", str(config)])
    assert code == cli.EXIT_BAD_CHECKPOINT


def test_eval_mismatched_config(trained, dataset, tmp_path):
    toy = tmp_path / "toy.json"
    toy.write_text(M.toy_config().to_json())
    code = cli.main(["eval", "--data", str(dataset),
                     "--checkpoint", str(trained / "checkpoint.ffck"),
                     "--model-config", str(toy)])
    assert code == cli.EXIT_BAD_CHECKPOINT


def test_analyze_table_and_json(tmp_path, capsys):
    out = tmp_path / "rep"
    code = cli.main(["analyze", "--preset", "tiny",
                     "--input-shape", "1,1,32,32", "--out", str(out)])
    assert code == 0
    assert "total" in capsys.readouterr().out
    parsed = json.loads((out / "analysis.json").read_text())
    assert parsed["totals"]["params"] == 2870


def test_analyze_bad_shape(capsys):
    code = cli.main(["analyze", "--preset", "tiny", "--input-shape", "1,2"])
    assert code == cli.EXIT_BAD_CONFIG


def test_erf_without_checkpoint(tmp_path):
    out = tmp_path / "erf"
    code = cli.main(["erf", "--preset", "tiny", "--branch", "1",
                     "--probes", "1", "--size", "32", "--out", str(out)])
    assert code == 0
    assert (out / "erf_branch_1.pgm").exists()
    assert (out / "run_config.json").exists()


def test_erf_all_branches_from_checkpoint(trained, tmp_path):
    out = tmp_path / "erf"
    code = cli.main(["erf", "--checkpoint", str(trained / "checkpoint.ffck"),
                     "--probes", "1", "--size", "32", "--out", str(out)])
    assert code == 0
    for b in (1, 2, 3):
        assert (out / f"erf_branch_{b}.pgm").exists()


def test_heatmap(trained, tmp_path):
    image_path = tmp_path / "scene.pgm"
    img, _ = D.generate_scene(D.SceneConfig(height=64, width=64, seed=9))
    D.write_pgm(image_path, img)
    out = tmp_path / "heat"
    code = cli.main(["heatmap", "--checkpoint", str(trained / "checkpoint.ffck"),
                     "--image", str(image_path), "--out", str(out)])
    assert code == 0
    for b in (1, 2, 3):
        assert (out / f"heatmap_branch_{b}.pgm").exists()


def test_heatmap_missing_image(trained, tmp_path):
    code = cli.main(["heatmap", "--checkpoint", str(trained / "checkpoint.ffck"),
                     "--image", str(tmp_path / "no.pgm"), "--out", str(tmp_path / "h")])
    assert code == cli.EXIT_MISSING_INPUT


def test_export_density(trained, tmp_path, capsys):
    image_path = tmp_path / "scene.pgm"
    img, _ = D.generate_scene(D.SceneConfig(height=64, width=64, seed=10))
    D.write_pgm(image_path, img)
    out = tmp_path / "dens"
    code = cli.main(["export-density",
                     "--checkpoint", str(trained / "checkpoint.ffck"),
                     "--image", str(image_path), "--out", str(out)])
    assert code == 0
    assert "predicted count" in capsys.readouterr().out
    assert (out / "density.pgm").exists()
    first = (out / "density.csv").read_text().splitlines()[0]
    assert first.startswith("count,")
    float(first.split(",")[1])


def test_unknown_flag_exits_2(capsys):
    with pytest.raises(SystemExit) as e:
        cli.main(["gen-data", "--out", "x", "--bogus"])
    assert e.value.code == 2


def test_unknown_subcommand_exits_2(capsys):
    with pytest.raises(SystemExit) as e:
        cli.main(["frobnicate"])
    assert e.value.code == 2


def test_help_shows_exit_codes(capsys):
    with pytest.raises(SystemExit) as e:
        cli.main(["--help"])
    assert e.value.code == 0
    assert "exit codes:" in capsys.readouterr().out


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_divergence_exit_code(tmp_path, dataset, capsys):
    out = tmp_path / "boom"
    code = cli.main(["train", "--data", str(dataset), "--out", str(out),
                     "--preset", "tiny", "--steps", "8", "--batch-size", "1",
                     "--crop", "64", "--lr", "1e38"])
    assert code == cli.EXIT_DIVERGED
    assert "error:" in capsys.readouterr().err
    # The last finite-loss parameters were still checkpointed.
    assert (out / "checkpoint.ffck").exists()
