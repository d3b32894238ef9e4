import json

import numpy as np
import pytest

from mmaseg.affinity import read_affinity_export
from mmaseg.cli import main
from mmaseg.config import TrainConfig
from mmaseg.metrics import parse_report

from conftest import TINY


def tiny_sets(**extra):
    kv = {**TINY, "epochs": 2, **extra}
    out = []
    for k, v in kv.items():
        v = ",".join(map(str, v)) if isinstance(v, tuple) else v
        out += ["--set", f"{k}={v}"]
    return out


@pytest.fixture(scope="module")
def data_file(tmp_path_factory):
    p = tmp_path_factory.mktemp("d") / "d.mma"
    assert main(["gen", "--out", str(p), "--seed", "3", "--scenes", "4", "--eval-scenes", "2", "--points", "512"]) == 0
    return p


@pytest.fixture(scope="module")
def trained(data_file, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(["train", "--data", str(data_file), "--out", str(out), "--ablation", "full", *tiny_sets()]) == 0
    return out


def error_category(capsys):
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and err[0].startswith("error: ")
    return err[0].split(":")[1].strip()


def test_gen_twice_identical(tmp_path, capsys):
    a, b = tmp_path / "a.mma", tmp_path / "b.mma"
    for p in (a, b):
        assert main(["gen", "--seed", "1", "--out", str(p), "--scenes", "3", "--eval-scenes", "1"]) == 0
    assert a.read_bytes() == b.read_bytes()
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0].split("\t")[0] == "floor" and len(lines) == 12


def test_gen_default_counts():
    import argparse

    from mmaseg.cli import build_parser

    args = build_parser().parse_args(["gen", "--out", "x"])
    assert (args.scenes, args.eval_scenes) == (200, 50)
    assert isinstance(args, argparse.Namespace)


@pytest.mark.parametrize("flags", [["--scenes", "0"], ["--classes", "2"], ["--points", "10"]])
def test_gen_invalid_counts(tmp_path, capsys, flags):
    assert main(["gen", "--out", str(tmp_path / "x.mma"), *flags]) == 2
    assert error_category(capsys) == "invalid-count"


def test_gen_unwritable(tmp_path, capsys):
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert main(["gen", "--out", str(blocker / "x.mma"), "--scenes", "1"]) == 2
    assert error_category(capsys) == "unwritable-path"


def test_train_outputs(trained):
    cfg = TrainConfig.from_text((trained / "config.txt").read_text())
    assert cfg.epochs == 2 and cfg.transformer_enabled and cfg.ncw_enabled
    rows = [json.loads(s) for s in (trained / "metrics.jsonl").read_text().splitlines()]
    assert [r["epoch"] for r in rows] == [1, 2]
    assert sum("miou" in r for r in rows) == 1
    rows_c = (trained / "report.txt").read_text().split("#CLASSES\n")[1].splitlines()[1:]
    assert len([r for r in rows_c if not r.startswith("#")]) == 6


def test_eval_matches_train_report(trained, data_file, tmp_path, capsys):
    assert main(["eval", "--data", str(data_file), "--checkpoint", str(trained / "best.ckpt"), "--out", str(tmp_path)]) == 0
    assert (tmp_path / "report.txt").read_text() == (trained / "report.txt").read_text()
    assert parse_report(capsys.readouterr().out)["miou"] >= 0


def test_eval_class_mismatch(trained, tmp_path, capsys):
    other = tmp_path / "c4.mma"
    assert main(["gen", "--out", str(other), "--scenes", "2", "--eval-scenes", "1", "--classes", "4", "--points", "512"]) == 0
    capsys.readouterr()
    assert main(["eval", "--data", str(other), "--checkpoint", str(trained / "best.ckpt"), "--out", str(tmp_path)]) == 2
    assert error_category(capsys) == "incompatible-checkpoint"


def test_eval_hash_mismatch(trained, tmp_path, capsys):
    other = tmp_path / "p1024.mma"
    assert main(["gen", "--out", str(other), "--scenes", "2", "--eval-scenes", "1"]) == 0
    capsys.readouterr()
    assert main(["eval", "--data", str(other), "--checkpoint", str(trained / "best.ckpt"), "--out", str(tmp_path)]) == 2
    assert error_category(capsys) == "incompatible-checkpoint"


def test_missing_inputs(data_file, tmp_path, capsys):
    assert main(["train", "--data", str(tmp_path / "nope"), "--out", str(tmp_path)]) == 2
    assert error_category(capsys) == "missing-data"
    assert main(["eval", "--data", str(data_file), "--checkpoint", str(tmp_path / "nope"), "--out", str(tmp_path)]) == 2
    assert error_category(capsys) == "missing-checkpoint"
    junk = tmp_path / "junk"
    junk.write_bytes(b"garbage")
    assert main(["eval", "--data", str(junk), "--checkpoint", str(junk), "--out", str(tmp_path)]) == 2
    assert error_category(capsys) == "bad-data"
    assert main(["eval", "--data", str(data_file), "--checkpoint", str(junk), "--out", str(tmp_path)]) == 2
    assert error_category(capsys) == "bad-checkpoint"


def test_unknown_ablation_lists_ids(data_file, tmp_path, capsys):
    assert main(["train", "--data", str(data_file), "--out", str(tmp_path), "--ablation", "A.9"]) == 2
    err = capsys.readouterr().err
    assert "error: config:" in err and "baseline" in err and "full-no-transformer" in err


def test_config_file_and_overrides(data_file, tmp_path, capsys):
    cfg_file = tmp_path / "c.txt"
    cfg_file.write_text("# tiny run\nepochs=1\ntau=0.5\n")
    out = tmp_path / "o"
    assert main(["train", "--data", str(data_file), "--out", str(out), "--config", str(cfg_file), *tiny_sets(epochs=1, theta=0.2)]) == 0
    cfg = TrainConfig.from_text((out / "config.txt").read_text())
    assert (cfg.epochs, cfg.tau, cfg.theta) == (1, 0.5, 0.2)
    bad = tmp_path / "bad.txt"
    bad.write_text("nosuchkey=1\n")
    assert main(["train", "--data", str(data_file), "--out", str(out), "--config", str(bad)]) == 2
    assert error_category(capsys) == "config"


def test_ablation_baseline_flags(data_file, tmp_path):
    out = tmp_path / "b"
    assert main(["train", "--data", str(data_file), "--out", str(out), "--ablation", "baseline", *tiny_sets(epochs=1)]) == 0
    cfg = TrainConfig.from_text((out / "config.txt").read_text())
    assert not (cfg.multimodal_enabled or cfg.multiscale_enabled or cfg.ncw_enabled or cfg.transformer_enabled)


def test_ablate_table(data_file, tmp_path):
    out = tmp_path / "grid"
    argv = ["ablate", "--data", str(data_file), "--out", str(out), "--ablations", "baseline", "full", "--seeds", "0"]
    assert main(argv + tiny_sets(epochs=1)) == 0
    rows = (out / "ablation.tsv").read_text().strip().splitlines()
    assert rows[0].startswith("ablation\trow") and [r.split("\t")[:2] for r in rows[1:]] == [["baseline", "A.1"], ["full", "A.8"]]
    assert (out / "full-s0" / "best.ckpt").exists()


def test_affinity_export(trained, data_file, tmp_path, capsys):
    argv = ["affinity-export", "--data", str(data_file), "--checkpoint", str(trained / "best.ckpt"), "--out", str(tmp_path), "--scene", "1"]
    assert main(argv) == 0
    a, m = read_affinity_export(tmp_path / "affinity-scene1.bin")
    assert a.shape == (128, 128) and m.shape == (64, 64)
    assert np.all(np.diag(a) == 1) and np.all(a >= np.float32(0.3))
    argv[-1] = "99"
    assert main(argv) == 2
    capsys.readouterr()


def test_threads_validation(capsys, monkeypatch):
    assert main(["--threads", "0", "gen", "--out", "x"]) == 2
    assert error_category(capsys) == "config"
    monkeypatch.setenv("MMA_THREADS", "many")
    assert main(["gen", "--out", "x"]) == 2
    assert error_category(capsys) == "config"
