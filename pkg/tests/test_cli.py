import json
import re

import numpy as np
import pytest

from mmae.cli import run_cli
from mmae.data import read_labels, read_matrix

ERROR_LINE = re.compile(r'^error stage=\S+ kind=\w+ message=".*"$')


def synth(tmp_path, name="data", *extra):
    out = tmp_path / name
    assert run_cli(["synth", "--out", str(out), "--classes", "4", "--per-class", "15",
                    "--dims", "6,10,8", "--seed", "7", *extra]) == 0
    return out


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipe")
    data = synth(root)
    manifest = str(data / "manifest.ini")
    assert run_cli(["train", "--data", manifest, "--out", str(root / "model"), "--epochs", "30",
                    "--latent-dim", "4", "--hidden", "16,16", "--batch-size", "16", "--quiet"]) == 0
    assert run_cli(["embed", "--checkpoint", str(root / "model" / "mmae.ckpt"), "--data", manifest,
                    "--out", str(root / "emb")]) == 0
    assert run_cli(["cluster", "--embeddings", str(root / "emb" / "test_fused.npy"),
                    "--labels", str(root / "emb" / "test_labels.npy"), "--k", "4",
                    "--out", str(root / "cl")]) == 0
    return root


def read_rows(path):
    lines = [l for l in path.read_text().splitlines() if not l.startswith("#")]
    header = lines[0].split(",")
    return [dict(zip(header, l.split(","))) for l in lines[1:]]


def test_verify_passes(capsys):
    assert run_cli(["verify"]) == 0
    out = capsys.readouterr().out
    assert "FAIL" not in out
    assert re.search(r"(\d+)/\1 checks passed", out)


def test_synth_deterministic(tmp_path):
    a, b = synth(tmp_path, "a"), synth(tmp_path, "b")
    for f in sorted(p.name for p in a.iterdir()):
        assert (a / f).read_bytes() == (b / f).read_bytes(), f
    manifest = json.loads((a / "MANIFEST.json").read_text())["files"]
    assert manifest["train_image.npy"]["seed"] == 7
    assert set(manifest) >= {"manifest.ini", "test_labels.npy"}


def test_full_pipeline_clusters(pipeline):
    rows = read_rows(pipeline / "cl" / "cluster.csv")
    assert len(rows) == 1 and rows[0]["k"] == "4"
    assert float(rows[0]["ari"]) >= 0.95
    z = read_matrix(pipeline / "emb" / "test_fused.npy")
    assert z.shape == (60, 4)
    assert read_labels(pipeline / "emb" / "test_labels.npy").shape == (60,)
    history = (pipeline / "model" / "history.csv").read_text().splitlines()
    assert history[0].startswith("# mmae train seed=42 config=")
    assert history[1] == "epoch,rec_I,rec_A,rec_T,align,total" and len(history) == 32


def test_rerun_is_byte_identical(pipeline, tmp_path):
    manifest = str(pipeline / "data" / "manifest.ini")
    args = ["--epochs", "30", "--latent-dim", "4", "--hidden", "16,16", "--batch-size", "16", "--quiet"]
    assert run_cli(["train", "--data", manifest, "--out", str(tmp_path), *args]) == 0
    for name in ("mmae.ckpt", "history.csv"):
        assert (tmp_path / name).read_bytes() == (pipeline / "model" / name).read_bytes()


def test_baseline_and_report(pipeline, tmp_path):
    manifest = str(pipeline / "data" / "manifest.ini")
    assert run_cli(["baseline", "--data", manifest, "--k", "3,4", "--pca-dims", "5,5,5",
                    "--fusion-dim", "5", "--out", str(tmp_path / "b")]) == 0
    rows = read_rows(tmp_path / "b" / "baseline.csv")
    assert [(r["method"], r["source"]) for r in rows[::2]] == [
        ("single-pca", "image"), ("single-pca", "audio"), ("single-pca", "text"), ("fusion-pca", "concat")]
    assert run_cli(["report", "--inputs", str(tmp_path / "b" / "baseline.csv"),
                    str(pipeline / "cl" / "cluster.csv"), "--out", str(tmp_path / "r")]) == 0
    summary = read_rows(tmp_path / "r" / "summary.csv")
    assert len(summary) == 9 and summary[-1]["method"] == "mmae"


def test_report_refuses_mixed_seeds(pipeline, tmp_path, capsys):
    emb = pipeline / "emb"
    assert run_cli(["cluster", "--embeddings", str(emb / "test_image.npy"), "--labels",
                    str(emb / "test_labels.npy"), "--k", "4", "--seed", "5", "--out", str(tmp_path)]) == 0
    code = run_cli(["report", "--inputs", str(tmp_path / "cluster.csv"), str(pipeline / "cl" / "cluster.csv"),
                    "--out", str(tmp_path / "r")])
    assert code == 1
    assert "different seeds" in capsys.readouterr().err


def test_outputs_independent_of_directory(pipeline, tmp_path):
    emb = pipeline / "emb"
    for name in ("x", "y"):
        assert run_cli(["cluster", "--embeddings", str(emb / "test_fused.npy"), "--labels",
                        str(emb / "test_labels.npy"), "--k", "4", "--out", str(tmp_path / name)]) == 0
    assert (tmp_path / "x" / "cluster.csv").read_bytes() == (tmp_path / "y" / "cluster.csv").read_bytes()
    assert (tmp_path / "x" / "cluster.csv").read_bytes() == (pipeline / "cl" / "cluster.csv").read_bytes()


def test_project(pipeline, tmp_path):
    emb = pipeline / "emb"
    assert run_cli(["project", "--embeddings", str(emb / "test_fused.npy"),
                    "--overlay", str(emb / "test_image.npy"), str(emb / "test_audio.npy"), str(emb / "test_text.npy"),
                    "--labels", str(emb / "test_labels.npy"), "--perplexity", "10", "--iters", "300",
                    "--out", str(tmp_path)]) == 0
    svg = (tmp_path / "overlay_tsne.svg").read_text()
    assert svg.count("<circle") == 180 and svg.count('class="legend-entry"') == 3
    assert (tmp_path / "test_fused_pca.svg").read_text().count("<circle") == 60
    coords = read_rows(tmp_path / "overlay_pca.csv")
    assert {r["source"] for r in coords} == {"image", "audio", "text"}
    files = json.loads((tmp_path / "MANIFEST.json").read_text())["files"]
    assert len(files) == 8


def test_config_file_with_flag_override(pipeline, tmp_path):
    cfg = tmp_path / "run.ini"
    cfg.write_text("[run]\nseed = 3\n\n[train]\nepochs = 2\nlatent-dim = 3\nhidden = 4\nquiet = true\n")
    manifest = str(pipeline / "data" / "manifest.ini")
    assert run_cli(["train", "--config", str(cfg), "--data", manifest, "--out", str(tmp_path / "m"),
                    "--epochs", "3"]) == 0
    history = (tmp_path / "m" / "history.csv").read_text().splitlines()
    assert "seed=3" in history[0]
    assert len(history) == 5


def test_config_file_errors(tmp_path, capsys):
    cfg = tmp_path / "bad.ini"
    cfg.write_text("[synth]\nclasses = many\n")
    assert run_cli(["synth", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 1
    cfg.write_text("[synth]\nwidth = 3\n")
    assert run_cli(["synth", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 1
    assert run_cli(["synth", "--config", str(tmp_path / "none.ini"), "--out", str(tmp_path / "o")]) == 1
    for line in capsys.readouterr().err.splitlines():
        assert ERROR_LINE.match(line), line


def test_unknown_flag(capsys):
    assert run_cli(["train", "--bogus"]) == 1
    err = capsys.readouterr().err
    assert "usage" in err and "--bogus" in err
    assert ERROR_LINE.match(err.strip())


def test_no_subcommand(capsys):
    assert run_cli([]) == 1
    assert "usage" in capsys.readouterr().err


def test_missing_required_option(capsys):
    assert run_cli(["train", "--out", "x"]) == 1
    assert "--data" in capsys.readouterr().err


def test_runtime_error_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"garbage")
    code = run_cli(["embed", "--checkpoint", str(bad), "--data", str(tmp_path / "m.ini"), "--out", str(tmp_path)])
    assert code == 2
    err = capsys.readouterr().err.strip()
    assert ERROR_LINE.match(err) and "kind=CheckpointError" in err


def test_corrupt_array_exit_code(tmp_path, capsys):
    bad = tmp_path / "e.npy"
    bad.write_bytes(b"\x93NUMPY" + b"\0" * 20)
    np.save(tmp_path / "l.npy", np.zeros(3, dtype="<i8"))
    code = run_cli(["cluster", "--embeddings", str(bad), "--labels", str(tmp_path / "l.npy"), "--k", "2",
                    "--out", str(tmp_path / "o")])
    assert code == 2
    assert "kind=FormatError" in capsys.readouterr().err
