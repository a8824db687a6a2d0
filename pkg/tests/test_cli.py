"""CLI surface tests: subcommands, manifests, exit codes, config precedence."""

import json

import numpy as np
import pytest

from xmc.cli import main, resolve_train_config, build_parser
from xmc.synth import make_synthetic_corpus

TINY_FLAGS = [
    "--epochs", "2", "--batch-size", "8", "--b-top", "2", "--embed-dim", "8",
    "--max-size", "2", "--max-len", "12", "--hidden", "16", "--layers", "2",
    "--heads", "2", "--ff-dim", "32", "--seed", "5",
]


@pytest.fixture(scope="module")
def corpus_files(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    sc = make_synthetic_corpus(num_labels=8, num_topics=4, n_train=48, n_test=16, seed=5)
    return sc.write(out)


@pytest.fixture(scope="module")
def trained_run(tmp_path_factory, corpus_files):
    run_dir = tmp_path_factory.mktemp("run")
    code = main(
        ["train", "--sparse", str(corpus_files["train_sparse"]),
         "--text", str(corpus_files["train_text"]),
         "--out-dir", str(run_dir), *TINY_FLAGS]
    )
    assert code == 0
    return run_dir


# ---------------------------------------------------------------------------
# cluster


def test_cluster_command_writes_map_and_manifest(tmp_path, corpus_files):
    out = tmp_path / "map.txt"
    code = main(["cluster", "--sparse", str(corpus_files["train_sparse"]),
                 "--max-size", "2", "--seed", "7", "--out", str(out)])
    assert code == 0
    lines = out.read_text().splitlines()
    k, num_labels, s, seed = (int(v) for v in lines[0].split())
    assert (num_labels, s, seed) == (8, 2, 7)
    assert len(lines) - 1 == k
    manifest = json.loads((tmp_path / "map.txt.manifest.json").read_text())
    assert manifest["command"] == "cluster"
    assert manifest["seed"] == 7


def test_cluster_rerun_identical(tmp_path, corpus_files):
    a, b = tmp_path / "a.txt", tmp_path / "b.txt"
    args = ["cluster", "--sparse", str(corpus_files["train_sparse"]),
            "--max-size", "3", "--seed", "11"]
    assert main(args + ["--out", str(a)]) == 0
    assert main(args + ["--out", str(b)]) == 0
    assert a.read_text() == b.read_text()


def test_cluster_max_size_one_identity(tmp_path, corpus_files):
    out = tmp_path / "map.txt"
    assert main(["cluster", "--sparse", str(corpus_files["train_sparse"]),
                 "--max-size", "1", "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert int(lines[0].split()[0]) == 8  # K == L
    assert [line.strip() for line in lines[1:]] == [str(l) for l in range(8)]


def test_cluster_missing_file_exit_2(tmp_path):
    code = main(["cluster", "--sparse", str(tmp_path / "absent.txt"),
                 "--max-size", "4", "--out", str(tmp_path / "map.txt")])
    assert code == 2


# ---------------------------------------------------------------------------
# train


def test_train_produces_artifacts(trained_run):
    for name in ("final.ckpt", "epoch001.ckpt", "epoch002.ckpt", "metrics.log",
                 "vocab.txt", "clusters.txt", "manifest.json"):
        assert (trained_run / name).exists(), name
    manifest = json.loads((trained_run / "manifest.json").read_text())
    assert manifest["config"]["epochs"] == 2
    assert manifest["config"]["sampling_mode"] == "dynamic"
    assert manifest["artifacts"]["checkpoint"].endswith("final.ckpt")


def test_train_epochs_zero_initial_checkpoint_only(tmp_path, corpus_files):
    run = tmp_path / "run0"
    code = main(["train", "--sparse", str(corpus_files["train_sparse"]),
                 "--text", str(corpus_files["train_text"]),
                 "--out-dir", str(run), *TINY_FLAGS[2:], "--epochs", "0"])
    assert code == 0
    assert (run / "final.ckpt").exists()
    assert not (run / "epoch001.ckpt").exists()


def test_train_static_mode_recorded(tmp_path, corpus_files):
    run = tmp_path / "run_static"
    code = main(["train", "--sparse", str(corpus_files["train_sparse"]),
                 "--text", str(corpus_files["train_text"]),
                 "--out-dir", str(run), "--sampling", "static", *TINY_FLAGS])
    assert code == 0
    manifest = json.loads((run / "manifest.json").read_text())
    assert manifest["config"]["sampling_mode"] == "static"
    assert manifest["artifacts"]["static_cache_snapshot"] == "initialized-seed-5"


def test_train_with_corrupt_cluster_map_exit_3(tmp_path, corpus_files):
    bad = tmp_path / "bad_map.txt"
    bad.write_text("2 8 4 0\n0 1 2 3\n3 4 5 6 7\n")  # label 3 in two clusters
    code = main(["train", "--sparse", str(corpus_files["train_sparse"]),
                 "--text", str(corpus_files["train_text"]),
                 "--out-dir", str(tmp_path / "r"), "--clusters", str(bad), *TINY_FLAGS])
    assert code == 3


def test_train_missing_out_dir_exit_2(corpus_files):
    code = main(["train", "--sparse", str(corpus_files["train_sparse"]),
                 "--text", str(corpus_files["train_text"]), *TINY_FLAGS])
    assert code == 2


# ---------------------------------------------------------------------------
# predict / eval


def test_predict_writes_scored_lines(tmp_path, trained_run, corpus_files):
    out = tmp_path / "preds.txt"
    code = main(["predict", "--ckpt", str(trained_run / "final.ckpt"),
                 "--text", str(corpus_files["test_text"]),
                 "--out", str(out), "--k", "3"])
    assert code == 0
    lines = out.read_text().splitlines()
    assert len(lines) == 16
    first = lines[0].split()
    assert all(":" in part for part in first)
    label, score = first[0].split(":")
    assert 0 <= int(label) < 8
    assert 0.0 < float(score) < 1.0


def test_eval_prints_report(capsys, trained_run, corpus_files):
    code = main(["eval", "--ckpt", str(trained_run / "final.ckpt"),
                 "--sparse", str(corpus_files["test_sparse"]),
                 "--text", str(corpus_files["test_text"])])
    assert code == 0
    out = capsys.readouterr().out
    assert "P@1" in out and "cluster_recall=" in out and "instances=16" in out


def test_eval_ensemble_of_same_run(capsys, trained_run, corpus_files):
    ckpt = str(trained_run / "final.ckpt")
    code = main(["eval", "--ensemble", f"{ckpt},{ckpt}",
                 "--sparse", str(corpus_files["test_sparse"]),
                 "--text", str(corpus_files["test_text"]), "--k", "1,3"])
    assert code == 0
    assert "p1=" in capsys.readouterr().out


def test_eval_requires_exactly_one_source(trained_run, corpus_files):
    code = main(["eval", "--sparse", str(corpus_files["test_sparse"]),
                 "--text", str(corpus_files["test_text"])])
    assert code == 2


def test_eval_empty_test_file_exit_2(tmp_path, trained_run):
    empty_sparse = tmp_path / "empty.txt"
    empty_sparse.write_text("0 5 8\n")
    empty_text = tmp_path / "empty_raw.txt"
    empty_text.write_text("")
    code = main(["eval", "--ckpt", str(trained_run / "final.ckpt"),
                 "--sparse", str(empty_sparse), "--text", str(empty_text)])
    assert code == 2


# ---------------------------------------------------------------------------
# config precedence


def test_flags_beat_config_file_beat_preset(tmp_path):
    cfg = tmp_path / "overrides.txt"
    cfg.write_text("epochs=9\nbatch_size=4\n")
    parser = build_parser()
    args = parser.parse_args(
        ["train", "--preset", "eurlex-4k", "--config", str(cfg), "--epochs", "3"]
    )
    config = resolve_train_config(args)
    assert config.epochs == 3  # flag wins
    assert config.batch_size == 4  # file beats preset
    assert config.max_len == 512  # preset survives where not overridden
    assert config.cluster_size == 1


def test_manifest_is_a_valid_config_source(tmp_path, trained_run, corpus_files):
    parser = build_parser()
    args = parser.parse_args(
        ["train", "--config", str(trained_run / "manifest.json")]
    )
    config = resolve_train_config(args)
    assert config.epochs == 2
    assert config.hidden == 16
    assert config.seed == 5  # manifest seed survives when no --seed flag given


def test_preset_values_resolved():
    parser = build_parser()
    args = parser.parse_args(["train", "--preset", "eurlex-4k"])
    config = resolve_train_config(args)
    assert (config.epochs, config.batch_size, config.max_len) == (20, 16, 512)


def test_unknown_config_key_exit_2(tmp_path, corpus_files):
    cfg = tmp_path / "bad.txt"
    cfg.write_text("warp_speed=9\n")
    code = main(["train", "--config", str(cfg),
                 "--sparse", str(corpus_files["train_sparse"]),
                 "--text", str(corpus_files["train_text"]),
                 "--out-dir", str(tmp_path / "r")])
    assert code == 2


# ---------------------------------------------------------------------------
# gradcheck (verify-mode, slowish but bounded)


def test_gradcheck_command_passes(capsys):
    import xmc.tensor as t

    code = main(["gradcheck", "--seed", "0"])
    t.set_verify_mode(False)  # restore fast mode for other tests
    out = capsys.readouterr().out
    assert code == 0
    assert "PASS" in out
