from __future__ import annotations

import csv
from pathlib import Path

import numpy as np
import pytest

from deltastyle import cli
from deltastyle import embedding_store as store

CONFIG = """\
[world]
preset = tiny
seed = 11
records = 400

[train]
preset = tiny
mode = delta
steps = 60
batch_size = 32
seed = 7
val_pairs = 64

[relevance]
samples_per_channel = 32
seed = 3

[filter]
beta = 0.03
scale_beta_to_clip_dim = true

[eval]
sources = 6
records = 300
pairs = 400
seed = 5
"""


@pytest.fixture()
def cfg_path(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(CONFIG)
    return path


def run(*argv):
    return cli.main([str(a) for a in argv])


def find_run_dir(root: Path, command: str) -> Path:
    matches = [p for p in root.iterdir() if p.name.startswith(command + "-")]
    assert len(matches) == 1, matches
    return matches[0]


@pytest.fixture()
def world_run(tmp_path, cfg_path):
    root = tmp_path / "runs"
    assert run("gen-world", "--config", cfg_path, "--run-root", root) == 0
    return find_run_dir(root, "gen-world")


# --------------------------------------------------------------------------
# exit codes


def test_unknown_flag_exits_one(capsys):
    assert run("train", "--no-such-flag") == 1
    assert "usage error" in capsys.readouterr().err


def test_unknown_subcommand_exits_one():
    assert run("frobnicate") == 1


def test_missing_config_file_reports_path(tmp_path, capsys):
    missing = tmp_path / "absent.cfg"
    assert run("gen-world", "--config", missing,
               "--run-root", tmp_path / "r") == 2
    assert str(missing) in capsys.readouterr().err


def test_missing_dataset_reports_path(tmp_path, cfg_path, capsys):
    missing = tmp_path / "absent.deds"
    assert run("train", "--config", cfg_path, "--dataset", missing,
               "--run-root", tmp_path / "r") == 2
    assert str(missing) in capsys.readouterr().err


def test_unknown_config_key_rejected(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("[train]\nlearning_rat = 0.1\n")
    assert run("train", "--config", bad, "--run-root", tmp_path / "r") == 1
    assert "learning_rat" in capsys.readouterr().err


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergent_training_exits_three(tmp_path, cfg_path, world_run):
    dataset = world_run / "dataset.deds"
    code = run("train", "--config", cfg_path, "--dataset", dataset,
               "--run-root", tmp_path / "diverge",
               "--set", "train.learning_rate=1e150", "--steps", "30")
    assert code == 3


# --------------------------------------------------------------------------
# gen-world / inspect


def test_gen_world_outputs(world_run):
    assert (world_run / "dataset.deds").exists()
    assert (world_run / "prompts.dett").exists()
    assert (world_run / "world.json").exists()
    assert (world_run / "config.resolved.cfg").exists()
    dataset = store.read_dataset(world_run / "dataset.deds")
    assert dataset.n == 400
    assert store.validate(dataset).ok


def test_run_dir_collision_needs_force(tmp_path, cfg_path, world_run):
    root = world_run.parent
    assert run("gen-world", "--config", cfg_path, "--run-root", root) == 2
    assert run("gen-world", "--config", cfg_path, "--run-root", root,
               "--force") == 0


def test_inspect_dataset_and_table(world_run, capsys):
    assert run("inspect", world_run / "dataset.deds") == 0
    out = capsys.readouterr().out
    assert "400 records" in out and "no findings" in out
    assert run("inspect", world_run / "prompts.dett", "--clip-dim", "64") == 0


def test_inspect_corrupt_file(tmp_path, world_run):
    raw = bytearray((world_run / "dataset.deds").read_bytes())
    raw[50] ^= 0xFF
    bad = tmp_path / "corrupt.deds"
    bad.write_bytes(bytes(raw))
    assert run("inspect", bad) == 2


# --------------------------------------------------------------------------
# train / determinism


def test_train_twice_identical_checkpoints(tmp_path, cfg_path, world_run):
    dataset = world_run / "dataset.deds"
    root_a, root_b = tmp_path / "a", tmp_path / "b"
    assert run("train", "--config", cfg_path, "--dataset", dataset,
               "--run-root", root_a, "--seed", "7") == 0
    assert run("train", "--config", cfg_path, "--dataset", dataset,
               "--run-root", root_b, "--seed", "7") == 0
    ck_a = find_run_dir(root_a, "train") / "checkpoint.dmap"
    ck_b = find_run_dir(root_b, "train") / "checkpoint.dmap"
    assert ck_a.read_bytes() == ck_b.read_bytes()


def test_train_outputs_history_and_config_echo(tmp_path, cfg_path, world_run):
    dataset = world_run / "dataset.deds"
    root = tmp_path / "t"
    assert run("train", "--config", cfg_path, "--dataset", dataset,
               "--run-root", root) == 0
    rd = find_run_dir(root, "train")
    with open(rd / "history.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["step", "L", "L_rec", "L_sim", "val_cosine"]
    assert len(rows) == 61
    echo = (rd / "config.resolved.cfg").read_text()
    assert "steps = 60" in echo and "[train]" in echo


# --------------------------------------------------------------------------
# full pipeline: relevance -> edit -> interpolate -> gap-stats


@pytest.fixture()
def pipeline(tmp_path, cfg_path, world_run):
    dataset = world_run / "dataset.deds"
    root = tmp_path / "pipe"
    assert run("train", "--config", cfg_path, "--dataset", dataset,
               "--run-root", root, "--steps", "200") == 0
    checkpoint = find_run_dir(root, "train") / "checkpoint.dmap"
    assert run("relevance", "--config", cfg_path, "--dataset", dataset,
               "--run-root", root) == 0
    derm = find_run_dir(root, "relevance") / "relevance.derm"
    return dataset, checkpoint, derm, root, world_run / "prompts.dett"


def test_edit_and_interpolate(pipeline, tmp_path, cfg_path):
    dataset, checkpoint, derm, root, table = pipeline
    assert run("edit", "--config", cfg_path, "--checkpoint", checkpoint,
               "--dataset", dataset, "--table", table,
               "--attrs", "smile,eyeglasses", "--relevance", derm,
               "--run-root", root) == 0
    edit_dir = find_run_dir(root, "edit")
    s_prime = edit_dir / "s_prime.csv"
    assert s_prime.exists()
    with open(edit_dir / "edit.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0][0] == "attrs"
    assert rows[1][0] == "smile;eyeglasses"

    out = tmp_path / "mix.csv"
    assert run("interpolate", "--a", s_prime, "--b", s_prime,
               "--omega", "0.5", "--out", out) == 0
    a_vals = cli._read_vector_csv(s_prime)
    mixed = cli._read_vector_csv(out)
    assert np.allclose(mixed, a_vals)
    assert run("interpolate", "--a", s_prime, "--b", s_prime,
               "--omega", "1.5", "--out", out) == 2


def test_edit_unknown_attribute(pipeline, cfg_path):
    dataset, checkpoint, derm, root, table = pipeline
    assert run("edit", "--config", cfg_path, "--checkpoint", checkpoint,
               "--dataset", dataset, "--table", table,
               "--attrs", "flying_hair", "--relevance", derm,
               "--run-root", root) == 2


def test_relevance_output_loads(pipeline):
    _, _, derm, _, _ = pipeline
    matrix = store.read_relevance(derm)
    assert matrix.style_dim == 352
    assert store.validate_relevance(matrix).ok


def test_gap_stats_outputs(tmp_path, cfg_path):
    root = tmp_path / "gap"
    assert run("gap-stats", "--config", cfg_path, "--run-root", root) == 0
    rd = find_run_dir(root, "gap-stats")
    with open(rd / "stats.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["raw_mean", "raw_std", "delta_mean", "delta_std",
                       "margin"]
    assert float(rows[1][4]) >= 0.3
    with open(rd / "projection.csv", newline="") as fh:
        proj = list(csv.reader(fh))
    assert proj[0] == ["set", "row", "x", "y"]
    sets = {r[0] for r in proj[1:]}
    assert sets == {"image", "text", "delta_image", "delta_text"}


def test_eval_compare_outputs(tmp_path, cfg_path, world_run):
    dataset = world_run / "dataset.deds"
    root = tmp_path / "ev"
    assert run("eval", "--config", cfg_path, "--dataset", dataset,
               "--mode", "compare", "--run-root", root,
               "--steps", "60") == 0
    rd = find_run_dir(root, "eval")
    with open(rd / "compare.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert [r[0] for r in rows] == ["mode", "delta", "naive"]
