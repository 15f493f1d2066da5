"""End-to-end checks for the command-line surface.

Commands are driven in-process through main(argv) so exit codes and
stdout can be asserted cheaply; one subprocess test proves the module
entry point works outside the test harness.
"""

import json
import subprocess
import sys

import numpy as np
import pytest

from p4p.cli import main

TINY_MODEL = {"dim": 16, "depth": 1, "heads": 2, "k": 4,
              "downsample_ratio": 4, "norm": "layer"}


def write_config(path, **overrides):
    cfg = {
        "task": "shapes8",
        "seed": 7,
        "epochs": 2,
        "batch_size": 8,
        "data": {"train": 16, "val": 8, "points": 64},
        "model": dict(TINY_MODEL),
        "train": {"lr": 1e-3, "warmup_epochs": 1, "label_smoothing": 0.1,
                  "augmentations": ["rotate"]},
    }
    cfg.update(overrides)
    path.write_text(json.dumps(cfg))
    return path


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("trained")
    cfg = write_config(root / "exp.json")
    assert main(["train", "--config", str(cfg),
                 "--workdir", str(root / "run")]) == 0
    return root


@pytest.fixture(scope="module")
def pretrained(tmp_path_factory):
    root = tmp_path_factory.mktemp("pretrained")
    cfg = root / "pre.json"
    cfg.write_text(json.dumps({
        "data": {"train": 32, "val": 8},
        "model": {"dim": 16, "depth": 1, "heads": 2, "patch": 4,
                  "norm": "layer"},
    }))
    code = main(["pretrain-toy", "--config", str(cfg), "--seed", "1",
                 "--epochs", "1", "--workdir", str(root / "pre"),
                 "--out", str(root / "backbone")])
    assert code == 0
    return root / "backbone"


# ------------------------------------------------------------- exit codes

def test_unknown_flag_exits_2(capsys):
    assert main(["train", "--bogus"]) == 2
    capsys.readouterr()


def test_unknown_command_exits_2(capsys):
    assert main(["frobnicate"]) == 2
    capsys.readouterr()


def test_missing_config_file_exits_2(capsys):
    assert main(["train", "--config", "no_such_file.json"]) == 2
    assert "config error" in capsys.readouterr().err


def test_malformed_json_exits_2(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["train", "--config", str(bad)]) == 2
    assert "config error" in capsys.readouterr().err


def test_unknown_config_key_exits_2(tmp_path, capsys):
    cfg = write_config(tmp_path / "exp.json", optimiser="sgd")
    assert main(["train", "--config", str(cfg),
                 "--workdir", str(tmp_path / "w")]) == 2
    assert "unknown config keys" in capsys.readouterr().err


def test_incompatible_checkpoint_exits_3(trained, tmp_path, capsys):
    other = write_config(tmp_path / "wide.json",
                         model={**TINY_MODEL, "dim": 32})
    code = main(["eval", "--ckpt", str(trained / "run" / "best"),
                 "--config", str(other)])
    assert code == 3
    assert "runtime failure" in capsys.readouterr().err


# -------------------------------------------------------------- gradcheck

def test_gradcheck_prints_suites_and_passes(capsys):
    assert main(["gradcheck", "--precision", "f64", "--seeds", "1"]) == 0
    out = capsys.readouterr().out
    for suite in ("tokenizer", "backbone", "classifier", "segmenter",
                  "end_to_end"):
        assert suite in out
    assert out.count(" ok") == 5


def test_gradcheck_rejects_bad_precision(capsys):
    assert main(["gradcheck", "--precision", "f128"]) == 2
    capsys.readouterr()


# ---------------------------------------------------------------- training

def test_train_epochs_zero_emits_initial_metrics(tmp_path, capsys):
    cfg = write_config(tmp_path / "exp.json")
    code = main(["train", "--config", str(cfg), "--epochs", "0",
                 "--workdir", str(tmp_path / "w")])
    assert code == 0
    lines = (tmp_path / "w" / "metrics.jsonl").read_text().splitlines()
    assert len(lines) == 1
    rec = json.loads(lines[0])
    assert rec["epoch"] == 0 and rec["split"] == "val"
    capsys.readouterr()


def test_train_is_replayable(tmp_path, capsys):
    cfg = write_config(tmp_path / "exp.json")
    for name in ("a", "b"):
        assert main(["train", "--config", str(cfg),
                     "--workdir", str(tmp_path / name)]) == 0
    capsys.readouterr()
    log_a = (tmp_path / "a" / "metrics.jsonl").read_bytes()
    log_b = (tmp_path / "b" / "metrics.jsonl").read_bytes()
    assert log_a == log_b
    ck_a = (tmp_path / "a" / "last.bin").read_bytes()
    ck_b = (tmp_path / "b" / "last.bin").read_bytes()
    assert ck_a == ck_b


def test_seed_flag_changes_the_run(tmp_path, capsys):
    cfg = write_config(tmp_path / "exp.json", epochs=1)
    for name, seed in (("a", "1"), ("b", "2")):
        assert main(["train", "--config", str(cfg), "--seed", seed,
                     "--workdir", str(tmp_path / name)]) == 0
    capsys.readouterr()
    assert ((tmp_path / "a" / "metrics.jsonl").read_bytes()
            != (tmp_path / "b" / "metrics.jsonl").read_bytes())


def test_ablation_flags_reach_the_model(tmp_path, capsys):
    cfg = write_config(tmp_path / "exp.json", epochs=1)
    code = main(["train", "--config", str(cfg),
                 "--workdir", str(tmp_path / "w"),
                 "--tokenizer-mode", "abs_pos", "--no-pos", "--no-globals"])
    assert code == 0
    capsys.readouterr()
    from p4p.transfer import load_archive
    _, meta = load_archive(tmp_path / "w" / "best")
    assert meta["model"]["input_mode"] == "abs_pos"
    assert meta["model"]["pos_mode"] == "none"
    assert meta["model"]["no_globals"] is True


# -------------------------------------------------------------------- eval

def test_eval_prints_metrics_line(trained, capsys):
    code = main(["eval", "--ckpt", str(trained / "run" / "best")])
    assert code == 0
    line = capsys.readouterr().out.strip().splitlines()[-1]
    rec = json.loads(line)
    assert rec["split"] == "val"
    for key in ("OA", "mAcc", "mIoU", "loss"):
        assert isinstance(rec[key], float)
    assert 0.0 <= rec["OA"] <= 100.0


def test_eval_train_split(trained, capsys):
    code = main(["eval", "--ckpt", str(trained / "run" / "best"),
                 "--split", "train"])
    assert code == 0
    rec = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert rec["split"] == "train"


def test_eval_matches_logged_best_metric(trained, capsys):
    log = (trained / "run" / "metrics.jsonl").read_text().splitlines()
    best_logged = max(json.loads(l)["OA"] for l in log
                      if json.loads(l)["split"] == "val")
    assert main(["eval", "--ckpt", str(trained / "run" / "best")]) == 0
    rec = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert rec["OA"] == pytest.approx(best_logged, abs=1e-9)


# ------------------------------------------------------------ inspect-ckpt

def test_inspect_ckpt_row_count_matches_manifest(trained, capsys):
    prefix = trained / "run" / "best"
    assert main(["inspect-ckpt", "--ckpt", str(prefix)]) == 0
    out = capsys.readouterr().out.splitlines()
    manifest = json.loads((prefix.parent / "best.manifest.json").read_text())
    rows = [l for l in out if l and not l.startswith(("name", "meta:"))
            and " tensors, " not in l]
    assert len(rows) == len(manifest["entries"])
    assert f"{len(manifest['entries'])} tensors" in "\n".join(out)


def test_inspect_missing_ckpt_exits_2(capsys):
    assert main(["inspect-ckpt", "--ckpt", "nope"]) == 2
    assert "config error" in capsys.readouterr().err


# ---------------------------------------------------------------- gen-data

def test_gen_data_round_trip(tmp_path, capsys):
    out = tmp_path / "data"
    code = main(["gen-data", "--family", "shapes8", "--train", "3",
                 "--val", "2", "--points", "32", "--seed", "3",
                 "--out", str(out)])
    assert code == 0
    capsys.readouterr()
    index = json.loads((out / "index.json").read_text())
    assert len(index["samples"]) == 5
    from p4p.data import SyntheticTaskSpec, gen_shapes8, read_points
    spec = SyntheticTaskSpec("shapes8", n_train=3, n_val=2, points=32, seed=3)
    train, val = gen_shapes8(spec)
    originals = {"train": train, "val": val}
    counters = {"train": 0, "val": 0}
    for entry in index["samples"]:
        cloud = read_points(out / entry["file"])
        src = originals[entry["split"]][counters[entry["split"]]]
        counters[entry["split"]] += 1
        np.testing.assert_allclose(cloud.positions, src.positions, atol=1e-5)
        assert entry["label"] == int(src.labels)


def test_gen_data_seg_labels_per_point(tmp_path, capsys):
    out = tmp_path / "seg"
    assert main(["gen-data", "--family", "parts4", "--train", "2",
                 "--val", "1", "--points", "32", "--out", str(out)]) == 0
    capsys.readouterr()
    index = json.loads((out / "index.json").read_text())
    assert all(len(e["labels"]) == 32 for e in index["samples"])


def test_gen_data_patches_npz(tmp_path, capsys):
    out = tmp_path / "img"
    assert main(["gen-data", "--family", "patches2d", "--train", "4",
                 "--val", "2", "--out", str(out)]) == 0
    capsys.readouterr()
    with np.load(out / "patches2d.npz") as z:
        assert z["train_x"].shape[0] == 4
        assert z["val_y"].shape == (2,)


# ----------------------------------------------------- pretrain + transfer

def test_pretrain_toy_saves_loadable_checkpoint(pretrained):
    from p4p.transfer import load_archive
    arrays, meta = load_archive(pretrained)
    assert any(name.startswith("blocks.") for name in arrays)
    assert meta["model"]["modality"] == "image"


def test_transfer_prints_report(pretrained, tmp_path, capsys):
    cfg = write_config(tmp_path / "ft.json")
    code = main(["transfer", "--ckpt", str(pretrained),
                 "--config", str(cfg), "--seed", "2"])
    assert code == 0
    out = capsys.readouterr().out
    assert "matched" in out and "skipped" in out
    summary = out.strip().splitlines()[-1]
    assert summary.startswith("matched ")


def test_finetune_from_pretrained_checkpoint(pretrained, tmp_path, capsys):
    cfg = write_config(tmp_path / "ft.json", epochs=1)
    code = main(["train", "--config", str(cfg),
                 "--workdir", str(tmp_path / "ft"),
                 "--init", str(pretrained), "--freeze-backbone"])
    assert code == 0
    assert "transfer:" in capsys.readouterr().out


# ------------------------------------------------------------------- bench

def test_bench_prints_table(capsys):
    assert main(["bench", "--n", "128", "--k", "4"]) == 0
    out = capsys.readouterr().out
    assert "fps" in out and "knn" in out and "speedup" in out


# ---------------------------------------------------------- module runner

def test_module_entry_point_runs():
    proc = subprocess.run(
        [sys.executable, "-m", "p4p.cli", "bench", "--n", "64", "--k", "4"],
        capture_output=True, text=True)
    assert proc.returncode == 0
    assert "fps" in proc.stdout
