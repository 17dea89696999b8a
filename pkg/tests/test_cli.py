import json

import pytest

from tgnn.cli import main

SMALL = """\
[generator]
n_events = 3
conversations_per_event = 12
max_replies = 4
image_size = 8

[model]
d = 8
d_v = 4
heads = 2
n_buckets = 256
patch_grid = 2
image_size = 8

[train]
batch_size = 8
epochs = 1
lr = 0.001
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "small.ini"
    cfg.write_text(SMALL)
    assert main(["generate", "--config", str(cfg), "--out", str(root / "data"), "--seed", "3"]) == 0
    return root, cfg


def _common(root, cfg, out):
    return ["--config", str(cfg), "--data", str(root / "data"), "--out", str(root / out)]


def test_generate_is_deterministic(workspace, tmp_path):
    root, cfg = workspace
    assert main(["generate", "--config", str(cfg), "--out", str(tmp_path / "again"), "--seed", "3"]) == 0
    assert (tmp_path / "again" / "dataset.jsonl").read_bytes() == (root / "data" / "dataset.jsonl").read_bytes()
    manifest = json.loads((root / "data" / "manifest.json").read_text())
    assert manifest["command"] == "generate" and manifest["seed"] == 3
    assert set(manifest["fingerprints"]) == {"dataset", "events"}


def test_train_twice_bit_identical(workspace):
    root, cfg = workspace
    for out in ("t1", "t2"):
        assert main(["train", *_common(root, cfg, out)]) == 0
    for name in ("model.ckpt", "metrics.json", "metrics.tsv"):
        assert (root / "t1" / name).read_bytes() == (root / "t2" / name).read_bytes()


def test_eval_matches_train_and_is_repeatable(workspace):
    root, cfg = workspace
    if not (root / "t1" / "model.ckpt").exists():
        main(["train", *_common(root, cfg, "t1")])
    for out in ("e1", "e2"):
        args = ["eval", *_common(root, cfg, out), "--checkpoint", str(root / "t1" / "model.ckpt")]
        assert main(args) == 0
    assert (root / "e1" / "metrics.json").read_bytes() == (root / "e2" / "metrics.json").read_bytes()
    assert (root / "e1" / "metrics.tsv").read_bytes() == (root / "t1" / "metrics.tsv").read_bytes()


def test_distill_without_teacher_is_config_error(workspace, capsys):
    root, cfg = workspace
    assert main(["distill", *_common(root, cfg, "d0")]) == 2
    assert "tgnn train" in capsys.readouterr().err


def test_distill_with_teacher(workspace):
    root, cfg = workspace
    if not (root / "t1" / "model.ckpt").exists():
        main(["train", *_common(root, cfg, "t1")])
    args = ["distill", *_common(root, cfg, "d1"), "--teacher-checkpoint", str(root / "t1" / "model.ckpt")]
    assert main(args) == 0
    assert (root / "d1" / "soft_labels.jsonl").exists()
    assert (root / "d1" / "model.ckpt").exists()


def test_cv_table(workspace, capsys):
    root, cfg = workspace
    assert main(["cv", *_common(root, cfg, "cv"), "--variants", "teacher,student"]) == 0
    for v in ("teacher", "student"):
        rows = (root / "cv" / f"metrics_{v}.tsv").read_text().splitlines()
        assert len(rows) == 3 + 2
        assert rows[-1].startswith("Average\t")
    assert "# student" in capsys.readouterr().out


def test_report(workspace):
    root, cfg = workspace
    if not (root / "t1" / "model.ckpt").exists():
        main(["train", *_common(root, cfg, "t1")])
    args = ["report", *_common(root, cfg, "r"), "--checkpoint", str(root / "t1" / "model.ckpt"), "--k", "2"]
    assert main(args) == 0
    recs = [json.loads(x) for x in (root / "r" / "attention.jsonl").read_text().splitlines()]
    assert recs and all(len(r["replies"]) <= 2 for r in recs)
    assert {"id", "ground_truth", "prediction", "replies"} <= set(recs[0])


def test_malformed_config_names_field(tmp_path, capsys):
    bad = tmp_path / "bad.ini"
    bad.write_text("[generator]\nn_events = x\n")
    assert main(["generate", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
    assert "n_events" in capsys.readouterr().err


def test_missing_dataset_is_data_error(tmp_path):
    assert main(["train", "--data", str(tmp_path / "nowhere"), "--out", str(tmp_path / "o")]) == 3


@pytest.mark.parametrize("cmd", ["train", "cv"])
def test_help_lists_defaults(cmd, capsys):
    with pytest.raises(SystemExit) as exc:
        main([cmd, "--help"])
    assert exc.value.code == 0
    text = capsys.readouterr().out
    for default in ("(default: 32)", "(default: 5)", "(default: 2e-05)", "(default: 0.0001)", "(default: 0.3)"):
        assert default in text
