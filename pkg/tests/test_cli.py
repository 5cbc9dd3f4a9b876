import hashlib
import json

import pytest

from orflow.cli import main
from orflow.dataset import load_manifest, load_split
from orflow.metrics import report_from_json
from orflow.trainer import TrainHistory

SMALL_SEQ = ["--proj-dim", "8", "--tgm-gaussians", "4", "--tgm-length", "5", "--lstm-hidden", "8"]


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture
def data(tmp_path, capsys):
    path = tmp_path / "data"
    assert run(capsys, "synth", "--cases", 6, "--views", 2, "--seed", 3, "--out", path)[0] == 0
    assert run(capsys, "split", "--data", path, "--scheme", "random", "--seed", 1)[0] == 0
    return path


def test_synth_counts(tmp_path, capsys):
    code, out, _ = run(capsys, "synth", "--cases", 20, "--views", 2, "--seed", 7, "--out", tmp_path / "d")
    assert code == 0
    assert "cases=20 videos=40 classes=10" in out
    assert out.startswith("effective-config synth: ")
    assert len(load_manifest(tmp_path / "d" / "manifest.json").videos) == 40


def test_synth_requires_out(capsys):
    code, _, err = run(capsys, "synth", "--cases", 2)
    assert code == 2 and "--out" in err


def test_synth_same_seed_same_checksum(tmp_path, capsys):
    digests = []
    for name in ("a", "b"):
        run(capsys, "synth", "--cases", 4, "--seed", 5, "--out", tmp_path / name)
        digests.append(hashlib.sha256((tmp_path / name / "manifest.json").read_bytes()).hexdigest())
    assert digests[0] == digests[1]


def test_split_random_counts(data, capsys):
    split = load_split(data / "split.json")
    assert (len(split.train_video_ids), len(split.test_video_ids)) == (10, 2)


def test_split_procedure_is_group_disjoint(data, tmp_path, capsys):
    code, _, _ = run(capsys, "split", "--data", data, "--scheme", "procedure", "--test-frac", 0.2,
                     "--out", tmp_path / "p.json")
    assert code == 0
    manifest, split = load_manifest(data / "manifest.json"), load_split(tmp_path / "p.json")
    case_of = manifest.case_of()
    train = {case_of[v].procedure_type for v in split.train_video_ids}
    test = {case_of[v].procedure_type for v in split.test_video_ids}
    assert train and test and not train & test


def test_split_unknown_scheme(data, capsys):
    code, _, err = run(capsys, "split", "--data", data, "--scheme", "hospital")
    assert code == 2 and "invalid choice" in err


def test_split_impossible_groups_exit_1(data, capsys):
    code, _, err = run(capsys, "split", "--data", data, "--scheme", "room", "--test-groups", "OR9")
    assert code == 1 and "OR9" in err


def test_missing_artifact_names_file(tmp_path, capsys):
    code, _, err = run(capsys, "train_seq", "--data", tmp_path / "nowhere", "--out", tmp_path / "m.ckpt")
    assert code == 1 and "manifest.json" in err


def test_missing_feature_file(data, tmp_path, capsys):
    code, _, err = run(capsys, "train_seq", "--data", data, "--features", tmp_path / "empty",
                       "--out", tmp_path / "m.ckpt")
    assert code == 1 and ".orfeat" in err


def test_config_file_and_flag_override(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"cases": 3, "views": 1, "seed": 9}))
    code, out, _ = run(capsys, "synth", "--config", cfg, "--out", tmp_path / "d")
    assert code == 0 and "cases=3 videos=3" in out and '"seed": 9' in out
    code, out, _ = run(capsys, "synth", "--config", cfg, "--views", 2, "--out", tmp_path / "e")
    assert "cases=3 videos=6" in out


def test_bad_config_file(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text("{not json")
    assert run(capsys, "synth", "--config", cfg, "--out", tmp_path / "d")[0] == 2
    assert run(capsys, "synth", "--config", tmp_path / "missing.json", "--out", tmp_path / "d")[0] == 2


def test_seed_from_environment(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("ORFLOW_SEED", "42")
    code, out, _ = run(capsys, "synth", "--cases", 2, "--out", tmp_path / "a")
    assert code == 0 and '"seed": 42' in out
    run(capsys, "synth", "--cases", 2, "--seed", 42, "--out", tmp_path / "b")
    assert (tmp_path / "a" / "manifest.json").read_bytes() == (tmp_path / "b" / "manifest.json").read_bytes()


def test_resume_matches_uninterrupted(data, tmp_path, capsys):
    common = ["train_seq", "--data", data, "--seed", 2, *SMALL_SEQ]
    assert run(capsys, *common, "--epochs", 4, "--out", tmp_path / "full.ckpt",
               "--history", tmp_path / "full.jsonl")[0] == 0
    assert run(capsys, *common, "--epochs", 2, "--out", tmp_path / "half.ckpt")[0] == 0
    assert run(capsys, *common, "--epochs", 4, "--resume", tmp_path / "half.ckpt", "--out", tmp_path / "resumed.ckpt",
               "--history", tmp_path / "resumed.jsonl")[0] == 0
    full = TrainHistory.from_jsonl((tmp_path / "full.jsonl").read_text())
    resumed = TrainHistory.from_jsonl((tmp_path / "resumed.jsonl").read_text())
    assert len(full) == 4 and resumed.records == full.records


def test_eval_rejects_wrong_model_kind(data, tmp_path, capsys):
    run(capsys, "train_seq", "--data", data, "--model", "baseline", "--epochs", 1, "--out", tmp_path / "b.ckpt")
    code, _, err = run(capsys, "eval", "--data", data, "--model", "sequence", "--checkpoint", tmp_path / "b.ckpt",
                       "--out-dir", tmp_path / "r")
    assert code == 1 and "baseline" in err


def test_full_pipeline_with_clip_training(tmp_path, capsys):
    d = tmp_path / "px"
    steps = [
        ["synth", "--cases", 5, "--views", 1, "--pixel", "--seed", 1, "--out", d],
        ["split", "--data", d, "--scheme", "random", "--train-frac", 0.6],
        ["train-clip", "--data", d, "--clip-len", 16, "--epochs", 1, "--feature-dim", 16, "--out", tmp_path / "bb.ckpt"],
        ["extract", "--data", d, "--backbone", tmp_path / "bb.ckpt", "--out", tmp_path / "feats", "--jobs", 2],
        ["train-seq", "--data", d, "--features", tmp_path / "feats", "--epochs", 2, *SMALL_SEQ,
         "--out", tmp_path / "seq.ckpt"],
        ["train-seq", "--data", d, "--features", tmp_path / "feats", "--epochs", 2, "--model", "baseline",
         "--out", tmp_path / "base.ckpt"],
        ["eval", "--data", d, "--features", tmp_path / "feats", "--checkpoint", tmp_path / "seq.ckpt",
         "--out-dir", tmp_path / "reports"],
        ["eval", "--data", d, "--features", tmp_path / "feats", "--model", "baseline",
         "--checkpoint", tmp_path / "base.ckpt", "--out-dir", tmp_path / "reports"],
    ]
    for argv in steps:
        code, out, err = run(capsys, *argv)
        assert code == 0, (argv[0], err)
    for model in ("sequence", "baseline"):
        rep = report_from_json((tmp_path / "reports" / f"report_{model}.json").read_text())
        assert rep.model == model and len(rep.class_names) == 10 and rep.mAP is not None
        assert (tmp_path / "reports" / f"report_{model}.csv").read_text().startswith("class,precision")
        assert "| **Mean** |" in (tmp_path / "reports" / f"report_{model}.md").read_text()
