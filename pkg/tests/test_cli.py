import json
import shutil
import subprocess
import sys

import numpy as np
import pytest

import ctxtts.training as training
from ctxtts.cli import main
from ctxtts.data import Corpus, DataError
from ctxtts.evaluation.case_study import MODES, case_window, max_abs_difference
from ctxtts.tensorio import load_sidecar, load_tensors, save_tensors

SUBCOMMANDS = ["prepare", "extract-embeddings", "extract-targets", "train", "synthesize", "evaluate",
               "case-study", "plot"]
Q = ["--log-level", "WARNING"]


def run(*argv):
    return main(Q + [str(a) for a in argv])


@pytest.mark.parametrize("cmd", SUBCOMMANDS)
def test_help_exits_zero(cmd):
    with pytest.raises(SystemExit) as exc:
        main([cmd, "--help"])
    assert exc.value.code == 0


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "ctxtts", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "case-study" in out.stdout


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli_data")
    assert run("prepare", "--out", out, "--seed", 2, "--n-documents", 3, "--sentences-per-doc", 4,
               "--test-documents", 1) == 0
    return out / "manifest.jsonl"


@pytest.fixture(scope="module")
def pipeline(data, tmp_path_factory):
    root = tmp_path_factory.mktemp("cli_run")
    run_dir = root / "run"
    codes = {
        "stage1": run("train", "--stage", 1, "--data", data, "--out", run_dir, "--steps", 2, "--seed", 7),
        "targets": run("extract-targets", "--data", data, "--out", run_dir),
        "stage2": run("train", "--stage", 2, "--data", data, "--out", run_dir, "--steps", 2, "--seed", 7),
        "stage3": run("train", "--stage", 3, "--data", data, "--out", run_dir, "--steps", 2, "--seed", 7),
        "synthesize": run("synthesize", "--ckpt", run_dir, "--data", data, "--out", root / "pred",
                          "--seed", 7),
        "evaluate": run("evaluate", "--pred", root / "pred", "--gt", data, "--out", root / "report.json"),
        "plot": run("plot", "--report", root / "report.json", "--out", root / "plots"),
        "case": run("case-study", "--ckpt", run_dir, "--data", data, "--utterance", "doc002:1",
                    "--out", root / "case"),
    }
    return root, codes


def test_pipeline_exit_codes(pipeline):
    _, codes = pipeline
    assert codes == {k: 0 for k in codes}


def test_every_artifact_has_provenance(pipeline):
    root, _ = pipeline
    artifacts = [p for p in root.rglob("*") if p.is_file() and not p.name.endswith(".json")]
    assert artifacts
    for p in artifacts:
        side = load_sidecar(p)
        assert "seed" in side and "config_hash" in side and "versions" in side, p
    for p in [root / "report.json", root / "pred" / "index.json", root / "case" / "summary.json"]:
        doc = json.loads(p.read_text())
        assert {"seed", "config_hash", "versions"} <= set(doc)


def test_seed_recorded(pipeline):
    root, _ = pipeline
    assert load_sidecar(root / "run" / "stage1" / "acoustic_model.bin")["seed"] == 7
    assert json.loads((root / "report.json").read_text())["seed"] == 7


def test_report_contents(pipeline, data):
    root, _ = pipeline
    report = json.loads((root / "report.json").read_text())
    test_ids = {u.utterance_id for u in Corpus.load(data).split("test")}
    assert set(report["utterances"]) == test_ids
    for key in ("f0_rmse", "energy_rmse", "duration_mse", "mcd"):
        assert np.isfinite(report["means"][key]) and report["means"][key] >= 0
    assert (root / "plots" / "metrics.png").read_bytes()[:4] == b"\x89PNG"


def test_ablation_report_has_both_students(pipeline):
    root, _ = pipeline
    report = json.loads((root / "run" / "stage2" / "ablation_report.json").read_text())
    for kind in ("hierarchical", "plain"):
        assert np.isfinite(report[kind]["converged_train_loss"])


def test_case_study_outputs(pipeline):
    root, _ = pipeline
    case = root / "case"
    summary = json.loads((case / "summary.json").read_text())
    assert len(summary["windows"]["none"]) == 1
    assert len(summary["windows"]["irrelevant"]) == 5
    for mode in MODES:
        assert load_tensors(case / f"{mode}.bin")["mel"].shape[1] == 80
    attention = json.loads((case / "attention.json").read_text())["attention"]
    assert len(attention["none"]["sentence_weights"]) == 1
    assert (case / "case_study.png").exists()


def test_synthesize_without_checkpoint(data, tmp_path, capsys):
    assert run("synthesize", "--ckpt", tmp_path / "empty", "--data", data, "--out", tmp_path / "o") == 3
    assert "ctxtts train --stage 1" in capsys.readouterr().err


def test_stage2_without_stage1(data, tmp_path, capsys):
    assert run("train", "--stage", 2, "--data", data, "--out", tmp_path) == 3
    assert "ctxtts train --stage 1" in capsys.readouterr().err


def test_missing_manifest(tmp_path, capsys):
    assert run("train", "--stage", 1, "--data", tmp_path / "nope.jsonl", "--out", tmp_path) == 3
    assert "ctxtts prepare" in capsys.readouterr().err


def test_config_stage_mismatch(data, tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"stage": 2}))
    assert run("train", "--stage", 1, "--config", cfg, "--data", data, "--out", tmp_path) == 2


def test_numerical_failure_exit_code(data, tmp_path, monkeypatch):
    real = training.model_losses
    monkeypatch.setattr(training, "model_losses",
                        lambda *a, **k: real(*a, **k)._replace(energy=torch_nan()))
    assert run("train", "--stage", 1, "--data", data, "--out", tmp_path, "--steps", 2) == 4
    assert (tmp_path / "stage1" / "nan_dump.json").exists()


def torch_nan():
    import torch
    return torch.tensor(float("nan"))


def test_duration_mismatch_names_utterance(data, tmp_path, capsys):
    copy = tmp_path / "bad"
    shutil.copytree(data.parent, copy)
    corpus = Corpus.load(copy / "manifest.jsonl")
    victim = corpus.utterances[1]
    feats = corpus.features(victim.utterance_id).as_dict()
    feats["duration"] = feats["duration"] + np.eye(1, len(feats["duration"]))[0]
    save_tensors(copy / victim.features_path, feats)
    assert run("prepare", "--manifest", copy / "manifest.jsonl") == 2
    err = capsys.readouterr().err
    assert victim.utterance_id in err and "duration sum" in err


def test_prepare_is_idempotent(tmp_path):
    args = ["--seed", 4, "--n-documents", 2, "--sentences-per-doc", 2, "--test-documents", 1]
    assert run("prepare", "--out", tmp_path / "a", *args) == 0
    assert run("prepare", "--out", tmp_path / "b", *args) == 0
    assert run("prepare", "--out", tmp_path / "a", *args) == 0
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert files
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes(), f
    assert run("prepare", "--manifest", tmp_path / "a" / "manifest.jsonl") == 0


def test_stub_embeddings_match_prepared(data, tmp_path):
    out = tmp_path / "emb.bin"
    assert run("extract-embeddings", "--data", data, "--provider", "stub", "--out", out) == 0
    assert out.read_bytes() == (data.parent / "phrase_embeddings.bin").read_bytes()


def test_unknown_utterance(data, pipeline, tmp_path):
    root, _ = pipeline
    assert run("case-study", "--ckpt", root / "run", "--data", data, "--utterance", "doc999:0",
               "--out", tmp_path) == 2


# -- case-study windows ---------------------------------------------------------------------

def test_case_windows(data):
    corpus = Corpus.load(data)
    uid = "doc001:2"
    assert case_window(corpus, uid, "original") == corpus.window(uid)
    none = case_window(corpus, uid, "none")
    assert len(none.sentences) == 1 and none.center.sentence_id == uid
    irr = case_window(corpus, uid, "irrelevant", seed=3)
    assert irr.center.sentence_id == uid and irr.center_position == 2
    others = [s.sentence_id for s in irr.sentences if s is not irr.center]
    assert len(set(others)) == 4 and uid not in others
    assert irr == case_window(corpus, uid, "irrelevant", seed=3)
    with pytest.raises(DataError):
        case_window(corpus, "missing", "none")
    with pytest.raises(ValueError):
        case_window(corpus, uid, "sideways")


def test_max_abs_difference():
    a = np.zeros((3, 2))
    assert max_abs_difference(a, a) == 0.0
    assert max_abs_difference(a, a + 0.5) == 0.5
    assert max_abs_difference(a, np.ones((4, 2))) == 1.0  # compared over the 3 shared frames
