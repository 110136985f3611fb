import json

import numpy as np
import pytest

from posture_forecaster import cli
from posture_forecaster.models import Checkpoint
from posture_forecaster.motion import io as mio
from posture_forecaster.motion.markers import SEGMENT_NAMES
from posture_forecaster.training import History

TINY_FLAGS = ["--epochs", "2", "--model-width", "8", "--heads", "2", "--feedforward-width", "8",
              "--head-hidden", "4", "--decoder-layers", "1", "--dropout", "0.1"]


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert run("synth", "--subjects", 3, "--tasks-per-subject", 2, "--seed", 4, "--out", root / "data") == 0
    for seg in SEGMENT_NAMES:
        assert run("train", "--data", root / "data", "--segment", seg, *TINY_FLAGS, "--out", root / "ckpt") == 0
    return root


def manifest(directory):
    return json.loads((directory / cli.MANIFEST_FILE).read_text())


def test_synth_writes_requested_tasks(workspace):
    recs = mio.read_dataset(workspace / "data")
    assert len(recs) == 6 and len({r.subject_id for r in recs}) == 3
    assert all(r.n_frames == 101 for r in recs)
    m = manifest(workspace / "data")
    assert m["command"] == "synth" and m["seed"] == 4
    assert "manifest.csv" in m["outputs"]


def test_train_outputs_and_manifest(workspace):
    ck = workspace / "ckpt"
    for seg in SEGMENT_NAMES:
        assert (ck / f"{seg}.npz").exists() and (ck / f"{seg}_history.csv").exists()
    m = manifest(ck)
    assert m["command"] == "train" and m["config"]["segment"] == SEGMENT_NAMES[-1]
    # per-model defaults are echoed as resolved values
    assert m["config"]["batch_size"] == 512 and m["config"]["lr"] == 0.001 and m["config"]["epochs"] == 2
    assert {"tool_version", "python", "numpy", "wall_clock_s", "inputs"} <= set(m)
    meta = Checkpoint.load(ck / "legs.npz").meta
    assert set(meta["test_subjects"]).isdisjoint(meta["train_subjects"])


def test_manifest_replay_reproduces_history(workspace):
    ck = workspace / "ckpt"
    out = workspace / "replay"
    assert run("train", "--data", workspace / "data", "--config", ck / cli.MANIFEST_FILE, "--out", out) == 0
    a = History.from_csv((ck / "legs_history.csv").read_text())
    b = History.from_csv((out / "legs_history.csv").read_text())
    assert a.epoch == b.epoch
    np.testing.assert_allclose(b.train_loss, a.train_loss, rtol=0, atol=1e-12)
    np.testing.assert_allclose(b.val_loss, a.val_loss, rtol=0, atol=1e-12)
    assert manifest(out)["config"] == manifest(ck)["config"]


def test_flag_overrides_config(workspace, tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"epochs": 5, "segment": "head", "model_width": 8, "heads": 2,
                               "feedforward_width": 8, "head_hidden": 4, "decoder_layers": 1}))
    assert run("train", "--data", workspace / "data", "--config", cfg, "--epochs", 1, "--out", tmp_path / "o") == 0
    m = manifest(tmp_path / "o")
    assert m["config"]["epochs"] == 1 and m["config"]["segment"] == "head"


def test_manifest_for_other_command_rejected(workspace, tmp_path):
    code = run("train", "--data", workspace / "data", "--config", workspace / "data" / cli.MANIFEST_FILE,
               "--out", tmp_path)
    assert code == cli.EXIT_USAGE


def test_unknown_config_key_rejected(workspace, tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text('{"epoch": 3}')
    assert run("train", "--data", workspace / "data", "--config", cfg, "--out", tmp_path / "o") == cli.EXIT_USAGE


def test_rollout_writes_101_frames_with_provenance(workspace):
    task = mio.read_manifest(workspace / "data")[0][0]
    stem = str(task)[: -len(mio.TRAJECTORY_SUFFIX)]
    assert run("rollout", "--checkpoint-dir", workspace / "ckpt", "--task", stem, "--out", workspace / "roll") == 0
    files = list((workspace / "roll").glob("*.rollout.csv"))
    frames, names, prov = mio.read_trajectory(files[0])
    assert frames.shape == (101, 41, 3)
    assert prov.count("measured") == 25 and prov.count("predicted") == 76
    measured = mio.read_task(stem)
    np.testing.assert_array_equal(frames[:25], measured.markers(names)[:25])


def test_eval_and_report(workspace):
    assert run("eval", "--checkpoint-dir", workspace / "ckpt", "--data", workspace / "data",
               "--out", workspace / "eval") == 0
    lines = (workspace / "eval" / "metrics.csv").read_text().splitlines()
    assert lines[0] == "segment,horizon,rmse_mm,nrmse_pct,r2"
    assert sum(",one_step," in l for l in lines) == 4 and sum(",rollout," in l for l in lines) == 5
    curve = (workspace / "eval" / "rmse_per_frame.csv").read_text().splitlines()
    assert len(curve) == 77 and curve[1].startswith("26,") and curve[-1].startswith("101,")

    assert run("report", "--checkpoint-dir", workspace / "ckpt", "--data", workspace / "data",
               "--out", workspace / "report") == 0
    for name in ("rmse_per_frame.svg", "snapshots.csv", "snapshots_measured.svg", "snapshots_predicted.svg"):
        assert (workspace / "report" / name).exists()
    assert (workspace / "report" / "rmse_per_frame.svg").read_text().startswith("<svg")


def test_help_lists_defaults(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["train", "--help"])
    assert exc.value.code == 0
    text = capsys.readouterr().out
    assert "(default: 16)" in text and "(default: arms)" in text and "(default: 15)" in text


def test_missing_data_exits_2(tmp_path, capsys):
    assert run("train", "--data", tmp_path / "nope", "--out", tmp_path / "o") == cli.EXIT_USAGE
    assert "error:" in capsys.readouterr().err


def test_bad_flag_exits_2():
    with pytest.raises(SystemExit) as exc:
        cli.main(["train", "--no-such-flag"])
    assert exc.value.code == 2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_exits_3(workspace, tmp_path, capsys):
    code = run("train", "--data", workspace / "data", "--segment", "head", *TINY_FLAGS, "--lr", "1e300",
               "--out", tmp_path)
    assert code == cli.EXIT_NUMERIC
    assert "numerical failure" in capsys.readouterr().err


def test_seed_from_environment(workspace, tmp_path, monkeypatch):
    monkeypatch.setenv(cli.SEED_ENV, "11")
    assert run("synth", "--subjects", 1, "--tasks-per-subject", 1, "--out", tmp_path) == 0
    assert manifest(tmp_path)["seed"] == 11
    monkeypatch.setenv(cli.SEED_ENV, "eleven")
    assert run("synth", "--subjects", 1, "--tasks-per-subject", 1, "--out", tmp_path) == cli.EXIT_USAGE


def test_preprocess_keeps_101_frames(workspace):
    assert run("preprocess", "--data", workspace / "data", "--out", workspace / "pre") == 0
    recs = mio.read_dataset(workspace / "pre")
    assert len(recs) == 6 and all(r.n_frames == 101 for r in recs)


def test_loso_command(workspace):
    assert run("loso", "--data", workspace / "data", "--segments", "head", *TINY_FLAGS, "--epochs", 1,
               "--out", workspace / "loso") == 0
    folds = json.loads((workspace / "loso" / "loso_folds.json").read_text())
    assert folds["audit_passed"] and len(folds["folds"]) == 3
    assert (workspace / "loso" / "loso_rmse.csv").read_text().splitlines()[-1].startswith("mean_std,")
