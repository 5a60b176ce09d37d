import json

import pytest

from streamst import cli, metrics, policy
from streamst.cli import ConfigError, RunConfig

TINY = ["--set", "model.d_model=16", "--set", "model.n_heads=2", "--set", "model.N=1", "--set", "model.M=1",
        "--set", "model.d_ff=32", "--set", "model.conv_channels=16", "--set", "model.d=9"]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    corpus = root / "corpus"
    assert cli.main(["generate-data", "--out", str(corpus), "--set", "data.n_samples=40"]) == 0
    ckpt = root / "m.npz"
    assert cli.main(["train", "--data", str(corpus), "--out", str(ckpt), "--set", "train.steps=3",
                     "--set", "train.batch_size=4", *TINY]) == 0
    return root, corpus, ckpt


class TestRunConfig:
    def test_unknown_keys_rejected(self):
        with pytest.raises(ConfigError, match="model.bogus"):
            RunConfig.from_dict({"model": {"bogus": 1}})
        with pytest.raises(ConfigError, match="extra"):
            RunConfig.from_dict({"extra": {}})
        with pytest.raises(ConfigError):
            RunConfig().override(["nosection=1"])

    def test_override_and_resolve(self):
        cfg = RunConfig().override(["model.d_model=32", "seed=5", "data.frames_per_token=[1,3]"])
        r = cfg.resolved()
        assert r["model"]["d_model"] == 32 and r["model"]["seed"] == 5 and r["train"]["seed"] == 5
        assert r["data"]["frames_per_token"] == [1, 3]
        assert cfg.data_spec().frames_per_token == (1, 3)

    def test_invalid_value(self):
        with pytest.raises(ConfigError):
            RunConfig.from_dict({"model": {"d": 1}}).resolved()

    def test_load_from_artifact(self, workspace, tmp_path):
        _, corpus, _ = workspace
        cfg = RunConfig.load(corpus / "config.json")
        assert cfg.data["n_samples"] == 40


def test_generate_data_outputs(workspace):
    _, corpus, _ = workspace
    for split in ("train", "dev", "test"):
        head = (corpus / f"{split}.tsv").read_text().splitlines()[0]
        assert json.loads(head[2:])["run_config"]["data"]["n_samples"] == 40


def test_train_artifacts_and_determinism(workspace, tmp_path):
    _, corpus, ckpt = workspace
    curve = (ckpt.parent / "m.npz.curve.tsv").read_text().splitlines()
    assert json.loads(curve[0][2:])["run_config"]["data"]["n_samples"] == 40
    assert curve[1].split("\t")[:5] == ["step", "total", "l_qua", "l_asr", "l_st"]
    other = tmp_path / "again.npz"
    assert cli.main(["train", "--data", str(corpus), "--out", str(other), "--set", "train.steps=3",
                     "--set", "train.batch_size=4", *TINY]) == 0
    assert (tmp_path / "again.npz.curve.tsv").read_text().splitlines()[2:] == curve[2:]


def test_train_missing_corpus(tmp_path, capsys):
    assert cli.main(["train", "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "x.npz")]) == 2
    assert "nope" in capsys.readouterr().err


def test_translate(workspace, tmp_path):
    _, corpus, ckpt = workspace
    out = tmp_path / "hyp.tsv"
    assert cli.main(["translate", "--checkpoint", str(ckpt), "--data", str(corpus), "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert lines[0].startswith("# ")
    assert all(line.startswith("test-") for line in lines[1:])


def test_simulate_then_score_agree(workspace, tmp_path, capsys):
    _, corpus, ckpt = workspace
    logs, report = tmp_path / "p.log", tmp_path / "p.tsv"
    assert cli.main(["simulate", "--checkpoint", str(ckpt), "--data", str(corpus), "--policy", "prefix",
                     "--k", "2", "--stride-ms", "400", "--logs", str(logs), "--report", str(report)]) == 0
    inline = metrics.parse_table(report.read_text())
    rescored = tmp_path / "s.tsv"
    assert cli.main(["score", "--logs", str(logs), "--references", str(corpus / "test.tsv"),
                     "--report", str(rescored)]) == 0
    assert metrics.parse_table(rescored.read_text()) == inline
    # rerun with the same seed reproduces the logs byte for byte
    again = tmp_path / "p2.log"
    assert cli.main(["simulate", "--checkpoint", str(ckpt), "--data", str(corpus), "--policy", "prefix",
                     "--k", "2", "--stride-ms", "400", "--logs", str(again), "--report", str(tmp_path / "x")]) == 0
    assert again.read_text() == logs.read_text()


def test_offline_ap_is_one(workspace, tmp_path):
    _, corpus, ckpt = workspace
    logs = tmp_path / "o.log"
    assert cli.main(["simulate", "--checkpoint", str(ckpt), "--data", str(corpus), "--policy", "offline",
                     "--logs", str(logs), "--report", str(tmp_path / "o.tsv")]) == 0
    _, parsed = policy.parse_logs(logs.read_text())
    for lg in parsed:
        if lg.tokens():
            assert metrics.average_proportion(lg.delay_vector()) == 1.0


def test_sweep_writes_one_log_per_point(workspace, tmp_path):
    _, corpus, ckpt = workspace
    out = tmp_path / "sweep"
    report = tmp_path / "sweep.tsv"
    assert cli.main(["simulate", "--checkpoint", str(ckpt), "--data", str(corpus), "--policy", "prefix",
                     "--k", "3", "--sweep", "stride", "--limit", "2", "--logs", str(out),
                     "--report", str(report)]) == 0
    rows = metrics.parse_table(report.read_text())
    assert [r["stride_ms"] for r in rows] == [float(s) for s in cli.STRIDE_GRID_MS]
    assert len(list(out.iterdir())) == len(cli.STRIDE_GRID_MS)


def test_policy_mismatch_rejected_before_model_load(tmp_path, capsys):
    missing = tmp_path / "absent.npz"
    assert cli.main(["simulate", "--checkpoint", str(missing), "--manifest", str(missing),
                     "--policy", "prefix", "--stride-ms", "100"]) == 2
    assert "multiple" in capsys.readouterr().err
    assert cli.main(["simulate", "--checkpoint", str(missing), "--manifest", str(missing),
                     "--policy", "offline", "--sweep"]) == 2


def test_score_rejects_mismatch_and_empty(workspace, tmp_path, capsys):
    _, corpus, ckpt = workspace
    logs = tmp_path / "p.log"
    cli.main(["simulate", "--checkpoint", str(ckpt), "--data", str(corpus), "--policy", "prefix",
              "--k", "2", "--limit", "1", "--logs", str(logs), "--report", str(tmp_path / "r")])
    capsys.readouterr()
    assert cli.main(["score", "--logs", str(logs), "--references", str(corpus / "test.tsv")]) == 2
    err = capsys.readouterr().err
    assert "references without log" in err and "test-00001" in err
    empty = tmp_path / "empty.log"
    empty.write_text("")
    assert cli.main(["score", "--logs", str(empty)]) == 2


def test_score_hand_log(tmp_path, capsys):
    lg = policy.DecisionLog("u", 1000.0, "5 6", finished=True)
    lg.events += [policy.Event("READ", 400.0), policy.Event("WRITE", 400.0, 7), policy.Event("READ", 800.0),
                  policy.Event("WRITE", 800.0, 8), policy.Event("READ", 1000.0),
                  policy.Event("WRITE", 1000.0, 1)]
    path = tmp_path / "hand.log"
    path.write_text(policy.logs_to_string([lg]))
    assert cli.main(["score", "--logs", str(path)]) == 0
    row = metrics.parse_table(capsys.readouterr().out)[0]
    assert row["AL"] == 350 and row["DAL"] == 400 and row["AP"] == pytest.approx(0.6)


def test_grad_check(capsys):
    assert cli.main(["grad-check"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["passed"] and out["max_rel_error"] < 1e-3
