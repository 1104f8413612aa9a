import hashlib
import json
import subprocess
import sys

import pytest

from qta.cli import main

SMALL = {
    "synthetic": {"n_types": 4, "n_answers": 3, "dim_a": 12, "dim_b": 12, "samples_per_type": 30},
    "model": {"embed_dim": 6, "lstm_hidden": 8, "mlp_hidden": 16, "w2v_dim": 4, "nmt_dim": 4},
    "train": {"epochs": 2, "batch_size": 16},
}


def _tree_digest(directory):
    h = hashlib.sha256()
    for p in sorted(directory.rglob("*")):
        if p.is_file():
            h.update(p.relative_to(directory).as_posix().encode())
            h.update(p.read_bytes())
    return h.hexdigest()


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "config.json"
    cfg.write_text(json.dumps(SMALL))
    assert main(["gen-data", "--config", str(cfg), "--out", str(root / "data"), "--seed", "1"]) == 0
    return root, cfg


def test_gen_data_is_byte_identical(workspace, tmp_path):
    root, cfg = workspace
    assert main(["gen-data", "--config", str(cfg), "--out", str(tmp_path / "again"), "--seed", "1"]) == 0
    assert _tree_digest(root / "data") == _tree_digest(tmp_path / "again")
    assert main(["gen-data", "--config", str(cfg), "--out", str(tmp_path / "other"), "--seed", "2"]) == 0
    assert _tree_digest(root / "data") != _tree_digest(tmp_path / "other")


def test_train_eval_byte_identical_and_inputs_untouched(workspace, tmp_path):
    root, cfg = workspace
    before = _tree_digest(root / "data")
    outs = []
    for k in range(2):
        run = tmp_path / f"run{k}"
        argv = ["train", "--config", str(cfg), "--data", str(root / "data"), "--out", str(run), "--architecture", "CATL-QTA-M"]
        assert main(argv) == 0
        report = run / "report.json"
        assert main(["eval", "--checkpoint", str(run / "model.qtac"), "--data", str(root / "data"), "--report", str(report)]) == 0
        outs.append(run)
    for name in ("model.qtac", "loss_curve.csv", "config.json", "report.json", "report.confusion.json"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes(), name
    assert _tree_digest(root / "data") == before
    curve = (outs[0] / "loss_curve.csv").read_text().splitlines()
    assert curve[0] == "epoch,loss" and len(curve) == 3
    report = json.loads((outs[0] / "report.json").read_text())
    assert set(report) >= {"per_type_acc", "arithmetic_mpt", "harmonic_mpt", "overall_acc"}


def test_resolved_config_reruns_identically(workspace, tmp_path):
    root, cfg = workspace
    first = tmp_path / "first"
    assert main(["train", "--config", str(cfg), "--data", str(root / "data"), "--out", str(first), "--epochs", "1", "--lr", "0.01"]) == 0
    resolved = first / "config.json"
    assert json.loads(resolved.read_text())["train"]["lr"] == 0.01
    second = tmp_path / "second"
    assert main(["train", "--config", str(resolved), "--data", str(root / "data"), "--out", str(second)]) == 0
    assert (first / "model.qtac").read_bytes() == (second / "model.qtac").read_bytes()


def test_untrained_model_is_at_chance(workspace, tmp_path):
    root, cfg = workspace
    run = tmp_path / "lr0"
    assert main(["train", "--config", str(cfg), "--data", str(root / "data"), "--out", str(run), "--lr", "0", "--epochs", "1"]) == 0
    assert main(["eval", "--checkpoint", str(run / "model.qtac"), "--data", str(root / "data"), "--report", str(run / "r.json")]) == 0
    overall = json.loads((run / "r.json").read_text())["overall_acc"]
    chance = 100.0 / (4 * 3)
    # an untrained model should sit near uniform guessing
    assert overall <= 2 * chance
    assert not (run / "r.confusion.json").exists()


def test_norms_csv(workspace, tmp_path):
    root, cfg = workspace
    run = tmp_path / "gated"
    assert main(["train", "--config", str(cfg), "--data", str(root / "data"), "--out", str(run)]) == 0
    out = tmp_path / "norms.csv"
    assert main(["norms", "--checkpoint", str(run / "model.qtac"), "--data", str(root / "data"), "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert lines[0].startswith("question_type,source") and len(lines) == 1 + 4 * 2


def test_check_mcb_oracle_passes(capsys):
    assert main(["check", "--suite", "mcb-oracle", "--trials", "20"]) == 0
    out = capsys.readouterr().out
    assert out.startswith("PASS")


@pytest.mark.parametrize("suite", ["fft", "sketch"])
def test_check_other_suites(suite):
    assert main(["check", "--suite", suite, "--trials", "200"]) == 0


def test_check_failure_exit_code(capsys):
    # a huge finite-difference step cannot match analytic gradients
    assert main(["check", "--suite", "grad", "--eps", "0.5"]) == 3
    assert "FAIL" in capsys.readouterr().out


@pytest.mark.parametrize(
    "argv",
    [
        ["bogus"],
        ["train", "--data", "x"],
        ["check", "--suite", "nope"],
        ["--threads", "0", "check", "--suite", "fft"],
    ],
)
def test_usage_errors_exit_1(argv):
    try:
        code = main(argv)
    except SystemExit as exc:
        code = exc.code
    assert code == 1


def test_bad_thread_env(monkeypatch):
    monkeypatch.setenv("QTA_THREADS", "many")
    assert main(["check", "--suite", "fft"]) == 1


def test_data_errors_exit_2(workspace, tmp_path):
    root, cfg = workspace
    assert main(["eval", "--checkpoint", str(tmp_path / "none.qtac"), "--data", str(root / "data"), "--report", str(tmp_path / "r.json")]) == 2
    assert main(["train", "--data", str(tmp_path / "empty"), "--out", str(tmp_path / "o")]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"model": {"hidden_units": 3}}))
    assert main(["train", "--config", str(bad), "--data", str(root / "data"), "--out", str(tmp_path / "o")]) == 2
    bad.write_text("{not json")
    assert main(["gen-data", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
    bad.write_text(json.dumps({"synthetic": {"rho": 2.0}}))
    assert main(["gen-data", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2


def test_divergence_exit_4(workspace, tmp_path):
    root, cfg = workspace
    doc = dict(SMALL, train={"optimizer": "sgd", "lr": 1e300, "epochs": 1})
    path = tmp_path / "hot.json"
    path.write_text(json.dumps(doc))
    assert main(["train", "--config", str(path), "--data", str(root / "data"), "--out", str(tmp_path / "o"), "--architecture", "CATL"]) == 4


def test_absurd_mode_via_config(tmp_path):
    doc = {"synthetic": dict(SMALL["synthetic"], rho=1.0)}
    (tmp_path / "c.json").write_text(json.dumps(doc))
    assert main(["gen-data", "--config", str(tmp_path / "c.json"), "--out", str(tmp_path / "d")]) == 0
    lines = [json.loads(x) for x in (tmp_path / "d" / "train.jsonl").read_text().splitlines()]
    absurd = [r["question"] for r in lines if r["question_type"] == "absurd"]
    assert absurd and all(q.startswith("what color is the") for q in absurd)


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "qta.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    assert "gen-data" in proc.stdout
