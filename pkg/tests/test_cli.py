import json

import pytest

from iocseq import workflow
from iocseq.cli import dispatch, shipped

FAMILIES = ["njRAT", "WannaCry", "ArcadeYum", "Malicious Android firmware"]


@pytest.fixture(scope="module")
def logs(tmp_path_factory):
    """A small scenario file plus train and test logs generated from it."""
    d = tmp_path_factory.mktemp("cli")
    scenario = {"profiles": [{"profile": f, "users": 2} for f in FAMILIES],
                "benign_users": 2, "n_orgs": 1, "duration": 60, "overlap": 0.3}
    (d / "s.json").write_text(json.dumps(scenario))
    assert dispatch(["gen", "--scenario", str(d / "s.json"), "--out", str(d / "train.jsonl"),
                     "--seed", "7"]) == 0
    assert dispatch(["gen", "--scenario", str(d / "s.json"), "--out", str(d / "test.jsonl"),
                     "--seed", "8"]) == 0
    return d


@pytest.fixture(scope="module")
def model(logs):
    path = logs / "m.ckpt"
    assert dispatch(["train", "--data", str(logs / "train.jsonl"), "--epochs", "10",
                     "--out", str(path), "--history", str(logs / "h.jsonl")]) == 0
    return path


def test_gen_twice_gives_identical_files(logs, tmp_path):
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    for out in (a, b):
        assert dispatch(["gen", "--scenario", str(logs / "s.json"), "--out", str(out),
                         "--seed", "7"]) == 0
    assert a.read_bytes() == b.read_bytes()
    assert a.read_bytes() == (logs / "train.jsonl").read_bytes()


def test_gen_uses_the_shipped_scenario_by_default(tmp_path):
    assert shipped("scenario.json").is_file() and shipped("desk.json").is_file()


def test_missing_data_is_a_usage_error(tmp_path, capsys):
    assert dispatch(["train", "--out", str(tmp_path / "m.ckpt")]) == 1
    assert "--data" in capsys.readouterr().err


def test_unknown_flag_is_named(capsys):
    assert dispatch(["gen", "--out", "x", "--frobnicate", "3"]) == 1
    assert "--frobnicate" in capsys.readouterr().err


def test_unknown_subcommand_and_bad_choice(capsys):
    assert dispatch(["fly"]) == 1
    assert dispatch(["train", "--data", "d", "--out", "o", "--arch", "gru"]) == 1
    assert "gru" in capsys.readouterr().err


def test_eval_report_has_macro_auc(logs, model):
    out = logs / "report.json"
    assert dispatch(["eval", "--model", str(model), "--data", str(logs / "test.jsonl"),
                     "--out", str(out), "--curves", str(logs / "curves.csv")]) == 0
    report = json.loads(out.read_text())
    assert "macro_auc" in report and 0.0 <= report["macro_auc"] <= 1.0
    assert set(report["per_class_auc"]) <= set(FAMILIES)
    assert (logs / "curves.csv").read_text().startswith("class,curve_type,x,y,stderr")
    manifest = json.loads((logs / "report.json.manifest.json").read_text())
    assert manifest["error"] is None
    assert set(manifest["artifacts"]) == {str(out), str(logs / "curves.csv")}
    assert set(manifest["inputs"]) == {str(model), str(logs / "test.jsonl")}


def test_history_lines(logs, model):
    lines = [json.loads(l) for l in (logs / "h.jsonl").read_text().splitlines()]
    assert [l["epoch"] for l in lines] == list(range(1, 11))
    assert set(lines[0]) == {"epoch", "loss", "train_acc"}


def test_train_is_byte_reproducible(logs, model, tmp_path):
    again = tmp_path / "again.ckpt"
    assert dispatch(["train", "--data", str(logs / "train.jsonl"), "--epochs", "10",
                     "--out", str(again)]) == 0
    assert again.read_bytes() == model.read_bytes()


def test_manifest_written_on_failure(logs, tmp_path, capsys):
    out = tmp_path / "r.json"
    code = dispatch(["eval", "--model", str(tmp_path / "missing.ckpt"),
                     "--data", str(logs / "test.jsonl"), "--out", str(out)])
    assert code == 2
    assert "missing.ckpt" in capsys.readouterr().err
    manifest = json.loads((tmp_path / "r.json.manifest.json").read_text())
    assert manifest["error"] and manifest["artifacts"] == []
    assert manifest["command"] == "eval" and "version" in manifest


def test_config_file_sits_under_flags(logs, tmp_path, monkeypatch):
    monkeypatch.delenv("IOCSEQ_SEED", raising=False)
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"seed": 3, "scenario": str(logs / "s.json")}))
    assert dispatch(["gen", "--config", str(cfg), "--out", str(tmp_path / "a.jsonl")]) == 0
    assert json.loads((tmp_path / "a.jsonl.manifest.json").read_text())["seed"] == 3
    assert dispatch(["gen", "--config", str(cfg), "--seed", "7",
                     "--out", str(tmp_path / "b.jsonl")]) == 0
    assert (tmp_path / "b.jsonl").read_bytes() == (logs / "train.jsonl").read_bytes()
    cfg.write_text(json.dumps({"no_such_flag": 1}))
    assert dispatch(["gen", "--config", str(cfg), "--out", str(tmp_path / "c.jsonl")]) == 1


def test_seed_falls_back_to_environment(logs, tmp_path, monkeypatch):
    monkeypatch.setenv("IOCSEQ_SEED", "7")
    out = tmp_path / "a.jsonl"
    assert dispatch(["gen", "--scenario", str(logs / "s.json"), "--out", str(out)]) == 0
    assert out.read_bytes() == (logs / "train.jsonl").read_bytes()
    monkeypatch.setenv("IOCSEQ_SEED", "x")
    assert dispatch(["gen", "--out", str(out)]) == 1


def test_forest_train_eval_and_explain_refusal(logs, tmp_path, capsys):
    ck = tmp_path / "rf.ckpt"
    assert dispatch(["train", "--arch", "rf", "--n-trees", "5", "--data",
                     str(logs / "train.jsonl"), "--out", str(ck)]) == 0
    assert dispatch(["eval", "--model", str(ck), "--data", str(logs / "test.jsonl"),
                     "--out", str(tmp_path / "r.json")]) == 0
    assert "macro_auc" in json.loads((tmp_path / "r.json").read_text())
    line = json.loads((logs / "test.jsonl").read_text().splitlines()[0])
    sel = f"{line['org_id']},{line['user_id']},{line['ts']}"
    assert dispatch(["explain", "--model", str(ck), "--data", str(logs / "test.jsonl"),
                     "--select", sel, "--out", str(tmp_path / "e.json")]) == 2
    assert "not differentiable" in capsys.readouterr().err


def test_pretrain_then_fine_tune(logs, tmp_path):
    pre = tmp_path / "p.ckpt"
    assert dispatch(["pretrain", "--data", str(logs / "train.jsonl"), "--epochs", "1",
                     "--out", str(pre)]) == 0
    assert dispatch(["train", "--data", str(logs / "train.jsonl"), "--init", str(pre),
                     "--epochs", "1", "--out", str(tmp_path / "f.ckpt")]) == 0
    assert dispatch(["train", "--data", str(logs / "train.jsonl"), "--init", str(pre),
                     "--arch", "rf", "--out", str(tmp_path / "x.ckpt")]) == 2


def test_explain_selected_window(logs, model, tmp_path):
    lines = [json.loads(l) for l in (logs / "test.jsonl").read_text().splitlines()]
    rec = next(r for r in lines if r.get("label"))
    sel = f"{rec['org_id']},{rec['user_id']},{rec['ts']}"
    out = tmp_path / "e.json"
    assert dispatch(["explain", "--model", str(model), "--data", str(logs / "test.jsonl"),
                     "--select", sel, "--target-class", "WannaCry", "--steps", "10",
                     "--out", str(out)]) == 0
    report = json.loads(out.read_text())
    assert report["key"][:2] == [rec["org_id"], rec["user_id"]]
    assert set(rec["events"]) <= {e["event"] for e in report["events"]}
    assert dispatch(["explain", "--model", str(model), "--data", str(logs / "test.jsonl"),
                     "--select", "a,b", "--out", str(out)]) == 1
    assert dispatch(["explain", "--model", str(model), "--data", str(logs / "test.jsonl"),
                     "--select", "nobody,nobody,0", "--out", str(out)]) == 2


def test_explain_family(logs, model, tmp_path):
    out = tmp_path / "fam.json"
    code = dispatch(["explain-family", "--model", str(model), "--data",
                     str(logs / "test.jsonl"), "--class", "WannaCry", "--steps", "10",
                     "--max-instances", "10", "--out", str(out)])
    assert code == 0
    fam = json.loads(out.read_text())
    assert fam["class_name"] == "WannaCry" and 0 < fam["n_instances"] <= 10
    assert dispatch(["explain-family", "--model", str(model), "--data",
                     str(logs / "test.jsonl"), "--class", "Zeus", "--out", str(out)]) == 2


def test_at_n_and_sweep_schema(logs, tmp_path):
    out = tmp_path / "an.json"
    assert dispatch(["at-n", "--data", str(logs / "train.jsonl"), "--test",
                     str(logs / "test.jsonl"), "--arch", "rf", "--n-values", "5,all",
                     "--repeats", "2", "--out", str(out)]) == 0
    rows = json.loads(out.read_text())["at_n"]
    assert [r["n"] for r in rows] == [5, "all"] and [r["repeats"] for r in rows] == [2, 1]
    assert dispatch(["at-n", "--data", str(logs / "train.jsonl"), "--test",
                     str(logs / "test.jsonl"), "--n-values", "ten", "--out", str(out)]) == 1
    out = tmp_path / "sw.json"
    assert dispatch(["sweep", "--data", str(logs / "train.jsonl"), "--widths", "3,5",
                     "--epochs", "1", "--out", str(out)]) == 0
    assert [r["w"] for r in json.loads(out.read_text())["rows"]] == [3, 5]


TINY_PIPELINE = {
    "scenario": {"users_per_family": 2, "benign_users": 2, "duration": 60, "n_orgs": 1},
    "pretrain_epochs": 1,
    "epochs": 3,
    "at_n": {"n_values": [5, "all"], "repeats": 2},
    "sweep": {"widths": [3, 5], "epochs": 1},
    "ig_steps": 8,
    "max_instances": 10,
}


def test_reproduce_pipeline(tmp_path):
    cfg = tmp_path / "tiny.json"
    cfg.write_text(json.dumps(TINY_PIPELINE))
    out = tmp_path / "run"
    assert dispatch(["reproduce", "--config", str(cfg), "--out-dir", str(out)]) == 0
    report = json.loads((out / "report.json").read_text())
    for block in ("scratch", "pretrained"):
        assert "macro_auc" in report[block] and report[block]["at_n"][-1]["n"] == "all"
    assert "acc@5" in report["significance"]
    assert [r["w"] for r in report["sweep"]] == [3, 5]
    # an explanation file for every family with at least one positive prediction
    model = workflow.load_any(out / "pretrained.ckpt")
    test = workflow.labeled_windows(workflow.scenario_logs(workflow.merge_config(
        workflow.DESK_PIPELINE, TINY_PIPELINE))[1], model.vocab, "family")
    predicted = {model.classes[c] for c in
                 workflow.predict_windows(model, test.windows).argmax(axis=1)}
    assert set(report["explanations"]) == predicted
    for name, entry in report["explanations"].items():
        assert json.loads(open(entry["file"]).read())["class_name"] == name
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["error"] is None
    assert str(out / "report.json") in manifest["artifacts"]
    assert all(p in manifest["artifacts"] for p in report_files(out))


def report_files(out):
    return [str(p) for p in sorted(out.iterdir()) if p.name != "manifest.json"]


def test_reproduce_failure_names_the_stage(tmp_path, capsys):
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps({**TINY_PIPELINE, "arch": "gru"}))
    out = tmp_path / "run"
    assert dispatch(["reproduce", "--config", str(cfg), "--out-dir", str(out)]) == 2
    err = capsys.readouterr().err
    assert "stage 'pretrain'" in err
    manifest = json.loads((out / "manifest.json").read_text())
    assert "pretrain" in manifest["error"]
    assert str(out / "train.jsonl") in manifest["artifacts"]


def test_help_and_version(capsys):
    assert dispatch(["--version"]) == 0
    assert dispatch(["train", "--help"]) == 0
    assert "--per-class-n" in capsys.readouterr().out


def test_shipped_pipeline_config_matches_defaults():
    assert json.loads(shipped("desk.json").read_text()) == workflow.DESK_PIPELINE
