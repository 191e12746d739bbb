"""End-to-end exit criteria. Each test records one pass/fail line for the summary.

Run only these with ``pytest -m acceptance -s``.
"""

import json
import time

import numpy as np
import pytest

from iocseq import evalkit, explain, forest, workflow
from iocseq.cli import dispatch, shipped
from iocseq.models import Model
from iocseq.ndcore import checkpoint as ckpt
from iocseq.ndcore.gradcheck import check_gradients
from iocseq.synthgen import FAMILY_SIGNATURES
from iocseq.telemetry import stack_windows

pytestmark = pytest.mark.acceptance

ARCH_SEEDS = range(5)


@pytest.fixture(scope="module")
def desk_run(tmp_path_factory):
    """The shipped desk pipeline, run once and timed."""
    out = tmp_path_factory.mktemp("desk")
    t0 = time.perf_counter()
    code = dispatch(["reproduce", "--config", str(shipped("desk.json")), "--out-dir", str(out)])
    elapsed = time.perf_counter() - t0
    assert code == 0, (out / "manifest.json").read_text()
    report = json.loads((out / "report.json").read_text())
    return out, report, elapsed


@pytest.fixture(scope="module")
def desk_data(desk_run):
    out, report, _ = desk_run
    cfg = workflow.merge_config(workflow.DESK_PIPELINE, json.loads(shipped("desk.json").read_text()))
    train_recs, test_recs = workflow.scenario_logs(cfg)
    scratch = Model.load(out / "scratch.ckpt")
    tr = workflow.labeled_windows(train_recs, scratch.vocab, "family")
    te = workflow.labeled_windows(test_recs, scratch.vocab, "family")
    return tr, te, scratch.vocab, report["classes"]


@pytest.fixture(scope="module")
def arch_aucs(desk_data):
    """Test macro AUC of every neural architecture for five seeds, 20 epochs each."""
    tr, te, vocab, classes = desk_data
    y = te.targets(classes)
    out = {}
    for arch in ("transformer", "lstm", "cnn"):
        rows = []
        for seed in ARCH_SEEDS:
            model, _ = workflow.fit_classifier(arch, tr, vocab, classes, seed=seed, epochs=20)
            probs = workflow.predict_windows(model, te.windows)
            rows.append((evalkit.accuracy(y, probs),
                         evalkit.macro_auc(evalkit.ScoredDataset(y, probs))))
        out[arch] = rows
    return out


def test_c1_autodiff_gradients(verdict):
    from test_ndcore_ops import CASES, TOL

    t0 = time.perf_counter()
    worst, failing = 0.0, []
    for name, (make, shapes) in sorted(CASES.items()):
        assert len(shapes) >= 5
        for i, shape in enumerate(shapes):
            fn, inputs, diff = make(np.random.default_rng(1000 + i), shape)
            err = max(check_gradients(fn, inputs, diff, seed=i))
            worst = max(worst, err)
            if err >= TOL:
                failing.append(f"{name}{shape}")
    elapsed = time.perf_counter() - t0
    ok = not failing and elapsed < 120
    verdict("criterion 1", ok, f"{len(CASES)} ops x 5 shapes, max rel err {worst:.2e}, "
                               f"{elapsed:.0f}s" + (f", failing {failing}" if failing else ""))
    assert ok


def test_c2_integrated_gradient_axioms(verdict, desk_run, desk_data):
    out, _, _ = desk_run
    _, te, _, _ = desk_data
    t0 = time.perf_counter()
    # (a) exact on linear functions for any step count
    rng = np.random.default_rng(0)
    linear_ok = True
    for m in (1, 2, 7, 50, 300, 1000):
        c, x, b = rng.standard_normal((3, 16))
        ig = explain.riemann_ig(lambda p: np.broadcast_to(c, p.shape), x, b, m)
        linear_ok &= bool(np.allclose(ig, c * (x - b), rtol=1e-12, atol=1e-12))
    # (b) completeness at m=300 on the trained desk transformer, 50 test windows
    model = Model.load(out / "scratch.ckpt")
    idx = np.sort(np.random.default_rng(2).choice(len(te), 50, replace=False))
    batch = stack_windows([te.windows[i] for i in idx])
    pred = model.predict_proba(batch).argmax(axis=1)
    attr, fx, fb = explain.embedding_attributions(model, batch, pred, steps=300)
    gap = np.abs(attr.sum(axis=(1, 2, 3)) - (fx - fb))
    bound = 0.01 * np.abs(fx - fb) + 1e-4
    n_ok = int((gap <= bound).sum())
    # (c) attributions vanish where the input equals the baseline
    x = rng.standard_normal(12)
    x[::3] = 0.0
    zero_ok = not explain.riemann_ig(lambda p: np.cos(p) + p ** 2, x, np.zeros(12), 300)[::3].any()
    pad_ok = not attr[~batch.pad_mask].any()
    elapsed = time.perf_counter() - t0
    ok = linear_ok and n_ok == 50 and zero_ok and pad_ok and elapsed < 300
    verdict("criterion 2", ok, f"(a) linear exact {linear_ok}; (b) completeness {n_ok}/50 "
                               f"within bound, worst gap/bound {np.max(gap / bound):.2f}; "
                               f"(c) baseline coords zero {zero_ok and pad_ok}; {elapsed:.0f}s")
    assert ok


def _pair_count(scores, labels):
    pos, neg = scores[labels], scores[~labels]
    return ((pos[:, None] > neg[None]).sum() + 0.5 * (pos[:, None] == neg[None]).sum()) / (
        pos.size * neg.size)


def test_c3_metric_oracles(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    exact = 0
    for trial in range(100):
        scores = rng.integers(0, 30, 200) / 30 if trial % 2 else rng.random(200)
        labels = rng.random(200) < rng.uniform(0.1, 0.9)
        labels[:2] = [True, False]
        exact += evalkit.auc(scores, labels) == _pair_count(scores, labels)
    macro_ok = True
    for _ in range(20):
        probs = rng.dirichlet(np.ones(5), 200)
        y = rng.integers(0, 5, 200)
        oracle = np.mean([_pair_count(probs[:, c], y == c) for c in range(5)])
        macro_ok &= abs(evalkit.macro_auc(evalkit.ScoredDataset(y, probs)) - oracle) < 1e-12
    elapsed = time.perf_counter() - t0
    ok = exact == 100 and macro_ok and elapsed < 60
    verdict("criterion 3", ok, f"AUC == pair count on {exact}/100 sets; macro AUC == mean of "
                               f"per-class oracles {macro_ok}; {elapsed:.1f}s")
    assert ok


def test_c4_end_to_end_classification(verdict, desk_run, arch_aucs):
    _, report, _ = desk_run
    acc, mauc = report["scratch"]["acc"], report["scratch"]["macro_auc"]
    means = {a: float(np.mean([r[1] for r in rows])) for a, rows in arch_aucs.items()}
    ranking = means["transformer"] >= means["cnn"] and means["transformer"] >= means["lstm"]
    ok = acc >= 0.90 and mauc >= 0.95 and ranking
    verdict("criterion 4", ok, f"transformer acc {acc:.4f}, macro AUC {mauc:.5f}; 5-seed mean "
                               "macro AUC " + ", ".join(f"{a} {v:.5f}" for a, v in means.items()))
    assert ok


def test_c5_pretraining_benefit(verdict, desk_run):
    _, report, _ = desk_run
    scratch = next(r for r in report["scratch"]["at_n"] if r["n"] == 10)
    pre = next(r for r in report["pretrained"]["at_n"] if r["n"] == 10)
    t, p, _ = evalkit.paired_significance(pre["acc"], scratch["acc"])
    ok = scratch["repeats"] == 5 and pre["acc_mean"] >= scratch["acc_mean"] and p < 0.05
    verdict("criterion 5", ok, f"acc@10 pretrained {pre['acc_mean']:.3f} vs scratch "
                               f"{scratch['acc_mean']:.3f} over 5 seeds, t={t:.2f}, p={p:.2e}")
    assert ok


def test_c6_explanations_recover_signatures(verdict, desk_run):
    _, report, _ = desk_run
    precision = {}
    for family, signature in FAMILY_SIGNATURES.items():
        entry = report["explanations"].get(family)
        if entry is None:
            precision[family] = 0.0
            continue
        fam = explain.FamilyImportance.from_json(json.loads(open(entry["file"]).read()))
        top5 = [r[0] for r in fam.top(5)]
        precision[family] = len(set(top5) & set(signature)) / 5
    mean = float(np.mean(list(precision.values())))
    ok = all(v >= 0.6 for v in precision.values()) and mean >= 0.8
    verdict("criterion 6", ok, "precision@5 " + ", ".join(f"{k} {v:.1f}" for k, v in
                                                          precision.items()) + f"; mean {mean:.2f}")
    assert ok


def test_c7_forest_baseline(verdict, desk_data, arch_aucs):
    tr, te, vocab, classes = desk_data
    dim_ok = forest.feature_dim(21, 216) == 4599 and \
        forest.featurize(te.windows[:2], vocab).shape == (2, 4599)
    t0 = time.perf_counter()
    rf, _ = workflow.fit_classifier("rf", tr, vocab, classes, seed=0, workers=4)
    probs = workflow.predict_windows(rf, te.windows)
    elapsed = time.perf_counter() - t0
    y = te.targets(classes)
    acc = evalkit.accuracy(y, probs)
    # the majority-class predictor picks the most frequent training class
    majority = float((y == np.bincount(tr.targets(classes)).argmax()).mean())
    rf_auc = evalkit.macro_auc(evalkit.ScoredDataset(y, probs))
    neural = {a: float(np.mean([r[1] for r in rows])) for a, rows in arch_aucs.items()}
    beats = all(v > rf_auc for v in neural.values())
    ok = dim_ok and acc > majority and beats
    verdict("criterion 7", ok, f"dim 4599 {dim_ok}; forest acc {acc:.4f} vs majority "
                               f"{majority:.4f}; macro AUC forest {rf_auc:.5f} vs neural "
                               + ", ".join(f"{a} {v:.5f}" for a, v in neural.items())
                               + f"; fit+predict {elapsed:.0f}s")
    assert ok


TINY = {
    "scenario": {"users_per_family": 2, "benign_users": 2, "duration": 60, "n_orgs": 1},
    "pretrain_epochs": 1, "epochs": 2, "at_n": {"n_values": [5, "all"], "repeats": 2},
    "sweep": {"widths": [3], "epochs": 1}, "ig_steps": 5, "max_instances": 5,
}


def test_c8_determinism_and_persistence(verdict, desk_run, desk_data, tmp_path):
    out, _, _ = desk_run
    _, te, _, _ = desk_data
    t0 = time.perf_counter()
    raw = (out / "pretrained.ckpt").read_bytes()
    model = Model.from_parts(*ckpt.loads(raw))
    roundtrip = model.to_bytes() == raw
    batch = stack_windows(te.windows[:500])
    same_pred = np.array_equal(model.predict_proba(batch),
                               Model.from_parts(*ckpt.loads(model.to_bytes())).predict_proba(batch))
    cfg = tmp_path / "tiny.json"
    cfg.write_text(json.dumps(TINY))
    runs = []
    for name in ("a", "b"):
        assert dispatch(["reproduce", "--config", str(cfg), "--out-dir", str(tmp_path / name)]) == 0
        runs.append(tmp_path / name)
    files = sorted(p.name for p in runs[0].iterdir() if p.name not in ("manifest.json", "report.json"))
    identical = all((runs[0] / f).read_bytes() == (runs[1] / f).read_bytes() for f in files)
    reports = [json.loads((r / "report.json").read_text()) for r in runs]
    for r in reports:
        r.pop("timings")
        r["explanations"] = {k: v["top5"] for k, v in r["explanations"].items()}
    identical &= reports[0] == reports[1]
    elapsed = time.perf_counter() - t0
    ok = roundtrip and same_pred and identical and elapsed < 120
    verdict("criterion 8", ok, f"checkpoint bit-exact {roundtrip}; reloaded predictions "
                               f"identical {same_pred}; two same-seed pipelines byte-identical "
                               f"over {len(files)} files {identical}; {elapsed:.0f}s")
    assert ok


def test_c9_protocol_fidelity(verdict, desk_run):
    _, report, elapsed = desk_run
    keys = {"n", "repeats", "acc", "auc", "acc_mean", "auc_mean"}
    rows_ok = True
    for block in ("scratch", "pretrained"):
        rows = report[block]["at_n"]
        rows_ok &= [r["n"] for r in rows] == [10, 50, 100, "all"]
        rows_ok &= [r["repeats"] for r in rows] == [5, 5, 5, 1]
        rows_ok &= all(set(r) == keys for r in rows)
    widths = [r["w"] for r in report["sweep"]]
    sweep_ok = widths[0] == 3 and widths[-1] == 41 and widths == sorted(widths)
    ok = rows_ok and sweep_ok and elapsed < 1800
    verdict("criterion 9", ok, f"at_n rows n=10,50,100,all with R=5 {rows_ok}; sweep widths "
                               f"{widths} {sweep_ok}; desk pipeline {elapsed / 60:.1f} min")
    assert ok
