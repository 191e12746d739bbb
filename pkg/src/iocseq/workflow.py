"""Reusable training and evaluation steps shared by the CLI and the reproduce pipeline."""

from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import evalkit, explain, forest, pretrain, synthgen
from .models import ARCHS, Model, make_config
from .ndcore import checkpoint as ckpt
from .telemetry import DEFAULT_WINDOW, EventVocabulary, build_vocabulary, stack_windows
from .trainer import LabeledWindows, TrainConfig, labeled_windows, subsample_per_class, train

log = logging.getLogger(__name__)


def load_any(path):
    """A neural Model or a Forest, whichever the checkpoint holds."""
    tensors, meta = ckpt.load(path)
    if meta.get("arch") == "rf":
        return forest.Forest.from_parts(tensors, meta)
    return Model.from_parts(tensors, meta)


def model_width(model) -> int:
    return model.w if isinstance(model, forest.Forest) else model.config.w


def predict_windows(model, windows) -> np.ndarray:
    if isinstance(model, forest.Forest):
        return forest.predict_forest(model, forest.featurize(windows, model.vocab))
    return model.predict_proba(stack_windows(windows))


def pretrain_model(records, vocab: EventVocabulary, arch: str, preset: str = "desk",
                   epochs: int = 5, seed: int = 0, w: int = DEFAULT_WINDOW, stride: int = 1,
                   batch_size: int = 64, require_adjacent: bool = False, **overrides):
    """Build a sigmoid-head model and fit it to next-interval event sets."""
    pairs = pretrain.make_pretrain_pairs(records, vocab, w, stride, require_adjacent)
    cfg = make_config(arch, preset, len(vocab.names), vocab.n_events, head="sigmoid", w=w,
                      **overrides)
    model = Model(cfg, seed=seed, vocab=vocab, task="pretrain")
    history = pretrain.pretrain(model, pairs, epochs=epochs, batch_size=batch_size, seed=seed)
    return model, history, len(pairs)


def new_classifier(arch: str, preset: str, vocab: EventVocabulary, classes, seed: int,
                   w: int = DEFAULT_WINDOW, init: Model | None = None, **overrides) -> Model:
    """Fresh classifier; with ``init`` its embedding and encoder come from that model."""
    if init is not None:
        base = init.config
        cfg = make_config(base.arch, base.preset, base.vocab_size, len(classes), w=w,
                          **{k: v for k, v in json.loads(base.to_json()).items()
                             if k not in ("arch", "preset", "vocab_size", "n_out", "head", "w")})
        model = Model(cfg, seed=seed, vocab=vocab, classes=classes)
        return pretrain.transfer_weights(init, model)
    cfg = make_config(arch, preset, len(vocab.names), len(classes), w=w, **overrides)
    return Model(cfg, seed=seed, vocab=vocab, classes=classes)


def fit_classifier(arch: str, data: LabeledWindows, vocab: EventVocabulary, classes, seed: int = 0,
                   preset: str = "desk", epochs: int = 20, batch_size: int = 32,
                   per_class_n: int | None = None, init: Model | None = None, task: str = "family",
                   forest_config: dict | None = None, workers: int = 1, on_epoch=None, **overrides):
    """Train one model (neural or forest); returns (model, history)."""
    w = data.windows[0].w if len(data) else DEFAULT_WINDOW
    if arch == "rf":
        idx = subsample_per_class(data.labels, per_class_n, seed)
        part = data.subset(idx)
        fcfg = forest.ForestConfig(seed=seed, **(forest_config or {}))
        model = forest.fit_forest(fcfg, forest.featurize(part.windows, vocab), part.targets(classes),
                                  len(classes), workers=workers, classes=classes, vocab=vocab,
                                  task=task, w=w)
        return model, []
    if arch not in ARCHS:
        raise ValueError(f"unknown architecture {arch!r}")
    model = new_classifier(arch, preset, vocab, classes, seed, w, init, **overrides)
    cfg = TrainConfig(task=task, epochs=epochs, batch_size=batch_size, seed=seed,
                      per_class_n=per_class_n, classes=list(classes))
    _, history = train(cfg, model, data, on_epoch=on_epoch)
    return model, history


def evaluate(model, data: LabeledWindows, name: str, task: str, curves_fh=None,
             bootstrap: int = 30, seed: int = 0) -> dict:
    """Summary JSON for ``model`` on ``data``; optionally writes per-class curves as CSV."""
    classes = model.classes
    scored = evalkit.ScoredDataset(data.targets(classes), predict_windows(model, data.windows),
                                   data.keys)
    report = evalkit.summary(task, name, scored, classes)
    if curves_fh is not None:
        cvs = []
        for c in range(len(classes)):
            pos = int((scored.y_true == c).sum())
            if 0 < pos < len(scored.y_true):
                cvs.append(evalkit.curves(scored, c, bootstrap=bootstrap, seed=seed))
        evalkit.write_curves_csv(cvs, curves_fh, classes)
    return report


def at_n_table(arch: str, train_data: LabeledWindows, test_data: LabeledWindows,
               vocab: EventVocabulary, classes, n_values=(10, 50, 100, evalkit.ALL),
               repeats: int = 5, seed: int = 0, epochs: int = 20, preset: str = "desk",
               init: Model | None = None, workers: int = 1, task: str = "family",
               full_model=None, **overrides):
    """acc@n / AUC@n rows; independent runs are spread over ``workers`` threads.

    ``full_model``, if given, must be the model that the all-data run would
    train with ``seed``; its predictions are reused instead of retraining.
    """
    test_y = test_data.targets(classes)
    test_batch = test_data.windows

    def fit_predict(n, run_seed):
        if n is None and full_model is not None and run_seed == seed:
            return predict_windows(full_model, test_batch)
        model, _ = fit_classifier(arch, train_data, vocab, classes, seed=run_seed, preset=preset,
                                  epochs=epochs, per_class_n=n, init=init, task=task, **overrides)
        return predict_windows(model, test_batch)

    if workers <= 1:
        return evalkit.at_n_protocol(fit_predict, test_y, n_values, repeats, seed)
    # precompute every run concurrently, then replay them through the protocol in order
    jobs = []
    for n in n_values:
        full = n == evalkit.ALL or n is None
        for r in range(1 if full else repeats):
            jobs.append((None if full else int(n), seed + r))
    with ThreadPoolExecutor(workers) as pool:
        results = dict(zip(jobs, pool.map(lambda j: fit_predict(*j), jobs)))
    return evalkit.at_n_protocol(lambda n, s: results[(n, s)], test_y, n_values, repeats, seed)


def family_reports(model: Model, windows, classes, skip=(), steps: int = 300,
                   max_instances: int | None = None, seed: int = 0) -> dict:
    """FamilyImportance per class with at least one positive prediction."""
    pred = model.predict_proba(stack_windows(windows)).argmax(axis=1)
    out = {}
    for c, name in enumerate(classes):
        if name in skip or not (pred == c).any():
            continue
        out[name] = explain.family_importance(model, windows, c, steps=steps,
                                              max_instances=max_instances, seed=seed)
    return out


# -- reproduce pipeline --------------------------------------------------------------

DESK_PIPELINE = {
    "seed": 0,
    "scenario": {"train_seed": 7, "test_seed": 8},
    "task": "family",
    "arch": "transformer",
    "preset": "desk",
    "pretrain_epochs": 5,
    "epochs": 20,
    "at_n": {"n_values": [10, 50, 100, "all"], "repeats": 5},
    "sweep": {"widths": [3, 11, 19, 27, 35, 41], "epochs": 10},
    "ig_steps": 300,
    "max_instances": None,
    "benign_class": "benign",
}


def merge_config(base: dict, override: dict) -> dict:
    out = dict(base)
    for k, v in override.items():
        out[k] = merge_config(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def scenario_logs(cfg: dict):
    sc = dict(cfg.get("scenario", {}))
    train_seed = sc.pop("train_seed", 7)
    test_seed = sc.pop("test_seed", 8)
    return (synthgen.generate(synthgen.default_scenario(seed=train_seed, **sc)),
            synthgen.generate(synthgen.default_scenario(seed=test_seed, **sc)))


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage


def pipeline_reproduce(cfg: dict, out_dir, workers: int = 1, progress=None) -> dict:
    """gen, pretrain, scratch and pretrained training, evaluation, significance, explanations.

    Writes artifacts into ``out_dir`` and returns the comparison report
    (also written as report.json).
    """
    from pathlib import Path

    from .telemetry import write_log

    cfg = merge_config(DESK_PIPELINE, cfg)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    say = progress or (lambda msg: log.info(msg))
    timings, artifacts = {}, []
    state = {}

    def stage(name):
        def wrap(fn):
            t0 = time.perf_counter()
            say(f"[{name}] start")
            try:
                state[name] = fn()
            except Exception as exc:
                raise StageError(name, exc) from exc
            timings[name] = round(time.perf_counter() - t0, 2)
            say(f"[{name}] done in {timings[name]:.1f}s")
            return fn
        return wrap

    seed, task, arch, preset = cfg["seed"], cfg["task"], cfg["arch"], cfg["preset"]

    @stage("gen")
    def _():
        train_recs, test_recs = scenario_logs(cfg)
        for name, recs in (("train.jsonl", train_recs), ("test.jsonl", test_recs)):
            with open(out / name, "w", encoding="utf-8") as fh:
                write_log(recs, fh)
            artifacts.append(str(out / name))
        vocab = build_vocabulary(train_recs)
        vocab.save(out / "vocab.txt")
        artifacts.append(str(out / "vocab.txt"))
        tr = labeled_windows(train_recs, vocab, task)
        te = labeled_windows(test_recs, vocab, task)
        return train_recs, vocab, tr, te

    train_recs, vocab, tr, te = state["gen"]
    classes = tr.classes()

    @stage("pretrain")
    def _():
        model, history, n_pairs = pretrain_model(train_recs, vocab, arch, preset,
                                                 cfg["pretrain_epochs"], seed)
        model.save(out / "pretrained.ckpt")
        artifacts.append(str(out / "pretrained.ckpt"))
        return model, history, n_pairs

    pre_model, pre_history, n_pairs = state["pretrain"]
    an = cfg["at_n"]
    n_values = [evalkit.ALL if v in ("all", None) else int(v) for v in an["n_values"]]

    blocks = {}
    for variant, init in (("scratch", None), ("pretrained", pre_model)):
        @stage(f"train_{variant}")
        def _(init=init, variant=variant):
            model, history = fit_classifier(arch, tr, vocab, classes, seed=seed, preset=preset,
                                            epochs=cfg["epochs"], init=init, task=task)
            model.save(out / f"{variant}.ckpt")
            artifacts.append(str(out / f"{variant}.ckpt"))
            return model, history

        @stage(f"at_n_{variant}")
        def _(init=init, variant=variant):
            return at_n_table(arch, tr, te, vocab, classes, n_values, an["repeats"], seed,
                              cfg["epochs"], preset, init=init, workers=workers, task=task,
                              full_model=state[f"train_{variant}"][0])

        @stage(f"eval_{variant}")
        def _(variant=variant):
            model = state[f"train_{variant}"][0]
            with open(out / f"curves_{variant}.csv", "w", encoding="utf-8") as fh:
                rep = evaluate(model, te, f"{arch}-{variant}", task, fh, seed=seed)
            artifacts.append(str(out / f"curves_{variant}.csv"))
            return rep

        blocks[variant] = {**state[f"eval_{variant}"], "at_n": state[f"at_n_{variant}"],
                           "history": state[f"train_{variant}"][1]}

    @stage("significance")
    def _():
        sig = {}
        rows_s = {r["n"]: r for r in blocks["scratch"]["at_n"]}
        rows_p = {r["n"]: r for r in blocks["pretrained"]["at_n"]}
        for n in rows_s:
            if rows_s[n]["repeats"] < 2:
                continue
            for metric in ("acc", "auc"):
                t, p, s = evalkit.paired_significance(rows_p[n][metric], rows_s[n][metric])
                sig[f"{metric}@{n}"] = {"t": t, "p": p, "significant": s,
                                        "pretrained_mean": rows_p[n][f"{metric}_mean"],
                                        "scratch_mean": rows_s[n][f"{metric}_mean"]}
        # per-class AUC of the two full-data models on the identical test split
        a = blocks["pretrained"]["per_class_auc"]
        b = blocks["scratch"]["per_class_auc"]
        common = sorted(set(a) & set(b))
        if len(common) >= 2:
            t, p, s = evalkit.paired_significance([a[c] for c in common], [b[c] for c in common])
            sig["per_class_auc"] = {"t": t, "p": p, "significant": s}
        return sig

    sweep_cfg = cfg.get("sweep")
    if sweep_cfg:
        @stage("sweep")
        def _():
            from .trainer import window_width_sweep
            tc = TrainConfig(task=task, epochs=sweep_cfg.get("epochs", cfg["epochs"]), seed=seed,
                             classes=classes)
            return window_width_sweep(train_recs, vocab, tc, arch, preset, sweep_cfg["widths"])

    @stage("explain_family")
    def _():
        model = state["train_pretrained"][0]
        fams = family_reports(model, te.windows, classes, skip={cfg.get("benign_class")},
                              steps=cfg["ig_steps"], max_instances=cfg.get("max_instances"),
                              seed=seed)
        files = {}
        for name, fam in fams.items():
            path = out / f"family_{_slug(name)}.json"
            with open(path, "w", encoding="utf-8") as fh:
                fh.write(explain.dumps_json(fam.to_json()))
            artifacts.append(str(path))
            files[name] = {"file": str(path), "top5": [r[0] for r in fam.top(5)]}
        return files

    report = {
        "config": cfg,
        "classes": classes,
        "n_train": len(tr),
        "n_test": len(te),
        "pretrain": {"pairs": n_pairs, "history": pre_history},
        "scratch": blocks["scratch"],
        "pretrained": blocks["pretrained"],
        "significance": state["significance"],
        "sweep": state.get("sweep"),
        "explanations": state["explain_family"],
        "timings": timings,
    }
    with open(out / "report.json", "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")
    artifacts.append(str(out / "report.json"))
    report["artifacts"] = artifacts
    return report


def _slug(name: str) -> str:
    return "".join(ch if ch.isalnum() else "_" for ch in name).strip("_").lower()


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")
