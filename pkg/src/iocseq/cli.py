"""Command-line entry point: one binary, one subcommand per pipeline step."""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
import traceback
from importlib import resources
from pathlib import Path

from . import __version__, evalkit, explain, forest, synthgen, workflow
from .models import ARCHS, PRESETS
from .telemetry import DEFAULT_WINDOW, TASKS, EventVocabulary, build_vocabulary, read_log, write_log
from .trainer import GridSpec, TrainConfig, grid_search, labeled_windows, sweep_widths, \
    window_width_sweep, write_history

log = logging.getLogger("iocseq")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def shipped(name: str) -> Path:
    """Path of a config file bundled with the package."""
    return Path(str(resources.files("iocseq") / "data" / name))


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# -- run manifest ---------------------------------------------------------------

class RunManifest:
    """What a command ran with and what it produced; written even on failure."""

    def __init__(self, command: str, config: dict, seed: int):
        self.command = command
        self.config = config
        self.seed = seed
        self.inputs: dict[str, str] = {}
        self.artifacts: list[str] = []
        self.error: str | None = None
        self._t0 = time.perf_counter()
        self.started = time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())

    def add_input(self, path) -> None:
        if path is not None and Path(path).is_file():
            self.inputs[str(path)] = sha256_file(path)

    def add_artifact(self, path) -> None:
        if str(path) not in self.artifacts:
            self.artifacts.append(str(path))

    def to_json(self) -> dict:
        return {
            "command": self.command,
            "config": self.config,
            "seed": self.seed,
            "inputs": self.inputs,
            "artifacts": self.artifacts,
            "started": self.started,
            "wall_clock_s": round(time.perf_counter() - self._t0, 3),
            "version": __version__,
            "error": self.error,
        }

    def write(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, indent=2, sort_keys=True, default=str)
            fh.write("\n")


# -- argument parsing -------------------------------------------------------------

# flags each subcommand cannot run without (checked after --config is merged in)
REQUIRED = {
    "gen": ("out",),
    "vocab": ("data", "out"),
    "pretrain": ("data", "out"),
    "train": ("data", "out"),
    "grid": ("data", "out"),
    "eval": ("model", "data", "out"),
    "at-n": ("data", "test", "out"),
    "explain": ("model", "data", "select", "out"),
    "explain-family": ("model", "data", "class_name", "out"),
    "sweep": ("data", "out"),
    "reproduce": ("out_dir",),
}

# inputs hashed into the manifest
INPUT_FLAGS = ("scenario", "data", "test", "vocab", "model", "init", "config")


def _common(p):
    p.add_argument("--config", help="JSON file of flag defaults; explicit flags win")
    p.add_argument("--seed", type=int, help="base seed (default: $IOCSEQ_SEED, then 0)")
    p.add_argument("--workers", type=int, help="worker threads (default: processor count)")
    p.add_argument("--manifest", help="run manifest path (default: <out>.manifest.json)")
    p.add_argument("-v", "--verbose", action="store_true")


def _model_flags(p, rf=False):
    p.add_argument("--arch", choices=ARCHS + (("rf",) if rf else ()), default="transformer")
    p.add_argument("--preset", choices=tuple(PRESETS), default="desk")
    p.add_argument("--window", type=int, default=DEFAULT_WINDOW, help="window width w")
    p.add_argument("--stride", type=int, default=1)


def _data_flags(p):
    p.add_argument("--data", help="telemetry log (JSON lines)")
    p.add_argument("--vocab", help="vocabulary file (default: built from --data)")
    p.add_argument("--task", choices=TASKS, default="family")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="iocseq", description=__doc__)
    parser.add_argument("--version", action="version", version=f"iocseq {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, required=True)

    p = sub.add_parser("gen", help="generate a synthetic telemetry log")
    p.add_argument("--scenario", help="scenario JSON (default: the shipped four-family scenario)")
    p.add_argument("--out")
    _common(p)

    p = sub.add_parser("vocab", help="build the event vocabulary of a log")
    p.add_argument("--data")
    p.add_argument("--out")
    _common(p)

    p = sub.add_parser("pretrain", help="next-interval event-set pre-training")
    _data_flags(p)
    _model_flags(p)
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--require-adjacent", action="store_true",
                   help="only use successors exactly one bucket later")
    p.add_argument("--history", help="write the per-epoch log as JSON lines")
    p.add_argument("--out")
    _common(p)

    p = sub.add_parser("train", help="train a classifier")
    _data_flags(p)
    _model_flags(p, rf=True)
    p.add_argument("--init", help="pre-trained checkpoint for the embedding and encoder")
    p.add_argument("--per-class-n", type=int)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--n-trees", type=int, default=100)
    p.add_argument("--max-depth", type=int)
    p.add_argument("--history", help="write the per-epoch log as JSON lines")
    p.add_argument("--out")
    _common(p)

    p = sub.add_parser("grid", help="k-fold grid search over hyperparameters")
    _data_flags(p)
    _model_flags(p, rf=True)
    p.add_argument("--grid", choices=("desk", "full"), default="desk",
                   help="desk: a small grid; full: the wide ranges used with the paper-size preset")
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--out")
    _common(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a log")
    p.add_argument("--model")
    p.add_argument("--data")
    p.add_argument("--task", choices=TASKS, help="default: the task the model was trained for")
    p.add_argument("--stride", type=int, default=1)
    p.add_argument("--curves", help="write per-class ROC/PR curves as CSV")
    p.add_argument("--bootstrap", type=int, default=30)
    p.add_argument("--out")
    _common(p)

    p = sub.add_parser("at-n", help="few-shot table: accuracy and macro AUC per n")
    _data_flags(p)
    _model_flags(p, rf=True)
    p.add_argument("--test", help="test log")
    p.add_argument("--init", help="pre-trained checkpoint for the embedding and encoder")
    p.add_argument("--n-values", default="10,50,100,all")
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--out")
    _common(p)

    p = sub.add_parser("explain", help="integrated-gradients report for one window")
    p.add_argument("--model")
    p.add_argument("--data")
    p.add_argument("--select", help="org,user,ts of the window's final interval")
    p.add_argument("--target-class", help="class name or index (default: the prediction)")
    p.add_argument("--steps", type=int, default=300)
    p.add_argument("--text", help="also write the rendered table here")
    p.add_argument("--out")
    _common(p)

    p = sub.add_parser("explain-family", help="event importance over a predicted class")
    p.add_argument("--model")
    p.add_argument("--data")
    p.add_argument("--class", dest="class_name")
    p.add_argument("--steps", type=int, default=300)
    p.add_argument("--max-instances", type=int)
    p.add_argument("--text", help="also write the rendered table here")
    p.add_argument("--out")
    _common(p)

    p = sub.add_parser("sweep", help="validation accuracy per window width")
    _data_flags(p)
    p.add_argument("--arch", choices=ARCHS, default="transformer")
    p.add_argument("--preset", choices=tuple(PRESETS), default="desk")
    p.add_argument("--widths", help="comma-separated widths (default: 3..41 at --width-step)")
    p.add_argument("--width-step", type=int, default=2)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--out")
    _common(p)

    p = sub.add_parser("reproduce", help="pre-train, fine-tune, evaluate and explain end to end")
    p.add_argument("--out-dir")
    _common(p)
    return parser


def _flag(dest: str) -> str:
    return "--class" if dest == "class_name" else "--" + dest.replace("_", "-")


def parse(argv) -> tuple[argparse.Namespace, dict]:
    """Parse argv with ``--config`` values as defaults under the explicit flags."""
    parser = build_parser()
    args = parser.parse_args(argv)
    file_cfg = {}
    if args.config is not None and args.command != "reproduce":
        try:
            with open(args.config, encoding="utf-8") as fh:
                file_cfg = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"--config {args.config}: {exc}") from exc
        if not isinstance(file_cfg, dict):
            raise UsageError(f"--config {args.config}: expected a JSON object")
        sub = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest for a in sub._actions}
        cfg = {k.replace("-", "_"): v for k, v in file_cfg.items()}
        unknown = sorted(set(cfg) - known)
        if unknown:
            raise UsageError(f"--config {args.config}: unknown key {_flag(unknown[0])!r}")
        sub.set_defaults(**cfg)
        args = parser.parse_args(argv)
    args.seed_flag = args.seed
    if args.seed is None:
        env = os.environ.get("IOCSEQ_SEED")
        try:
            args.seed = int(env) if env not in (None, "") else 0
        except ValueError:
            raise UsageError(f"IOCSEQ_SEED={env!r} is not an integer") from None
    if args.workers is None:
        args.workers = os.cpu_count() or 1
    if args.workers < 1:
        raise UsageError("--workers must be >= 1")
    missing = [d for d in REQUIRED[args.command] if getattr(args, d, None) is None]
    if missing:
        raise UsageError(f"iocseq {args.command}: the following arguments are required: "
                         + ", ".join(_flag(d) for d in missing))
    return args, file_cfg


# -- helpers ------------------------------------------------------------------------

def _vocab(args, records) -> EventVocabulary:
    return EventVocabulary.load(args.vocab) if args.vocab else build_vocabulary(records)


def _write_json(path, payload, manifest: RunManifest) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True, default=workflow._json_default)
        fh.write("\n")
    manifest.add_artifact(path)


def _history_writer(path):
    """(on_epoch callback, close) writing one JSON line per epoch."""
    if path is None:
        return None, lambda: None
    fh = open(path, "w", encoding="utf-8")

    def on_epoch(entry):
        write_history([entry], fh)
        fh.flush()
    return on_epoch, fh.close


def _class_index(model, name_or_index: str) -> int:
    if model.classes and name_or_index in model.classes:
        return model.classes.index(name_or_index)
    try:
        idx = int(name_or_index)
    except ValueError:
        raise ValueError(f"unknown class {name_or_index!r}; model classes: {model.classes}") from None
    n = len(model.classes) if model.classes else model.config.n_out
    if not 0 <= idx < n:
        raise ValueError(f"class index {idx} out of range [0, {n})")
    return idx


def _model_windows(model, records, task, stride=1):
    if model.vocab is None:
        raise ValueError("checkpoint carries no vocabulary")
    return labeled_windows(records, model.vocab, task, workflow.model_width(model), stride)


# -- subcommands --------------------------------------------------------------------

def cmd_gen(args, m: RunManifest):
    cfg = synthgen.ScenarioConfig.load(args.scenario or shipped("scenario.json"))
    records = synthgen.generate(cfg.with_seed(args.seed))
    with open(args.out, "w", encoding="utf-8") as fh:
        write_log(records, fh)
    m.add_artifact(args.out)
    log.info("wrote %d intervals to %s", len(records), args.out)


def cmd_vocab(args, m):
    vocab = build_vocabulary(read_log(args.data))
    vocab.save(args.out)
    m.add_artifact(args.out)
    log.info("%d events (+2 reserved), hash %s", vocab.n_events, vocab.hash())


def cmd_pretrain(args, m):
    records = read_log(args.data)
    vocab = _vocab(args, records)
    on_epoch, close = _history_writer(args.history)
    try:
        from . import pretrain as pt
        from .models import Model, make_config
        pairs = pt.make_pretrain_pairs(records, vocab, args.window, args.stride,
                                       args.require_adjacent)
        cfg = make_config(args.arch, args.preset, len(vocab.names), vocab.n_events,
                          head="sigmoid", w=args.window)
        model = Model(cfg, seed=args.seed, vocab=vocab, task="pretrain")
        pt.pretrain(model, pairs, args.epochs, args.batch_size, args.seed, on_epoch=on_epoch)
    finally:
        close()
    model.save(args.out)
    m.add_artifact(args.out)
    if args.history:
        m.add_artifact(args.history)


def cmd_train(args, m):
    records = read_log(args.data)
    init = None
    if args.init:
        if args.arch == "rf":
            raise ValueError("--init applies to neural models only")
        init = workflow.load_any(args.init)
    vocab = init.vocab if init is not None and not args.vocab else _vocab(args, records)
    data = labeled_windows(records, vocab, args.task, args.window, args.stride)
    classes = data.classes()
    on_epoch, close = _history_writer(args.history)
    try:
        model, _ = workflow.fit_classifier(
            args.arch, data, vocab, classes, seed=args.seed, preset=args.preset,
            epochs=args.epochs, batch_size=args.batch_size, per_class_n=args.per_class_n,
            init=init, task=args.task, workers=args.workers, on_epoch=on_epoch,
            forest_config={"n_trees": args.n_trees, "max_depth": args.max_depth})
    finally:
        close()
    model.save(args.out)
    m.add_artifact(args.out)
    if args.history:
        m.add_artifact(args.history)


def cmd_grid(args, m):
    records = read_log(args.data)
    vocab = _vocab(args, records)
    data = labeled_windows(records, vocab, args.task, args.window, args.stride)
    grid = GridSpec.full(args.arch, args.preset) if args.grid == "full" else GridSpec.desk(args.arch)
    cfg = TrainConfig(task=args.task, epochs=args.epochs, seed=args.seed, classes=data.classes())
    best, rows = grid_search(grid, data, vocab, cfg, folds=args.folds,
                             on_point=lambda i, r: log.info("point %d %s: %.4f", i, r["point"],
                                                            r["mean_acc"]))
    _write_json(args.out, {"grid": grid.to_json(), "folds": args.folds, "best": best,
                           "rows": rows}, m)


def cmd_eval(args, m):
    model = workflow.load_any(args.model)
    task = args.task or model.task or "family"
    data = _model_windows(model, read_log(args.data), task, args.stride)
    name = f"{'rf' if isinstance(model, forest.Forest) else model.config.arch}"
    fh = open(args.curves, "w", encoding="utf-8") if args.curves else None
    try:
        report = workflow.evaluate(model, data, name, task, fh, args.bootstrap, args.seed)
    finally:
        if fh is not None:
            fh.close()
    if args.curves:
        m.add_artifact(args.curves)
    _write_json(args.out, report, m)


def cmd_at_n(args, m):
    train_recs = read_log(args.data)
    init = workflow.load_any(args.init) if args.init else None
    vocab = init.vocab if init is not None and not args.vocab else _vocab(args, train_recs)
    tr = labeled_windows(train_recs, vocab, args.task, args.window, args.stride)
    te = labeled_windows(read_log(args.test), vocab, args.task, args.window, args.stride)
    try:
        n_values = [evalkit.ALL if v.strip() == "all" else int(v) for v in args.n_values.split(",")]
    except ValueError:
        raise UsageError(f"--n-values {args.n_values!r}: expected integers or 'all'") from None
    classes = tr.classes()
    rows = workflow.at_n_table(args.arch, tr, te, vocab, classes, n_values, args.repeats,
                               args.seed, args.epochs, args.preset, init=init,
                               workers=args.workers, task=args.task)
    _write_json(args.out, {"task": args.task, "model": args.arch,
                           "pretrained": args.init is not None, "classes": classes,
                           "at_n": rows}, m)


def cmd_explain(args, m):
    model = workflow.load_any(args.model)
    parts = args.select.split(",")
    if len(parts) != 3:
        raise UsageError(f"--select {args.select!r}: expected org,user,ts")
    try:
        key = (parts[0], parts[1], int(parts[2]))
    except ValueError:
        raise UsageError(f"--select {args.select!r}: ts must be an integer") from None
    from .telemetry import windowize
    if getattr(model, "vocab", None) is None:
        raise ValueError("checkpoint carries no vocabulary")
    windows = [w for w in windowize(read_log(args.data), model.vocab, workflow.model_width(model))
               if w.key == key]
    if not windows:
        raise ValueError(f"no interval {key} in {args.data}")
    target = None if args.target_class is None else _class_index(model, args.target_class)
    report = explain.integrated_gradients(model, windows[0], target, args.steps)
    text, payload = explain.render_report(report)
    _write_json(args.out, payload, m)
    if args.text:
        Path(args.text).write_text(text, encoding="utf-8")
        m.add_artifact(args.text)
    sys.stdout.write(text)


def cmd_explain_family(args, m):
    model = workflow.load_any(args.model)
    from .telemetry import windowize
    if getattr(model, "vocab", None) is None:
        raise ValueError("checkpoint carries no vocabulary")
    windows = windowize(read_log(args.data), model.vocab, workflow.model_width(model))
    fam = explain.family_importance(model, windows, _class_index(model, args.class_name),
                                    args.steps, args.max_instances, args.seed)
    text, payload = explain.render_report(fam)
    _write_json(args.out, payload, m)
    if args.text:
        Path(args.text).write_text(text, encoding="utf-8")
        m.add_artifact(args.text)
    sys.stdout.write(text)


def cmd_sweep(args, m):
    records = read_log(args.data)
    vocab = _vocab(args, records)
    if args.widths:
        try:
            widths = [int(v) for v in args.widths.split(",")]
        except ValueError:
            raise UsageError(f"--widths {args.widths!r}: expected comma-separated integers") from None
    else:
        widths = sweep_widths(args.width_step)
    cfg = TrainConfig(task=args.task, epochs=args.epochs, seed=args.seed)
    rows = window_width_sweep(records, vocab, cfg, args.arch, args.preset, widths,
                              on_row=lambda r: log.info("w=%d accuracy %.4f", r["w"], r["accuracy"]))
    _write_json(args.out, {"arch": args.arch, "preset": args.preset, "rows": rows}, m)


def cmd_reproduce(args, m):
    path = args.config or shipped("desk.json")
    try:
        with open(path, encoding="utf-8") as fh:
            cfg = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"--config {path}: {exc}") from exc
    # an explicit --seed beats the file; the file beats $IOCSEQ_SEED
    cfg["seed"] = args.seed_flag if args.seed_flag is not None else cfg.get("seed", args.seed)
    m.config = workflow.merge_config(workflow.DESK_PIPELINE, cfg)
    m.seed = m.config["seed"]
    m.add_input(path)
    try:
        report = workflow.pipeline_reproduce(cfg, args.out_dir, workers=args.workers,
                                             progress=log.info)
    except workflow.StageError:
        out = Path(args.out_dir)
        for p in sorted(out.glob("*")):
            if p.is_file() and p.name != "manifest.json":
                m.add_artifact(p)
        raise
    for p in report["artifacts"]:
        m.add_artifact(p)


COMMANDS = {
    "gen": cmd_gen, "vocab": cmd_vocab, "pretrain": cmd_pretrain, "train": cmd_train,
    "grid": cmd_grid, "eval": cmd_eval, "at-n": cmd_at_n, "explain": cmd_explain,
    "explain-family": cmd_explain_family, "sweep": cmd_sweep, "reproduce": cmd_reproduce,
}


def _manifest_path(args) -> Path | None:
    if args.manifest:
        return Path(args.manifest)
    if args.command == "reproduce":
        return Path(args.out_dir) / "manifest.json"
    return Path(str(args.out) + ".manifest.json") if getattr(args, "out", None) else None


def dispatch(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args, file_cfg = parse(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    resolved = {k: v for k, v in vars(args).items() if k not in ("config", "manifest", "verbose", "seed_flag")}
    manifest = RunManifest(args.command, resolved, args.seed)
    for flag in INPUT_FLAGS:
        manifest.add_input(getattr(args, flag, None))
    code = EXIT_OK
    try:
        COMMANDS[args.command](args, manifest)
    except UsageError as exc:
        manifest.error = str(exc)
        print(f"error: {exc}", file=sys.stderr)
        code = EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - every runtime failure maps to exit 2
        manifest.error = f"{type(exc).__name__}: {exc}"
        print(f"error: {manifest.error}", file=sys.stderr)
        if args.verbose:
            traceback.print_exc()
        code = EXIT_RUNTIME
    path = _manifest_path(args)
    if path is not None:
        try:
            manifest.write(path)
        except OSError as exc:
            print(f"error: could not write manifest {path}: {exc}", file=sys.stderr)
            code = code or EXIT_RUNTIME
    return code


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
