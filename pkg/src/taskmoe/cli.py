"""Batch command-line entry point.

Every verb accepts ``--config file.json`` whose keys are option names
(``lr``, ``d_h``, ...); explicit flags override the file, which overrides the
built-in defaults. The resolved configuration is logged to stderr before the
run. Exit status: 0 success, 1 usage, 2 data error, 3 check failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any

from . import synth
from .adapters import load_entailment, load_storycloze
from .checkpoint import Checkpoint, CheckpointError
from .checks import run_suite
from .experts import CHANNELS, StreamConfig, StreamKind
from .featurize import (
    DataError,
    RelationLexicon,
    build_resources,
    flatten,
    read_questions,
    vector_file_dim,
)
from .mixture import MixtureMode, StreamPrediction, combine
from .training import (
    ABLATION_FLAGS,
    TrainConfig,
    ablation_run,
    expert_from_checkpoint,
    format_table,
    predict_questions,
    report_from_results,
    train_stream,
)

log = logging.getLogger("taskmoe")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_CHECK = 0, 1, 2, 3
VERBS = ("train", "pretrain", "eval", "predict", "gradcheck", "ablate", "synth")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


@dataclass
class Command:
    verb: str
    options: dict[str, Any]

    def __getattr__(self, name):
        try:
            return self.options[name]
        except KeyError:
            raise AttributeError(name) from None


# option name -> (add_argument kwargs, default)
_MODEL_OPTS = {
    "seed": (dict(type=int), None),
    "vectors": (dict(), None),
    "relations": (dict(), None),
    "d_word": (dict(type=int), None),
    "d_h": (dict(type=int), 96),
    "d_att": (dict(type=int), None),
    "dropout": (dict(type=float), 0.4),
    "lr": (dict(type=float), 2e-3),
    "epochs": (dict(type=int), 30),
    "batch_size": (dict(type=int), 32),
    "patience": (dict(type=int), 10),
    "clip_norm": (dict(type=float), 10.0),
    "min_count": (dict(type=int), 1),
    "dev_metric": (dict(choices=["auto", "question", "instance"]), "auto"),
    "disable": (dict(action="append", choices=CHANNELS), []),
}

_VERB_OPTS = {
    "train": {
        "data": (dict(), None), "dev": (dict(), None), "stream": (dict(choices=[k.value for k in StreamKind]), "pqcn"),
        "out": (dict(), None), "init_from": (dict(), None), "history": (dict(), None), **_MODEL_OPTS,
    },
    "pretrain": {
        "task": (dict(choices=["entailment", "story"]), None), "data": (dict(), None), "dev": (dict(), None),
        "out": (dict(), None), "history": (dict(), None), **_MODEL_OPTS,
    },
    "eval": {
        "ckpt": (dict(action="append"), []), "data": (dict(), None), "out": (dict(), None),
        "workers": (dict(type=int), 1),
    },
    "predict": {
        "ckpt": (dict(action="append"), []), "data": (dict(), None), "out": (dict(), None),
        "mode": (dict(choices=[m.value for m in MixtureMode]), "weighted"),
        "stub": (dict(action="append", metavar="STREAM=P1,P2",
                      help="debug: replace model streams by fixed choice probabilities"), []),
        "workers": (dict(type=int), 1),
    },
    "gradcheck": {
        "seed": (dict(type=int), 1), "tol": (dict(type=float), 1e-3), "step": (dict(type=float), 1e-5),
        "max_components": (dict(type=int), None), "out": (dict(), None),
    },
    "ablate": {
        "data": (dict(), None), "dev": (dict(), None), "test": (dict(), None),
        "stream": (dict(choices=[k.value for k in StreamKind]), "pqcn"),
        "flags": (dict(nargs="+", choices=ABLATION_FLAGS), list(ABLATION_FLAGS)), "out": (dict(), None),
        **_MODEL_OPTS,
    },
    "synth": {
        "kind": (dict(choices=synth.KINDS + ("all",)), "all"), "out": (dict(), None), "seed": (dict(type=int), 0),
        "signal": (dict(choices=["both", "qc", "pc"]), "both"), "questions": (dict(type=int), None),
        "dim": (dict(type=int), 100),
    },
}

_REQUIRED = {
    "train": ("data", "dev", "out", "seed"),
    "pretrain": ("task", "data", "dev", "out", "seed"),
    "eval": ("data",),
    "predict": (),
    "gradcheck": (),
    "ablate": ("data", "dev", "seed"),
    "synth": ("out",),
}


def _build_parser() -> _Parser:
    parser = _Parser(prog="taskmoe", description="Task-aware mixture of reading-comprehension experts.")
    parser.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)
    sub = parser.add_subparsers(dest="verb", parser_class=_Parser)
    for verb, opts in _VERB_OPTS.items():
        sp = sub.add_parser(verb)
        sp.add_argument("--config", default=argparse.SUPPRESS)
        sp.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)
        for name, (kwargs, _default) in opts.items():
            sp.add_argument("--" + name.replace("_", "-"), dest=name, default=argparse.SUPPRESS, **kwargs)
    return parser


def parse_args(argv: list[str]) -> Command:
    ns = vars(_build_parser().parse_args(argv))
    verb = ns.pop("verb", None)
    if verb is None:
        raise UsageError(f"taskmoe: a verb is required, one of {', '.join(VERBS)}")
    opts = _VERB_OPTS[verb]
    resolved = {name: default for name, (_kw, default) in opts.items()}
    resolved["verbose"] = False

    config_path = ns.pop("config", None)
    if config_path is not None:
        try:
            cfg = json.loads(Path(config_path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as e:
            raise UsageError(f"cannot read config {config_path}: {e}") from None
        if not isinstance(cfg, dict):
            raise UsageError(f"config {config_path} must hold a JSON object")
        unknown = sorted(set(cfg) - set(resolved))
        if unknown:
            raise UsageError(f"unknown option(s) in {config_path} for '{verb}': {', '.join(unknown)}")
        resolved.update(cfg)
    resolved.update(ns)

    missing = [n for n in _REQUIRED[verb] if resolved.get(n) is None]
    if missing:
        raise UsageError(f"taskmoe {verb}: missing required option(s): " + ", ".join("--" + m.replace("_", "-") for m in missing))
    return Command(verb, resolved)


# ---------------------------------------------------------------------------
# helpers


def _configs(cmd: Command) -> tuple[StreamConfig, TrainConfig]:
    d_word = cmd.d_word
    if d_word is None:
        d_word = (vector_file_dim(cmd.vectors) if cmd.vectors else None) or 100
    stream = StreamConfig(d_word=d_word, d_h=cmd.d_h, d_att=cmd.d_att, dropout=cmd.dropout, seed=cmd.seed,
                          disabled=tuple(cmd.disable or ()))
    train = TrainConfig(lr=cmd.lr, epochs=cmd.epochs, batch_size=cmd.batch_size, seed=cmd.seed,
                        clip_norm=cmd.clip_norm, patience=cmd.patience, dev_metric=cmd.dev_metric)
    return stream, train


def _lexicon(cmd: Command) -> RelationLexicon:
    return RelationLexicon.load(cmd.relations) if cmd.relations else RelationLexicon()


def _write(path, text: str) -> None:
    if path:
        Path(path).write_text(text, encoding="utf-8")


def _jsonl(rows) -> str:
    return "".join(json.dumps(r, sort_keys=True) + "\n" for r in rows)


def _write_history(path, result) -> None:
    _write(path, _jsonl({"epoch": h.epoch, "loss": h.loss, "dev_accuracy": h.dev_accuracy} for h in result.history))


# ---------------------------------------------------------------------------
# verbs


def _run_train(cmd: Command) -> int:
    train_q, dev_q = read_questions(cmd.data), read_questions(cmd.dev)
    train, dev = flatten(train_q), flatten(dev_q)
    stream_cfg, train_cfg = _configs(cmd)
    init = None
    if cmd.init_from:
        init = Checkpoint.load(cmd.init_from)
        if init.kind.value != cmd.stream:
            raise DataError(f"{cmd.init_from}: holds a {init.kind.value} stream, not {cmd.stream}")
        stream_cfg = init.config
    known = init.resources().vocab.tokens() if init else ()
    resources = build_resources(train, dev, _lexicon(cmd), cmd.vectors, stream_cfg.d_word, cmd.seed, cmd.min_count,
                                known_tokens=known)
    result = train_stream(cmd.stream, train, dev, train_cfg, resources, stream_cfg, init=init,
                          source_task=init.source_task if init else "scratch")
    result.checkpoint.save(cmd.out)
    _write_history(cmd.history, result)
    print(f"{cmd.stream}: best dev accuracy {result.checkpoint.best_dev_accuracy:.4f} "
          f"at epoch {result.checkpoint.epoch} -> {cmd.out}")
    return EXIT_OK


def _run_pretrain(cmd: Command) -> int:
    if cmd.task == "entailment":
        kind, source, loader = StreamKind.QCN, "entailment", load_entailment
    else:
        kind, source, loader = StreamKind.PCN, "story-cloze", load_storycloze
    train, dev = loader(cmd.data), loader(cmd.dev)
    stream_cfg, train_cfg = _configs(cmd)
    resources = build_resources(train, dev, _lexicon(cmd), cmd.vectors, stream_cfg.d_word, cmd.seed, cmd.min_count)
    result = train_stream(kind, train, dev, train_cfg, resources, stream_cfg, source_task=source)
    result.checkpoint.save(cmd.out)
    _write_history(cmd.history, result)
    print(f"{kind.value} pre-trained on {source}: best dev accuracy "
          f"{result.checkpoint.best_dev_accuracy:.4f} -> {cmd.out}")
    return EXIT_OK


def _load_experts(paths):
    if not paths:
        raise UsageError("at least one --ckpt is required")
    return [expert_from_checkpoint(Checkpoint.load(p)) for p in paths]


def _run_eval(cmd: Command) -> int:
    experts = _load_experts(cmd.ckpt)
    questions = read_questions(cmd.data)
    rows, table = [], []
    for mode in MixtureMode:
        results = predict_questions(experts, questions, mode, cmd.workers)
        rep = report_from_results(results, mode)
        rows.append({"row": "mixture", **rep.to_dict()})
        table.append([f"mixture ({mode.value})", f"{rep.accuracy:.4f}", f"{rep.agreement:.4f}", rep.low_margin])
    for stream, acc in rep.per_stream.items():
        rows.append({"row": "stream", "stream": stream, "accuracy": acc, "n_questions": rep.n_questions})
        table.append([stream, f"{acc:.4f}", "", ""])
    _write(cmd.out, _jsonl(rows))
    sys.stdout.write(format_table(table, ["model", "accuracy", "agreement", "low-margin"]))
    return EXIT_OK


def _parse_stub(text: str) -> StreamPrediction:
    try:
        name, probs = text.split("=", 1)
        p1, p2 = (float(x) for x in probs.split(","))
        return StreamPrediction(name.strip(), p1, p2)
    except ValueError:
        raise UsageError(f"--stub expects STREAM=P1,P2 with probabilities in [0, 1], got {text!r}") from None


def _run_predict(cmd: Command) -> int:
    mode = MixtureMode(cmd.mode)
    out_rows = []
    if cmd.stub:
        stubs = [_parse_stub(s) for s in cmd.stub]
        qids = [q.qid for q in read_questions(cmd.data)] if cmd.data else ["stub"]
        for qid in qids:
            c = combine(stubs, mode)
            out_rows.append(_prediction_row(qid, None, stubs, c.p1, c.p2, c.chosen, c.weights))
    else:
        if not cmd.data:
            raise UsageError("predict needs --data unless --stub is given")
        experts = _load_experts(cmd.ckpt)
        for r in predict_questions(experts, read_questions(cmd.data), mode, cmd.workers):
            out_rows.append(_prediction_row(r.qid, r.label, r.preds, r.p1, r.p2, r.chosen, r.weights))
    text = _jsonl(out_rows)
    _write(cmd.out, text)
    if not cmd.out:
        sys.stdout.write(text)
    table = [[r["id"], f"choice {r['chosen'] + 1}", f"{r['p1']:.4f}", f"{r['p2']:.4f}",
              " ".join(f"{s['stream']}={s['weight']:.4g}" for s in r["streams"])] for r in out_rows]
    sys.stderr.write(format_table(table, ["id", "answer", "P1", "P2", "weights"]))
    return EXIT_OK


def _prediction_row(qid, label, preds, p1, p2, chosen, weights) -> dict:
    return {
        "id": qid, "label": label, "chosen": chosen, "p1": p1, "p2": p2,
        "streams": [{"stream": p.stream, "p1": p.p1, "p2": p.p2, "weight": w} for p, w in zip(preds, weights)],
    }


def _run_gradcheck(cmd: Command) -> int:
    results = run_suite(cmd.seed, cmd.step, cmd.max_components)
    rows = [{"case": k, "max_rel_error": v, "pass": v < cmd.tol} for k, v in results.items()]
    _write(cmd.out, _jsonl(rows))
    sys.stdout.write(format_table([[r["case"], f"{r['max_rel_error']:.3e}", "ok" if r["pass"] else "FAIL"] for r in rows],
                                  ["case", "max rel. error", f"< {cmd.tol:g}"]))
    worst = max(results.values())
    print(f"max relative error {worst:.3e}")
    return EXIT_OK if worst < cmd.tol else EXIT_CHECK


def _run_ablate(cmd: Command) -> int:
    train, dev = flatten(read_questions(cmd.data)), flatten(read_questions(cmd.dev))
    test = flatten(read_questions(cmd.test)) if cmd.test else None
    stream_cfg, train_cfg = _configs(cmd)
    resources = build_resources(train, dev + (test or []), _lexicon(cmd), cmd.vectors, stream_cfg.d_word,
                                cmd.seed, cmd.min_count)
    rows = ablation_run(cmd.stream, train, dev, resources, stream_cfg, train_cfg, cmd.flags, test)
    _write(cmd.out, _jsonl({"configuration": r.name, "disabled": r.disabled, "accuracy": r.accuracy} for r in rows))
    sys.stdout.write(format_table([[r.name, f"{r.accuracy:.4f}"] for r in rows], ["configuration", "accuracy"]))
    return EXIT_OK


def _run_synth(cmd: Command) -> int:
    kinds = synth.KINDS if cmd.kind == "all" else (cmd.kind,)
    for kind in kinds:
        sizes = {}
        if kind == "mrc":
            sizes["signal"] = cmd.signal
            if cmd.questions is not None:
                sizes["n_train"] = sizes["n_dev"] = cmd.questions
        elif kind == "vectors":
            sizes["dim"] = cmd.dim
        out_dir = Path(cmd.out) / kind if len(kinds) > 1 else Path(cmd.out)
        for path in synth.write_corpus(synth.generate(kind, cmd.seed, **sizes), out_dir):
            print(path)
    return EXIT_OK


_RUNNERS = {
    "train": _run_train, "pretrain": _run_pretrain, "eval": _run_eval, "predict": _run_predict,
    "gradcheck": _run_gradcheck, "ablate": _run_ablate, "synth": _run_synth,
}


def run(cmd: Command) -> int:
    log.info("resolved %s config: %s", cmd.verb, json.dumps(cmd.options, sort_keys=True, default=str))
    return _RUNNERS[cmd.verb](cmd)


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    try:
        cmd = parse_args(argv)
    except UsageError as e:
        print(str(e), file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if cmd.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return run(cmd)
    except UsageError as e:
        print(str(e), file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError, OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
