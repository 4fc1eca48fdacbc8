"""Losses, optimizer, per-stream training, transfer loading, evaluation, ablations."""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from .autodiff import ParamSet, ShapeError, Tape, Tensor, backward, const
from .checkpoint import Checkpoint
from .experts import CHANNELS, Expert, StreamConfig, StreamKind, forward, init_params
from .featurize import (
    DataError,
    EncodedInstance,
    Question,
    RawInstance,
    Resources,
    encode_instance,
    group_questions,
    load_word_vectors,
)
from .mixture import MixtureMode, StreamPrediction, combine

log = logging.getLogger(__name__)

P_CLAMP = 1e-7
LOW_MARGIN = 0.1
DEV_METRICS = ("auto", "question", "instance")


@dataclass
class TrainConfig:
    lr: float = 2e-3
    epochs: int = 30
    batch_size: int = 32
    dropout: float | None = None  # None: keep the stream config's rate
    seed: int = 0
    clip_norm: float | None = 10.0
    patience: int = 10
    # "auto": question accuracy when dev comes in choice pairs, else per-instance
    dev_metric: str = "auto"

    def __post_init__(self):
        if self.lr < 0 or self.epochs < 0 or self.batch_size < 1 or self.patience < 1:
            raise ValueError(f"invalid TrainConfig {self}")
        if self.dev_metric not in DEV_METRICS:
            raise ValueError(f"dev_metric must be one of {DEV_METRICS}, not {self.dev_metric!r}")


# ---------------------------------------------------------------------------
# loss and optimizer


def bce_loss(p, y: int, tape: Tape | None = None):
    """Binary cross-entropy of probability ``p`` against label ``y``.

    With a tape and a Tensor ``p`` the loss is recorded and returned as a
    shape-[1] Tensor; with a float ``p`` a float comes back.
    """
    if tape is None:
        p = min(max(float(p), P_CLAMP), 1.0 - P_CLAMP)
        return -(y * math.log(p) + (1 - y) * math.log(1.0 - p))
    p = tape.clip(p, P_CLAMP, 1.0 - P_CLAMP)
    if y == 1:
        return tape.scale(tape.log(p), -1.0)
    return tape.scale(tape.log(tape.sub(const([1.0]), p)), -1.0)


def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    return math.sqrt(math.fsum(float(np.vdot(g, g)) for g in grads.values()))


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: ParamSet) -> "AdamState":
        return cls({k: np.zeros_like(p.data) for k, p in params.items()},
                   {k: np.zeros_like(p.data) for k, p in params.items()})


def adam_step(
    params: ParamSet,
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    lr: float = 2e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    clip_norm: float | None = 10.0,
) -> float:
    """One in-place Adam update after global-norm clipping. Returns the pre-clip norm."""
    grads = {k: (g.data if isinstance(g, Tensor) else np.asarray(g)) for k, g in grads.items()}
    for k, g in grads.items():
        if g.shape != params[k].shape or state.m[k].shape != g.shape:
            raise ShapeError("adam_step", params[k].shape, g.shape, state.m[k].shape)
    norm = global_norm(grads)
    scale = clip_norm / norm if clip_norm is not None and norm > clip_norm else 1.0
    state.t += 1
    bc1 = 1.0 - beta1**state.t
    bc2 = 1.0 - beta2**state.t
    for k, p in params.items():
        g = grads.get(k)
        if g is None:
            continue
        g = g * scale
        m, v = state.m[k], state.v[k]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return norm


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalReport:
    accuracy: float
    per_stream: dict[str, float]
    agreement: float
    low_margin: int
    n_questions: int
    mode: str

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy, "per_stream": self.per_stream, "agreement": self.agreement,
            "low_margin": self.low_margin, "n_questions": self.n_questions, "mode": self.mode,
        }


@dataclass
class QuestionResult:
    qid: str
    label: int
    preds: list[StreamPrediction]
    p1: float
    p2: float
    chosen: int
    weights: tuple[float, ...]


def _check_pairs(questions: Sequence[Question]) -> None:
    for q in questions:
        if len(q.choices) != 2:
            raise DataError(f"question {q.qid}: expected exactly 2 choices, got {len(q.choices)}")


def predict_questions(
    experts: Sequence[Expert], questions: Sequence[Question], mode=MixtureMode.WEIGHTED_SUM, workers: int = 1
) -> list[QuestionResult]:
    _check_pairs(questions)

    def one(q: Question) -> QuestionResult:
        preds = [
            StreamPrediction(e.kind.value, e.prob(e.encode(q.choices[0])), e.prob(e.encode(q.choices[1])))
            for e in experts
        ]
        c = combine(preds, mode)
        return QuestionResult(q.qid, q.label, preds, c.p1, c.p2, c.chosen, c.weights)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(one, questions))
    return [one(q) for q in questions]


def report_from_results(results: Sequence[QuestionResult], mode) -> EvalReport:
    if not results:
        raise DataError("evaluation needs at least one question")
    n = len(results)
    n_streams = len(results[0].preds)
    names = [p.stream for p in results[0].preds]
    per_stream = {}
    for s in range(n_streams):
        key = names[s] if names.count(names[s]) == 1 else f"{names[s]}[{s}]"
        per_stream[key] = sum(r.preds[s].argmax == r.label for r in results) / n
    return EvalReport(
        accuracy=sum(r.chosen == r.label for r in results) / n,
        per_stream=per_stream,
        agreement=sum(len({p.argmax for p in r.preds}) == 1 for r in results) / n,
        low_margin=sum(abs(r.p1 - r.p2) < LOW_MARGIN for r in results),
        n_questions=n,
        mode=MixtureMode(mode).value,
    )


def evaluate(
    experts: Sequence[Expert], questions: Sequence[Question], mode=MixtureMode.WEIGHTED_SUM, workers: int = 1
) -> EvalReport:
    return report_from_results(predict_questions(experts, questions, mode, workers), mode)


def binary_accuracy(kind, params, config, instances: Sequence[EncodedInstance]) -> float:
    hits = sum(
        (forward(kind, inst, params, config, Tape()).item() >= 0.5) == (inst.y == 1) for inst in instances
    )
    return hits / len(instances)


def _dev_accuracy(expert: Expert, dev_questions: list[Question], dev_singles: list[RawInstance]) -> float:
    if dev_questions:
        return evaluate([expert], dev_questions).accuracy
    return binary_accuracy(expert.kind, expert.params, expert.config, [expert.encode(r) for r in dev_singles])


# ---------------------------------------------------------------------------
# transfer


def transfer_load(checkpoint: Checkpoint, resources: Resources, seed: int | None = None) -> ParamSet:
    """Map a checkpoint onto a target vocabulary / tag / relation inventory.

    Non-embedding tensors are copied verbatim. Word rows are matched by token
    string; rows for tokens the checkpoint never saw come from the target's
    word-vector table. Tag and relation tables are copied only when their
    inventories agree.
    """
    cfg = checkpoint.config if seed is None else replace(checkpoint.config, seed=seed)
    if resources.word_vectors is None:
        # only rows for tokens the checkpoint lacks are drawn from this table
        resources = replace(resources, word_vectors=load_word_vectors(None, resources.vocab, cfg.d_word, cfg.seed))
    elif resources.word_vectors.dim != cfg.d_word:
        raise ShapeError("transfer_load", (cfg.d_word,), (resources.word_vectors.dim,),
                         detail="target word vectors must match the checkpoint's d_word")
    fresh = init_params(checkpoint.kind, cfg, resources.word_vectors, resources)
    src = checkpoint.params
    src_res = checkpoint.resources()
    k = StreamKind(checkpoint.kind).value

    out = ParamSet()
    bad = []
    for name, tensor in fresh.items():
        data = tensor.data.copy()
        if name == f"{k}.embed.word":
            src_rows = src[name].data
            for i, tok in enumerate(resources.vocab.itos):
                j = src_res.vocab.stoi.get(tok)
                if j is not None:
                    data[i] = src_rows[j]
        elif name in (f"{k}.embed.pos", f"{k}.embed.ne", f"{k}.embed.rel"):
            same = {
                f"{k}.embed.pos": src_res.pos_vocab.itos == resources.pos_vocab.itos,
                f"{k}.embed.ne": src_res.ne_vocab.itos == resources.ne_vocab.itos,
                f"{k}.embed.rel": src_res.lexicon.relations == resources.lexicon.relations,
            }[name]
            if same and name in src:
                data = src[name].data.copy()
            else:
                log.warning("transfer_load: %s inventory differs from checkpoint; table reinitialized", name)
        elif name not in src or src[name].shape != data.shape:
            bad.append(name)
            continue
        else:
            data = src[name].data.copy()
        out.add(name, data)
    if bad:
        raise ShapeError("transfer_load", detail="layer shape mismatch for: " + ", ".join(bad))
    return out


# ---------------------------------------------------------------------------
# training


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    dev_accuracy: float
    grad_norm: float


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: list[EpochRecord] = field(default_factory=list)

    @property
    def losses(self) -> list[float]:
        return [h.loss for h in self.history]


def train_stream(
    kind,
    train: Sequence[RawInstance],
    dev: Sequence[RawInstance],
    config: TrainConfig,
    resources: Resources,
    stream_config: StreamConfig | None = None,
    init: Checkpoint | None = None,
    source_task: str = "scratch",
) -> TrainResult:
    """Train one stream on its own binary cross-entropy, keeping the best-dev weights.

    ``dev`` instances that come in choice pairs (shared ``qid``) are scored by
    question accuracy and unpaired ones (entailment) by binary accuracy, unless
    ``config.dev_metric`` forces one. Without a dev set the final weights are kept.
    """
    kind = StreamKind(kind)
    if not train:
        raise DataError("train_stream: empty training set")
    if init is not None:
        if StreamKind(init.kind) is not kind:
            raise ValueError(f"checkpoint holds a {init.kind.value} stream, not {kind.value}")
        if stream_config is not None and replace(stream_config, dropout=0.0) != replace(init.config, dropout=0.0):
            raise ValueError("stream config differs from the checkpoint's")
        stream_config = init.config
        params = transfer_load(init, resources)
    else:
        stream_config = stream_config or StreamConfig()
        params = init_params(kind, stream_config, resources.word_vectors, resources)
    if config.dropout is not None:
        stream_config = replace(stream_config, dropout=config.dropout)

    expert = Expert(kind, stream_config, params, resources)
    encoded = [encode_instance(r, resources) for r in train]
    groups = group_questions(dev)
    paired = config.dev_metric != "instance" and all(len(q.choices) == 2 for q in groups)
    if config.dev_metric == "question" and not paired:
        raise DataError("dev_metric 'question' needs dev instances in choice pairs")
    dev_questions = groups if paired else []
    dev_singles = [] if paired else list(dev)

    order_rng = np.random.default_rng(config.seed)
    drop_rng = np.random.default_rng([config.seed, 1])
    state = AdamState.zeros_like(params)

    best_acc = _dev_accuracy(expert, dev_questions, dev_singles) if dev else 0.0
    best_params, best_epoch = params.copy(), 0
    history: list[EpochRecord] = []
    stale = 0
    for epoch in range(1, config.epochs + 1):
        order = order_rng.permutation(len(encoded))
        total, max_norm = 0.0, 0.0
        for start in range(0, len(order), config.batch_size):
            batch = order[start : start + config.batch_size]
            acc = {k: np.zeros_like(p.data) for k, p in params.items()}
            for i in batch:
                inst = encoded[i]
                tape = Tape(training=True, rng=drop_rng)
                loss = bce_loss(forward(kind, inst, params, stream_config, tape), inst.y, tape)
                total += loss.item()
                for k, g in backward(loss, tape, params).items():
                    acc[k] += g.data
            for g in acc.values():
                g /= len(batch)
            max_norm = max(max_norm, adam_step(params, acc, state, lr=config.lr, clip_norm=config.clip_norm))
        dev_acc = _dev_accuracy(expert, dev_questions, dev_singles) if dev else 0.0
        history.append(EpochRecord(epoch, total / len(encoded), dev_acc, max_norm))
        log.debug("%s epoch %d loss %.6f dev %.4f", kind.value, epoch, total / len(encoded), dev_acc)
        if not dev:
            best_params, best_epoch = params.copy(), epoch
        elif dev_acc > best_acc:
            best_acc, best_params, best_epoch, stale = dev_acc, params.copy(), epoch, 0
            if best_acc >= 1.0:
                break  # nothing later can replace this checkpoint
        else:
            stale += 1
            if stale >= config.patience:
                break

    ckpt = Checkpoint(
        kind=kind,
        config=stream_config,
        params=best_params,
        resources_meta=resources.to_meta(),
        epoch=best_epoch,
        best_dev_accuracy=best_acc,
        source_task=source_task,
    )
    return TrainResult(ckpt, history)


def expert_from_checkpoint(ckpt: Checkpoint) -> Expert:
    return Expert(StreamKind(ckpt.kind), ckpt.config, ckpt.params, ckpt.resources())


# ---------------------------------------------------------------------------
# ablation

ABLATION_FLAGS = ("pos", "ne", "handcrafted", "relations", "word_vectors")


@dataclass
class AblationRow:
    name: str
    disabled: str | None
    accuracy: float


def ablation_run(
    kind,
    train: Sequence[RawInstance],
    dev: Sequence[RawInstance],
    resources: Resources,
    stream_config: StreamConfig,
    config: TrainConfig,
    flags: Sequence[str] = ABLATION_FLAGS,
    test: Sequence[RawInstance] | None = None,
) -> list[AblationRow]:
    """Retrain with each channel switched off in turn; report held-out accuracy.

    Accuracy is measured on ``test`` when given, else on ``dev``.
    """
    for f in flags:
        if f not in ABLATION_FLAGS:
            raise ValueError(f"unknown ablation flag {f!r}; choose from {ABLATION_FLAGS}")
    held_out = group_questions(test if test is not None else dev)

    def run(disabled: str | None) -> float:
        res, cfg = resources, stream_config
        if disabled == "word_vectors":
            res = replace(resources, word_vectors=load_word_vectors(None, resources.vocab, cfg.d_word, cfg.seed))
        elif disabled is not None:
            cfg = replace(stream_config, disabled=tuple(stream_config.disabled) + (disabled,))
        result = train_stream(kind, train, dev, config, res, cfg)
        return evaluate([expert_from_checkpoint(result.checkpoint)], held_out).accuracy

    rows = [AblationRow("all channels", None, run(None))]
    for f in flags:
        rows.append(AblationRow(f"w/o {f.replace('_', ' ')}", f, run(f)))
    return rows


def format_table(rows: Sequence[Sequence], header: Sequence[str]) -> str:
    cells = [[str(h) for h in header]] + [[str(c) for c in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"
