"""The three expert streams: PQCN (full three-way attention), QCN and PCN.

Parameter names follow ``<stream>.<block>.<tensor>``, e.g.
``qcn.choice_bilstm.fwd.w_i`` or ``pqcn.embed.word``; checkpoints and
transfer loading rely on these names staying stable.
"""
from __future__ import annotations

import enum
from dataclasses import asdict, dataclass, field

import numpy as np

from . import layers
from .autodiff import ParamSet, ShapeError, Tape, Tensor, const
from .featurize import (
    N_HANDCRAFTED,
    EncodedInstance,
    RawInstance,
    Resources,
    SeqChannels,
    WordVectorTable,
    encode_instance,
)

CHANNELS = ("pos", "ne", "relations", "handcrafted")


class StreamKind(str, enum.Enum):
    PQCN = "pqcn"
    QCN = "qcn"
    PCN = "pcn"

    def uses(self, seq: str) -> bool:
        if seq == "passage":
            return self is not StreamKind.QCN
        if seq == "question":
            return self is not StreamKind.PCN
        return True


@dataclass
class StreamConfig:
    d_word: int = 100
    d_pos: int = 10
    d_ne: int = 12
    d_rel: int = 10
    d_h: int = 96
    d_att: int | None = None
    dropout: float = 0.4
    seed: int = 0
    # channels switched off for ablations; see CHANNELS
    disabled: tuple[str, ...] = field(default_factory=tuple)

    def __post_init__(self):
        self.disabled = tuple(sorted(set(self.disabled)))
        unknown = set(self.disabled) - set(CHANNELS)
        if unknown:
            raise ValueError(f"unknown channel(s) {sorted(unknown)}; choose from {CHANNELS}")

    @property
    def att_dim(self) -> int:
        return self.d_att or self.d_word

    @property
    def d_token(self) -> int:
        d = self.d_word + self.d_pos + self.d_ne + self.d_rel
        return d if "handcrafted" in self.disabled else d + N_HANDCRAFTED

    def to_dict(self) -> dict:
        d = asdict(self)
        d["disabled"] = list(self.disabled)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "StreamConfig":
        d = dict(d)
        d["disabled"] = tuple(d.get("disabled", ()))
        return cls(**d)


# Which derived columns would let an ignored sequence leak into a stream.
# Relation ids of the choice are computed against the passage, those of the
# passage against question+choice; handcrafted column 1/2 flag membership in
# the first/second companion sequence (see featurize.encode_instance).
_LEAKS = {
    StreamKind.PQCN: {},
    StreamKind.QCN: {"choice": ("rel", 1), "question": (None, 1)},
    StreamKind.PCN: {"passage": ("rel", 1), "choice": (None, 2)},
}


def _attn_blocks(kind: StreamKind) -> list[str]:
    return {
        StreamKind.PQCN: ["passage_question_attn", "choice_passage_attn", "choice_question_attn"],
        StreamKind.QCN: ["choice_question_attn"],
        StreamKind.PCN: ["choice_passage_attn"],
    }[kind]


def _bilstm_inputs(kind: StreamKind, cfg: StreamConfig) -> dict[str, int]:
    d, w = cfg.d_token, cfg.d_word
    dims = {
        "passage": d + (w if kind is StreamKind.PQCN else 0),
        "question": d,
        "choice": d + w * (2 if kind is StreamKind.PQCN else 1),
    }
    return {s: n for s, n in dims.items() if kind.uses(s)}


def init_params(
    kind: StreamKind, config: StreamConfig, word_vectors: WordVectorTable, resources: Resources
) -> ParamSet:
    kind = StreamKind(kind)
    if word_vectors.dim != config.d_word:
        raise ShapeError("init_params", word_vectors.matrix.shape, (len(resources.vocab), config.d_word))
    rng = np.random.default_rng(config.seed)
    k = kind.value
    params = ParamSet()
    params.add(f"{k}.embed.word", word_vectors.matrix.copy())
    if "pos" not in config.disabled:
        params.add(f"{k}.embed.pos", rng.uniform(-0.1, 0.1, (len(resources.pos_vocab), config.d_pos)))
    if "ne" not in config.disabled:
        params.add(f"{k}.embed.ne", rng.uniform(-0.1, 0.1, (len(resources.ne_vocab), config.d_ne)))
    if "relations" not in config.disabled:
        params.add(f"{k}.embed.rel", rng.uniform(-0.1, 0.1, (len(resources.lexicon.relations), config.d_rel)))
    for block in _attn_blocks(kind):
        layers.init_seq_attention(params, f"{k}.{block}", config.d_word, config.att_dim, rng)
    for seq, d_in in _bilstm_inputs(kind, config).items():
        layers.init_bilstm(params, f"{k}.{seq}_bilstm", d_in, config.d_h, rng)
    for seq in _bilstm_inputs(kind, config):
        layers.init_self_attention(params, f"{k}.{seq}_selfattn", 2 * config.d_h, rng)
    for other in ("passage", "question"):
        if kind.uses(other):
            layers.init_bilinear(params, f"{k}.choice_{other}_bilinear", 2 * config.d_h, 2 * config.d_h, rng)
    return params


def _embed(tape: Tape, kind: StreamKind, seq_name: str, seq: SeqChannels, params: ParamSet, cfg: StreamConfig):
    """Return (dropped word embeddings, full token features) for one sequence."""
    k = kind.value
    n = len(seq)
    drop_rel, drop_col = _LEAKS[kind].get(seq_name, (None, None))
    word = tape.dropout(tape.gather_rows(params[f"{k}.embed.word"], seq.ids), cfg.dropout)

    tags = []
    for channel, table, ids, dim in (
        ("pos", "pos", seq.pos, cfg.d_pos),
        ("ne", "ne", seq.ne, cfg.d_ne),
        ("relations", "rel", seq.rel, cfg.d_rel),
    ):
        if channel in cfg.disabled or (table == drop_rel):
            tags.append(const(np.zeros((n, dim))))
        else:
            tags.append(tape.gather_rows(params[f"{k}.embed.{table}"], ids))
    parts = [word, tape.dropout(tape.concat(tags), cfg.dropout)]
    if "handcrafted" not in cfg.disabled:
        feats = seq.feats.copy()
        if drop_col is not None:
            feats[:, drop_col] = 0.0
        parts.append(const(feats))
    return word, tape.concat(parts)


def _encode_seq(tape, kind, seq_name, x, params, cfg):
    h = layers.bilstm(tape, x, params, f"{kind.value}.{seq_name}_bilstm")
    h = tape.dropout(h, cfg.dropout)
    return layers.self_attention(tape, h, params[f"{kind.value}.{seq_name}_selfattn.w"])


def _forward_logit(kind: StreamKind, inst: EncodedInstance, params: ParamSet, cfg: StreamConfig, tape: Tape) -> Tensor:
    k = kind.value
    emb = {s: _embed(tape, kind, s, inst.seq(s), params, cfg) for s in ("passage", "question", "choice") if kind.uses(s)}
    proj = lambda block: params[f"{k}.{block}.proj"]

    inputs = {s: [emb[s][1]] for s in emb}
    if kind is StreamKind.PQCN:
        inputs["passage"].append(layers.seq_attention(tape, emb["passage"][0], emb["question"][0], proj("passage_question_attn")))
    if kind.uses("passage"):
        inputs["choice"].append(layers.seq_attention(tape, emb["choice"][0], emb["passage"][0], proj("choice_passage_attn")))
    if kind.uses("question"):
        inputs["choice"].append(layers.seq_attention(tape, emb["choice"][0], emb["question"][0], proj("choice_question_attn")))

    summary = {s: _encode_seq(tape, kind, s, tape.concat(parts), params, cfg) for s, parts in inputs.items()}
    logit = None
    for other in ("passage", "question"):
        if kind.uses(other):
            term = layers.bilinear_logit(tape, summary["choice"], summary[other], params[f"{k}.choice_{other}_bilinear.w"])
            logit = term if logit is None else tape.add(logit, term)
    return logit


def forward(kind, inst: EncodedInstance, params: ParamSet, config: StreamConfig, tape: Tape) -> Tensor:
    """Probability that ``inst``'s choice is correct, as a shape-[1] tensor."""
    return tape.sigmoid(_forward_logit(StreamKind(kind), inst, params, config, tape))


def forward_pqcn(inst, params, config, tape):
    return forward(StreamKind.PQCN, inst, params, config, tape)


def forward_qcn(inst, params, config, tape):
    return forward(StreamKind.QCN, inst, params, config, tape)


def forward_pcn(inst, params, config, tape):
    return forward(StreamKind.PCN, inst, params, config, tape)


@dataclass
class Expert:
    """A trained stream bundled with the resources it encodes text with."""

    kind: StreamKind
    config: StreamConfig
    params: ParamSet
    resources: Resources
    _cache: dict = field(default_factory=dict, repr=False)

    def encode(self, raw: RawInstance) -> EncodedInstance:
        hit = self._cache.get(raw.id)
        if hit is None or hit[0] != raw:
            hit = (raw, encode_instance(raw, self.resources))
            self._cache[raw.id] = hit
        return hit[1]

    def prob(self, inst: EncodedInstance) -> float:
        return forward(self.kind, inst, self.params, self.config, Tape(training=False)).item()
