"""Text records -> index sequences and per-token feature channels."""
from __future__ import annotations

import json
import logging
import math
import string
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

log = logging.getLogger(__name__)

PAD, UNK = "<pad>", "<unk>"
NO_RELATION = "none"
UNK_TAG = "<unk>"
# stands in for a field an auxiliary task does not have (e.g. the passage of an
# entailment pair); contains no punctuation so it survives tokenization intact
EMPTY_SENTINEL = "xxempty"
SEQUENCES = ("passage", "question", "choice")
N_HANDCRAFTED = 3

# apostrophes are word characters so clitics like "'s" stay whole
_SPLIT_PUNCT = frozenset(string.punctuation) - {"'"}


class DataError(ValueError):
    """Malformed input data; message carries file/line or instance context."""


def tokenize(text: str, lower: bool = True) -> list[str]:
    tokens: list[str] = []
    for chunk in text.split():
        head: list[str] = []
        tail: list[str] = []
        start, end = 0, len(chunk)
        while start < end and chunk[start] in _SPLIT_PUNCT:
            head.append(chunk[start])
            start += 1
        while end > start and chunk[end - 1] in _SPLIT_PUNCT:
            tail.append(chunk[end - 1])
            end -= 1
        tokens.extend(head)
        if start < end:
            tokens.append(chunk[start:end])
        tokens.extend(reversed(tail))
    return [t.lower() for t in tokens] if lower else tokens


class Vocab:
    def __init__(self, tokens: Sequence[str] = ()):
        self.itos: list[str] = [PAD, UNK]
        self.stoi: dict[str, int] = {PAD: 0, UNK: 1}
        for tok in tokens:
            if tok not in self.stoi:
                self.stoi[tok] = len(self.itos)
                self.itos.append(tok)
        self.frozen = True

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def encode(self, token: str) -> int:
        return self.stoi.get(token.lower(), 1)

    def decode(self, index: int) -> str:
        return self.itos[index]

    def tokens(self) -> list[str]:
        """Real tokens, i.e. everything after PAD and UNK."""
        return self.itos[2:]


def build_vocab(corpora: Iterable[Iterable[str]], min_count: int = 1) -> Vocab:
    if min_count < 1:
        raise ValueError("min_count must be >= 1")
    counts: Counter[str] = Counter()
    for stream in corpora:
        counts.update(stream)
    kept = [t for t, c in counts.items() if c >= min_count and t not in (PAD, UNK)]
    kept.sort(key=lambda t: (-counts[t], t))
    return Vocab(kept)


class TagVocab:
    """Tag string -> id for one channel (POS or NE); id 0 is the unknown tag."""

    def __init__(self, tags: Iterable[str] = ()):
        self.itos = [UNK_TAG] + sorted(set(tags) - {UNK_TAG})
        self.stoi = {t: i for i, t in enumerate(self.itos)}

    def __len__(self) -> int:
        return len(self.itos)

    def encode(self, tag: str | None) -> int:
        return 0 if tag is None else self.stoi.get(tag, 0)


class RelationLexicon:
    def __init__(self, triples: Iterable[tuple[str, str, str]] = ()):
        self.pairs: dict[tuple[str, str], str] = {}
        for head, tail, rel in triples:
            self.pairs.setdefault((head.lower(), tail.lower()), rel)
        self.relations = [NO_RELATION] + sorted(set(self.pairs.values()) - {NO_RELATION})
        self.rel_ids = {r: i for i, r in enumerate(self.relations)}

    def __len__(self) -> int:
        return len(self.pairs)

    def triples(self) -> list[list[str]]:
        return [[h, t, r] for (h, t), r in sorted(self.pairs.items())]

    @classmethod
    def load(cls, path: str | Path) -> "RelationLexicon":
        triples = []
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.rstrip("\n")
                if not line.strip():
                    continue
                parts = line.split("\t")
                if len(parts) != 3 or not all(p.strip() for p in parts):
                    raise DataError(f"{path}:{lineno}: expected head<TAB>tail<TAB>relation")
                triples.append(tuple(p.strip() for p in parts))
        return cls(triples)


def lookup_relations(seq_a: Sequence[str], seq_b: Sequence[str], lex: RelationLexicon) -> list[int]:
    out = []
    for w in seq_a:
        rel_id = 0
        for v in seq_b:
            rel = lex.pairs.get((w, v)) or lex.pairs.get((v, w))
            if rel is not None:
                rel_id = lex.rel_ids[rel]
                break
        out.append(rel_id)
    return out


def handcrafted_features(
    seq: Sequence[str], other_seqs: Sequence[Sequence[str]], corpus_freq: Mapping[str, int]
) -> np.ndarray:
    """Columns: log(1 + corpus count), in-first-other flag, in-second-other flag."""
    feats = np.zeros((len(seq), N_HANDCRAFTED))
    others = [set(o) for o in other_seqs[:2]]
    for i, tok in enumerate(seq):
        feats[i, 0] = math.log1p(corpus_freq.get(tok, 0))
        for j, other in enumerate(others):
            feats[i, 1 + j] = float(tok in other)
    return feats


@dataclass
class WordVectorTable:
    matrix: np.ndarray
    pretrained: np.ndarray

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]


def random_word_vectors(n_rows: int, d_word: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    mat = rng.uniform(-0.1, 0.1, size=(n_rows, d_word))
    mat[0] = 0.0
    return mat


def load_word_vectors(path: str | Path | None, vocab: Vocab, d_word: int, seed: int) -> WordVectorTable:
    mat = random_word_vectors(len(vocab), d_word, seed)
    flags = np.zeros(len(vocab), dtype=bool)
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                parts = line.rstrip("\n").split(" ")
                if not line.strip():
                    continue
                token, nums = parts[0], parts[1:]
                if len(nums) != d_word:
                    raise DataError(
                        f"{path}:{lineno}: vector dimension {len(nums)} does not match d_word={d_word}"
                    )
                try:
                    vec = np.array([float(x) for x in nums])
                except ValueError:
                    raise DataError(f"{path}:{lineno}: malformed number in word vector line") from None
                idx = vocab.stoi.get(token.lower())
                if idx is not None and idx > 1 and not flags[idx]:
                    mat[idx] = vec
                    flags[idx] = True
    mat[0] = 0.0
    return WordVectorTable(mat, flags)


def vector_file_dim(path: str | Path) -> int | None:
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                return len(line.split()) - 1
    return None


# ---------------------------------------------------------------------------
# instances


@dataclass(frozen=True)
class RawInstance:
    id: str
    passage: str
    question: str
    choice: str
    y: int
    qid: str = ""
    choice_index: int = 0
    # {"pos"|"ner": {"passage"|"question"|"choice": [tags]}}; tags align with tokenizer output
    tags: Mapping | None = field(default=None, compare=False, hash=False)

    def __post_init__(self):
        if self.y not in (0, 1):
            raise DataError(f"instance {self.id}: label must be 0 or 1, got {self.y!r}")


@dataclass
class SeqChannels:
    tokens: list[str]
    ids: np.ndarray
    pos: np.ndarray
    ne: np.ndarray
    rel: np.ndarray
    feats: np.ndarray

    def __len__(self) -> int:
        return len(self.tokens)


@dataclass
class EncodedInstance:
    id: str
    qid: str
    choice_index: int
    y: int
    passage: SeqChannels
    question: SeqChannels
    choice: SeqChannels

    def seq(self, name: str) -> SeqChannels:
        return getattr(self, name)


@dataclass
class Resources:
    """Frozen lookup tables shared by every instance of one stream."""

    vocab: Vocab
    pos_vocab: TagVocab
    ne_vocab: TagVocab
    lexicon: RelationLexicon
    corpus_freq: dict[str, int]
    word_vectors: WordVectorTable | None = None

    def to_meta(self) -> dict:
        return {
            "vocab": self.vocab.tokens(),
            "pos_tags": self.pos_vocab.itos[1:],
            "ne_tags": self.ne_vocab.itos[1:],
            "lexicon": self.lexicon.triples(),
            "corpus_freq": dict(sorted(self.corpus_freq.items())),
        }

    @classmethod
    def from_meta(cls, meta: Mapping) -> "Resources":
        return cls(
            vocab=Vocab(meta["vocab"]),
            pos_vocab=TagVocab(meta["pos_tags"]),
            ne_vocab=TagVocab(meta["ne_tags"]),
            lexicon=RelationLexicon(tuple(t) for t in meta["lexicon"]),
            corpus_freq=dict(meta["corpus_freq"]),
        )


def _tags_for(raw: RawInstance, channel: str, seq: str) -> Sequence[str] | None:
    if not raw.tags:
        return None
    return raw.tags.get(channel, {}).get(seq)


def encode_instance(raw: RawInstance, resources: Resources) -> EncodedInstance:
    toks = {s: tokenize(getattr(raw, s)) for s in SEQUENCES}
    for s, t in toks.items():
        if not t:
            raise DataError(f"instance {raw.id}: empty {s} after tokenization")
    p, q, a = toks["passage"], toks["question"], toks["choice"]
    lex = resources.lexicon
    rel = {
        "passage": lookup_relations(p, q + a, lex),
        "question": lookup_relations(q, a, lex),
        "choice": lookup_relations(a, p, lex),
    }
    others = {"passage": (q, a), "question": (p, a), "choice": (p, q)}

    chans = {}
    for s in SEQUENCES:
        n = len(toks[s])
        pos_tags = _tags_for(raw, "pos", s)
        ne_tags = _tags_for(raw, "ner", s)
        for name, tags in (("pos", pos_tags), ("ner", ne_tags)):
            if tags is not None and len(tags) != n:
                raise DataError(f"instance {raw.id}: {name} tags for {s} have length {len(tags)}, expected {n}")
        chans[s] = SeqChannels(
            tokens=toks[s],
            ids=np.array([resources.vocab.encode(t) for t in toks[s]], dtype=np.int64),
            pos=np.array([resources.pos_vocab.encode(t) for t in (pos_tags or [None] * n)], dtype=np.int64),
            ne=np.array([resources.ne_vocab.encode(t) for t in (ne_tags or [None] * n)], dtype=np.int64),
            rel=np.array(rel[s], dtype=np.int64),
            feats=handcrafted_features(toks[s], others[s], resources.corpus_freq),
        )
    return EncodedInstance(raw.id, raw.qid, raw.choice_index, raw.y, **chans)


# ---------------------------------------------------------------------------
# files


@dataclass
class Question:
    qid: str
    choices: list[RawInstance]
    label: int


def _record_tags(rec: Mapping, key: str, k: int) -> dict | None:
    tags = rec.get(key)
    if tags is None:
        return None
    out = {"passage": tags.get("passage"), "question": tags.get("question")}
    choices = tags.get("choices")
    out["choice"] = choices[k] if choices is not None else None
    return out


def record_to_question(rec: Mapping, where: str = "record") -> Question:
    try:
        qid = str(rec["id"])
        passage, question, choices, label = rec["passage"], rec["question"], rec["choices"], rec["label"]
    except KeyError as e:
        raise DataError(f"{where}: missing field {e.args[0]!r}") from None
    if not isinstance(choices, list) or len(choices) != 2:
        raise DataError(f"{where}: 'choices' must be an array of exactly 2 strings")
    if label not in (0, 1):
        raise DataError(f"{where}: 'label' must be 0 or 1")
    raws = []
    for k, choice in enumerate(choices):
        tags = {}
        for key in ("pos", "ner"):
            t = _record_tags(rec, key, k)
            if t is not None:
                tags[key] = t
        raws.append(
            RawInstance(
                id=f"{qid}#{k}", passage=passage, question=question, choice=choice,
                y=int(k == label), qid=qid, choice_index=k, tags=tags or None,
            )
        )
    return Question(qid, raws, label)


def read_jsonl(path: str | Path) -> list[tuple[int, dict]]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rows.append((lineno, json.loads(line)))
            except json.JSONDecodeError as e:
                raise DataError(f"{path}:{lineno}: invalid JSON ({e.msg})") from None
    return rows


def read_questions(path: str | Path) -> list[Question]:
    return [record_to_question(rec, f"{path}:{lineno}") for lineno, rec in read_jsonl(path)]


def flatten(questions: Iterable[Question]) -> list[RawInstance]:
    return [r for q in questions for r in q.choices]


def group_questions(raws: Iterable[RawInstance]) -> list[Question]:
    """Regroup instances by ``qid`` in first-seen order."""
    groups: dict[str, list[RawInstance]] = {}
    for r in raws:
        groups.setdefault(r.qid or r.id, []).append(r)
    out = []
    for qid, members in groups.items():
        members = sorted(members, key=lambda r: r.choice_index)
        gold = [r.choice_index for r in members if r.y == 1]
        out.append(Question(qid, members, gold[0] if gold else -1))
    return out


def build_resources(
    train: Sequence[RawInstance],
    extra: Sequence[RawInstance] = (),
    lexicon: RelationLexicon | None = None,
    vectors_path: str | Path | None = None,
    d_word: int = 100,
    seed: int = 0,
    min_count: int = 1,
    known_tokens: Iterable[str] = (),
) -> Resources:
    """Vocab covers train and ``extra`` (dev/test) text; corpus counts use train only.

    ``known_tokens`` (e.g. a checkpoint's vocabulary when fine-tuning) are
    appended regardless of ``min_count`` so their trained rows stay reachable.
    """
    def streams(raws):
        for r in raws:
            for s in SEQUENCES:
                yield tokenize(getattr(r, s))

    # each passage/question repeats once per choice; count them once
    seen: set[tuple[str, str]] = set()
    freq: Counter[str] = Counter()
    for r in train:
        for s in SEQUENCES:
            text = getattr(r, s)
            key = (s, text) if s != "choice" else (s, r.id)
            if key in seen:
                continue
            seen.add(key)
            freq.update(tokenize(text))

    vocab = build_vocab(list(streams(train)) + list(streams(extra)), min_count)
    missing = [t for t in dict.fromkeys(known_tokens) if t not in vocab and t not in (PAD, UNK)]
    if missing:
        vocab = Vocab(vocab.tokens() + missing)
    pos, ne = set(), set()
    for r in train:
        for channel, bucket in (("pos", pos), ("ner", ne)):
            for s in SEQUENCES:
                bucket.update(_tags_for(r, channel, s) or ())
    res = Resources(vocab, TagVocab(pos), TagVocab(ne), lexicon or RelationLexicon(), dict(freq))
    res.word_vectors = load_word_vectors(vectors_path, vocab, d_word, seed)
    return res
