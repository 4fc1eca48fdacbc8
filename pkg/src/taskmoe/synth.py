"""Seeded synthetic corpora with planted signals.

Real comprehension / entailment / story corpora cannot be bundled, so these
generators build small datasets where the correct choice is marked by one
known cue. Held-out splits use words never seen in training, so a model can
only generalize through the channel that carries the cue:

``mrc``        correct choice is repeated in the passage (passage-choice cue)
               and/or is the lexicon partner of a question word (question-choice cue).
``relation``   correct choice is the lexicon partner of a passage word; nothing else differs.
``vectors``    correct choice belongs to a category visible only in the word-vector file.
``transfer``   entailment pairs teach a hidden word pairing; the small MRC split
               asks about the same pairing (question-choice cue, no lexicon).
``story``      the correct ending repeats the story's key noun.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

_ONSETS = "b d f g k l m n p r s t v z".split()
_VOWELS = "a e i o u".split()
RELATIONS = ("AtLocation", "Causes", "UsedFor")
KINDS = ("mrc", "relation", "vectors", "transfer", "story")


def make_words(rng: np.random.Generator, n: int, taken: set[str] | None = None) -> list[str]:
    taken = set() if taken is None else taken
    words = []
    while len(words) < n:
        n_syl = int(rng.integers(2, 4))
        w = "".join(str(rng.choice(_ONSETS)) + str(rng.choice(_VOWELS)) for _ in range(n_syl))
        if w not in taken:
            taken.add(w)
            words.append(w)
    return words


def _question(qid, passage, question, correct, wrong, rng):
    label = int(rng.integers(2))
    choices = [wrong, wrong]
    choices[label] = correct
    choices[1 - label] = wrong
    return {"id": qid, "passage": passage, "question": question, "choices": choices, "label": label}


def _filler_passage(rng, fillers, n, planted=()):
    words = [str(w) for w in rng.choice(fillers, size=n)]
    for w in planted:
        words.insert(int(rng.integers(len(words) + 1)), w)
    return " ".join(words) + " ."


def gen_mrc(seed: int, n_train: int = 16, n_dev: int = 16, signal: str = "both") -> dict:
    """Train and dev splits share the word pools; used for capacity checks."""
    if signal not in ("both", "qc", "pc"):
        raise ValueError(f"signal must be both, qc or pc, not {signal!r}")
    rng = np.random.default_rng(seed)
    taken: set[str] = set()
    fillers = make_words(rng, 30, taken)
    answers = make_words(rng, 40, taken)
    cues = make_words(rng, 20, taken)
    partner = {c: answers[i] for i, c in enumerate(cues)}
    lexicon = [(c, partner[c], RELATIONS[i % len(RELATIONS)]) for i, c in enumerate(cues)]

    def split(name, n):
        rows = []
        for i in range(n):
            cue = str(rng.choice(cues))
            correct = partner[cue]
            wrong = str(rng.choice([a for a in answers if a != correct]))
            if signal in ("both", "pc"):
                passage = _filler_passage(rng, fillers, 8, planted=[correct, correct])
            else:
                passage = _filler_passage(rng, fillers, 8)
            if signal in ("both", "qc"):
                question = f"what goes with the {cue} ?"
            else:
                question = f"what about the {str(rng.choice(fillers))} ?"
            rows.append(_question(f"mrc-{name}-{i}", passage, question, correct, wrong, rng))
        return rows

    out = {"train.jsonl": split("train", n_train), "dev.jsonl": split("dev", n_dev)}
    if signal in ("both", "qc"):
        out["relations.tsv"] = lexicon
    else:
        out["relations.tsv"] = []
    return out


def gen_relation(seed: int, n_train: int = 48, n_dev: int = 24, n_test: int = 40) -> dict:
    rng = np.random.default_rng(seed)
    taken: set[str] = set()
    fillers = make_words(rng, 30, taken)
    n_pairs = n_train + n_dev + n_test
    heads = make_words(rng, n_pairs, taken)
    tails = make_words(rng, n_pairs, taken)
    lexicon = [(h, t, RELATIONS[i % len(RELATIONS)]) for i, (h, t) in enumerate(zip(heads, tails))]

    def split(name, lo, hi):
        rows = []
        for i in range(lo, hi):
            j = int(rng.choice([k for k in range(lo, hi) if k != i]))
            passage = _filler_passage(rng, fillers, 8, planted=[heads[i]])
            rows.append(_question(f"rel-{name}-{i - lo}", passage, "which one fits the story ?", tails[i], tails[j], rng))
        return rows

    return {
        "train.jsonl": split("train", 0, n_train),
        "dev.jsonl": split("dev", n_train, n_train + n_dev),
        "test.jsonl": split("test", n_train + n_dev, n_pairs),
        "relations.tsv": lexicon,
    }


def gen_vectors(seed: int, n_train: int = 48, n_dev: int = 24, n_test: int = 40, dim: int = 100) -> dict:
    rng = np.random.default_rng(seed)
    taken: set[str] = set()
    fillers = make_words(rng, 30, taken)
    n_words = n_train + n_dev + n_test
    good = make_words(rng, n_words, taken)
    bad = make_words(rng, n_words, taken)

    vectors = []
    for words, sign in ((good, 1.0), (bad, -1.0)):
        for w in words:
            v = rng.normal(0.0, 0.1, dim)
            v[0] = sign
            vectors.append((w, v))
    for w in fillers + ["which", "one", "is", "good", "?", "."]:
        vectors.append((w, rng.normal(0.0, 0.1, dim)))

    def split(name, lo, hi):
        return [
            _question(f"vec-{name}-{i - lo}", _filler_passage(rng, fillers, 8), "which one is good ?", good[i], bad[i], rng)
            for i in range(lo, hi)
        ]

    return {
        "train.jsonl": split("train", 0, n_train),
        "dev.jsonl": split("dev", n_train, n_train + n_dev),
        "test.jsonl": split("test", n_train + n_dev, n_words),
        "vectors.txt": vectors,
    }


def gen_transfer(
    seed: int, n_pairs: int = 24, n_entail: int = 480, n_mrc_train: int = 6, n_mrc_dev: int = 9
) -> dict:
    """Entailment files plus an MRC split over disjoint subsets of one word pairing."""
    rng = np.random.default_rng(seed)
    taken: set[str] = set()
    fillers = make_words(rng, 30, taken)
    xs = make_words(rng, n_pairs, taken)
    ys = make_words(rng, n_pairs, taken)

    def entail(name, n):
        rows = []
        for i in range(n):
            a = int(rng.integers(n_pairs))
            if i % 2 == 0:
                b, label = a, "entailment"
            else:
                b = int(rng.choice([k for k in range(n_pairs) if k != a]))
                label = "contradiction" if rng.random() < 0.5 else "neutral"
            rows.append({"id": f"ent-{name}-{i}", "premise": f"they found the {xs[a]} .", "hypothesis": ys[b], "label": label})
        return rows

    def mrc(name, lo, hi):
        rows = []
        for i in range(lo, hi):
            j = int(rng.choice([k for k in range(lo, hi) if k != i]))
            rows.append(
                _question(f"tr-{name}-{i - lo}", _filler_passage(rng, fillers, 8),
                          f"what did they find with the {xs[i]} ?", ys[i], ys[j], rng)
            )
        return rows

    hi_dev = n_mrc_train + n_mrc_dev
    return {
        "entail_train.jsonl": entail("train", n_entail),
        "entail_dev.jsonl": entail("dev", max(n_entail // 8, 8)),
        "train.jsonl": mrc("train", 0, n_mrc_train),
        "dev.jsonl": mrc("dev", n_mrc_train, hi_dev),
        "test.jsonl": mrc("test", hi_dev, n_pairs),
    }


def gen_story(seed: int, n_train: int = 32, n_dev: int = 16) -> dict:
    rng = np.random.default_rng(seed)
    taken: set[str] = set()
    fillers = make_words(rng, 30, taken)
    nouns = make_words(rng, 40, taken)

    def split(name, n):
        rows = []
        for i in range(n):
            key, other = (str(w) for w in rng.choice(nouns, size=2, replace=False))
            story = [_filler_passage(rng, fillers, 5) for _ in range(4)]
            story[int(rng.integers(4))] = _filler_passage(rng, fillers, 4, planted=[key])
            label = int(rng.integers(2))
            endings = [f"then the {other} was gone .", f"then the {other} was gone ."]
            endings[label] = f"then the {key} was gone ."
            rows.append({"id": f"story-{name}-{i}", "story": story, "endings": endings, "label": label})
        return rows

    return {"train.jsonl": split("train", n_train), "dev.jsonl": split("dev", n_dev)}


def generate(kind: str, seed: int, **sizes) -> dict:
    gen = {"mrc": gen_mrc, "relation": gen_relation, "vectors": gen_vectors,
           "transfer": gen_transfer, "story": gen_story}.get(kind)
    if gen is None:
        raise ValueError(f"unknown synth kind {kind!r}; choose from {KINDS}")
    return gen(seed, **sizes)


def write_corpus(files: dict, out_dir: str | Path) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for name, rows in files.items():
        path = out_dir / name
        if name.endswith(".jsonl"):
            text = "".join(json.dumps(r, sort_keys=True) + "\n" for r in rows)
        elif name.endswith(".tsv"):
            text = "".join("\t".join(r) + "\n" for r in rows)
        else:
            text = "".join(w + " " + " ".join(repr(float(x)) for x in v) + "\n" for w, v in rows)
        path.write_text(text, encoding="utf-8")
        written.append(path)
    return written
