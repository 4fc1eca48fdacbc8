"""Turn auxiliary-task records into stream training instances.

Entailment pairs feed the question-choice stream (premise as question,
hypothesis as choice); story-cloze records feed the passage-choice stream
(story as passage, each ending as a choice). The field the stream ignores is
filled with ``EMPTY_SENTINEL``.
"""
from __future__ import annotations

from pathlib import Path
from typing import Iterable, Mapping

from .featurize import EMPTY_SENTINEL, DataError, RawInstance, read_jsonl

ENTAILMENT_LABELS = {"entailment": 1, "neutral": 0, "contradiction": 0}


def adapt_entailment(records: Iterable[tuple[int, Mapping]], source: str = "entailment") -> list[RawInstance]:
    out = []
    for lineno, rec in records:
        where = f"{source}:{lineno}"
        try:
            premise, hypothesis, label = rec["premise"], rec["hypothesis"], rec["label"]
        except KeyError as e:
            raise DataError(f"{where}: missing field {e.args[0]!r}") from None
        if label not in ENTAILMENT_LABELS:
            raise DataError(f"{where}: unknown entailment label {label!r}")
        rid = str(rec.get("id", f"ent{lineno}"))
        out.append(
            RawInstance(id=rid, passage=EMPTY_SENTINEL, question=premise, choice=hypothesis,
                        y=ENTAILMENT_LABELS[label], qid=rid, choice_index=0)
        )
    return out


def adapt_storycloze(records: Iterable[tuple[int, Mapping]], source: str = "story") -> list[RawInstance]:
    out = []
    for lineno, rec in records:
        where = f"{source}:{lineno}"
        story, endings, label = rec.get("story"), rec.get("endings"), rec.get("label")
        if not isinstance(story, list) or len(story) != 4:
            raise DataError(f"{where}: 'story' must be an array of 4 sentences")
        if not isinstance(endings, list) or len(endings) != 2:
            raise DataError(f"{where}: 'endings' must be an array of 2 strings")
        if label not in (0, 1):
            raise DataError(f"{where}: 'label' must be 0 or 1")
        qid = str(rec.get("id", f"story{lineno}"))
        passage = " ".join(s.strip() for s in story)
        for k, ending in enumerate(endings):
            out.append(
                RawInstance(id=f"{qid}#{k}", passage=passage, question=EMPTY_SENTINEL, choice=ending,
                            y=int(k == label), qid=qid, choice_index=k)
            )
    return out


def load_entailment(path: str | Path) -> list[RawInstance]:
    return adapt_entailment(read_jsonl(path), str(path))


def load_storycloze(path: str | Path) -> list[RawInstance]:
    return adapt_storycloze(read_jsonl(path), str(path))
