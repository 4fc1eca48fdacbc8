"""Write a synthetic corpus to disk and load it back the way the CLI does."""
from pathlib import Path
from types import SimpleNamespace

from taskmoe.adapters import load_entailment, load_storycloze
from taskmoe.featurize import RelationLexicon, build_resources, flatten, read_questions
from taskmoe.synth import generate, write_corpus


def load_corpus(kind, seed, out_dir, d_word=100, **sizes):
    out_dir = Path(out_dir)
    write_corpus(generate(kind, seed, **sizes), out_dir)
    c = SimpleNamespace(dir=out_dir, train=[], dev=[], test=[], entail_train=[], entail_dev=[])
    if kind == "story":
        c.train = load_storycloze(out_dir / "train.jsonl")
        c.dev = load_storycloze(out_dir / "dev.jsonl")
    else:
        for split in ("train", "dev", "test"):
            path = out_dir / f"{split}.jsonl"
            if path.exists():
                setattr(c, split, flatten(read_questions(path)))
    for split in ("entail_train", "entail_dev"):
        path = out_dir / f"{split}.jsonl"
        if path.exists():
            setattr(c, split, load_entailment(path))
    rel = out_dir / "relations.tsv"
    vec = out_dir / "vectors.txt"
    c.lexicon = RelationLexicon.load(rel) if rel.exists() else None
    c.vectors = vec if vec.exists() else None
    c.resources = build_resources(
        c.train + c.entail_train,
        extra=c.dev + c.test + c.entail_dev,
        lexicon=c.lexicon,
        vectors_path=c.vectors,
        d_word=d_word,
        seed=seed,
    )
    return c
