"""Finite-difference gradient suite over every layer type and every stream."""
from __future__ import annotations

import numpy as np

from . import layers
from .autodiff import ParamSet, Tape, const, grad_check
from .experts import StreamConfig, StreamKind, forward, init_params
from .featurize import RawInstance, RelationLexicon, build_resources, encode_instance
from .training import bce_loss

TOY_PASSAGE = "the dry wood burned in the pit"
TOY_QUESTION = "where was the fire"
TOY_CHOICE = "in the pit"


def toy_setup(seed: int = 1, d_word: int = 4, d_h: int = 3):
    """A 7/4/3-token instance with tags, relations and overlaps on every channel."""
    tags = {
        "pos": {"passage": ["DT", "JJ", "NN", "VBD", "IN", "DT", "NN"], "question": ["WRB", "VBD", "DT", "NN"],
                "choice": ["IN", "DT", "NN"]},
        "ner": {"passage": ["O", "O", "O", "O", "O", "O", "LOC"], "question": ["O"] * 4, "choice": ["O", "O", "LOC"]},
    }
    raw = RawInstance("toy#0", TOY_PASSAGE, TOY_QUESTION, TOY_CHOICE, 1, "toy", 0, tags)
    lex = RelationLexicon([("fire", "pit", "AtLocation"), ("wood", "fire", "Causes"), ("dry", "burned", "Causes")])
    res = build_resources([raw], lexicon=lex, d_word=d_word, seed=seed)
    cfg = StreamConfig(d_word=d_word, d_h=d_h, d_att=3, dropout=0.0, seed=seed)
    return raw, res, cfg, encode_instance(raw, res)


def _layer_cases(seed: int):
    rng = np.random.default_rng(seed)
    q = const(rng.normal(size=(3, 4)))
    k = const(rng.normal(size=(5, 4)))
    mask = np.array([True, True, False, True, False])

    def weighted(tape, out):
        w = const(np.random.default_rng(seed + 7).normal(size=out.shape))
        return tape.sum(tape.mul(out, w))

    cases = {}

    p = ParamSet()
    layers.init_seq_attention(p, "att", 4, 3, rng)
    cases["seq_attention"] = (p, lambda t, p=p: weighted(t, layers.seq_attention(t, q, k, p["att.proj"], mask)))

    p = ParamSet()
    layers.init_bilstm(p, "lstm", 4, 3, rng)
    for name in p:
        p[name].data += rng.normal(scale=0.3, size=p[name].shape)
    cases["bilstm"] = (p, lambda t, p=p: weighted(t, layers.bilstm(t, k, p, "lstm")))

    p = ParamSet()
    p.add("h", rng.normal(size=(5, 6)))
    layers.init_self_attention(p, "self", 6, rng)
    cases["self_attention"] = (p, lambda t, p=p: weighted(t, layers.self_attention(t, p["h"], p["self.w"], mask)))

    p = ParamSet()
    p.add("a", rng.normal(size=3))
    p.add("b", rng.normal(size=4))
    layers.init_bilinear(p, "bil", 3, 4, rng)
    cases["bilinear"] = (p, lambda t, p=p: layers.bilinear_logit(t, p["a"], p["b"], p["bil.w"]))
    return cases


def run_suite(seed: int = 1, step: float = 1e-5, max_components: int | None = None) -> dict[str, float]:
    """Worst relative error per case: four layer types plus the three full streams."""
    results = {}
    for name, (params, fn) in _layer_cases(seed).items():
        results[name] = max(grad_check(fn, params, step=step, max_components=max_components, seed=seed).values())

    _, res, cfg, inst = toy_setup(seed)
    for kind in StreamKind:
        params = init_params(kind, cfg, res.word_vectors, res)
        # the default init keeps logits near zero; spread them so every term matters
        rng = np.random.default_rng(seed + 11)
        for t in params.values():
            t.data += rng.normal(scale=0.2, size=t.shape)

        def fn(tape, kind=kind, params=params):
            return bce_loss(forward(kind, inst, params, cfg, tape), inst.y, tape)

        results[kind.value] = max(grad_check(fn, params, step=step, max_components=max_components, seed=seed).values())
    return results
