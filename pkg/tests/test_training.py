import dataclasses
import logging
import math

import numpy as np
import pytest

from corpus import load_corpus
from taskmoe.adapters import adapt_entailment, adapt_storycloze
from taskmoe.autodiff import ParamSet, ShapeError, Tape
from taskmoe.checkpoint import Checkpoint
from taskmoe.experts import Expert, StreamConfig, StreamKind, init_params
from taskmoe.featurize import (
    EMPTY_SENTINEL,
    DataError,
    RawInstance,
    build_resources,
    group_questions,
    tokenize,
)
from taskmoe.training import (
    AdamState,
    TrainConfig,
    ablation_run,
    adam_step,
    bce_loss,
    evaluate,
    expert_from_checkpoint,
    format_table,
    train_stream,
    transfer_load,
)

SMALL = StreamConfig(d_word=8, d_pos=2, d_ne=2, d_rel=3, d_h=4, dropout=0.0)


@pytest.fixture(scope="module")
def mrc(tmp_path_factory):
    return load_corpus("mrc", 3, tmp_path_factory.mktemp("mrc"), d_word=8, n_train=6, n_dev=4)


# loss ------------------------------------------------------------------------


def test_bce_values():
    assert bce_loss(0.5, 1) == pytest.approx(0.693147, abs=1e-6)
    assert bce_loss(1.0, 1) == pytest.approx(1e-7, rel=1e-3)
    assert bce_loss(0.2, 0) == pytest.approx(-math.log(0.8), abs=1e-12)
    assert bce_loss(0.2, 1) == pytest.approx(1.609438, abs=1e-6)
    assert math.isfinite(bce_loss(0.0, 1))


def test_bce_tape_matches_float():
    p = ParamSet()
    x = p.add("x", [0.3])
    for y in (0, 1):
        tape = Tape()
        assert bce_loss(x, y, tape).item() == pytest.approx(bce_loss(0.3, y), abs=1e-15)


# optimizer ---------------------------------------------------------------------


def _adam_params():
    p = ParamSet()
    p.add("a", [1.0, -2.0])
    p.add("b", np.ones((2, 2)))
    return p


def test_adam_zero_gradient_leaves_params():
    p = _adam_params()
    before = {k: v.data.copy() for k, v in p.items()}
    adam_step(p, {k: np.zeros_like(v.data) for k, v in p.items()}, AdamState.zeros_like(p))
    assert all(np.array_equal(p[k].data, before[k]) for k in p)


def test_adam_first_step_moves_by_lr_against_sign():
    p = _adam_params()
    g = {"a": np.array([0.5, -3.0]), "b": np.array([[1e-3, 2.0], [-4.0, 0.25]])}
    before = {k: v.data.copy() for k, v in p.items()}
    adam_step(p, g, AdamState.zeros_like(p), lr=0.01)
    for k in p:
        np.testing.assert_allclose(p[k].data - before[k], -0.01 * np.sign(g[k]), rtol=1e-4)


def test_adam_deterministic_and_shape_checked():
    g = {"a": np.array([0.5, -3.0]), "b": np.full((2, 2), 0.1)}
    p1, p2 = _adam_params(), _adam_params()
    s1, s2 = AdamState.zeros_like(p1), AdamState.zeros_like(p2)
    for _ in range(3):
        adam_step(p1, g, s1)
        adam_step(p2, g, s2)
    assert all(p1[k].data.tobytes() == p2[k].data.tobytes() for k in p1)
    with pytest.raises(ShapeError):
        adam_step(p1, {"a": np.zeros(3)}, s1)


def test_adam_clips_global_norm():
    p = ParamSet()
    p.add("a", [0.0])
    state = AdamState.zeros_like(p)
    norm = adam_step(p, {"a": np.array([30.0])}, state, clip_norm=10.0)
    assert norm == 30.0 and state.m["a"][0] == pytest.approx(0.1 * 10.0)


# training ----------------------------------------------------------------------


def test_lr_zero_keeps_initial_weights(mrc):
    res = mrc.resources
    fresh = init_params(StreamKind.QCN, SMALL, res.word_vectors, res)
    out = train_stream("qcn", mrc.train, mrc.dev, TrainConfig(lr=0.0, epochs=2), res, SMALL)
    assert all(np.array_equal(out.checkpoint.params[k].data, fresh[k].data) for k in fresh)
    assert len(out.history) == 2


def test_zero_epoch_resume_reproduces_dev_accuracy(mrc):
    res = mrc.resources
    first = train_stream("pcn", mrc.train, mrc.dev, TrainConfig(epochs=3, seed=1), res, SMALL)
    again = train_stream("pcn", mrc.train, mrc.dev, TrainConfig(epochs=0, seed=1), res, init=first.checkpoint)
    assert again.checkpoint.best_dev_accuracy == first.checkpoint.best_dev_accuracy
    assert again.history == []


def test_training_loss_goes_down(mrc):
    res = mrc.resources
    # no dev set, so no early stop
    out = train_stream("pqcn", mrc.train, [], TrainConfig(epochs=6, lr=0.01, patience=50), res, SMALL)
    losses = out.losses
    assert len(losses) == 6 and losses[-1] < losses[0]


def test_training_rejects_mismatched_init(mrc):
    res = mrc.resources
    ckpt = train_stream("qcn", mrc.train, mrc.dev, TrainConfig(epochs=0), res, SMALL).checkpoint
    with pytest.raises(ValueError):
        train_stream("pcn", mrc.train, mrc.dev, TrainConfig(epochs=0), res, init=ckpt)
    with pytest.raises(ValueError):
        train_stream("qcn", mrc.train, mrc.dev, TrainConfig(epochs=0), res, dataclasses.replace(SMALL, d_h=5), init=ckpt)
    with pytest.raises(DataError):
        train_stream("qcn", [], mrc.dev, TrainConfig(), res, SMALL)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lr=-1.0)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(dev_metric="f1")


def test_without_dev_the_last_weights_are_kept(mrc):
    res = mrc.resources
    out = train_stream("qcn", mrc.train, [], TrainConfig(epochs=2), res, SMALL)
    assert out.checkpoint.epoch == 2
    fresh = init_params(StreamKind.QCN, SMALL, res.word_vectors, res)
    assert any(not np.array_equal(out.checkpoint.params[k].data, fresh[k].data) for k in fresh)


def test_dev_metric_selects_accuracy_kind(mrc):
    res = mrc.resources
    zero = init_params(StreamKind.QCN, SMALL, res.word_vectors, res)
    for t in zero.values():
        t.data[...] = 0.0
    init = Checkpoint(StreamKind.QCN, SMALL, zero, res.to_meta())
    # every instance scores exactly 0.5: questions tie to the first choice,
    # instances all count as positive
    labels = [q.label for q in group_questions(mrc.dev)]
    acc = lambda metric: train_stream("qcn", mrc.train, mrc.dev, TrainConfig(epochs=0, dev_metric=metric), res,
                                      init=init).checkpoint.best_dev_accuracy
    assert acc("auto") == acc("question") == labels.count(0) / len(labels)
    assert acc("instance") == 0.5
    with pytest.raises(DataError):
        train_stream("qcn", mrc.train, mrc.dev[:1], TrainConfig(epochs=0, dev_metric="question"), res, init=init)


# transfer ----------------------------------------------------------------------


def _ckpt(kind, res, cfg=SMALL, seed=4):
    params = init_params(kind, cfg, res.word_vectors, res)
    rng = np.random.default_rng(seed)
    for t in params.values():
        t.data += rng.normal(size=t.shape)
    return Checkpoint(StreamKind(kind), cfg, params, res.to_meta())


def _raws(words):
    return [RawInstance(f"r{i}", "the " + w, "what " + w, w, i % 2, f"r{i // 2}", i % 2) for i, w in enumerate(words)]


def test_transfer_identical_vocab_is_bitwise():
    res = build_resources(_raws(["fire", "pit", "wood", "dry"]), d_word=8)
    ckpt = _ckpt("qcn", res)
    loaded = transfer_load(ckpt, res)
    assert list(loaded) == list(ckpt.params)
    assert all(loaded[k].data.tobytes() == ckpt.params[k].data.tobytes() for k in loaded)


def test_transfer_disjoint_vocab_copies_no_rows():
    src = build_resources(_raws(["fire", "pit"]), d_word=8)
    dst = build_resources(_raws(["lamp", "river"]), d_word=8, seed=9)
    ckpt = _ckpt("qcn", src)
    loaded = transfer_load(ckpt, dst)
    word = loaded["qcn.embed.word"].data
    for i, tok in enumerate(dst.vocab.itos):
        if tok not in src.vocab.stoi:
            assert np.array_equal(word[i], dst.word_vectors.matrix[i])
    # non-embedding layers are carried over untouched
    assert np.array_equal(loaded["qcn.choice_bilstm.fwd.w_i"].data, ckpt.params["qcn.choice_bilstm.fwd.w_i"].data)


def test_transfer_half_overlap_maps_by_token():
    src = build_resources(_raws(["fire", "pit", "wood", "dry"]), d_word=8)
    dst = build_resources(_raws(["wood", "dry", "lamp", "river", "river"]), d_word=8, seed=2)
    ckpt = _ckpt("qcn", src)
    word = transfer_load(ckpt, dst)["qcn.embed.word"].data
    src_word = ckpt.params["qcn.embed.word"].data
    for tok in ("wood", "dry", "the", "what"):
        assert np.array_equal(word[dst.vocab.stoi[tok]], src_word[src.vocab.stoi[tok]])
    for tok in ("lamp", "river"):
        assert np.array_equal(word[dst.vocab.stoi[tok]], dst.word_vectors.matrix[dst.vocab.stoi[tok]])


def test_transfer_reinitializes_tag_tables_on_inventory_change(caplog):
    src = build_resources(_raws(["fire", "pit"]), d_word=8)
    tagged = RawInstance("t", "fire", "pit", "wood", 1, tags={"pos": {"passage": ["NN"]}})
    dst = build_resources([tagged], d_word=8)
    with caplog.at_level(logging.WARNING):
        loaded = transfer_load(_ckpt("qcn", src), dst)
    assert loaded["qcn.embed.pos"].shape == (len(dst.pos_vocab), SMALL.d_pos)
    assert "embed.pos" in caplog.text


def test_transfer_shape_mismatch_is_an_error():
    res = build_resources(_raws(["fire", "pit"]), d_word=8)
    ckpt = _ckpt("qcn", res)
    ckpt.params["qcn.choice_bilstm.fwd.u_i"].data = np.zeros((2, 2))
    with pytest.raises(ShapeError, match="choice_bilstm.fwd.u_i"):
        transfer_load(ckpt, res)


def test_known_tokens_extend_vocab():
    res = build_resources(_raws(["fire"]), d_word=8, known_tokens=["lamp", "fire", "<unk>"])
    assert res.vocab.tokens()[-1] == "lamp" and res.vocab.itos.count("fire") == 1


# adapters ----------------------------------------------------------------------


def test_entailment_adapter_labels():
    recs = [(1, {"id": "a", "premise": "A man sleeps .", "hypothesis": "A man rests .", "label": "entailment"}),
            (2, {"premise": "p", "hypothesis": "h", "label": "contradiction"}),
            (3, {"premise": "p", "hypothesis": "h", "label": "neutral"})]
    out = adapt_entailment(recs)
    assert [r.y for r in out] == [1, 0, 0]
    assert out[0].passage == EMPTY_SENTINEL and out[0].question == "A man sleeps ." and out[0].choice == "A man rests ."


def test_entailment_adapter_unknown_label():
    with pytest.raises(DataError, match="snli.jsonl:7.*maybe"):
        adapt_entailment([(7, {"premise": "p", "hypothesis": "h", "label": "maybe"})], "snli.jsonl")


def test_story_adapter():
    rec = {"id": "s", "story": ["Tom was hungry .", "He went out .", "He found a diner .", "He ordered soup ."],
           "endings": ["Tom ate the soup .", "Tom flew to Mars ."], "label": 0}
    a, b = adapt_storycloze([(1, rec)])
    assert (a.y, b.y) == (1, 0) and a.qid == b.qid == "s"
    assert a.question == EMPTY_SENTINEL
    assert len(tokenize(a.passage)) == sum(len(tokenize(s)) for s in rec["story"])


@pytest.mark.parametrize("field,value", [("story", ["a", "b", "c"]), ("endings", ["x"]), ("label", 2)])
def test_story_adapter_rejects_bad_counts(field, value):
    rec = {"story": ["a", "b", "c", "d"], "endings": ["x", "y"], "label": 1, field: value}
    with pytest.raises(DataError, match="story:3"):
        adapt_storycloze([(3, rec)])


# evaluation --------------------------------------------------------------------


class _Fixed(Expert):
    """Scores a choice from a lookup keyed by instance id."""

    def __init__(self, kind, table, res):
        super().__init__(StreamKind(kind), SMALL, ParamSet(), res)
        self.table = table

    def prob(self, inst):
        return self.table[inst.id]


def test_evaluate_single_expert_equals_its_accuracy(mrc):
    res = mrc.resources
    qs = group_questions(mrc.dev)
    oracle = _Fixed("pqcn", {r.id: float(r.y) for r in mrc.dev}, res)
    wrong = _Fixed("qcn", {r.id: float(1 - r.y) for r in mrc.dev}, res)
    rep = evaluate([oracle], qs)
    assert rep.accuracy == 1.0 and rep.per_stream == {"pqcn": 1.0} and rep.n_questions == len(qs)
    rep = evaluate([wrong, oracle], qs, mode="hard")
    assert rep.per_stream == {"qcn": 0.0, "pqcn": 1.0} and rep.agreement == 0.0
    assert rep.low_margin == 0  # both streams maximally confident: weighted tie is uniform
    assert rep.accuracy == 0.0  # hard mode ties go to the first stream


def test_evaluate_disagreement_fixture(mrc):
    res = mrc.resources
    qs = group_questions(mrc.dev)
    confident = {r.id: (0.9 if r.y else 0.1) for r in mrc.dev}
    unsure = {r.id: (0.45 if r.y else 0.55) for r in mrc.dev}
    rep = evaluate([_Fixed("qcn", unsure, res), _Fixed("pcn", confident, res)], qs)
    assert rep.accuracy == 1.0 and rep.per_stream == {"qcn": 0.0, "pcn": 1.0} and rep.agreement == 0.0


def test_evaluate_rejects_non_pairs(mrc):
    q = group_questions(mrc.dev)[0]
    bad = dataclasses.replace(q, choices=q.choices[:1])
    with pytest.raises(DataError, match="2 choices"):
        evaluate([_Fixed("qcn", {}, mrc.resources)], [bad])


# ablation ----------------------------------------------------------------------


def test_ablation_table_structure_and_determinism(mrc):
    run = lambda: ablation_run("qcn", mrc.train, mrc.dev, mrc.resources, SMALL, TrainConfig(epochs=1), ["pos", "relations"])
    rows = run()
    assert [r.name for r in rows] == ["all channels", "w/o pos", "w/o relations"]
    assert [r.disabled for r in rows] == [None, "pos", "relations"]
    assert all(0.0 <= r.accuracy <= 1.0 for r in rows)
    assert [r.accuracy for r in rows] == [r.accuracy for r in run()]
    with pytest.raises(ValueError):
        ablation_run("qcn", mrc.train, mrc.dev, mrc.resources, SMALL, TrainConfig(epochs=1), ["colour"])


def test_format_table():
    text = format_table([["all channels", "1.0000"], ["w/o pos", "0.5000"]], ["configuration", "accuracy"])
    assert text.splitlines() == [
        "configuration  accuracy",
        "-------------  --------",
        "all channels   1.0000",
        "w/o pos        0.5000",
    ]


def test_expert_from_checkpoint_round_trip(mrc):
    res = mrc.resources
    ckpt = _ckpt("pcn", res)
    expert = expert_from_checkpoint(Checkpoint.from_bytes(ckpt.to_bytes()))
    inst = expert.encode(mrc.dev[0])
    direct = Expert(StreamKind.PCN, SMALL, ckpt.params, res)
    assert expert.prob(inst) == direct.prob(direct.encode(mrc.dev[0]))


@pytest.mark.slow
def test_vector_ablation_hurts_on_vector_planted_set(tmp_path):
    c = load_corpus("vectors", 0, tmp_path)
    rows = ablation_run("pqcn", c.train, c.dev, c.resources, StreamConfig(seed=0), TrainConfig(epochs=20, seed=0),
                        ["word_vectors"], c.test)
    assert rows[1].accuracy < rows[0].accuracy
