"""Independent reference computations used as test oracles.

Nothing here touches the tape: everything is plain Python loops over numpy
scalars, written straight from the layer formulas.
"""
import math

import numpy as np


def sigmoid(x):
    return 1.0 / (1.0 + math.exp(-x))


def softmax(xs):
    m = max(xs)
    e = [math.exp(x - m) for x in xs]
    s = sum(e)
    return [v / s for v in e]


def seq_attention(query, key, W, mask=None):
    m, n = len(query), len(key)
    mask = [True] * n if mask is None else list(mask)
    if not any(mask):
        return np.zeros_like(query), np.zeros((m, n))
    relu = lambda v: np.array([max(x, 0.0) for x in v])
    out = np.zeros_like(query, dtype=float)
    alpha = np.zeros((m, n))
    for i in range(m):
        qi = relu([sum(query[i][a] * W[a][b] for a in range(len(W))) for b in range(len(W[0]))])
        scores = []
        for j in range(n):
            kj = relu([sum(key[j][a] * W[a][b] for a in range(len(W))) for b in range(len(W[0]))])
            scores.append(sum(x * y for x, y in zip(qi, kj)))
        live = [j for j in range(n) if mask[j]]
        w = softmax([scores[j] for j in live])
        for j, wj in zip(live, w):
            alpha[i, j] = wj
            out[i] += wj * np.asarray(key[j], dtype=float)
    return out, alpha


def lstm_direction(x, P, direction, order):
    """Scalar-loop LSTM. P maps 'fwd.w_i' etc. to arrays."""
    d_h = P[f"{direction}.w_i"].shape[1]
    d_in = len(x[0])
    h = [0.0] * d_h
    c = [0.0] * d_h
    outs = {}
    for t in order:
        gate = {}
        for g in "ifoc":
            W, U, b = P[f"{direction}.w_{g}"], P[f"{direction}.u_{g}"], P[f"{direction}.b_{g}"]
            vals = []
            for k in range(d_h):
                z = b[k]
                for a in range(d_in):
                    z += x[t][a] * W[a][k]
                for a in range(d_h):
                    z += h[a] * U[a][k]
                vals.append(math.tanh(z) if g == "c" else sigmoid(z))
            gate[g] = vals
        c = [gate["f"][k] * c[k] + gate["i"][k] * gate["c"][k] for k in range(d_h)]
        h = [gate["o"][k] * math.tanh(c[k]) for k in range(d_h)]
        outs[t] = list(h)
    return outs


def bilstm(x, P, length=None):
    n = len(x)
    L = n if length is None else length
    d_h = P["fwd.w_i"].shape[1]
    f = lstm_direction(x, P, "fwd", range(L))
    b = lstm_direction(x, P, "bwd", range(L - 1, -1, -1))
    out = np.zeros((n, 2 * d_h))
    for t in range(L):
        out[t, :d_h] = f[t]
        out[t, d_h:] = b[t]
    return out


def self_attention(h, w, mask=None):
    n = len(h)
    mask = [True] * n if mask is None else list(mask)
    live = [j for j in range(n) if mask[j]]
    beta = softmax([sum(h[j][a] * w[a] for a in range(len(w))) for j in live])
    out = np.zeros(len(h[0]))
    for j, bj in zip(live, beta):
        out += bj * np.asarray(h[j], dtype=float)
    return out, beta


def bilinear(a, b, W):
    total = 0.0
    for i in range(len(a)):
        for j in range(len(b)):
            total += a[i] * W[i][j] * b[j]
    return total


def _sub(params, prefix):
    return {k[len(prefix) + 1 :]: v.data for k, v in params.items() if k.startswith(prefix + ".")}


def stream_probability(kind, inst, params, cfg):
    """Straight-line evaluation of one stream (evaluation mode, no dropout)."""
    k = kind
    uses = {"passage": k != "qcn", "question": k != "pcn", "choice": True}
    leaks = {"qcn": {"choice": ("rel", 1), "question": (None, 1)},
             "pcn": {"passage": ("rel", 1), "choice": (None, 2)}}.get(k, {})

    word_tab = params[f"{k}.embed.word"].data
    words, feats = {}, {}
    for s in ("passage", "question", "choice"):
        if not uses[s]:
            continue
        seq = inst.seq(s)
        n = len(seq)
        wv = np.array([word_tab[i] for i in seq.ids])
        cols = [wv]
        drop_rel, drop_col = leaks.get(s, (None, None))
        for chan, tab, ids, dim in (("pos", "pos", seq.pos, cfg.d_pos), ("ne", "ne", seq.ne, cfg.d_ne),
                                    ("relations", "rel", seq.rel, cfg.d_rel)):
            if chan in cfg.disabled or drop_rel == tab:
                cols.append(np.zeros((n, dim)))
            else:
                t = params[f"{k}.embed.{tab}"].data
                cols.append(np.array([t[i] for i in ids]))
        if "handcrafted" not in cfg.disabled:
            f = seq.feats.copy()
            if drop_col is not None:
                f[:, drop_col] = 0.0
            cols.append(f)
        words[s] = wv
        feats[s] = np.hstack(cols)

    proj = lambda block: params[f"{k}.{block}.proj"].data
    inputs = {s: [feats[s]] for s in feats}
    if k == "pqcn":
        inputs["passage"].append(seq_attention(words["passage"], words["question"], proj("passage_question_attn"))[0])
    if uses["passage"]:
        inputs["choice"].append(seq_attention(words["choice"], words["passage"], proj("choice_passage_attn"))[0])
    if uses["question"]:
        inputs["choice"].append(seq_attention(words["choice"], words["question"], proj("choice_question_attn"))[0])

    summary = {}
    for s, parts in inputs.items():
        h = bilstm(np.hstack(parts), _sub(params, f"{k}.{s}_bilstm"))
        summary[s] = self_attention(h, params[f"{k}.{s}_selfattn.w"].data)[0]
    logit = 0.0
    for other in ("passage", "question"):
        if uses[other]:
            logit += bilinear(summary["choice"], summary[other], params[f"{k}.choice_{other}_bilinear.w"].data)
    return sigmoid(logit)


def central_difference(f, x, h=1e-5):
    """Gradient of scalar f at array x by central differences."""
    x = np.array(x, dtype=float)
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return g
