"""Word-level sequence attention, single-layer BiLSTM, self-attention pooling and
bilinear scoring, written against :class:`~taskmoe.autodiff.Tape`.

Parameters live in a flat :class:`ParamSet`; each layer owns the names under
the ``prefix`` it is given.
"""
from __future__ import annotations

import numpy as np

from .autodiff import ParamSet, ShapeError, Tape, Tensor, const

GATES = ("i", "f", "o", "c")


def _uniform(rng: np.random.Generator, shape, k: float) -> np.ndarray:
    return rng.uniform(-k, k, size=shape)


# ---------------------------------------------------------------------------
# init


def init_seq_attention(params: ParamSet, prefix: str, d_in: int, d_att: int, rng) -> None:
    params.add(f"{prefix}.proj", _uniform(rng, (d_in, d_att), 1.0 / np.sqrt(d_in)))


def init_bilstm(params: ParamSet, prefix: str, d_in: int, d_h: int, rng) -> None:
    k = 1.0 / np.sqrt(d_h)
    for direction in ("fwd", "bwd"):
        for g in GATES:
            params.add(f"{prefix}.{direction}.w_{g}", _uniform(rng, (d_in, d_h), k))
        for g in GATES:
            params.add(f"{prefix}.{direction}.u_{g}", _uniform(rng, (d_h, d_h), k))
        for g in GATES:
            bias = np.ones(d_h) if g == "f" else np.zeros(d_h)
            params.add(f"{prefix}.{direction}.b_{g}", bias)


def init_self_attention(params: ParamSet, prefix: str, d_in: int, rng) -> None:
    params.add(f"{prefix}.w", _uniform(rng, (d_in,), 1.0 / np.sqrt(d_in)))


def init_bilinear(params: ParamSet, prefix: str, d_a: int, d_b: int, rng) -> None:
    params.add(f"{prefix}.w", _uniform(rng, (d_a, d_b), 1.0 / np.sqrt(d_a)))


# ---------------------------------------------------------------------------
# forward


def _mask_array(mask, n: int) -> np.ndarray:
    if mask is None:
        return np.ones(n, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (n,):
        raise ShapeError("mask", mask.shape, (n,))
    return mask


def seq_attention(
    tape: Tape, query: Tensor, key: Tensor, proj: Tensor, key_mask=None, return_weights: bool = False
):
    """Align every query row with a convex combination of key rows.

    score(i, j) = relu(q_i W) . relu(k_j W), softmax over unmasked j.
    A fully masked key sequence yields zero rows.
    """
    if query.data.ndim != 2 or key.data.ndim != 2 or query.shape[1] != key.shape[1]:
        raise ShapeError("seq_attention", query.shape, key.shape)
    if proj.shape[0] != query.shape[1]:
        raise ShapeError("seq_attention", query.shape, proj.shape)
    m, n = query.shape[0], key.shape[0]
    mask = _mask_array(key_mask, n)
    if not mask.any():
        out = const(np.zeros(query.shape))
        return (out, const(np.zeros((m, n)))) if return_weights else out

    qp = tape.relu(tape.matmul(query, proj))
    kp = tape.relu(tape.matmul(key, proj))
    scores = tape.matmul(qp, tape.transpose(kp))
    if not mask.all():
        scores = tape.masked_fill(scores, ~mask[None, :])
    alpha = tape.softmax_rows(scores)
    out = tape.matmul(alpha, key)
    return (out, alpha) if return_weights else out


def _lstm_direction(tape, xproj, u_all, d_h, order):
    """Run one LSTM direction over positions ``order``; returns {pos: h}."""
    hs = {}
    h = c = None
    for t in order:
        z = tape.slice(xproj, np.s_[t : t + 1, :])
        if h is not None:
            z = tape.add(z, tape.matmul(h, u_all))
        gates = tape.sigmoid(tape.slice(z, np.s_[:, : 3 * d_h]))
        i = tape.slice(gates, np.s_[:, :d_h])
        f = tape.slice(gates, np.s_[:, d_h : 2 * d_h])
        o = tape.slice(gates, np.s_[:, 2 * d_h :])
        g = tape.tanh(tape.slice(z, np.s_[:, 3 * d_h :]))
        c = tape.mul(i, g) if c is None else tape.add(tape.mul(f, c), tape.mul(i, g))
        h = tape.mul(o, tape.tanh(c))
        hs[t] = h
    return hs


def bilstm(tape: Tape, x: Tensor, params: ParamSet, prefix: str, mask=None) -> Tensor:
    """Bidirectional single-layer LSTM, zero initial states.

    ``mask`` marks real positions; it must be a prefix (real tokens then PAD).
    The backward direction starts at the last real token and PAD rows are zero.
    """
    if x.data.ndim != 2:
        raise ShapeError("bilstm", x.shape, detail="input must be [n, d_in]")
    n, d_in = x.shape
    w0 = params[f"{prefix}.fwd.w_i"]
    if w0.shape[0] != d_in:
        raise ShapeError("bilstm", x.shape, w0.shape)
    d_h = w0.shape[1]
    valid = _mask_array(mask, n)
    length = int(valid.sum())
    if length == 0 or not valid[:length].all():
        raise ValueError("bilstm: mask must mark a non-empty prefix of real positions")

    halves = []
    for direction, order in (("fwd", range(length)), ("bwd", range(length - 1, -1, -1))):
        p = lambda name: params[f"{prefix}.{direction}.{name}"]
        w_all = tape.concat([p(f"w_{g}") for g in GATES], axis=1)
        u_all = tape.concat([p(f"u_{g}") for g in GATES], axis=1)
        b_all = tape.concat([p(f"b_{g}") for g in GATES], axis=0)
        xproj = tape.add(tape.matmul(x, w_all), b_all)
        hs = _lstm_direction(tape, xproj, u_all, d_h, order)
        rows = [hs[t] for t in range(length)]
        if length < n:
            rows.append(const(np.zeros((n - length, d_h))))
        halves.append(tape.concat(rows, axis=0))
    return tape.concat(halves, axis=1)


def self_attention(tape: Tape, h: Tensor, w: Tensor, mask=None, return_weights: bool = False):
    """Pool ``h`` [n, d] into one [d] vector with weights softmax(h w)."""
    if h.data.ndim != 2 or w.shape != (h.shape[1],):
        raise ShapeError("self_attention", h.shape, w.shape)
    n, d = h.shape
    valid = _mask_array(mask, n)
    if not valid.any():
        raise ValueError("self_attention: every position is masked")
    scores = tape.reshape(tape.matmul(h, tape.reshape(w, (d, 1))), (1, n))
    if not valid.all():
        scores = tape.masked_fill(scores, ~valid[None, :])
    beta = tape.softmax_rows(scores)
    summary = tape.reshape(tape.matmul(beta, h), (d,))
    return (summary, beta) if return_weights else summary


def bilinear_logit(tape: Tape, a: Tensor, b: Tensor, w: Tensor) -> Tensor:
    """a^T W b as a shape-[1] tensor."""
    if a.data.ndim != 1 or b.data.ndim != 1 or w.shape != (a.shape[0], b.shape[0]):
        raise ShapeError("bilinear", a.shape, w.shape, b.shape)
    aw = tape.matmul(tape.reshape(a, (1, a.shape[0])), w)
    return tape.sum(tape.mul(aw, tape.reshape(b, (1, b.shape[0]))))
