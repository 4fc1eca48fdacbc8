"""Minimal tape-based reverse-mode autodiff over small dense float64 tensors.

Every differentiable operation used by the expert networks is a primitive
registered in ``PRIMITIVES``. A :class:`Tape` records one forward pass;
:func:`backward` replays it once in reverse.

Operations whose inputs are all constants (``requires_grad=False``) are
evaluated eagerly and not recorded, since nothing can flow back through them.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Iterable

import numpy as np

MASK_VALUE = -1e9
MAX_RANK = 3


class ShapeError(ValueError):
    def __init__(self, kind: str, *shapes: tuple, detail: str = ""):
        self.kind = kind
        self.shapes = shapes
        msg = f"{kind}: incompatible shapes " + " vs ".join(str(tuple(s)) for s in shapes)
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class TapeError(RuntimeError):
    pass


class NondeterminismError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data: Any, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if arr.ndim > MAX_RANK:
            raise ShapeError("tensor", arr.shape, detail=f"rank must be <= {MAX_RANK}")
        if arr.size == 0:
            raise ShapeError("tensor", arr.shape, detail="extents must be positive")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def values(self) -> list[float]:
        return self.data.ravel().tolist()

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def const(data: Any) -> Tensor:
    return Tensor(data, requires_grad=False)


class ParamSet(dict):
    """Ordered ``name -> Tensor`` map of trainable parameters."""

    def add(self, name: str, data: Any) -> Tensor:
        if name in self:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(data, dtype=np.float64), requires_grad=True)
        self[name] = t
        return t

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.items()}

    def copy(self) -> "ParamSet":
        out = ParamSet()
        for k, v in self.items():
            out.add(k, v.data.copy())
        return out

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]) -> "ParamSet":
        out = cls()
        for k, v in arrays.items():
            out.add(k, v)
        return out


# ---------------------------------------------------------------------------
# primitives: forward(arrays, attrs, tape) -> (out, saved)
#             backward(g, arrays, out, saved, attrs) -> tuple of input grads


@dataclass(frozen=True)
class Primitive:
    forward: Callable
    backward: Callable


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _binary_shape(kind, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(kind, a.shape, b.shape) from None


def _add_fwd(x, attrs, tape):
    _binary_shape("add", *x)
    return x[0] + x[1], None


def _add_bwd(g, x, out, saved, attrs):
    return _unbroadcast(g, x[0].shape), _unbroadcast(g, x[1].shape)


def _sub_fwd(x, attrs, tape):
    _binary_shape("sub", *x)
    return x[0] - x[1], None


def _sub_bwd(g, x, out, saved, attrs):
    return _unbroadcast(g, x[0].shape), -_unbroadcast(g, x[1].shape)


def _mul_fwd(x, attrs, tape):
    _binary_shape("mul", *x)
    return x[0] * x[1], None


def _mul_bwd(g, x, out, saved, attrs):
    return _unbroadcast(g * x[1], x[0].shape), _unbroadcast(g * x[0], x[1].shape)


def _matmul_fwd(x, attrs, tape):
    a, b = x
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    return a @ b, None


def _matmul_bwd(g, x, out, saved, attrs):
    a, b = x
    return g @ b.T, a.T @ g


def _tanh_fwd(x, attrs, tape):
    return np.tanh(x[0]), None


def _tanh_bwd(g, x, out, saved, attrs):
    return (g * (1.0 - out * out),)


def _sigmoid_fwd(x, attrs, tape):
    return 0.5 * (1.0 + np.tanh(0.5 * x[0])), None


def _sigmoid_bwd(g, x, out, saved, attrs):
    return (g * out * (1.0 - out),)


def _relu_fwd(x, attrs, tape):
    return np.maximum(x[0], 0.0), None


def _relu_bwd(g, x, out, saved, attrs):
    return (g * (x[0] > 0),)


def _exp_fwd(x, attrs, tape):
    return np.exp(x[0]), None


def _exp_bwd(g, x, out, saved, attrs):
    return (g * out,)


def _log_fwd(x, attrs, tape):
    if np.any(x[0] <= 0):
        raise ValueError("log: non-positive input")
    return np.log(x[0]), None


def _log_bwd(g, x, out, saved, attrs):
    return (g / x[0],)


def _clip_fwd(x, attrs, tape):
    return np.clip(x[0], attrs["lo"], attrs["hi"]), None


def _clip_bwd(g, x, out, saved, attrs):
    inside = (x[0] >= attrs["lo"]) & (x[0] <= attrs["hi"])
    return (g * inside,)


def _softmax_fwd(x, attrs, tape):
    z = x[0] - x[0].max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True), None


def _softmax_bwd(g, x, out, saved, attrs):
    dot = (g * out).sum(axis=-1, keepdims=True)
    return (out * (g - dot),)


def _concat_fwd(x, attrs, tape):
    axis = attrs.get("axis", -1)
    ref = x[0]
    for other in x[1:]:
        if other.ndim != ref.ndim or any(
            i != (axis % ref.ndim) and s != t for i, (s, t) in enumerate(zip(ref.shape, other.shape))
        ):
            raise ShapeError("concat", ref.shape, other.shape)
    return np.concatenate(x, axis=axis), [a.shape[axis] for a in x]


def _concat_bwd(g, x, out, sizes, attrs):
    axis = attrs.get("axis", -1)
    cuts = np.cumsum(sizes)[:-1]
    return tuple(np.split(g, cuts, axis=axis))


def _sum_rows_fwd(x, attrs, tape):
    return x[0].sum(axis=0), None


def _sum_rows_bwd(g, x, out, saved, attrs):
    return (np.broadcast_to(g, x[0].shape).copy(),)


def _sum_fwd(x, attrs, tape):
    return np.array([x[0].sum()]), None


def _sum_bwd(g, x, out, saved, attrs):
    return (np.full(x[0].shape, g[0]),)


def _scale_fwd(x, attrs, tape):
    return x[0] * attrs["c"], None


def _scale_bwd(g, x, out, saved, attrs):
    return (g * attrs["c"],)


def _masked_fill_fwd(x, attrs, tape):
    mask = np.asarray(attrs["mask"], dtype=bool)
    try:
        mask = np.broadcast_to(mask, x[0].shape)
    except ValueError:
        raise ShapeError("masked_fill", x[0].shape, mask.shape) from None
    return np.where(mask, attrs.get("value", MASK_VALUE), x[0]), mask


def _masked_fill_bwd(g, x, out, mask, attrs):
    return (np.where(mask, 0.0, g),)


def _dropout_fwd(x, attrs, tape):
    rate = attrs["rate"]
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout: rate must be in [0, 1), got {rate}")
    if not tape.training or rate == 0.0:
        return x[0].copy(), None
    keep = (tape.rng.random(x[0].shape) >= rate) / (1.0 - rate)
    return x[0] * keep, keep


def _dropout_bwd(g, x, out, keep, attrs):
    return (g if keep is None else g * keep,)


def _gather_rows_fwd(x, attrs, tape):
    table = x[0]
    idx = np.asarray(attrs["index"], dtype=np.int64)
    if table.ndim != 2 or idx.ndim != 1 or (idx.size and (idx.min() < 0 or idx.max() >= table.shape[0])):
        raise ShapeError("gather_rows", table.shape, idx.shape, detail="index out of range")
    return table[idx], idx


def _gather_rows_bwd(g, x, out, idx, attrs):
    gt = np.zeros_like(x[0])
    np.add.at(gt, idx, g)
    return (gt,)


def _slice_fwd(x, attrs, tape):
    return x[0][attrs["index"]].copy(), None


def _slice_bwd(g, x, out, saved, attrs):
    gt = np.zeros_like(x[0])
    gt[attrs["index"]] = g
    return (gt,)


def _transpose_fwd(x, attrs, tape):
    if x[0].ndim != 2:
        raise ShapeError("transpose", x[0].shape, detail="rank-2 only")
    return x[0].T.copy(), None


def _transpose_bwd(g, x, out, saved, attrs):
    return (g.T,)


def _reshape_fwd(x, attrs, tape):
    shape = tuple(attrs["shape"])
    if int(np.prod(shape)) != x[0].size:
        raise ShapeError("reshape", x[0].shape, shape)
    return x[0].reshape(shape).copy(), None


def _reshape_bwd(g, x, out, saved, attrs):
    return (g.reshape(x[0].shape),)


PRIMITIVES: dict[str, Primitive] = {
    "add": Primitive(_add_fwd, _add_bwd),
    "sub": Primitive(_sub_fwd, _sub_bwd),
    "mul": Primitive(_mul_fwd, _mul_bwd),
    "matmul": Primitive(_matmul_fwd, _matmul_bwd),
    "tanh": Primitive(_tanh_fwd, _tanh_bwd),
    "sigmoid": Primitive(_sigmoid_fwd, _sigmoid_bwd),
    "relu": Primitive(_relu_fwd, _relu_bwd),
    "exp": Primitive(_exp_fwd, _exp_bwd),
    "log": Primitive(_log_fwd, _log_bwd),
    "clip": Primitive(_clip_fwd, _clip_bwd),
    "softmax_rows": Primitive(_softmax_fwd, _softmax_bwd),
    "concat": Primitive(_concat_fwd, _concat_bwd),
    "sum_rows": Primitive(_sum_rows_fwd, _sum_rows_bwd),
    "sum": Primitive(_sum_fwd, _sum_bwd),
    "scale": Primitive(_scale_fwd, _scale_bwd),
    "masked_fill": Primitive(_masked_fill_fwd, _masked_fill_bwd),
    "dropout": Primitive(_dropout_fwd, _dropout_bwd),
    "gather_rows": Primitive(_gather_rows_fwd, _gather_rows_bwd),
    "slice": Primitive(_slice_fwd, _slice_bwd),
    "transpose": Primitive(_transpose_fwd, _transpose_bwd),
    "reshape": Primitive(_reshape_fwd, _reshape_bwd),
}


@dataclass
class Record:
    kind: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    saved: Any
    attrs: dict


@dataclass
class Tape:
    """Record of one forward pass. ``training`` switches dropout on."""

    training: bool = False
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))
    records: list[Record] = field(default_factory=list)
    consumed: bool = False

    def apply(self, kind: str, *inputs: Tensor, **attrs) -> Tensor:
        prim = PRIMITIVES.get(kind)
        if prim is None:
            raise KeyError(f"unknown primitive kind {kind!r}")
        if self.consumed:
            raise TapeError("tape already consumed by backward; start a new tape")
        arrays = [t.data for t in inputs]
        out_data, saved = prim.forward(arrays, attrs, self)
        needs_grad = any(t.requires_grad for t in inputs)
        out = Tensor(out_data, requires_grad=needs_grad)
        if needs_grad:
            self.records.append(Record(kind, inputs, out, saved, attrs))
        return out

    # thin conveniences so layer code reads naturally
    def matmul(self, a, b):
        return self.apply("matmul", a, b)

    def add(self, a, b):
        return self.apply("add", a, b)

    def sub(self, a, b):
        return self.apply("sub", a, b)

    def mul(self, a, b):
        return self.apply("mul", a, b)

    def tanh(self, a):
        return self.apply("tanh", a)

    def sigmoid(self, a):
        return self.apply("sigmoid", a)

    def relu(self, a):
        return self.apply("relu", a)

    def log(self, a):
        return self.apply("log", a)

    def clip(self, a, lo, hi):
        return self.apply("clip", a, lo=lo, hi=hi)

    def softmax_rows(self, a):
        return self.apply("softmax_rows", a)

    def concat(self, parts: Iterable[Tensor], axis: int = -1):
        parts = tuple(parts)
        if len(parts) == 1:
            return parts[0]
        return self.apply("concat", *parts, axis=axis)

    def sum_rows(self, a):
        return self.apply("sum_rows", a)

    def sum(self, a):
        return self.apply("sum", a)

    def scale(self, a, c: float):
        return self.apply("scale", a, c=float(c))

    def masked_fill(self, a, mask, value: float = MASK_VALUE):
        return self.apply("masked_fill", a, mask=mask, value=value)

    def dropout(self, a, rate: float):
        return self.apply("dropout", a, rate=float(rate))

    def gather_rows(self, table, index):
        return self.apply("gather_rows", table, index=index)

    def slice(self, a, index):
        return self.apply("slice", a, index=index)

    def transpose(self, a):
        return self.apply("transpose", a)

    def reshape(self, a, shape):
        return self.apply("reshape", a, shape=tuple(shape))


def backward(loss: Tensor, tape: Tape, params: ParamSet | None = None) -> dict[str, Tensor]:
    """Backpropagate a scalar loss through ``tape``.

    Returns ``d loss / d p`` for every named parameter; parameters the loss does
    not reach get zero tensors. Leaf gradients are also left on ``Tensor.grad``.
    """
    if loss.data.size != 1:
        raise ShapeError("backward", loss.shape, detail="loss must be a scalar of shape [1]")
    if tape.consumed:
        raise TapeError("backward called twice on the same tape")
    tape.consumed = True

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for rec in reversed(tape.records):
        g = grads.pop(id(rec.output), None)
        if g is None:
            continue
        in_grads = PRIMITIVES[rec.kind].backward(
            g, [t.data for t in rec.inputs], rec.output.data, rec.saved, rec.attrs
        )
        for t, gi in zip(rec.inputs, in_grads):
            if not t.requires_grad or gi is None:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi

    out: dict[str, Tensor] = {}
    for name, p in (params or {}).items():
        g = grads.get(id(p))
        p.grad = np.zeros_like(p.data) if g is None else np.asarray(g, dtype=np.float64).reshape(p.shape)
        out[name] = Tensor(p.grad)
    return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def grad_check(
    forward_fn: Callable[[Tape], Tensor],
    params: ParamSet,
    step: float = 1e-5,
    max_components: int | None = None,
    seed: int = 0,
    floor: float = 1e-6,
) -> dict[str, float]:
    """Compare tape gradients against central finite differences.

    ``forward_fn`` receives a fresh evaluation-mode tape and must return the
    scalar loss. With ``max_components`` set, at most that many components of
    each parameter are probed, chosen with a seeded rng.
    """
    def evaluate() -> float:
        return forward_fn(Tape(training=False)).item()

    base, again = evaluate(), evaluate()
    if base != again:
        raise NondeterminismError(f"forward_fn is not deterministic: {base!r} != {again!r}")

    tape = Tape(training=False)
    loss = forward_fn(tape)
    grads = backward(loss, tape, params)

    rng = np.random.default_rng(seed)
    worst: dict[str, float] = {}
    for name, p in params.items():
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_components is not None and flat.size > max_components:
            idx = np.sort(rng.choice(flat.size, size=max_components, replace=False))
        analytic = grads[name].data.reshape(-1)[idx]
        numeric = np.empty(len(idx))
        for n, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + step
            f_plus = evaluate()
            flat[i] = orig - step
            f_minus = evaluate()
            flat[i] = orig
            numeric[n] = (f_plus - f_minus) / (2.0 * step)
        worst[name] = float(relative_error(analytic, numeric, floor).max()) if len(idx) else 0.0
    return worst
