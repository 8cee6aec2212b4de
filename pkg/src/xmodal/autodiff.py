"""Reverse-mode autodiff over dense 2-D float arrays.

Everything is a (rows, cols) matrix; scalars are 1x1. Ops that touch a
grad-requiring input are recorded on a thread-local tape in application
order. `backward` replays the tape in exact reverse order and accumulates
gradients into Parameters, then clears the tape. `grad` returns cotangents
as graph nodes when `create_graph=True`, which is what lets the critic's
gradient penalty differentiate through an inner gradient.

Defaults to float64; `set_default_dtype(np.float32)` trades gradient-check
headroom for speed.
"""

from __future__ import annotations

import threading

import numpy as np

from .errors import ConfigError, ContractError, ShapeError

_DTYPE = np.float64


def set_default_dtype(dtype) -> None:
    global _DTYPE
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float64), np.dtype(np.float32)):
        raise ConfigError(f"unsupported dtype {dt}; use float64 or float32")
    _DTYPE = dt.type


def default_dtype():
    return _DTYPE


def as_matrix(data) -> np.ndarray:
    """Coerce scalar / 1-D / 2-D input to a 2-D array of the default dtype."""
    arr = np.asarray(data, dtype=_DTYPE)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    elif arr.ndim != 2:
        raise ShapeError(f"expected at most 2 dimensions, got shape {arr.shape}")
    return arr


class Tape:
    """Ordered record of the grad-requiring ops of a forward pass."""

    def __init__(self):
        self.nodes: list[Tensor] = []
        self.generation = 0

    def append(self, node: "Tensor") -> None:
        node._tape_ref = (self.generation, len(self.nodes))
        self.nodes.append(node)

    def clear(self) -> None:
        self.nodes = []
        self.generation += 1

    def __len__(self) -> int:
        return len(self.nodes)


class _ThreadState(threading.local):
    def __init__(self):
        self.tape = Tape()
        self.grad_enabled = True


_STATE = _ThreadState()


def active_tape() -> Tape:
    return _STATE.tape


class no_grad:
    """Context manager: ops inside produce plain constants, nothing is taped."""

    def __enter__(self):
        self._prev = _STATE.grad_enabled
        _STATE.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _STATE.grad_enabled = self._prev
        return False


class enable_grad:
    """Re-enable graph building inside a no_grad region.

    Needed by values that are themselves defined through a gradient (the
    critic's gradient penalty): the inner graph must exist even when the
    caller only wants a number.
    """

    def __enter__(self):
        self._prev = _STATE.grad_enabled
        _STATE.grad_enabled = True
        return self

    def __exit__(self, *exc):
        _STATE.grad_enabled = self._prev
        return False


def grad_enabled() -> bool:
    return _STATE.grad_enabled


class Tensor:
    """A 2-D array node, optionally carrying graph edges for backprop."""

    __slots__ = ("data", "parents", "vjps", "requires_grad", "_tape_ref")

    def __init__(self, data, requires_grad: bool = False):
        self.data = as_matrix(data)
        self.parents: tuple = ()
        self.vjps: tuple = ()
        self.requires_grad = requires_grad
        self._tape_ref = None

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a 1x1 tensor, got {self.data.shape}")
        return float(self.data[0, 0])

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self):
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return pow_const(self, p)


class Parameter(Tensor):
    """Trainable leaf: value plus gradient and Adam moment buffers."""

    __slots__ = ("grad", "adam_m", "adam_v", "step_count")

    def __init__(self, value):
        super().__init__(value, requires_grad=True)
        self.grad = np.zeros_like(self.data)
        self.adam_m = np.zeros_like(self.data)
        self.adam_v = np.zeros_like(self.data)
        self.step_count = 0


def _coerce(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def as_tensor(x) -> Tensor:
    """Wrap scalars/arrays as a constant Tensor; pass Tensors through."""
    return _coerce(x)


def _node(data: np.ndarray, parents: tuple, vjps: tuple) -> Tensor:
    if _STATE.grad_enabled and any(p.requires_grad for p in parents):
        out = Tensor(data)
        out.parents = parents
        out.vjps = vjps
        out.requires_grad = True
        _STATE.tape.append(out)
        return out
    return Tensor(data)


def _unbroadcast(g: Tensor, shape) -> Tensor:
    """Sum a cotangent back down to the shape of a broadcast operand."""
    if g.data.shape == shape:
        return g
    out = g
    if shape[0] == 1 and out.data.shape[0] != 1:
        out = sum_axis(out, axis=0)
    if shape[1] == 1 and out.data.shape[1] != 1:
        out = sum_axis(out, axis=1)
    return out


def _broadcast_to(g: Tensor, shape) -> Tensor:
    if g.data.shape == shape:
        return g
    return mul(g, Tensor(np.ones(shape, dtype=g.data.dtype)))


# ---------------------------------------------------------------------------
# arithmetic primitives


def add(a, b):
    a, b = _coerce(a), _coerce(b)
    out = a.data + b.data
    return _node(
        out,
        (a, b),
        (
            lambda g: _unbroadcast(g, a.data.shape),
            lambda g: _unbroadcast(g, b.data.shape),
        ),
    )


def sub(a, b):
    a, b = _coerce(a), _coerce(b)
    out = a.data - b.data
    return _node(
        out,
        (a, b),
        (
            lambda g: _unbroadcast(g, a.data.shape),
            lambda g: _unbroadcast(neg(g), b.data.shape),
        ),
    )


def neg(a):
    a = _coerce(a)
    return _node(-a.data, (a,), (lambda g: neg(g),))


def mul(a, b):
    a, b = _coerce(a), _coerce(b)
    out = a.data * b.data
    return _node(
        out,
        (a, b),
        (
            lambda g: _unbroadcast(mul(g, b), a.data.shape),
            lambda g: _unbroadcast(mul(g, a), b.data.shape),
        ),
    )


def div(a, b):
    a, b = _coerce(a), _coerce(b)
    out = _node(
        a.data / b.data,
        (a, b),
        (
            lambda g: _unbroadcast(div(g, b), a.data.shape),
            lambda g: _unbroadcast(neg(div(mul(g, out), b)), b.data.shape),
        ),
    )
    return out


def matmul(a, b):
    a, b = _coerce(a), _coerce(b)
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul mismatch: {a.data.shape} @ {b.data.shape}")
    out = a.data @ b.data
    return _node(
        out,
        (a, b),
        (
            lambda g: matmul(g, transpose(b)),
            lambda g: matmul(transpose(a), g),
        ),
    )


def transpose(a):
    a = _coerce(a)
    return _node(a.data.T.copy(), (a,), (lambda g: transpose(g),))


def sum_all(a):
    a = _coerce(a)
    out = np.array([[a.data.sum()]], dtype=a.data.dtype)
    return _node(out, (a,), (lambda g: _broadcast_to(g, a.data.shape),))


def sum_axis(a, axis: int):
    a = _coerce(a)
    out = a.data.sum(axis=axis, keepdims=True)
    return _node(out, (a,), (lambda g: _broadcast_to(g, a.data.shape),))


def mean_all(a):
    a = _coerce(a)
    return mul(sum_all(a), 1.0 / a.data.size)


def pow_const(a, p):
    a = _coerce(a)
    p = float(p)
    out = a.data**p
    return _node(out, (a,), (lambda g: mul(g, mul(pow_const(a, p - 1.0), p)),))


def square(a):
    a = _coerce(a)
    return _node(a.data * a.data, (a,), (lambda g: mul(g, mul(a, 2.0)),))


def sqrt(a):
    a = _coerce(a)
    out = _node(np.sqrt(a.data), (a,), (lambda g: div(g, mul(out, 2.0)),))
    return out


def exp(a):
    a = _coerce(a)
    out = _node(np.exp(a.data), (a,), (lambda g: mul(g, out),))
    return out


def log(a):
    a = _coerce(a)
    return _node(np.log(a.data), (a,), (lambda g: div(g, a),))


# ---------------------------------------------------------------------------
# activations


def relu(a):
    a = _coerce(a)
    mask = (a.data > 0).astype(a.data.dtype)
    return _node(a.data * mask, (a,), (lambda g: mul(g, Tensor(mask)),))


def leaky_relu(a, slope: float = 0.2):
    if not 0.0 < slope < 1.0:
        raise ConfigError(f"leaky_relu slope must be in (0, 1), got {slope}")
    a = _coerce(a)
    mask = np.where(a.data > 0, 1.0, slope).astype(a.data.dtype)
    return _node(a.data * mask, (a,), (lambda g: mul(g, Tensor(mask)),))


def sigmoid(a):
    a = _coerce(a)
    d = a.data
    out_data = np.empty_like(d)
    pos = d >= 0
    out_data[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ez = np.exp(d[~pos])
    out_data[~pos] = ez / (1.0 + ez)
    out = _node(out_data, (a,), (lambda g: mul(mul(g, out), sub(1.0, out)),))
    return out


def softmax_rows(a):
    a = _coerce(a)
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = _node(
        e / e.sum(axis=1, keepdims=True),
        (a,),
        (lambda g: mul(out, sub(g, sum_axis(mul(g, out), axis=1))),),
    )
    return out


def clip(a, lo: float, hi: float):
    a = _coerce(a)
    mask = ((a.data >= lo) & (a.data <= hi)).astype(a.data.dtype)
    return _node(np.clip(a.data, lo, hi), (a,), (lambda g: mul(g, Tensor(mask)),))


# ---------------------------------------------------------------------------
# structural primitives


def concat_cols(a, b):
    a, b = _coerce(a), _coerce(b)
    if a.data.shape[0] != b.data.shape[0]:
        raise ShapeError(f"concat_cols row mismatch: {a.data.shape} vs {b.data.shape}")
    w = a.data.shape[1]
    wb = b.data.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)
    return _node(
        out,
        (a, b),
        (
            lambda g: slice_cols(g, 0, w),
            lambda g: slice_cols(g, w, w + wb),
        ),
    )


def slice_cols(a, j0: int, j1: int):
    a = _coerce(a)
    total = a.data.shape[1]
    out = a.data[:, j0:j1].copy()
    return _node(out, (a,), (lambda g: _embed_cols(g, j0, total),))


def _embed_cols(g, j0: int, total: int):
    g = _coerce(g)
    w = g.data.shape[1]
    out = np.zeros((g.data.shape[0], total), dtype=g.data.dtype)
    out[:, j0 : j0 + w] = g.data
    return _node(out, (g,), (lambda h: slice_cols(h, j0, j0 + w),))


def concat_rows(a, b):
    a, b = _coerce(a), _coerce(b)
    if a.data.shape[1] != b.data.shape[1]:
        raise ShapeError(f"concat_rows col mismatch: {a.data.shape} vs {b.data.shape}")
    h = a.data.shape[0]
    hb = b.data.shape[0]
    out = np.concatenate([a.data, b.data], axis=0)
    return _node(
        out,
        (a, b),
        (
            lambda g: slice_rows(g, 0, h),
            lambda g: slice_rows(g, h, h + hb),
        ),
    )


def slice_rows(a, i0: int, i1: int):
    a = _coerce(a)
    total = a.data.shape[0]
    out = a.data[i0:i1, :].copy()
    return _node(out, (a,), (lambda g: _embed_rows(g, i0, total),))


def _embed_rows(g, i0: int, total: int):
    g = _coerce(g)
    h = g.data.shape[0]
    out = np.zeros((total, g.data.shape[1]), dtype=g.data.dtype)
    out[i0 : i0 + h, :] = g.data
    return _node(out, (g,), (lambda x: slice_rows(x, i0, i0 + h),))


def pick_cols(a, idx):
    """Per-row gather: out[i, 0] = a[i, idx[i]]."""
    a = _coerce(a)
    idx = np.asarray(idx, dtype=np.int64).reshape(-1)
    n, c = a.data.shape
    if idx.shape[0] != n:
        raise ShapeError(f"pick_cols: {idx.shape[0]} indices for {n} rows")
    if idx.size and ((idx < 0).any() or (idx >= c).any()):
        raise ShapeError(f"pick_cols: column index out of range [0, {c})")
    out = a.data[np.arange(n), idx].reshape(n, 1)
    return _node(out, (a,), (lambda g: _scatter_cols(g, idx, c),))


def _scatter_cols(g, idx, total: int):
    g = _coerce(g)
    n = g.data.shape[0]
    out = np.zeros((n, total), dtype=g.data.dtype)
    out[np.arange(n), idx] = g.data[:, 0]
    return _node(out, (g,), (lambda h: pick_cols(h, idx),))


def stop_gradient(a):
    a = _coerce(a)
    return Tensor(a.data.copy())


# ---------------------------------------------------------------------------
# affine layer


def linear(x, W, b):
    """Affine map x @ W + b with the bias row broadcast over rows."""
    x, W, b = _coerce(x), _coerce(W), _coerce(b)
    if x.data.shape[1] != W.data.shape[0]:
        raise ShapeError(
            f"linear: input {x.data.shape} does not conform with weight {W.data.shape}"
        )
    if b.data.shape != (1, W.data.shape[1]):
        raise ShapeError(
            f"linear: bias {b.data.shape} does not match weight {W.data.shape}"
        )
    return add(matmul(x, W), b)


def xavier_uniform(rng: np.random.Generator, d_in: int, d_out: int) -> np.ndarray:
    limit = float(np.sqrt(6.0 / (d_in + d_out)))
    return rng.uniform(-limit, limit, size=(d_in, d_out))


class Linear:
    """Trainable affine layer; weights drawn from the given rng."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator):
        self.W = Parameter(xavier_uniform(rng, d_in, d_out))
        self.b = Parameter(np.zeros((1, d_out)))

    def __call__(self, x):
        return linear(x, self.W, self.b)

    @property
    def params(self) -> list[Parameter]:
        return [self.W, self.b]


# ---------------------------------------------------------------------------
# reverse pass


def _replay(output: Tensor, capture: frozenset):
    """Walk the tape in reverse from `output`, accumulating cotangents.

    Returns (leaves, captured): `leaves` pairs every leaf tensor reached with
    its cotangent; `captured` maps id(t) -> cotangent for requested interior
    or leaf tensors.
    """
    tape = _STATE.tape
    one = Tensor(np.ones((1, 1), dtype=output.data.dtype))
    cot: dict[int, Tensor] = {id(output): one}
    holders: dict[int, Tensor] = {id(output): output}
    captured: dict[int, Tensor] = {}
    ref = output._tape_ref
    if ref is not None:
        gen, idx = ref
        if gen != tape.generation:
            raise ContractError(
                "output was recorded on a tape that has been cleared; "
                "re-run the forward pass"
            )
        for node in reversed(tape.nodes[: idx + 1]):
            nid = id(node)
            if nid not in cot:
                continue
            g = cot.pop(nid)
            holders.pop(nid)
            if nid in capture:
                captured[nid] = g
            for p, vjp in zip(node.parents, node.vjps):
                if not p.requires_grad:
                    continue
                contrib = vjp(g)
                pid = id(p)
                if pid in cot:
                    cot[pid] = add(cot[pid], contrib)
                else:
                    cot[pid] = contrib
                    holders[pid] = p
    leaves = [(holders[tid], g) for tid, g in cot.items()]
    for tid, g in cot.items():
        if tid in capture:
            captured[tid] = g
    return leaves, captured


def backward(loss) -> None:
    """Accumulate d(loss)/dθ into every reachable Parameter, then clear the tape."""
    loss = _coerce(loss)
    if loss.data.size != 1:
        raise ContractError(f"backward expects a scalar loss, got shape {loss.data.shape}")
    with no_grad():
        leaves, _ = _replay(loss, frozenset())
    for t, g in leaves:
        if isinstance(t, Parameter):
            t.grad += g.data
    _STATE.tape.clear()


def grad(output, wrt, create_graph: bool = False) -> list[Tensor]:
    """Cotangents of a scalar `output` for each tensor in `wrt`.

    Leaves the tape intact and touches no Parameter.grad. With
    `create_graph=True` the returned tensors are themselves differentiable.
    """
    output = _coerce(output)
    if output.data.size != 1:
        raise ContractError(f"grad expects a scalar output, got shape {output.data.shape}")
    wrt = list(wrt)
    capture = frozenset(id(w) for w in wrt)
    if create_graph:
        _, captured = _replay(output, capture)
    else:
        with no_grad():
            _, captured = _replay(output, capture)
    out = []
    for w in wrt:
        g = captured.get(id(w))
        if g is None:
            g = Tensor(np.zeros_like(w.data))
        out.append(g)
    return out
