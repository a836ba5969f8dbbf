"""Dense float64 tensors with a small reverse-mode tape.

Only the operators the embedding network and the triplet loss need are
provided. Every op accepts an optional leading batch axis so that a
whole mini-batch can share one tape when that is convenient; a single
image is simply a batch of one.

Usage::

    with Tape() as tape:
        y = sigmoid(linear(x, w))
        loss = sum_all(y)
    grads = tape.backward(loss)
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float64

_state = threading.local()
_counter_lock = threading.Lock()
_backward_calls = 0


class TapeError(RuntimeError):
    pass


def backward_call_count() -> int:
    """Total number of backward traversals run in this process."""
    return _backward_calls


class Tensor:
    """An array plus (optionally) a link into the active tape."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_node")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.array(data, dtype=DTYPE, copy=True)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self._node: Optional[int] = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.grad = None
        t.requires_grad = False
        t.name = None
        t._node = None
        return t

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    # arithmetic sugar, only what the losses use
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Node:
    inputs: Tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]
    op: str


@dataclass
class Tape:
    """Ordered record of operations; single use.

    Entering the tape as a context manager makes it the recording target
    for ops issued on the current thread.
    """

    nodes: List[_Node] = field(default_factory=list)
    consumed: bool = False

    def __enter__(self) -> "Tape":
        stack = getattr(_state, "stack", None)
        if stack is None:
            stack = _state.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state.stack.pop()

    def record(self, inputs, output, backward, op) -> None:
        if self.consumed:
            raise TapeError("cannot record onto a consumed tape")
        output._node = len(self.nodes)
        output.requires_grad = True
        self.nodes.append(_Node(tuple(inputs), output, backward, op))

    def backward(self, root: Tensor, seed=None, accumulate: bool = True) -> Dict[Tensor, np.ndarray]:
        return backward(self, root, seed=seed, accumulate=accumulate)


def _active_tape() -> Optional[Tape]:
    stack = getattr(_state, "stack", None)
    return stack[-1] if stack else None


def _emit(op: str, inputs: Sequence[Tensor], out: np.ndarray, rule) -> Tensor:
    """Wrap ``out`` and record it when any input needs a gradient."""
    result = Tensor._wrap(out)
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape.record(inputs, result, rule, op)
    return result


def backward(tape: Tape, root: Tensor, seed=None, accumulate: bool = True) -> Dict[Tensor, np.ndarray]:
    """Propagate ``seed`` (default 1 for a scalar root) back through ``tape``.

    Returns a mapping leaf -> gradient for every reachable leaf that
    requires a gradient. With ``accumulate`` the gradients are also added
    into each leaf's ``.grad``; leave it off when several tapes share the
    same parameters and the caller merges the results itself.
    """
    global _backward_calls
    if tape.consumed:
        raise TapeError("tape already consumed; tapes are single-use")
    if seed is None:
        if root.data.size != 1:
            raise TapeError(f"non-scalar root of shape {root.shape} needs an explicit seed")
        seed = np.ones_like(root.data)
    seed = np.asarray(seed, dtype=DTYPE)
    if seed.shape != root.shape:
        raise TapeError(f"seed shape {seed.shape} does not match root shape {root.shape}")
    tape.consumed = True
    with _counter_lock:
        _backward_calls += 1

    grads: Dict[int, np.ndarray] = {id(root): seed}
    leaves: Dict[int, Tensor] = {}
    if root.is_leaf and root.requires_grad:
        leaves[id(root)] = root
    stop = root._node if root._node is not None else -1
    for idx in range(stop, -1, -1):
        node = tape.nodes[idx]
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for inp, gin in zip(node.inputs, node.backward(g)):
            if gin is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gin
            else:
                grads[key] = gin
            if inp.is_leaf:
                leaves[key] = inp

    out: Dict[Tensor, np.ndarray] = {}
    for key, leaf in leaves.items():
        g = grads[key]
        out[leaf] = g
        if accumulate:
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
    return out


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    return _emit("add", (a, b), a.data + b.data,
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    return _emit("sub", (a, b), a.data - b.data,
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product with numpy broadcasting."""
    ad, bd = a.data, b.data
    return _emit("mul", (a, b), ad * bd,
                 lambda g: (_unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _emit("scale", (a,), a.data * c, lambda g: (g * c,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _emit("relu", (x,), np.where(mask, x.data, 0.0), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so exp never overflows
    d = x.data
    e = np.exp(-np.abs(d))
    y = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _emit("sigmoid", (x,), y, lambda g: (g * y * (1.0 - y),))


def softmax_spatial(x: Tensor, axes: Tuple[int, int] = (-2, -1)) -> Tensor:
    """Softmax over the two spatial axes (default: the last two)."""
    d = x.data
    z = d - d.max(axis=axes, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axes, keepdims=True)

    def rule(g):
        return (y * (g - (g * y).sum(axis=axes, keepdims=True)),)

    return _emit("softmax_spatial", (x,), y, rule)


# ---------------------------------------------------------------- reductions / shape


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _emit("sum_all", (x,), np.array(x.data.sum()),
                 lambda g: (np.broadcast_to(g, shape).copy(),))


def sum_last(x: Tensor) -> Tensor:
    """Sum over the last axis."""
    shape = x.shape
    return _emit("sum_last", (x,), x.data.sum(axis=-1),
                 lambda g: (np.broadcast_to(g[..., None], shape).copy(),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    return _emit("reshape", (x,), x.data.reshape(shape), lambda g: (g.reshape(old),))


def take(x: Tensor, index) -> Tensor:
    """Rows of ``x`` along axis 0; repeated indices accumulate on backward."""
    idx = np.asarray(index, dtype=np.intp)
    shape = x.shape

    def rule(g):
        out = np.zeros(shape, dtype=DTYPE)
        np.add.at(out, idx, g)
        return (out,)

    return _emit("take", (x,), x.data[idx], rule)


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = tuple(xs)
    sizes = [t.shape[axis] for t in xs]
    splits = np.cumsum(sizes)[:-1]
    return _emit("concat", xs, np.concatenate([t.data for t in xs], axis=axis),
                 lambda g: tuple(np.split(g, splits, axis=axis)))


def avgpool_full(x: Tensor) -> Tensor:
    """Mean over the spatial axes of a (..., H, W, C) map."""
    if x.data.ndim < 3:
        raise ValueError(f"avgpool_full expects (..., H, W, C), got {x.shape}")
    shape = x.shape
    hw = shape[-3] * shape[-2]

    def rule(g):
        return (np.broadcast_to(g[..., None, None, :] / hw, shape).copy(),)

    return _emit("avgpool_full", (x,), x.data.mean(axis=(-3, -2)), rule)


# ---------------------------------------------------------------- linear algebra


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """``x @ w.T (+ b)`` for x of shape (..., n) and w of shape (d, n)."""
    if w.data.ndim != 2 or x.shape[-1] != w.shape[1]:
        raise ValueError(f"linear: input shape {x.shape} does not conform to weight shape {w.shape}")
    if b is not None and b.shape != (w.shape[0],):
        raise ValueError(f"linear: bias shape {b.shape} does not match weight shape {w.shape}")
    xd, wd = x.data, w.data
    out = xd @ wd.T
    if b is not None:
        out = out + b.data

    def rule(g):
        gx = g @ wd
        gw = g.reshape(-1, g.shape[-1]).T @ xd.reshape(-1, xd.shape[-1])
        if b is None:
            return gx, gw
        return gx, gw, g.reshape(-1, g.shape[-1]).sum(axis=0)

    inputs = (x, w) if b is None else (x, w, b)
    return _emit("linear", inputs, out, rule)


def einsum(subscripts: str, a: Tensor, b: Tensor) -> Tensor:
    """Two-operand einsum with its reverse-mode rule.

    Every index of each operand must appear either in the other operand
    or in the output (no implicit summation over a single operand).
    """
    lhs, out_spec = subscripts.replace(" ", "").split("->")
    a_spec, b_spec = lhs.split(",")
    for own, other in ((a_spec, b_spec), (b_spec, a_spec)):
        loose = set(own) - set(other) - set(out_spec)
        if loose:
            raise ValueError(f"einsum {subscripts!r}: indices {sorted(loose)} are reduced within one operand")
    ad, bd = a.data, b.data
    out = np.einsum(subscripts, ad, bd, optimize=True)

    def rule(g):
        ga = np.einsum(f"{out_spec},{b_spec}->{a_spec}", g, bd, optimize=True)
        gb = np.einsum(f"{out_spec},{a_spec}->{b_spec}", g, ad, optimize=True)
        return ga, gb

    return _emit("einsum", (a, b), out, rule)


def conv2d(x: Tensor, filters: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of a (N, H, W, Cin) or (H, W, Cin) input.

    ``filters`` has shape (kh, kw, Cin, Cout). Implemented with an explicit
    patch matrix so forward and backward are one GEMM each.
    """
    if stride < 1 or padding < 0:
        raise ValueError(f"conv2d: bad stride={stride} / padding={padding}")
    squeeze = x.data.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4 or filters.data.ndim != 4:
        raise ValueError(f"conv2d: input {x.shape} / filters {filters.shape} have wrong rank")
    n, h, w, cin = xd.shape
    kh, kw, fcin, cout = filters.shape
    if fcin != cin:
        raise ValueError(f"conv2d: input channels of {x.shape} do not match filters {filters.shape}")
    if bias is not None and bias.shape != (cout,):
        raise ValueError(f"conv2d: bias shape {bias.shape} does not match filters {filters.shape}")
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise ValueError(f"conv2d: kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1

    xp = np.pad(xd, ((0, 0), (padding, padding), (padding, padding), (0, 0))) if padding else xd
    # patch layout (kh, kw, Cin) matches filters.reshape(-1, Cout)
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride][:, :ho, :wo]
    cols2 = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(n * ho * wo, kh * kw * cin)
    wmat = filters.data.reshape(kh * kw * cin, cout)
    out = (cols2 @ wmat).reshape(n, ho, wo, cout)
    if bias is not None:
        out += bias.data
    if squeeze:
        out = out[0]

    def rule(g):
        g2 = g.reshape(n * ho * wo, cout)
        gw = (cols2.T @ g2).reshape(kh, kw, cin, cout)
        gb = g2.sum(axis=0) if bias is not None else None
        if not x.requires_grad:
            return (None, gw) if bias is None else (None, gw, gb)
        gcols = (g2 @ wmat.T).reshape(n, ho, wo, kh, kw, cin)
        gxp = np.zeros((n, hp, wp, cin), dtype=DTYPE)
        for i in range(kh):
            for j in range(kw):
                gxp[:, i:i + stride * (ho - 1) + 1:stride,
                    j:j + stride * (wo - 1) + 1:stride, :] += gcols[:, :, :, i, j, :]
        gx = gxp[:, padding:padding + h, padding:padding + w, :]
        if squeeze:
            gx = gx[0]
        if bias is None:
            return gx, gw
        return gx, gw, gb

    inputs = (x, filters) if bias is None else (x, filters, bias)
    return _emit("conv2d", inputs, out, rule)


def l2_normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Scale each row (last axis) to unit norm; norms below ``eps`` are clamped."""
    d = x.data
    norm = np.sqrt((d * d).sum(axis=-1, keepdims=True))
    clamped = norm < eps
    denom = np.where(clamped, eps, norm)
    y = d / denom

    def rule(g):
        # inside the clamp the map is linear: g / eps
        proj = g - y * (g * y).sum(axis=-1, keepdims=True)
        return (np.where(clamped, g, proj) / denom,)

    return _emit("l2_normalize", (x,), y, rule)


def squared_distance(a: Tensor, b: Tensor) -> Tensor:
    """Row-wise squared Euclidean distance."""
    diff = sub(a, b)
    return sum_last(mul(diff, diff))


# ---------------------------------------------------------------- gradient checking


@dataclass
class GradcheckReport:
    max_rel_err: Dict[str, float]
    flagged: Dict[str, List[Tuple[int, ...]]]
    nonfinite: List[str]
    tol: float
    checked: int

    @property
    def ok(self) -> bool:
        return not self.nonfinite and all(not v for v in self.flagged.values())

    @property
    def worst(self) -> float:
        return max(self.max_rel_err.values(), default=0.0)

    def summary(self) -> str:
        lines = [f"{name}: max rel err {err:.3e}" + ("  FLAGGED" if self.flagged[name] else "")
                 for name, err in self.max_rel_err.items()]
        lines += [f"{name}: non-finite" for name in self.nonfinite]
        return "\n".join(lines)


def _relative_error(a: float, n: float, floor: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), floor)


def gradcheck(f: Callable[[], Tensor], params: Dict[str, Tensor], h: float = 1e-5,
              tol: float = 1e-4, floor: float = 1e-8, max_entries: Optional[int] = None,
              rng: Optional[np.random.Generator] = None) -> GradcheckReport:
    """Compare tape gradients of ``f`` against central differences.

    ``f`` must build its graph on the active tape from the tensors in
    ``params`` and return a scalar. Relative error is
    ``|a - n| / max(|a|, |n|, floor)``. With ``max_entries`` a random
    subset of at most that many entries per parameter is probed.
    """
    rng = rng or np.random.default_rng(0)
    for p in params.values():
        p.requires_grad = True
        p.grad = None
    with Tape() as tape:
        root = f()
    analytic = backward(tape, root, accumulate=False)

    max_err: Dict[str, float] = {}
    flagged: Dict[str, List[Tuple[int, ...]]] = {}
    nonfinite: List[str] = []
    checked = 0
    for name, p in params.items():
        ga = analytic.get(p, np.zeros_like(p.data))
        max_err[name] = 0.0
        flagged[name] = []
        if not np.all(np.isfinite(ga)) or not np.all(np.isfinite(p.data)):
            nonfinite.append(name)
            continue
        flat = np.arange(p.data.size)
        if max_entries is not None and flat.size > max_entries:
            flat = rng.choice(flat, size=max_entries, replace=False)
        for fi in flat:
            idx = np.unravel_index(fi, p.shape)
            orig = p.data[idx]
            p.data[idx] = orig + h
            fp = float(f().data)
            p.data[idx] = orig - h
            fm = float(f().data)
            p.data[idx] = orig
            num = (fp - fm) / (2 * h)
            checked += 1
            if not (np.isfinite(fp) and np.isfinite(fm)):
                if name not in nonfinite:
                    nonfinite.append(name)
                continue
            err = _relative_error(float(ga[idx]), num, floor)
            max_err[name] = max(max_err[name], err)
            if err > tol:
                flagged[name].append(tuple(int(i) for i in idx))
    return GradcheckReport(max_err, flagged, nonfinite, tol, checked)


def merge_grads(parts: Iterable[Dict[Tensor, np.ndarray]]) -> Dict[Tensor, np.ndarray]:
    """Sum per-tape gradient maps in iteration order."""
    total: Dict[Tensor, np.ndarray] = {}
    for part in parts:
        for leaf, g in part.items():
            if leaf in total:
                total[leaf] = total[leaf] + g
            else:
                total[leaf] = g.copy()
    return total
