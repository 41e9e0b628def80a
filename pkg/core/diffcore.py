#!/usr/bin/env python3
"""
Array tensors with reverse-mode automatic differentiation.

Each operator returns a new Tensor holding its forward value, its parents
and a closure that pushes the output gradient back to the parents. backward()
orders the graph topologically and runs the closures once each, in reverse.

Operators take optional leading batch axes; spatial operators expect
(..., H, W, C) and temporal ones (..., T, C).
"""

import logging
from contextlib import contextmanager
from typing import Any, Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from core.stdown_core import SQRT_EPS, NonFiniteError, ShapeMismatchError

logger = logging.getLogger(__name__)

GELU_C = np.sqrt(2.0 / np.pi)
GELU_K = 0.044715

# Per-sample tensors have at most 4 axes; operators may add one leading batch axis.
MAX_SAMPLE_AXES = 4
MAX_AXES = MAX_SAMPLE_AXES + 1

_DEBUG = False
_TRACE: Optional[List[str]] = None


# ============================================================================
# TENSOR & GRAPH
# ============================================================================

class Tensor:
    """Node of the computation graph."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_op", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str = "",
                 _parents: Tuple["Tensor", ...] = (), _op: str = "leaf"):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data, dtype=np.float64)
        if self.data.ndim > MAX_AXES:
            raise ShapeMismatchError(
                f"Tensors support {MAX_SAMPLE_AXES} axes plus a batch axis, got {self.data.ndim}",
                {"shape": list(self.data.shape), "max_axes": MAX_AXES}
            )
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = _parents
        self._op = _op
        self._backward: Callable[[np.ndarray], None] = lambda g: None

    def __repr__(self):
        label = f" '{self.name}'" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def op(self) -> str:
        return self._op

    @property
    def parents(self) -> Tuple["Tensor", ...]:
        return self._parents

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    # operator sugar
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __neg__(self): return scale(self, -1.0)
    def __getitem__(self, idx): return getitem(self, idx)


def tensor(data, requires_grad: bool = False, dtype=None, name: str = "") -> Tensor:
    array = np.array(data, dtype=dtype if dtype is not None else None, copy=True)
    if not np.issubdtype(array.dtype, np.floating):
        array = array.astype(np.float64)
    return Tensor(array, requires_grad=requires_grad, name=name)


def _as_tensor(x: Union[Tensor, float, np.ndarray], like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _node(data: np.ndarray, parents: Tuple[Tensor, ...], op: str,
          backward: Callable[[np.ndarray], None]) -> Tensor:
    if _DEBUG and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"Non-finite output from '{op}'", {"op": op})
    if _TRACE is not None:
        _TRACE.append(op)
    out = Tensor(data, requires_grad=any(p.requires_grad for p in parents),
                 _parents=parents, _op=op)
    if out.requires_grad:
        out._backward = backward
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.dtype, copy=True)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum g down to shape after numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def topological_order(root: Tensor) -> List[Tensor]:
    """Nodes reachable from root, parents before children (iterative DFS)."""
    order: List[Tensor] = []
    seen = set()
    stack: List[Tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in reversed(node._parents):
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """
    Fill .grad of every requires-grad tensor reachable from a scalar loss.

    Gradients from earlier passes are discarded, so repeated calls on the
    same graph give identical results.
    """
    if loss.data.size != 1:
        raise ShapeMismatchError("backward() needs a scalar loss",
                                 {"shape": list(loss.shape)})
    order = topological_order(loss)
    for node in order:
        node.grad = None
    if not loss.requires_grad:
        return
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node.grad is not None and node._parents:
            node._backward(node.grad)


@contextmanager
def debug_guard(enabled: bool = True) -> Iterator[None]:
    """Raise NonFiniteError as soon as any operator produces NaN or Inf."""
    global _DEBUG
    previous = _DEBUG
    _DEBUG = enabled
    try:
        yield
    finally:
        _DEBUG = previous


@contextmanager
def trace_ops() -> Iterator[List[str]]:
    """Record the tag of every operator evaluated inside the block."""
    global _TRACE
    previous = _TRACE
    _TRACE = []
    try:
        yield _TRACE
    finally:
        _TRACE = previous


# ============================================================================
# ELEMENTWISE
# ============================================================================

def add(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)

    def bw(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))
    return _node(a.data + b.data, (a, b), "add", bw)


def sub(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)

    def bw(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))
    return _node(a.data - b.data, (a, b), "sub", bw)


def mul(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)

    def bw(g):
        _accumulate(a, _unbroadcast(g * b.data, a.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.shape))
    return _node(a.data * b.data, (a, b), "mul", bw)


def div(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    out = a.data / b.data

    def bw(g):
        _accumulate(a, _unbroadcast(g / b.data, a.shape))
        _accumulate(b, _unbroadcast(-g * out / b.data, b.shape))
    return _node(out, (a, b), "div", bw)


def scale(x: Tensor, s: float) -> Tensor:
    def bw(g):
        _accumulate(x, g * s)
    return _node(x.data * s, (x,), "scale", bw)


def square(x: Tensor) -> Tensor:
    def bw(g):
        _accumulate(x, 2.0 * x.data * g)
    return _node(x.data * x.data, (x,), "square", bw)


def sqrt_eps(x: Tensor, eps: float = SQRT_EPS) -> Tensor:
    """sqrt(x + eps); finite gradient at x = 0."""
    out = np.sqrt(x.data + eps)

    def bw(g):
        _accumulate(x, g * 0.5 / out)
    return _node(out, (x,), "sqrt_eps", bw)


def gelu(x: Tensor) -> Tensor:
    """tanh approximation: 0.5 x (1 + tanh(c (x + k x^3)))."""
    v = x.data
    inner = GELU_C * (v + GELU_K * v ** 3)
    th = np.tanh(inner)
    out = 0.5 * v * (1.0 + th)

    def bw(g):
        dinner = GELU_C * (1.0 + 3.0 * GELU_K * v ** 2)
        _accumulate(x, g * (0.5 * (1.0 + th) + 0.5 * v * (1.0 - th ** 2) * dinner))
    return _node(out, (x,), "gelu", bw)


def sigmoid(x: Tensor) -> Tensor:
    v = x.data
    # split by sign to avoid overflow in exp
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)

    def bw(g):
        _accumulate(x, g * out * (1.0 - out))
    return _node(out, (x,), "sigmoid", bw)


# ============================================================================
# SHAPE & REDUCTION
# ============================================================================

def reduce_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(x, np.broadcast_to(g, x.shape))
    return _node(np.asarray(out, dtype=x.dtype), (x,), "reduce_sum", bw)


def reduce_mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.mean(x.data, axis=axis, keepdims=keepdims)
    n = x.data.size // max(np.asarray(out).size, 1)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(x, np.broadcast_to(g / n, x.shape))
    return _node(np.asarray(out, dtype=x.dtype), (x,), "reduce_mean", bw)


def getitem(x: Tensor, idx) -> Tensor:
    out = x.data[idx]

    def bw(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        _accumulate(x, full)
    return _node(np.array(out, copy=True), (x,), "getitem", bw)


def squeeze(x: Tensor, axis: int) -> Tensor:
    def bw(g):
        _accumulate(x, np.expand_dims(g, axis))
    return _node(np.squeeze(x.data, axis=axis), (x,), "squeeze", bw)


def reshape(x: Tensor, shape: Tuple[int, ...]) -> Tensor:
    def bw(g):
        _accumulate(x, g.reshape(x.shape))
    return _node(x.data.reshape(shape), (x,), "reshape", bw)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def bw(g):
        _accumulate(x, np.transpose(g, inverse))
    return _node(np.ascontiguousarray(np.transpose(x.data, axes)), (x,), "transpose", bw)


# ============================================================================
# LINEAR & POOLING
# ============================================================================

def _sum_leading(a: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Sum of outer products a[..., i] g[..., j] over all leading axes."""
    lead = a.ndim - 1
    return np.tensordot(a, g, axes=(list(range(lead)), list(range(lead))))


def pointwise_linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """x @ W + b over the last axis; W is Cin x Cout."""
    if x.shape[-1] != w.shape[0]:
        raise ShapeMismatchError("pointwise_linear channel mismatch",
                                 {"x": list(x.shape), "w": list(w.shape)})
    out = x.data @ w.data
    if b is not None:
        out = out + b.data
    parents = (x, w) if b is None else (x, w, b)

    def bw(g):
        _accumulate(x, g @ w.data.T)
        _accumulate(w, _sum_leading(x.data, g))
        if b is not None:
            _accumulate(b, g.reshape(-1, g.shape[-1]).sum(axis=0))
    return _node(out, parents, "pointwise_linear", bw)


def global_avg_pool(x: Tensor) -> Tensor:
    """(..., H, W, C) -> (..., C)."""
    h, w = x.shape[-3], x.shape[-2]

    def bw(g):
        _accumulate(x, np.broadcast_to(g[..., None, None, :] / (h * w), x.shape))
    return _node(x.data.mean(axis=(-3, -2)), (x,), "global_avg_pool", bw)


def _box_sum(a: np.ndarray, window: int) -> np.ndarray:
    r = window // 2
    h, w = a.shape[-3], a.shape[-2]
    pad = [(0, 0)] * (a.ndim - 3) + [(r, r), (r, r), (0, 0)]
    padded = np.pad(a, pad)
    out = np.zeros_like(a)
    for di in range(window):
        for dj in range(window):
            out += padded[..., di:di + h, dj:dj + w, :]
    return out


def local_avg_pool(x: Tensor, window: int) -> Tensor:
    """Same-size box mean over in-image pixels of an odd window."""
    if window < 1 or window % 2 == 0:
        raise ShapeMismatchError(f"Pooling window must be odd and >= 1, got {window}")
    h, w = x.shape[-3], x.shape[-2]
    count = _box_sum(np.ones((h, w, 1), dtype=x.dtype), window)
    out = _box_sum(x.data, window) / count

    def bw(g):
        _accumulate(x, _box_sum(g / count, window))
    return _node(out, (x,), "local_avg_pool", bw)


# ============================================================================
# CONVOLUTIONS
# ============================================================================

def conv2d(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None,
           dilation: int = 1, padding: str = "same") -> Tensor:
    """
    Dilated 2-D convolution of (..., H, W, Cin) with a kh x kw x Cin x Cout kernel.

    padding='same' zero-pads to keep H x W; 'none' shrinks each axis by
    d*(k-1). Kernel sides must be odd.
    """
    kh, kw, cin, cout = kernel.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeMismatchError("Kernel sides must be odd", {"kernel": list(kernel.shape)})
    if dilation < 1:
        raise ShapeMismatchError(f"Dilation must be >= 1, got {dilation}")
    if x.shape[-1] != cin:
        raise ShapeMismatchError("conv2d channel mismatch",
                                 {"x": list(x.shape), "kernel": list(kernel.shape)})
    eh, ew = dilation * (kh - 1) + 1, dilation * (kw - 1) + 1
    h, w = x.shape[-3], x.shape[-2]
    if padding == "same":
        ph, pw = (eh - 1) // 2, (ew - 1) // 2
        pad = [(0, 0)] * (x.data.ndim - 3) + [(ph, ph), (pw, pw), (0, 0)]
        xp = np.pad(x.data, pad)
        ho, wo = h, w
    elif padding == "none":
        if h < eh or w < ew:
            raise ShapeMismatchError(
                "Input smaller than effective kernel with padding=none",
                {"input": [h, w], "effective": [eh, ew]}
            )
        ph = pw = 0
        xp = x.data
        ho, wo = h - eh + 1, w - ew + 1
    else:
        raise ValueError(f"Unknown padding '{padding}'. Available: same, none")

    k = kernel.data
    out = np.zeros(x.shape[:-3] + (ho, wo, cout), dtype=x.dtype)
    for a in range(kh):
        for b in range(kw):
            out += xp[..., a * dilation:a * dilation + ho, b * dilation:b * dilation + wo, :] @ k[a, b]
    if bias is not None:
        out += bias.data
    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def bw(g):
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for a in range(kh):
                for b in range(kw):
                    gxp[..., a * dilation:a * dilation + ho, b * dilation:b * dilation + wo, :] += g @ k[a, b].T
            _accumulate(x, gxp[..., ph:ph + h, pw:pw + w, :])
        if kernel.requires_grad:
            gk = np.zeros_like(k)
            for a in range(kh):
                for b in range(kw):
                    window = xp[..., a * dilation:a * dilation + ho, b * dilation:b * dilation + wo, :]
                    gk[a, b] = _sum_leading(window, g)
            _accumulate(kernel, gk)
        if bias is not None:
            _accumulate(bias, g.reshape(-1, cout).sum(axis=0))
    return _node(out, parents, "conv2d", bw)


def conv1d_time(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None,
                dilation: int = 1, padding: str = "causal") -> Tensor:
    """
    Dilated temporal convolution of (..., T, C) with a k x C x C' kernel.

    Tap k-1 reads the current step, tap a reads step t - d*(k-1-a).
    padding='causal' prepends d*(k-1) zeros; 'none' shortens T by d*(k-1).
    """
    k_len, cin, cout = kernel.shape
    if dilation < 1:
        raise ShapeMismatchError(f"Dilation must be >= 1, got {dilation}")
    if x.shape[-1] != cin:
        raise ShapeMismatchError("conv1d_time channel mismatch",
                                 {"x": list(x.shape), "kernel": list(kernel.shape)})
    span = dilation * (k_len - 1)
    t = x.shape[-2]
    if padding == "causal":
        pad = [(0, 0)] * (x.data.ndim - 2) + [(span, 0), (0, 0)]
        xp = np.pad(x.data, pad)
        front = span
        to = t
    elif padding == "none":
        if t < span + 1:
            raise ShapeMismatchError(
                "Sequence shorter than effective kernel with padding=none",
                {"length": t, "effective": span + 1}
            )
        xp = x.data
        front = 0
        to = t - span
    else:
        raise ValueError(f"Unknown padding '{padding}'. Available: causal, none")

    k = kernel.data
    out = np.zeros(x.shape[:-2] + (to, cout), dtype=x.dtype)
    for a in range(k_len):
        out += xp[..., a * dilation:a * dilation + to, :] @ k[a]
    if bias is not None:
        out += bias.data
    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def bw(g):
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for a in range(k_len):
                gxp[..., a * dilation:a * dilation + to, :] += g @ k[a].T
            _accumulate(x, gxp[..., front:front + t, :])
        if kernel.requires_grad:
            gk = np.zeros_like(k)
            for a in range(k_len):
                gk[a] = _sum_leading(xp[..., a * dilation:a * dilation + to, :], g)
            _accumulate(kernel, gk)
        if bias is not None:
            _accumulate(bias, g.reshape(-1, cout).sum(axis=0))
    return _node(out, parents, "conv1d_time", bw)


# ============================================================================
# GRADIENT CHECK
# ============================================================================

Inputs = Union[np.ndarray, Dict[str, np.ndarray]]


def _wrap(inputs: Inputs) -> Union[Tensor, Dict[str, Tensor]]:
    if isinstance(inputs, dict):
        return {k: Tensor(np.array(v, dtype=np.float64), requires_grad=True, name=k)
                for k, v in inputs.items()}
    return Tensor(np.array(inputs, dtype=np.float64), requires_grad=True)


def grad_check(
    f: Callable[[Any], Tensor],
    x: Inputs,
    h: float = 1e-5,
    max_elements: Optional[int] = None,
    seed: int = 0
) -> float:
    """
    Largest relative error between autodiff and central differences.

    x is one array or a dict of named arrays; f receives Tensors of the same
    structure and returns a scalar. Relative error uses the denominator
    max(|a|, |n|, 1e-8). With max_elements, a seeded random subset of
    entries is probed.
    """
    arrays = x if isinstance(x, dict) else {"x": x}
    arrays = {k: np.array(v, dtype=np.float64) for k, v in arrays.items()}

    def call(current: Dict[str, np.ndarray]) -> float:
        args = {k: Tensor(v) for k, v in current.items()}
        return f(args if isinstance(x, dict) else args["x"]).item()

    wrapped = _wrap(arrays if isinstance(x, dict) else arrays["x"])
    loss = f(wrapped)
    backward(loss)
    analytic = wrapped if isinstance(wrapped, dict) else {"x": wrapped}

    probes: List[Tuple[str, Tuple[int, ...]]] = [
        (k, idx) for k, v in arrays.items() for idx in np.ndindex(v.shape)
    ]
    if max_elements is not None and len(probes) > max_elements:
        rng = np.random.default_rng(seed)
        pick = rng.choice(len(probes), size=max_elements, replace=False)
        probes = [probes[i] for i in sorted(pick)]

    worst = 0.0
    for name, idx in probes:
        base = arrays[name][idx]
        plus = dict(arrays)
        minus = dict(arrays)
        plus[name] = arrays[name].copy()
        minus[name] = arrays[name].copy()
        plus[name][idx] = base + h
        minus[name][idx] = base - h
        step = plus[name][idx] - minus[name][idx]
        numeric = (call(plus) - call(minus)) / step
        grad = analytic[name].grad
        a = 0.0 if grad is None else float(grad[idx])
        err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        worst = max(worst, err)
    return worst


SUITE_TOLERANCE = 1e-4


def _suite_cases(rng: np.random.Generator) -> Dict[str, Callable[[], Tuple[Callable, Inputs]]]:
    """Builders that draw one random (f, inputs) instance per call."""
    def rand(*shape):
        return rng.standard_normal(shape)

    def weights(*shape):
        # magnitudes kept away from zero so no probed gradient vanishes
        return rng.uniform(0.5, 1.5, shape) * rng.choice([-1.0, 1.0], shape)

    def weighted(op, shape=(3, 4)):
        def case():
            w = weights(*op(Tensor(np.zeros(shape))).shape)
            return (lambda t: reduce_sum(mul(op(t), w)), rand(*shape))
        return case

    def binary(op):
        def case():
            inputs = {"a": rand(3, 4), "b": rng.uniform(1.0, 2.0, (1, 4))}
            return (lambda t: reduce_sum(square(op(t["a"], t["b"]))), inputs)
        return case

    def conv2d_case():
        d = int(rng.integers(1, 3))
        padding = "same" if rng.random() < 0.5 else "none"
        inputs = {"x": rand(2, 7, 6, 2), "k": rand(3, 3, 2, 3) * 0.5, "b": rand(3)}
        return (lambda t: reduce_sum(square(conv2d(t["x"], t["k"], t["b"], d, padding))), inputs)

    def conv1d_case():
        d = int(rng.integers(1, 3))
        padding = "causal" if rng.random() < 0.5 else "none"
        inputs = {"x": rand(3, 6, 2), "k": rand(2, 2, 3) * 0.5, "b": rand(3)}
        return (lambda t: reduce_sum(square(conv1d_time(t["x"], t["k"], t["b"], d, padding))), inputs)

    def linear_case():
        inputs = {"x": rand(4, 3), "w": rand(3, 2), "b": rand(2)}
        return (lambda t: reduce_sum(square(pointwise_linear(t["x"], t["w"], t["b"]))), inputs)

    def chain_case():
        inputs = {"x": rand(6, 6, 2), "k": rand(3, 3, 2, 2) * 0.5}
        return (lambda t: reduce_mean(sigmoid(conv2d(t["x"], t["k"]))), inputs)

    return {
        "sum": lambda: (reduce_sum, rand(4, 5)),
        "mean": lambda: (reduce_mean, rand(4, 5)),
        "add": binary(add),
        "sub": binary(sub),
        "mul": binary(mul),
        "div": binary(div),
        "scale": weighted(lambda t: scale(t, -2.5)),
        "square": weighted(square),
        "sqrt_eps": weighted(lambda t: sqrt_eps(square(t))),
        "gelu": weighted(gelu),
        "sigmoid": weighted(sigmoid),
        "getitem": weighted(lambda t: getitem(t, (slice(None), slice(1, None)))),
        "squeeze": weighted(lambda t: squeeze(t, 0), (1, 4)),
        "reshape": weighted(lambda t: reshape(t, (4, 3))),
        "transpose": weighted(lambda t: transpose(t, (1, 0))),
        "global_avg_pool": weighted(global_avg_pool, (2, 4, 5, 3)),
        "local_avg_pool": weighted(lambda t: local_avg_pool(t, 3), (5, 4, 2)),
        "pointwise_linear": linear_case,
        "conv2d": conv2d_case,
        "conv1d_time": conv1d_case,
        "conv2d_sigmoid_chain": chain_case,
    }


def operator_suite(instances: int = 20, seed: int = 0,
                   ops: Optional[Sequence[str]] = None,
                   tolerance: float = SUITE_TOLERANCE) -> Dict[str, Dict[str, Any]]:
    """Run grad_check on random instances of every operator."""
    rng = np.random.default_rng(seed)
    cases = _suite_cases(rng)
    names = list(cases) if not ops else list(ops)
    unknown = [n for n in names if n not in cases]
    if unknown:
        raise ValueError(f"Unknown operators: {unknown}. Available: {sorted(cases)}")
    results: Dict[str, Dict[str, Any]] = {}
    for name in names:
        worst = 0.0
        for _ in range(instances):
            f, inputs = cases[name]()
            worst = max(worst, grad_check(f, inputs))
        results[name] = {"max_rel_error": worst, "tolerance": tolerance,
                         "passed": bool(worst < tolerance), "instances": instances}
        logger.info("grad_check %s: %.3e (tol %.0e)", name, worst, tolerance)
    return results


def suite_operator_names() -> List[str]:
    return list(_suite_cases(np.random.default_rng(0)))


__all__ = [
    "Tensor", "tensor", "backward", "topological_order", "debug_guard", "trace_ops",
    "add", "sub", "mul", "div", "scale", "square", "sqrt_eps", "gelu", "sigmoid",
    "reduce_sum", "reduce_mean", "getitem", "squeeze", "reshape", "transpose",
    "pointwise_linear", "global_avg_pool", "local_avg_pool",
    "conv2d", "conv1d_time", "grad_check", "operator_suite", "suite_operator_names",
]
