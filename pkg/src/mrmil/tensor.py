"""Minimal reverse-mode differentiable tensor engine.

Only the operations the multi-resolution network composes are provided:
2-D convolution, relu, sigmoid, addition, channel concatenation, nearest
upsampling, 2x2 average pooling and a handful of reductions used by losses
and tests.  Everything is float64.

Graphs are built on the fly (define-by-run).  Each operation whose inputs
require gradients appends a node to a :class:`Graph`; :func:`backward` walks
those nodes in exact reverse order of recording and then marks the graph as
consumed, so a second backward without a fresh forward raises.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterator, Sequence

import numpy as np

DTYPE = np.float64

_seq = itertools.count()
_corrupted_ops: set[str] = set()
_recording = True
_relu_masks: list[bytes] | None = None


class GraphError(RuntimeError):
    """Raised on misuse of the recorded graph (reuse, non-scalar loss)."""


class Tensor:
    """A float64 array plus gradient bookkeeping.

    Feature maps are 4-D ``(batch, channels, height, width)``; parameters such
    as biases or the pooling ``beta`` may have lower rank.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_node")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._node: Node | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def backward(self) -> None:
        backward(self)

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"


class Node:
    __slots__ = ("op", "inputs", "output", "backward_fn", "seq", "graph")

    def __init__(self, op: str, inputs: Sequence[Tensor], output: Tensor,
                 backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]):
        self.op = op
        self.inputs = tuple(inputs)
        self.output = output
        self.backward_fn = backward_fn
        self.seq = next(_seq)
        self.graph: Graph | None = None


class Graph:
    """Ordered record of operations for one forward pass."""

    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self.consumed = False

    def __len__(self) -> int:
        return len(self.nodes)

    def add(self, node: Node) -> None:
        node.graph = self
        self.nodes.append(node)

    def absorb(self, other: "Graph") -> None:
        # keep global recording order when two independent sub-graphs meet
        for node in other.nodes:
            node.graph = self
        self.nodes = sorted(self.nodes + other.nodes, key=lambda n: n.seq)
        other.nodes = []


def _record(op: str, inputs: Sequence[Tensor], out_data: np.ndarray,
            backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> Tensor:
    out = Tensor(out_data)
    if not _recording or not any(t.requires_grad for t in inputs):
        return out
    out.requires_grad = True
    graphs = []
    for t in inputs:
        if t._node is not None:
            g = t._node.graph
            if g.consumed:
                raise GraphError(f"input to {op} belongs to a graph that was already back-propagated")
            if all(g is not h for h in graphs):
                graphs.append(g)
    if graphs:
        graph = max(graphs, key=len)
        for g in graphs:
            if g is not graph:
                graph.absorb(g)
    else:
        graph = Graph()
    node = Node(op, inputs, out, backward_fn)
    graph.add(node)
    out._node = node
    return out


def backward(loss: Tensor) -> Graph | None:
    """Back-propagate from a scalar ``loss``; leaf gradients accumulate in ``.grad``."""
    if loss.data.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    node = loss._node
    if node is None:
        return None
    graph = node.graph
    if graph.consumed:
        raise GraphError("graph already back-propagated; run a new forward pass first")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for n in reversed(graph.nodes):
        g_out = grads.pop(id(n.output), None)
        if g_out is None:
            continue
        g_ins = n.backward_fn(g_out)
        if n.op in _corrupted_ops:
            g_ins = [None if g is None else g * 1.01 + 1e-3 for g in g_ins]
        for t, g in zip(n.inputs, g_ins):
            if g is None or not t.requires_grad:
                continue
            if t._node is None:
                t.grad = g.copy() if t.grad is None else t.grad + g
            else:
                key = id(t)
                grads[key] = g if key not in grads else grads[key] + g
    graph.consumed = True
    for n in graph.nodes:
        n.backward_fn = _spent
    return graph


def _spent(_):
    raise GraphError("graph already back-propagated")


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Run operations without recording them (inference)."""
    global _recording
    previous, _recording = _recording, False
    try:
        yield
    finally:
        _recording = previous


@contextlib.contextmanager
def track_relu_masks() -> Iterator[list[bytes]]:
    """Collect the activation pattern of every relu evaluated inside the block.

    Finite-difference checks use it to detect perturbations that cross a kink.
    """
    global _relu_masks
    previous, _relu_masks = _relu_masks, []
    try:
        yield _relu_masks
    finally:
        _relu_masks = previous


@contextlib.contextmanager
def corrupt_gradient(op: str) -> Iterator[None]:
    """Test hook: perturb the backward of ``op`` so gradient checks must fail."""
    _corrupted_ops.add(op)
    try:
        yield
    finally:
        _corrupted_ops.discard(op)


def _check_4d(x: Tensor, op: str) -> None:
    if x.ndim != 4:
        raise ValueError(f"{op} expects a 4-D (n, c, h, w) tensor, got shape {x.shape}")


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------

def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int | None = None,
           bias: Tensor | None = None) -> Tensor:
    """2-D cross-correlation with same-style zero padding.

    ``kernel`` has shape ``(c_out, c_in, k, k)`` with ``k`` in {1, 3}.  The
    default padding is ``(k - 1) // 2`` so the output side is ``ceil(h / stride)``.
    """
    _check_4d(x, "conv2d")
    if kernel.ndim != 4:
        raise ValueError(f"conv2d kernel must be (c_out, c_in, k, k), got shape {kernel.shape}")
    c_out, c_in, kh, kw = kernel.shape
    if kh != kw or kh not in (1, 3):
        raise ValueError(f"conv2d supports 1x1 and 3x3 kernels, got {kh}x{kw}")
    if x.shape[1] != c_in:
        raise ValueError(f"conv2d channel mismatch: input has {x.shape[1]} channels, "
                         f"kernel expects {c_in}")
    if stride not in (1, 2):
        raise ValueError(f"conv2d stride must be 1 or 2, got {stride}")
    if bias is not None and bias.shape != (c_out,):
        raise ValueError(f"conv2d bias must have shape ({c_out},), got {bias.shape}")
    pad = (kh - 1) // 2 if padding is None else int(padding)
    n, _, h, w = x.shape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    W = kernel.data.reshape(c_out, c_in * kh * kw)
    if kh == 1 and pad == 0:
        xs = x.data[:, :, ::stride, ::stride] if stride > 1 else x.data
        cols = np.ascontiguousarray(xs.transpose(1, 0, 2, 3)).reshape(c_in, n * oh * ow)
        xp = None
    else:
        xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
        # im2col rows ordered (c_in, ki, kj) to match the kernel; columns (n, oh, ow)
        cols6 = np.empty((c_in, kh, kw, n, oh, ow))
        for i in range(kh):
            for j in range(kw):
                cols6[:, i, j] = xp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride].transpose(1, 0, 2, 3)
        cols = cols6.reshape(c_in * kh * kw, n * oh * ow)
    out = W @ cols
    if bias is not None:
        out += bias.data[:, None]
    out_data = np.ascontiguousarray(out.reshape(c_out, n, oh, ow).transpose(1, 0, 2, 3))

    def grad_fn(g):
        g2 = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(c_out, n * oh * ow)
        gk = (g2 @ cols.T).reshape(kernel.shape) if kernel.requires_grad else None
        gb = g2.sum(axis=1) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (W.T @ g2).reshape(c_in, kh, kw, n, oh, ow)
            if xp is None:
                gx = np.zeros(x.shape)
                gx[:, :, ::stride, ::stride] = gcols[:, 0, 0].transpose(1, 0, 2, 3)
            else:
                gxp = np.zeros(xp.shape)
                for i in range(kh):
                    for j in range(kw):
                        gxp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += \
                            gcols[:, i, j].transpose(1, 0, 2, 3)
                gx = gxp[:, :, pad:pad + h, pad:pad + w] if pad else gxp
        return (gx, gk) if bias is None else (gx, gk, gb)

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return _record("conv2d", inputs, out_data, grad_fn)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    if _relu_masks is not None:
        _relu_masks.append(np.packbits(mask).tobytes())
    # np.maximum keeps NaN visible instead of silently zeroing it
    return _record("relu", (x,), np.maximum(x.data, 0.0), lambda g: (g * mask,))


_TINY = np.finfo(DTYPE).tiny
_ONE_MINUS = np.nextafter(1.0, 0.0)


def _stable_sigmoid(v: np.ndarray) -> np.ndarray:
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)
    # saturated entries stay strictly inside (0, 1) so downstream logs never see 0 or 1
    return np.clip(out, _TINY, _ONE_MINUS)


def sigmoid(x: Tensor) -> Tensor:
    s = _stable_sigmoid(x.data)
    return _record("sigmoid", (x,), s, lambda g: (g * s * (1.0 - s),))


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"add needs identical shapes, got {a.shape} and {b.shape}")
    return _record("add", (a, b), a.data + b.data, lambda g: (g, g))


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    parts = list(parts)
    if not parts:
        raise ValueError("concat_channels needs at least one tensor")
    for p in parts:
        _check_4d(p, "concat_channels")
    ref = parts[0].shape
    for p in parts[1:]:
        if p.shape[0] != ref[0] or p.shape[2:] != ref[2:]:
            raise ValueError(f"concat_channels batch/spatial mismatch: {ref} vs {p.shape}")
    bounds = np.cumsum([0] + [p.shape[1] for p in parts])

    def grad_fn(g):
        return [g[:, bounds[i]:bounds[i + 1]] for i in range(len(parts))]

    return _record("concat_channels", parts, np.concatenate([p.data for p in parts], axis=1), grad_fn)


def nearest_upsample2x(x: Tensor) -> Tensor:
    _check_4d(x, "nearest_upsample2x")
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def grad_fn(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _record("nearest_upsample2x", (x,), out, grad_fn)


def avg_pool2x2(x: Tensor) -> Tensor:
    _check_4d(x, "avg_pool2x2")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"avg_pool2x2 needs even spatial dims, got {h}x{w}")
    out = x.data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def grad_fn(g):
        return (np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25,)

    return _record("avg_pool2x2", (x,), out, grad_fn)


def scale(x: Tensor, factor: float) -> Tensor:
    factor = float(factor)
    return _record("scale", (x,), x.data * factor, lambda g: (g * factor,))


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _record("sum", (x,), np.asarray(x.data.sum()), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean_all(x: Tensor) -> Tensor:
    shape, size = x.shape, x.data.size
    return _record("mean", (x,), np.asarray(x.data.mean()),
                   lambda g: (np.full(shape, float(g) / size),))


def weighted_sum(x: Tensor, weights: np.ndarray) -> Tensor:
    """``sum(x * weights)`` for a constant ``weights`` array; used to project outputs in gradient checks."""
    weights = np.asarray(weights, dtype=DTYPE)
    if weights.shape != x.shape:
        raise ValueError(f"weights shape {weights.shape} != tensor shape {x.shape}")
    return _record("weighted_sum", (x,), np.asarray((x.data * weights).sum()), lambda g: (g * weights,))


def binary_cross_entropy(p: Tensor, y: np.ndarray, eps: float = 1e-12) -> Tensor:
    """Mean of ``-[y log p + (1 - y) log(1 - p)]`` with logs clamped at ``eps``."""
    y = np.asarray(y, dtype=DTYPE)
    if y.shape != p.shape:
        raise ValueError(f"label shape {y.shape} does not match prediction shape {p.shape}")
    P = p.data
    lp = np.maximum(P, eps)
    lq = np.maximum(1.0 - P, eps)
    value = -(y * np.log(lp) + (1.0 - y) * np.log(lq)).mean()
    size = P.size

    def grad_fn(g):
        dp = np.where(P > eps, -y / lp, 0.0) + np.where(1.0 - P > eps, (1.0 - y) / lq, 0.0)
        return (g * dp / size,)

    return _record("binary_cross_entropy", (p,), np.asarray(value), grad_fn)


def record_custom(op: str, inputs: Sequence[Tensor], out_data: np.ndarray,
                  backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> Tensor:
    """Record an operation whose backward is supplied analytically by the caller."""
    return _record(op, inputs, np.asarray(out_data, dtype=DTYPE), backward_fn)
