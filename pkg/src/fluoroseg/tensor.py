"""Dense float64 arrays with reverse-mode automatic differentiation.

Just enough machinery to train the small prototype-mask segmenter on a CPU:
2-D convolution, pooling, nearest-neighbour upsampling, a couple of
pointwise activations, gathers/reshapes and the three training losses.

The graph is implicit: every tensor produced by a differentiable op keeps a
reference to its parents and a closure that maps the output gradient to the
input gradients. ``Tensor.backward`` orders the graph topologically and runs
each closure exactly once.
"""
from __future__ import annotations

import struct
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DomainError, NonFiniteError, ParseError, ShapeError, StateError

MAX_RANK = 4

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values in {what}")


class Tensor:
    """A float64 array that can take part in backpropagation."""

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        parents: tuple[Tensor, ...] = (),
        backward_fn: BackwardFn | None = None,
        op: str = "leaf",
    ):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim > MAX_RANK:
            raise ShapeError(f"rank {arr.ndim} exceeds {MAX_RANK}")
        _check_finite(arr, op)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._backward_fn = backward_fn
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on a tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every leaf that requires it."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a gradient needs a scalar output")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=np.float64)
        if grad.shape != self.shape:
            raise ShapeError(f"seed gradient {grad.shape} vs output {self.shape}")

        order = topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                if node.requires_grad:
                    _check_finite(g, "gradient")
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward_fn(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                _check_finite(pg, f"backward of {node.op}")
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # operator sugar; broadcasting is limited to Python scalars
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, -other if isinstance(other, Tensor) else -float(other))

    def __getitem__(self, index):
        return take(self, index)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    def transpose(self, *axes):
        return transpose(self, axes)


def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root``, every node after all of its inputs."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _result(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn: BackwardFn, op: str) -> Tensor:
    tracked = tuple(p for p in parents if p.requires_grad)
    if not tracked:
        return Tensor(data, op=op)
    return Tensor(data, requires_grad=True, parents=parents, backward_fn=backward_fn, op=op)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------- pointwise


def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = float(b)
        return _result(a.data + c, (a,), lambda g: (g,), "add_scalar")
    if a.shape != b.shape:
        raise ShapeError(f"add: {a.shape} vs {b.shape}")
    return _result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = float(b)
        return _result(a.data * c, (a,), lambda g: (g * c,), "mul_scalar")
    if a.shape != b.shape:
        raise ShapeError(f"mul: {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return _result(np.where(pos, x.data, 0.0), (x,), lambda g: (g * pos,), "relu")


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return _result(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def elementwise(op: str, x: Tensor) -> Tensor:
    if op == "relu":
        return relu(x)
    if op == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown elementwise op {op!r}")


# ---------------------------------------------------------------- structure


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    out = x.data.reshape(shape)
    return _result(out, (x,), lambda g: (g.reshape(src),), "reshape")


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose")


def take(x: Tensor, index) -> Tensor:
    """Basic or fancy indexing; the gradient scatters back with ``np.add.at``."""
    out = x.data[index]

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return _result(np.array(out, copy=True), (x,), backward, "take")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return _result(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


# ---------------------------------------------------------------- spatial


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Patch matrix with rows indexed by (c, ki, kj) and columns by (n, i, j)."""
    n, c = xp.shape[:2]
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    return np.ascontiguousarray(win.transpose(1, 4, 5, 0, 2, 3)).reshape(c * kh * kw, n * ho * wo)


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of ``x[N,C,H,W]`` with ``kernel[F,C,kH,kW]`` plus per-filter bias."""
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ShapeError("conv2d expects rank-4 input and kernel")
    n, c, h, w = x.shape
    f, kc, kh, kw = kernel.shape
    if kc != c:
        raise ShapeError(f"conv2d: input has {c} channels, kernel expects {kc}")
    if stride < 1 or pad < 0:
        raise ShapeError("conv2d: stride must be >= 1 and pad >= 0")
    if kh > h + 2 * pad or kw > w + 2 * pad:
        raise ShapeError("conv2d: kernel larger than padded input")
    if bias is not None and bias.shape != (f,):
        raise ShapeError(f"conv2d: bias shape {bias.shape}, expected ({f},)")

    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    kmat = kernel.data.reshape(f, -1)
    out = kmat @ cols
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(f, n, ho, wo).transpose(1, 0, 2, 3)

    def backward(g):
        gmat = g.transpose(1, 0, 2, 3).reshape(f, -1)
        gk = (gmat @ cols.T).reshape(kernel.shape) if kernel.requires_grad else None
        gb = gmat.sum(axis=1) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad and stride == 1:
            # full correlation of the output gradient with the flipped kernel
            gp = np.pad(g, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
            flipped = kernel.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(c, -1)
            gcols = _im2col(gp, kh, kw, 1, h + 2 * pad, w + 2 * pad)
            gxp = (flipped @ gcols).reshape(c, n, h + 2 * pad, w + 2 * pad).transpose(1, 0, 2, 3)
            gx = np.ascontiguousarray(gxp[:, :, pad:pad + h, pad:pad + w])
        elif x.requires_grad:
            gcols = (kmat.T @ gmat).reshape(c, kh, kw, n, ho, wo).transpose(3, 0, 1, 2, 4, 5)
            gxp = np.zeros_like(xp)
            for ki in range(kh):
                for kj in range(kw):
                    gxp[:, :, ki:ki + stride * ho:stride, kj:kj + stride * wo:stride] += gcols[:, :, ki, kj]
            gx = gxp[:, :, pad:pad + h, pad:pad + w] if pad else gxp
        return gx, gk, gb

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _result(np.ascontiguousarray(out), parents, backward, "conv2d")


def maxpool2d(x: Tensor, k: int = 2, stride: int = 2) -> Tensor:
    """2x2/2 max pooling; ties route the gradient to the first cell in row-major order."""
    if k != 2 or stride != 2:
        raise ShapeError("maxpool2d supports k=2, stride=2 only")
    if x.data.ndim != 4:
        raise ShapeError("maxpool2d expects rank-4 input")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2d needs even H and W, got {h}x{w}")
    xd = x.data
    views = [xd[:, :, i::2, j::2] for i in (0, 1) for j in (0, 1)]  # row-major window order
    out = np.maximum(np.maximum(views[0], views[1]), np.maximum(views[2], views[3]))
    taken = np.zeros(out.shape, dtype=bool)
    winners = []
    for v in views:
        sel = (v == out) & ~taken
        taken |= sel
        winners.append(sel)

    def backward(g):
        gx = np.zeros_like(xd)
        for (i, j), sel in zip(((0, 0), (0, 1), (1, 0), (1, 1)), winners):
            gx[:, :, i::2, j::2] = g * sel
        return (gx,)

    return _result(out, (x,), backward, "maxpool2d")


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling of the last two axes."""
    if x.data.ndim != 4:
        raise ShapeError("upsample2x expects rank-4 input")
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def backward(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _result(out, (x,), backward, "upsample2x")


# ---------------------------------------------------------------- losses


def _weights(weight, m: int) -> np.ndarray:
    if weight is None:
        return np.full(m, 1.0 / max(m, 1))
    w = np.asarray(weight, dtype=np.float64).reshape(-1)
    if w.shape[0] != m:
        raise ShapeError(f"weight has {w.shape[0]} entries, expected {m}")
    total = w.sum()
    return w / total if total > 0 else w


def softmax_ce(logits: Tensor, target, weight=None) -> Tensor:
    """Weighted mean cross-entropy of ``logits[M, C]`` against class indices ``target[M]``."""
    if logits.data.ndim != 2:
        raise ShapeError("softmax_ce expects logits of shape [M, C]")
    m, c = logits.shape
    t = np.asarray(target)
    if t.shape != (m,):
        raise ShapeError(f"softmax_ce target shape {t.shape}, expected ({m},)")
    if not np.issubdtype(t.dtype, np.integer):
        if not np.all(t == np.round(t)):
            raise DomainError("softmax_ce targets must be integer class indices")
        t = t.astype(np.int64)
    if np.any(t < 0) or np.any(t >= c):
        raise DomainError(f"softmax_ce targets must lie in [0, {c})")
    w = _weights(weight, m)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    nll = logsum - z[np.arange(m), t]
    loss = float(np.dot(w, nll))

    def backward(g):
        p = np.exp(z - logsum[:, None])
        p[np.arange(m), t] -= 1.0
        return (g * w[:, None] * p,)

    return _result(np.asarray(loss), (logits,), backward, "softmax_ce")


def bce_with_logits(logits: Tensor, target, weight=None) -> Tensor:
    """Weighted mean binary cross-entropy on logits, via max(z,0) - z*t + log(1+exp(-|z|))."""
    t = np.asarray(target, dtype=np.float64)
    if t.shape != logits.shape:
        raise ShapeError(f"bce target shape {t.shape} vs logits {logits.shape}")
    if np.any(t < 0) or np.any(t > 1):
        raise DomainError("bce targets must lie in [0, 1]")
    z = logits.data.reshape(-1)
    tf = t.reshape(-1)
    w = _weights(weight, z.size)
    per = np.maximum(z, 0) - z * tf + np.log1p(np.exp(-np.abs(z)))
    loss = float(np.dot(w, per))

    def backward(g):
        return ((g * w * (_sigmoid(z) - tf)).reshape(logits.shape),)

    return _result(np.asarray(loss), (logits,), backward, "bce")


def smooth_l1(pred: Tensor, target, weight=None, beta: float = 1.0) -> Tensor:
    """Huber-style loss summed over the last axis, weighted mean over rows."""
    t = np.asarray(target, dtype=np.float64)
    if t.shape != pred.shape:
        raise ShapeError(f"smooth_l1 target shape {t.shape} vs pred {pred.shape}")
    d = pred.data - t
    a = np.abs(d)
    per_elem = np.where(a < beta, 0.5 * d * d / beta, a - 0.5 * beta)
    rows = per_elem.reshape(per_elem.shape[0], -1) if d.ndim > 1 else per_elem.reshape(-1, 1)
    w = _weights(weight, rows.shape[0])
    loss = float(np.dot(w, rows.sum(axis=1)))

    def backward(g):
        dd = np.where(a < beta, d / beta, np.sign(d))
        wb = w.reshape((-1,) + (1,) * (d.ndim - 1)) if d.ndim > 1 else w
        return (g * wb * dd,)

    return _result(np.asarray(loss), (pred,), backward, "smooth_l1")


def loss(kind: str, pred: Tensor, target, weight=None) -> Tensor:
    if kind == "softmax_ce":
        return softmax_ce(pred, target, weight)
    if kind == "bce":
        return bce_with_logits(pred, target, weight)
    if kind == "smooth_l1":
        return smooth_l1(pred, target, weight)
    raise ValueError(f"unknown loss {kind!r}")


# ---------------------------------------------------------------- optimiser


class SGD:
    """SGD with heavy-ball momentum: v <- m*v + g; p <- p - lr*v."""

    def __init__(self, params: Iterable[Tensor], lr: float, momentum: float = 0.0):
        if lr < 0:
            raise DomainError("lr must be non-negative")
        if not 0.0 <= momentum < 1.0:
            raise DomainError("momentum must lie in [0, 1)")
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        for p in self.params:
            if p.grad is None:
                raise StateError(f"parameter {p!r} has no gradient")
        for p, v in zip(self.params, self.velocity):
            v *= self.momentum
            v += p.grad
            p.data -= self.lr * v
            p.grad = None

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def sgd_step(params: Iterable[Tensor], lr: float, momentum: float = 0.0, state: SGD | None = None) -> SGD:
    """One optimiser step; pass the returned state back in to keep momentum."""
    opt = state if state is not None else SGD(params, lr, momentum)
    opt.step()
    return opt


# ---------------------------------------------------------------- checkpoints

MAGIC = b"FSEG"
FORMAT_VERSION = 1


def save_checkpoint(path, tensors: Mapping[str, "Tensor | np.ndarray"]) -> None:
    """Write named arrays into the flat ``FSEG`` little-endian container."""
    chunks = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(tensors))]
    for name, t in tensors.items():
        arr = np.asarray(t.data if isinstance(t, Tensor) else t, dtype="<f8", order="C")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise ParseError(f"{path}: not an FSEG checkpoint")
    if len(buf) < 12:
        raise ParseError(f"{path}: truncated header")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != FORMAT_VERSION:
        raise ParseError(f"{path}: unsupported checkpoint version {version}")
    try:
        pos = 12
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<B", buf, pos)
            pos += 1
            shape = struct.unpack_from(f"<{rank}I", buf, pos)
            pos += 4 * rank
            size = int(np.prod(shape, dtype=np.int64))
            out[name] = np.frombuffer(buf, dtype="<f8", count=size, offset=pos).reshape(shape).astype(np.float64)
            pos += 8 * size
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise ParseError(f"{path}: truncated or corrupt checkpoint") from exc
    if pos != len(buf):
        raise ParseError(f"{path}: {len(buf) - pos} trailing bytes")
    return out
