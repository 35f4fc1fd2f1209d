"""Reverse-mode automatic differentiation over numpy float64 arrays.

A Tensor wraps an array plus, when any input requires gradients, a record of
its parents and a vector-Jacobian-product closure.  Calling ``backward`` on a
scalar walks the recorded graph once in reverse topological order.  Nodes
whose inputs are all constants record nothing, so constant subexpressions
(ground-truth images, projection constants) cost no graph memory.

Every op here is validated against central finite differences in the test
suite; the tape itself is deliberately small and boring.
"""

from __future__ import annotations

import numpy as np

from .errors import UsageError


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, value, requires_grad: bool = False):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._vjp = None

    # ----- introspection -------------------------------------------------

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def size(self):
        return self.value.size

    def item(self) -> float:
        return float(self.value)

    def __repr__(self):
        return f"Tensor(shape={self.value.shape}, requires_grad={self.requires_grad})"

    # ----- graph ----------------------------------------------------------

    def detach(self) -> "Tensor":
        return Tensor(self.value, requires_grad=False)

    def backward(self, grad_output=None) -> None:
        backward(self, grad_output)

    # ----- operators --------------------------------------------------

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
        return mul(self, -1.0)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, requires_grad=False)


def parameter(x) -> Tensor:
    """A learnable leaf."""
    return Tensor(np.array(x, dtype=np.float64), requires_grad=True)


def constant(x) -> Tensor:
    return Tensor(x, requires_grad=False)


def _make(value, parents: tuple[Tensor, ...], vjp) -> Tensor:
    out = Tensor(value, requires_grad=any(p.requires_grad for p in parents))
    if out.requires_grad:
        out._parents = parents
        out._vjp = vjp
    return out


def backward(t: Tensor, grad_output=None) -> None:
    """Accumulate gradients of ``t`` into every reachable ``requires_grad`` node."""
    if not isinstance(t, Tensor):
        raise UsageError("backward needs a Tensor produced by a forward pass")
    if not t.requires_grad:
        raise UsageError("backward called without a recorded forward pass "
                         "(no differentiable inputs feed this value)")
    if grad_output is None:
        if t.value.size != 1:
            raise UsageError(f"backward without grad_output needs a scalar, got shape {t.value.shape}")
        grad_output = np.ones_like(t.value)
    else:
        grad_output = np.asarray(grad_output, dtype=np.float64)
        if grad_output.shape != t.value.shape:
            raise UsageError("grad_output shape mismatch")

    # Iterative post-order topological sort (graphs can be deep).
    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(t, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(t): grad_output}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        node.grad = g if node.grad is None else node.grad + g
        if node._vjp is None:
            continue
        for p, pg in zip(node._parents, node._vjp(g)):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def zero_grads(tensors) -> None:
    for t in tensors:
        t.grad = None


# ----- broadcasting helper ------------------------------------------------


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (the adjoint of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ----- arithmetic -----------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.value + b.value, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.value - b.value, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.value * b.value, (a, b),
                 lambda g: (_unbroadcast(g * b.value, a.shape),
                            _unbroadcast(g * a.value, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.value / b.value, (a, b),
                 lambda g: (_unbroadcast(g / b.value, a.shape),
                            _unbroadcast(-g * a.value / (b.value * b.value), b.shape)))


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    p = float(p)
    return _make(a.value ** p, (a,),
                 lambda g: (g * p * a.value ** (p - 1.0),))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise UsageError("matmul supports 2-D operands; use linear() for batched affine maps")
    return _make(a.value @ b.value, (a, b),
                 lambda g: (g @ b.value.T, a.value.T @ g))


def linear(x, weight, bias) -> Tensor:
    """Affine map ``x @ weight.T + bias`` with a fused backward.

    ``x`` is (batch, in) or (in,); ``weight`` is (out, in); ``bias`` is (out,).
    """
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if x.ndim == 1:
        value = weight.value @ x.value + bias.value

        def vjp1(g):
            return (g @ weight.value, np.outer(g, x.value), g)

        return _make(value, (x, weight, bias), vjp1)
    if x.ndim == 2:
        value = x.value @ weight.value.T + bias.value

        def vjp2(g):
            return (g @ weight.value, g.T @ x.value, g.sum(axis=0))

        return _make(value, (x, weight, bias), vjp2)
    raise UsageError(f"linear expects 1-D or 2-D input, got ndim={x.ndim}")


# ----- elementwise nonlinearities ----------------------------------------


def exp(a) -> Tensor:
    a = as_tensor(a)
    value = np.exp(a.value)
    return _make(value, (a,), lambda g: (g * value,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.value), (a,), lambda g: (g / a.value,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    value = np.sqrt(a.value)
    return _make(value, (a,), lambda g: (g * 0.5 / value,))


def absolute(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.abs(a.value), (a,), lambda g: (g * np.sign(a.value),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.maximum(a.value, 0.0), (a,),
                 lambda g: (g * (a.value > 0.0),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.value
    value = np.where(x >= 0.0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                     np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    return _make(value, (a,), lambda g: (g * value * (1.0 - value),))


def softplus(a) -> Tensor:
    a = as_tensor(a)
    value = np.logaddexp(0.0, a.value)

    def vjp(g):
        x = a.value
        sig = np.where(x >= 0.0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                       np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
        return (g * sig,)

    return _make(value, (a,), vjp)


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient is zero wherever the clamp is active."""
    a = as_tensor(a)
    return _make(np.clip(a.value, lo, hi), (a,),
                 lambda g: (g * ((a.value > lo) & (a.value < hi)),))


# ----- reductions and shape ops -------------------------------------------


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    value = a.value.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(value, (a,), vjp)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    value = a.value.mean(axis=axis, keepdims=keepdims)
    count = a.value.size if axis is None else a.value.size / value.size

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy() / count,)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.shape).copy() / count,)

    return _make(value, (a,), vjp)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _make(a.value.reshape(shape), (a,),
                 lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    inv = None if axes is None else np.argsort(axes)
    return _make(a.value.transpose(axes), (a,),
                 lambda g: (g.transpose(inv),))


def concat(parts, axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    value = np.concatenate([p.value for p in parts], axis=axis)
    sizes = np.cumsum([p.value.shape[axis] for p in parts])[:-1]

    def vjp(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _make(value, tuple(parts), vjp)


def stack(parts, axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    value = np.stack([p.value for p in parts], axis=axis)

    def vjp(g):
        return tuple(np.moveaxis(g, axis, 0)[i] for i in range(len(parts)))

    return _make(value, tuple(parts), vjp)


def _index_has_arrays(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (np.ndarray, list)) for i in items)


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    value = a.value[idx]

    def vjp(g):
        gz = np.zeros_like(a.value)
        if _index_has_arrays(idx):
            np.add.at(gz, idx, g)  # integer indices may repeat
        else:
            gz[idx] += g
        return (gz,)

    return _make(value, (a,), vjp)


def index_select(a, indices: np.ndarray, axis: int = 0) -> Tensor:
    """Gather rows along ``axis``; backward scatter-adds into the source."""
    a = as_tensor(a)
    indices = np.asarray(indices)
    value = np.take(a.value, indices, axis=axis)

    def vjp(g):
        gz = np.zeros_like(a.value)
        np.add.at(gz, (slice(None),) * axis + (indices,), g)
        return (gz,)

    return _make(value, (a,), vjp)


# ----- image-shaped convolution helpers ------------------------------------


def pad_replicate2d(a, pad: int) -> Tensor:
    """Replicate-pad the two leading (spatial) axes of an (H, W, C) array."""
    a = as_tensor(a)
    p = int(pad)
    value = np.pad(a.value, ((p, p), (p, p), (0, 0)), mode="edge")
    h, w = a.shape[0], a.shape[1]

    def vjp(g):
        gin = g[p:p + h, p:p + w].copy()
        if p > 0:
            gin[0] += g[:p, p:p + w].sum(axis=0)
            gin[-1] += g[p + h:, p:p + w].sum(axis=0)
            gin[:, 0] += g[p:p + h, :p].sum(axis=1)
            gin[:, -1] += g[p:p + h, p + w:].sum(axis=1)
            gin[0, 0] += g[:p, :p].sum(axis=(0, 1))
            gin[0, -1] += g[:p, p + w:].sum(axis=(0, 1))
            gin[-1, 0] += g[p + h:, :p].sum(axis=(0, 1))
            gin[-1, -1] += g[p + h:, p + w:].sum(axis=(0, 1))
        return (gin,)

    return _make(value, (a,), vjp)


def correlate1d_valid(a, kernel: np.ndarray, axis: int) -> Tensor:
    """Valid cross-correlation with a constant 1-D kernel along ``axis``."""
    a = as_tensor(a)
    kernel = np.asarray(kernel, dtype=np.float64)
    k = kernel.shape[0]
    length = a.shape[axis]
    out_len = length - k + 1
    if out_len < 1:
        raise UsageError(f"kernel of size {k} does not fit axis of size {length}")

    def sl(start, stop):
        s = [slice(None)] * a.ndim
        s[axis] = slice(start, stop)
        return tuple(s)

    value = kernel[0] * a.value[sl(0, out_len)]
    for t in range(1, k):
        value = value + kernel[t] * a.value[sl(t, t + out_len)]

    def vjp(g):
        gz = np.zeros_like(a.value)
        for t in range(k):
            gz[sl(t, t + out_len)] += kernel[t] * g
        return (gz,)

    return _make(value, (a,), vjp)
