"""Dense tensors with reverse-mode automatic differentiation.

Everything is a flat numpy array (float32 for training, float64 for gradient
checks) wrapped in a :class:`Tensor` that remembers its parents and a backward
closure. Calling ``loss.backward()`` walks the recorded DAG in reverse
topological order and *accumulates* gradients into ``.grad`` (so a second
backward without ``zero_grad`` doubles them; optimizers must reset between
steps).

Broadcasting in elementwise ops is deliberately restricted to
scalar-with-tensor and exact shape matches. Anything else must go through the
explicit ``broadcast_to`` op so every backward reduction stays visible.
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionError, UsageError

Array = np.ndarray

FLOAT_DTYPES = (np.float32, np.float64)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        self.data: Array = arr
        self.grad: Array | None = None
        self.requires_grad = requires_grad
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn = None

    # -- metadata ----------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _scalar_err(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=False)

    def zero_grad(self):
        self.grad = None

    # -- autodiff ----------------------------------------------------------

    def _accumulate(self, g: Array):
        if self.grad is None:
            # copy: g may be a view shared with another parent's closure
            self.grad = np.array(g, dtype=self.data.dtype)
        else:
            self.grad += g

    def backward(self):
        """Populate ``.grad`` of every reachable tensor with requires_grad.

        Only defined for scalar (size-1) tensors; gradients accumulate across
        calls until explicitly zeroed.
        """
        if self.data.size != 1:
            raise UsageError(f"backward() needs a scalar loss, got shape {self.shape}")
        order = topo_order(self)
        self._accumulate(np.ones_like(self.data))
        for node in reversed(order):
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn(node.grad)

    # -- operator sugar ------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) != 1 or isinstance(shape[0], int) else shape[0])

    def transpose(self, axes=None):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)


def _scalar_err(t):
    raise UsageError(f"item() needs a size-1 tensor, got shape {t.shape}")


def topo_order(root: Tensor) -> list[Tensor]:
    """Iterative post-order DFS; result is a topological order of the DAG."""
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


def _from_op(data: Array, parents: tuple[Tensor, ...], backward_fn, op: str) -> Tensor:
    out = Tensor(data)
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = parents
        out._backward_fn = backward_fn
        out.op = op
    else:
        out.op = op
    return out


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype))


# -- elementwise ------------------------------------------------------------


def _check_binary(a: Array, b: Array, op: str):
    if a.shape == b.shape or a.size == 1 or b.size == 1:
        return
    raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape} "
                         "(only scalar or exact-shape broadcasting)")


def _reduce_to(g: Array, shape: tuple[int, ...]) -> Array:
    # only the scalar case ever needs reduction under the strict policy
    if g.shape == shape:
        return g
    return g.sum().reshape(shape) if int(np.prod(shape)) == 1 else g.reshape(shape)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a.data, b.data, "add")
    out = a.data + b.data

    def bwd(g):
        if a.requires_grad:
            a._accumulate(_reduce_to(g, a.shape))
        if b.requires_grad:
            b._accumulate(_reduce_to(g, b.shape))

    return _from_op(out, (a, b), bwd, "add")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a.data, b.data, "mul")
    out = a.data * b.data

    def bwd(g):
        if a.requires_grad:
            a._accumulate(_reduce_to(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_reduce_to(g * a.data, b.shape))

    return _from_op(out, (a, b), bwd, "mul")


def sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    # stable piecewise form, never exponentiates a large positive value
    d = x.data
    out = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.abs(d))),
                   np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d))))
    out = out.astype(d.dtype)

    def bwd(g):
        if x.requires_grad:
            x._accumulate(g * out * (1.0 - out))

    return _from_op(out, (x,), bwd, "sigmoid")


def tanh(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)

    def bwd(g):
        if x.requires_grad:
            x._accumulate(g * (1.0 - out * out))

    return _from_op(out, (x,), bwd, "tanh")


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = np.maximum(x.data, 0.0)

    def bwd(g):
        if x.requires_grad:
            x._accumulate(g * (x.data > 0))

    return _from_op(out, (x,), bwd, "relu")


def swish(x: Tensor) -> Tensor:
    """x * sigmoid(x), with its own fused backward rule."""
    x = as_tensor(x)
    d = x.data
    sig = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.abs(d))),
                   np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d)))).astype(d.dtype)
    out = d * sig

    def bwd(g):
        if x.requires_grad:
            x._accumulate(g * (sig + d * sig * (1.0 - sig)))

    return _from_op(out, (x,), bwd, "swish")


ELEMENTWISE = {"sigmoid": sigmoid, "tanh": tanh, "relu": relu, "swish": swish}


def elementwise(kind: str, *args):
    """Dispatch by name: sigmoid/tanh/swish/relu take one tensor, add/mul two,
    scale takes (tensor, python float)."""
    if kind in ELEMENTWISE:
        (x,) = args
        return ELEMENTWISE[kind](x)
    if kind == "add":
        return add(*args)
    if kind == "mul":
        return mul(*args)
    if kind == "scale":
        x, c = args
        return mul(x, float(c))
    raise UsageError(f"unknown elementwise kind {kind!r}")


# -- shape ops ---------------------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    x = as_tensor(x)
    shape = tuple(shape)
    out = x.data.reshape(shape)

    def bwd(g):
        if x.requires_grad:
            x._accumulate(g.reshape(x.shape))

    return _from_op(out, (x,), bwd, "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.transpose(x.data, axes)

    def bwd(g):
        if x.requires_grad:
            x._accumulate(np.transpose(g, inv))

    return _from_op(out, (x,), bwd, "transpose")


def broadcast_to(x: Tensor, shape) -> Tensor:
    """Explicit broadcast; backward sums over every expanded axis."""
    x = as_tensor(x)
    shape = tuple(shape)
    try:
        out = np.broadcast_to(x.data, shape)
    except ValueError as e:
        raise DimensionError(f"broadcast_to: {x.shape} -> {shape}: {e}") from None
    out = np.ascontiguousarray(out)
    n_new = len(shape) - x.ndim
    expanded = tuple(range(n_new)) + tuple(
        n_new + i for i, s in enumerate(x.shape) if s == 1 and shape[n_new + i] != 1
    )

    def bwd(g):
        if x.requires_grad:
            gg = g.sum(axis=expanded, keepdims=True) if expanded else g
            x._accumulate(gg.reshape(x.shape))

    return _from_op(out, (x,), bwd, "broadcast_to")


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    ax = axis if axis >= 0 else out.ndim + axis
    sizes = [t.shape[ax] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, s, e in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[ax] = slice(int(s), int(e))
                t._accumulate(g[tuple(idx)])

    return _from_op(out, tuple(tensors), bwd, "concat")


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    x = as_tensor(x)
    ax = axis if axis >= 0 else x.ndim + axis
    idx = [slice(None)] * x.ndim
    idx[ax] = slice(start, start + length)
    idx = tuple(idx)
    out = np.ascontiguousarray(x.data[idx])

    def bwd(g):
        if x.requires_grad:
            full = np.zeros_like(x.data)
            full[idx] = g
            x._accumulate(full)

    return _from_op(out, (x,), bwd, "narrow")


def reduce_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if not x.requires_grad:
            return
        if axis is None:
            x._accumulate(np.broadcast_to(g, x.shape).copy())
            return
        gg = g if keepdims else np.expand_dims(g, axis)
        x._accumulate(np.broadcast_to(gg, x.shape).copy())

    return _from_op(out, (x,), bwd, "sum")


def reduce_mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    n = x.size if axis is None else x.shape[axis]
    return mul(reduce_sum(x, axis, keepdims), 1.0 / float(n))


def take_last_axis(x: Tensor, indices: Array) -> Tensor:
    """Gather along the last axis: out[..., j] = x[..., indices[..., j]].

    ``indices`` is a constant int array with the same leading shape as ``x``;
    backward scatter-adds into the gathered positions.
    """
    x = as_tensor(x)
    idx = np.asarray(indices)
    if idx.shape[:-1] != x.shape[:-1]:
        raise DimensionError(f"take_last_axis: index shape {idx.shape} does not match {x.shape}")
    out = np.take_along_axis(x.data, idx, axis=-1)

    def bwd(g):
        if x.requires_grad:
            full = np.zeros_like(x.data)
            lead = []
            for ax, s in enumerate(idx.shape[:-1]):
                open_shape = [1] * idx.ndim
                open_shape[ax] = s
                lead.append(np.arange(s).reshape(open_shape))
            np.add.at(full, tuple(lead) + (idx,), g)
            x._accumulate(full)

    return _from_op(out, (x,), bwd, "take_last_axis")


# -- linear algebra ----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product for 2-D operands or stacked 3-D+ operands with identical
    leading (batch) dims. No implicit batch broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs >=2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            b._accumulate(np.swapaxes(a.data, -1, -2) @ g)

    return _from_op(out, (a, b), bwd, "matmul")


def linear(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    """y[..., j] = sum_i x[..., i] W[i, j] + b[j], as one fused graph node."""
    x, W = as_tensor(x), as_tensor(W)
    if x.shape[-1] != W.shape[0]:
        raise DimensionError(f"linear: input last dim {x.shape} does not match weight {W.shape}")
    if b is not None:
        b = as_tensor(b)
        if b.shape != (W.shape[1],):
            raise DimensionError(f"linear: bias shape {b.shape} does not match weight {W.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    out = x2 @ W.data
    if b is not None:
        out = out + b.data
    parents = (x, W) if b is None else (x, W, b)

    def bwd(g):
        g2 = g.reshape(-1, W.shape[1])
        if x.requires_grad:
            x._accumulate((g2 @ W.data.T).reshape(x.shape))
        if W.requires_grad:
            W._accumulate(x2.T @ g2)
        if b is not None and b.requires_grad:
            b._accumulate(g2.sum(axis=0))

    return _from_op(out.reshape(lead + (W.shape[1],)), parents, bwd, "linear")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    m = x.data.max(axis=axis, keepdims=True)
    e = np.exp(x.data - m)
    out = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        if x.requires_grad:
            x._accumulate(out * (g - (g * out).sum(axis=axis, keepdims=True)))

    return _from_op(out, (x,), bwd, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    m = x.data.max(axis=axis, keepdims=True)
    shifted = x.data - m
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def bwd(g):
        if x.requires_grad:
            x._accumulate(g - np.exp(out) * g.sum(axis=axis, keepdims=True))

    return _from_op(out, (x,), bwd, "log_softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis to zero mean / unit variance, then affine."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layer_norm: gamma/beta must be ({d},), got {gamma.shape}/{beta.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = xhat * gamma.data + beta.data

    def bwd(g):
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).reshape(-1, d).sum(axis=0))
        if beta.requires_grad:
            beta._accumulate(g.reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            gh = g * gamma.data
            x._accumulate(inv * (gh - gh.mean(axis=-1, keepdims=True)
                                 - xhat * (gh * xhat).mean(axis=-1, keepdims=True)))

    return _from_op(out, (x, gamma, beta), bwd, "layer_norm")


def glu(x: Tensor) -> Tensor:
    """Split the last axis in half, gate the first half with sigmoid(second)."""
    x = as_tensor(x)
    if x.shape[-1] % 2 != 0:
        raise DimensionError(f"glu needs an even last axis, got {x.shape}")
    half = x.shape[-1] // 2
    return mul(narrow(x, -1, 0, half), sigmoid(narrow(x, -1, half, half)))


# -- convolutions ------------------------------------------------------------


def depthwise_conv1d(x: Tensor, kernel: Tensor) -> Tensor:
    """Per-channel 1-D convolution with zero 'same' padding; kernel [k, d]."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    if kernel.shape[0] % 2 != 1:
        from .errors import ConfigurationError
        raise ConfigurationError(f"depthwise_conv1d needs odd kernel length, got {kernel.shape[0]}")
    if x.shape[-1] != kernel.shape[-1]:
        raise DimensionError(f"depthwise_conv1d: channels {x.shape} vs kernel {kernel.shape}")
    T, d = x.shape
    k = kernel.shape[0]
    pad = (k - 1) // 2
    xp = np.zeros((T + 2 * pad, d), dtype=x.dtype)
    xp[pad:pad + T] = x.data
    out = np.zeros((T, d), dtype=x.dtype)
    for j in range(k):
        out += xp[j:j + T] * kernel.data[j]

    def bwd(g):
        if kernel.requires_grad:
            gk = np.empty_like(kernel.data)
            for j in range(k):
                gk[j] = (xp[j:j + T] * g).sum(axis=0)
            kernel._accumulate(gk)
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for j in range(k):
                gxp[j:j + T] += g * kernel.data[j]
            x._accumulate(gxp[pad:pad + T])

    return _from_op(out, (x, kernel), bwd, "depthwise_conv1d")


def conv1d(x: Tensor, kernel: Tensor, dilation: int = 1) -> Tensor:
    """Full (channel-mixing) 1-D convolution, 'same' zero padding.

    x: [T, c_in], kernel: [k, c_in, c_out], odd k; output [T, c_out].
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    k, cin, cout = kernel.shape
    if k % 2 != 1:
        from .errors import ConfigurationError
        raise ConfigurationError(f"conv1d needs odd kernel length, got {k}")
    if x.shape[-1] != cin:
        raise DimensionError(f"conv1d: channels {x.shape} vs kernel {kernel.shape}")
    T = x.shape[0]
    pad = (k - 1) // 2 * dilation
    xp = np.zeros((T + 2 * pad, cin), dtype=x.dtype)
    xp[pad:pad + T] = x.data
    out = np.zeros((T, cout), dtype=x.dtype)
    for j in range(k):
        out += xp[j * dilation:j * dilation + T] @ kernel.data[j]

    def bwd(g):
        if kernel.requires_grad:
            gk = np.empty_like(kernel.data)
            for j in range(k):
                gk[j] = xp[j * dilation:j * dilation + T].T @ g
            kernel._accumulate(gk)
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for j in range(k):
                gxp[j * dilation:j * dilation + T] += g @ kernel.data[j].T
            x._accumulate(gxp[pad:pad + T])

    return _from_op(out, (x, kernel), bwd, "conv1d")


def _same_pad(n: int, k: int, stride: int) -> tuple[int, int, int]:
    n_out = -(-n // stride)  # ceil
    total = max((n_out - 1) * stride + k - n, 0)
    return n_out, total // 2, total - total // 2


def conv2d(x: Tensor, kernel: Tensor, stride_t: int = 1, stride_f: int = 1) -> Tensor:
    """2-D cross-correlation over [T, F, c_in] with ceil-mode 'same' padding.

    kernel: [kh, kw, c_in, c_out]; output [ceil(T/stride_t), ceil(F/stride_f), c_out].
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    T, F, cin = x.shape
    kh, kw, kcin, cout = kernel.shape
    if kcin != cin:
        raise DimensionError(f"conv2d: channels {x.shape} vs kernel {kernel.shape}")
    if stride_t < 1 or stride_f < 1:
        raise UsageError("conv2d strides must be >= 1")
    To, pt0, pt1 = _same_pad(T, kh, stride_t)
    Fo, pf0, pf1 = _same_pad(F, kw, stride_f)
    Tp, Fp = T + pt0 + pt1, F + pf0 + pf1
    if kh > Tp or kw > Fp:
        raise DimensionError(f"conv2d: kernel ({kh},{kw}) larger than padded input ({Tp},{Fp})")
    xp = np.zeros((Tp, Fp, cin), dtype=x.dtype)
    xp[pt0:pt0 + T, pf0:pf0 + F] = x.data
    out = np.zeros((To, Fo, cout), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            win = xp[i:i + stride_t * To:stride_t, j:j + stride_f * Fo:stride_f]
            out += win @ kernel.data[i, j]

    def bwd(g):
        if kernel.requires_grad:
            gk = np.empty_like(kernel.data)
            for i in range(kh):
                for j in range(kw):
                    win = xp[i:i + stride_t * To:stride_t, j:j + stride_f * Fo:stride_f]
                    gk[i, j] = np.tensordot(win, g, axes=([0, 1], [0, 1]))
            kernel._accumulate(gk)
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[i:i + stride_t * To:stride_t, j:j + stride_f * Fo:stride_f] += \
                        g @ kernel.data[i, j].T
            x._accumulate(gxp[pt0:pt0 + T, pf0:pf0 + F])

    return _from_op(out, (x, kernel), bwd, "conv2d")


def transposed_conv1d(x: Tensor, kernel: Tensor, stride: int) -> Tensor:
    """Per-channel transposed convolution; output length is exactly stride * T.

    kernel [k, d] with k >= stride; the raw (T-1)*stride + k output is trimmed
    at the tail so the length contract holds for every T.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    k, d = kernel.shape
    if x.shape[-1] != d:
        raise DimensionError(f"transposed_conv1d: channels {x.shape} vs kernel {kernel.shape}")
    if k < stride:
        raise DimensionError(f"transposed_conv1d: kernel length {k} shorter than stride {stride}")
    T = x.shape[0]
    L = (T - 1) * stride + k
    Lout = stride * T
    full = np.zeros((L, d), dtype=x.dtype)
    for j in range(k):
        full[j:j + stride * T:stride] += x.data * kernel.data[j]
    out = full[:Lout].copy()

    def bwd(g):
        gfull = np.zeros((L, d), dtype=g.dtype)
        gfull[:Lout] = g
        if kernel.requires_grad:
            gk = np.empty_like(kernel.data)
            for j in range(k):
                gk[j] = (x.data * gfull[j:j + stride * T:stride]).sum(axis=0)
            kernel._accumulate(gk)
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            for j in range(k):
                gx += gfull[j:j + stride * T:stride] * kernel.data[j]
            x._accumulate(gx)

    return _from_op(out, (x, kernel), bwd, "transposed_conv1d")


# -- recurrence ---------------------------------------------------------------


def lstm_step_count(T: int) -> int:
    return T  # documented for cost reasoning only


def _lstm_direction(x: Tensor, W: Tensor, R: Tensor, b: Tensor, reverse: bool) -> Tensor:
    """Single-direction LSTM over [T, d_in] -> [T, H]; fused gates i|f|g|o.

    Implemented as one primitive with hand-rolled BPTT so the per-step graph
    overhead stays off the hot path.
    """
    x, W, R, b = as_tensor(x), as_tensor(W), as_tensor(R), as_tensor(b)
    T, din = x.shape
    H4 = W.shape[1]
    H = H4 // 4
    if W.shape != (din, H4) or R.shape != (H, H4) or b.shape != (H4,):
        raise DimensionError(f"lstm: W{W.shape} R{R.shape} b{b.shape} inconsistent with input {x.shape}")
    order = range(T - 1, -1, -1) if reverse else range(T)
    pre = x.data @ W.data + b.data
    h = np.zeros(H, dtype=x.dtype)
    c = np.zeros(H, dtype=x.dtype)
    hs = np.zeros((T, H), dtype=x.dtype)
    saved = {}
    for t in order:
        a = pre[t] + h @ R.data
        i = 1.0 / (1.0 + np.exp(-a[:H]))
        f = 1.0 / (1.0 + np.exp(-a[H:2 * H]))
        g = np.tanh(a[2 * H:3 * H])
        o = 1.0 / (1.0 + np.exp(-a[3 * H:]))
        c_prev = c
        c = f * c_prev + i * g
        tc = np.tanh(c)
        h_prev = h
        h = o * tc
        hs[t] = h
        saved[t] = (i, f, g, o, c_prev, tc, h_prev)

    def bwd(grad):
        gW = np.zeros_like(W.data)
        gR = np.zeros_like(R.data)
        gb = np.zeros_like(b.data)
        gx = np.zeros_like(x.data)
        dh_next = np.zeros(H, dtype=x.dtype)
        dc_next = np.zeros(H, dtype=x.dtype)
        for t in reversed(list(order)):
            i, f, g, o, c_prev, tc, h_prev = saved[t]
            dh = grad[t] + dh_next
            do = dh * tc
            dc = dh * o * (1.0 - tc * tc) + dc_next
            di = dc * g
            df = dc * c_prev
            dg = dc * i
            dc_next = dc * f
            da = np.concatenate([di * i * (1.0 - i), df * f * (1.0 - f),
                                 dg * (1.0 - g * g), do * o * (1.0 - o)])
            gW += np.outer(x.data[t], da)
            gR += np.outer(h_prev, da)
            gb += da
            gx[t] = W.data @ da
            dh_next = R.data @ da
        if x.requires_grad:
            x._accumulate(gx)
        if W.requires_grad:
            W._accumulate(gW)
        if R.requires_grad:
            R._accumulate(gR)
        if b.requires_grad:
            b._accumulate(gb)

    return _from_op(hs, (x, W, R, b), bwd, "lstm")


def lstm_layer(x: Tensor, params, direction: str = "fwd") -> Tensor:
    """LSTM over a [T, d_in] sequence.

    ``params`` is (W, R, b) for fwd/bwd, or a pair of such triples for
    bidirectional, whose two half-width outputs are concatenated.
    """
    if direction == "fwd":
        return _lstm_direction(x, *params, reverse=False)
    if direction == "bwd":
        return _lstm_direction(x, *params, reverse=True)
    if direction == "bidirectional":
        fwd_p, bwd_p = params
        return concat([_lstm_direction(x, *fwd_p, reverse=False),
                       _lstm_direction(x, *bwd_p, reverse=True)], axis=-1)
    raise UsageError(f"unknown lstm direction {direction!r}")


def threshold_keep(x: Tensor, k: float, straight_through: bool = False) -> Tensor:
    """Zero every entry below k, keep the rest.

    Backward passes gradient only through surviving entries; with
    ``straight_through`` the threshold is treated as identity instead.
    """
    x = as_tensor(x)
    mask = (x.data >= k).astype(x.dtype)
    out = x.data * mask

    def bwd(g):
        if x.requires_grad:
            x._accumulate(g if straight_through else g * mask)

    return _from_op(out, (x,), bwd, "threshold_keep")


# -- training helpers ---------------------------------------------------------


def dropout(x: Tensor, p: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout from an explicit seeded stream; identity when rng is None."""
    if rng is None or p <= 0.0:
        return x
    mask = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return mul(x, Tensor(mask))


def cross_entropy(logits: Tensor, labels: Array) -> Tensor:
    """Mean negative log-likelihood over rows of [N, C] logits."""
    labels = np.asarray(labels, dtype=np.int64)
    logp = log_softmax(logits, axis=-1)
    picked = take_last_axis(logp, labels.reshape(-1, 1))
    return mul(reduce_sum(picked), -1.0 / float(labels.shape[0]))


# -- gradient checking --------------------------------------------------------


def grad_check(f, inputs, eps=1e-5, seed: int = 0) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps the given tensors to one tensor; the scalar probe is
    sum(f(x) * R) for a fixed random R so every output coordinate matters.
    All inputs must be float64 for the differences to be trustworthy.

    ``eps`` may be a tuple of step sizes; each coordinate then scores its best
    step. The finite-difference error is step dependent (too small is
    roundoff-bound, too large truncation-bound) while a wrong analytic
    gradient disagrees at every step, so the min stays a valid oracle.
    """
    inputs = list(inputs)
    eps_values = (eps,) if isinstance(eps, float) else tuple(eps)
    for t in inputs:
        if t.dtype != np.float64:
            raise UsageError("grad_check requires float64 inputs")
        t.requires_grad = True
        t.grad = None
    rng = np.random.default_rng(seed)
    out = f(*inputs)
    R = rng.standard_normal(out.shape)
    loss = reduce_sum(mul(out, Tensor(R)))
    loss.backward()
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in inputs]

    def eval_loss() -> float:
        return float((f(*inputs).data * R).sum())

    worst = 0.0
    for t, ana in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        aflat = ana.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            best = np.inf
            for e in eps_values:
                flat[i] = orig + e
                up = eval_loss()
                flat[i] = orig - e
                down = eval_loss()
                flat[i] = orig
                num = (up - down) / (2.0 * e)
                denom = max(abs(aflat[i]), abs(num), 1e-8)
                best = min(best, abs(aflat[i] - num) / denom)
            worst = max(worst, best)
    return worst
