"""Dense tensors with reverse-mode automatic differentiation.

Implements exactly the primitive set the segmentation network needs:
elementwise arithmetic, a scalar-producing sum, 2D convolution with "same"
zero padding, 2x2 max pooling, 2x2 nearest-neighbour upsampling and channel
concatenation.  Convolution is cross-correlation (the usual deep-learning
convention); kernels are never flipped in the forward pass.

A tensor produced by an operation doubles as its tape node: it records the
op name, its parent tensors and a closure that routes the incoming gradient
to the parents.  ``backward()`` on a scalar walks the recorded graph once in
reverse topological order, so every reachable leaf accumulates exactly one
gradient per backward pass.  All ops are deterministic, which makes repeated
backward passes (with cleared gradients) bitwise identical.

There is no general broadcasting: tensor-tensor arithmetic requires equal
shapes, python scalars are applied elementwise, and mapping over a leading
sequence axis is done explicitly by the time-distributed wrapper in
``seqseg.layers``.
"""

from __future__ import annotations

import contextlib

import numpy as np

_grad_enabled = True

# BLAS kernels pick code paths by operand address, so bitwise reproducibility
# across differently-allocated but value-identical buffers requires pinning
# every gemm operand to one alignment.  Leaf tensors, concatenations and
# im2col buffers all go through _aligned_empty / aligned_copy.
_ALIGN = 64


def _aligned_empty(shape, dtype):
    dtype = np.dtype(dtype)
    size = int(np.prod(shape)) if shape else 1
    raw = np.empty(size * dtype.itemsize + _ALIGN, dtype=np.uint8)
    off = (-raw.ctypes.data) % _ALIGN
    return raw[off : off + size * dtype.itemsize].view(dtype).reshape(shape)


def aligned_copy(a):
    out = _aligned_empty(a.shape, a.dtype)
    out[...] = a
    return out


def _ensure_aligned(a):
    if a.size and (a.ctypes.data % _ALIGN or not a.flags["C_CONTIGUOUS"]):
        return aligned_copy(a)
    return a


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (inference, export)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled():
    return _grad_enabled


class Tensor:
    """N-dimensional array plus the tape record that produced it."""

    __slots__ = ("data", "grad", "requires_grad", "op", "parents", "_backward")

    def __init__(self, data, requires_grad=False):
        data = np.asarray(data)
        if data.dtype not in (np.float32, np.float64):
            data = data.astype(np.float32)
        self.data = _ensure_aligned(data)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.op = "leaf"
        self.parents = ()
        self._backward = None

    # -- bookkeeping ------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op!r})"

    # -- backward pass ----------------------------------------------------

    def backward(self):
        """Reverse-mode gradient of this scalar w.r.t. every reachable leaf."""
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
        topo = _toposort(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- arithmetic -------------------------------------------------------

    def __add__(self, other):
        if isinstance(other, Tensor):
            _check_same_shape(self, other, "add")
            out = _make(self.data + other.data, (self, other), "add")
            if out._backward is _PENDING:
                def backward(g, a=self, b=other):
                    _accumulate(a, g)
                    _accumulate(b, g)
                out._backward = backward
            return out
        c = float(other)
        out = _make(self.data + c, (self,), "add_const")
        if out._backward is _PENDING:
            def backward(g, a=self):
                _accumulate(a, g)
            out._backward = backward
        return out

    __radd__ = __add__

    def __mul__(self, other):
        if isinstance(other, Tensor):
            _check_same_shape(self, other, "mul")
            out = _make(self.data * other.data, (self, other), "mul")
            if out._backward is _PENDING:
                def backward(g, a=self, b=other):
                    _accumulate(a, g * b.data)
                    _accumulate(b, g * a.data)
                out._backward = backward
            return out
        c = float(other)
        out = _make(self.data * c, (self,), "mul_const")
        if out._backward is _PENDING:
            def backward(g, a=self, c=c):
                _accumulate(a, g * c)
            out._backward = backward
        return out

    __rmul__ = __mul__

    def __neg__(self):
        return self * -1.0

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return self + (-other)
        return self + (-float(other))

    def __rsub__(self, other):
        return (-self) + float(other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            _check_same_shape(self, other, "div")
            out = _make(self.data / other.data, (self, other), "div")
            if out._backward is _PENDING:
                # capture the result array, not the tensor, to keep the tape
                # cycle-free so finished graphs free by refcount
                def backward(g, a=self, b=other, odata=out.data):
                    _accumulate(a, g / b.data)
                    _accumulate(b, -g * odata / b.data)
                out._backward = backward
            return out
        return self * (1.0 / float(other))

    def sum(self):
        """Sum of all elements as a scalar (shape ()) tensor."""
        total = np.asarray(self.data.sum(dtype=self.data.dtype))
        out = _make(total.reshape(()), (self,), "sum")
        if out._backward is _PENDING:
            def backward(g, a=self):
                _accumulate(a, np.broadcast_to(g, a.data.shape))
            out._backward = backward
        return out


# Sentinel marking "op tensor that still needs its backward closure".
# _make leaves _backward at None for constant results (grad disabled or no
# parent requires a gradient), so op definitions only build closures that can
# actually fire.
_PENDING = object()


def _make(data, parents, op):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out._backward = _PENDING
    else:
        out.requires_grad = False
        out.parents = ()
        out._backward = None
    return out


def _accumulate(t, g):
    """Add g to t.grad unless t is a constant leaf nobody differentiates."""
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, copy=True)
    else:
        t.grad += g


def _toposort(root):
    topo = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in visited:
                stack.append((p, False))
    return topo


def _check_same_shape(a, b, op):
    if a.data.shape != b.data.shape:
        raise ValueError(f"{op}: shape mismatch {a.data.shape} vs {b.data.shape}")
    if a.data.dtype != b.data.dtype:
        raise ValueError(f"{op}: dtype mismatch {a.data.dtype} vs {b.data.dtype}")


def elementwise(x, fn, grad_fn, op):
    """Differentiable elementwise op.  grad_fn(x_data, y_data) -> dy/dx."""
    y = fn(x.data)
    out = _make(y, (x,), op)
    if out._backward is _PENDING:
        def backward(g, a=x, ydata=y):
            _accumulate(a, g * grad_fn(a.data, ydata))
        out._backward = backward
    return out


# -- convolution ----------------------------------------------------------


def _im2col(x, kh, kw):
    """Zero-padded sliding windows of x[C,H,W] as a (C*kh*kw, H*W) matrix."""
    c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (kh // 2, kh // 2), (kw // 2, kw // 2)))
    cols = _aligned_empty((c, kh * kw, h, w), x.dtype)
    for u in range(kh):
        for v in range(kw):
            cols[:, u * kw + v] = xp[:, u : u + h, v : v + w]
    return cols.reshape(c * kh * kw, h * w)


def _conv_same_data(x, k, cols=None):
    """Cross-correlation of x[C,H,W] with k[Cout,C,kh,kw], same zero padding."""
    c_out, _, kh, kw = k.shape
    _, h, w = x.shape
    if cols is None:
        cols = _im2col(x, kh, kw)
    out = k.reshape(c_out, -1) @ cols
    return out.reshape(c_out, h, w), cols


def conv2d(x, kernel, bias=None):
    """2D convolution with "same" zero padding.

    x: Tensor[C_in, H, W]; kernel: Tensor[C_out, C_in, kh, kw] with odd kh,
    kw; bias: Tensor[C_out] or None.  Output spatial dims equal the input's.
    """
    if x.ndim != 3:
        raise ValueError(f"conv2d: input must be [C,H,W], got shape {x.shape}")
    if kernel.ndim != 4:
        raise ValueError(f"conv2d: kernel must be [Cout,Cin,kh,kw], got shape {kernel.shape}")
    c_out, c_in, kh, kw = kernel.shape
    if c_in != x.shape[0]:
        raise ValueError(
            f"conv2d: input shape {x.shape} incompatible with kernel shape {kernel.shape}"
        )
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"conv2d: kernel dims must be odd, got {kh}x{kw}")
    if bias is not None and bias.shape != (c_out,):
        raise ValueError(
            f"conv2d: bias shape {bias.shape} incompatible with kernel shape {kernel.shape}"
        )
    if x.dtype != kernel.dtype:
        raise ValueError(f"conv2d: dtype mismatch {x.dtype} vs {kernel.dtype}")

    y, cols = _conv_same_data(x.data, kernel.data)
    if bias is not None:
        y += bias.data[:, None, None]

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    out = _make(y, parents, "conv2d")
    if out._backward is _PENDING:
        # cols is kept alive for the kernel gradient only while recording
        def backward(g, x=x, kernel=kernel, bias=bias, cols=cols, kh=kh, kw=kw):
            c_out = kernel.shape[0]
            if kernel.requires_grad:
                gk = np.ascontiguousarray(g.reshape(c_out, -1)) @ cols.T
                _accumulate(kernel, gk.reshape(kernel.shape))
            if x.requires_grad:
                # same-padding correlation of g with the channel-transposed,
                # spatially flipped kernel gives the input gradient exactly
                kt = kernel.data.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1]
                gx, _ = _conv_same_data(g, np.ascontiguousarray(kt))
                _accumulate(x, gx)
            if bias is not None and bias.requires_grad:
                _accumulate(bias, g.sum(axis=(1, 2)))
        out._backward = backward
    return out


# -- pooling / resizing / concatenation ------------------------------------


def maxpool2x2(x):
    """2x2 max pooling; ties resolve to the first element in row-major order."""
    if x.ndim != 3:
        raise ValueError(f"maxpool2x2: input must be [C,H,W], got shape {x.shape}")
    c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"maxpool2x2: spatial dims must be even, got {h}x{w}")
    blocks = (
        x.data.reshape(c, h // 2, 2, w // 2, 2)
        .transpose(0, 1, 3, 2, 4)
        .reshape(c, h // 2, w // 2, 4)
    )
    # np.argmax returns the first maximum, i.e. row-major order inside the block
    idx = blocks.argmax(axis=3)
    y = np.take_along_axis(blocks, idx[..., None], axis=3)[..., 0]
    out = _make(y, (x,), "maxpool2x2")
    if out._backward is _PENDING:
        def backward(g, x=x, idx=idx, c=c, h=h, w=w):
            gb = np.zeros((c, h // 2, w // 2, 4), dtype=g.dtype)
            np.put_along_axis(gb, idx[..., None], g[..., None], axis=3)
            gx = gb.reshape(c, h // 2, w // 2, 2, 2).transpose(0, 1, 3, 2, 4).reshape(c, h, w)
            _accumulate(x, gx)
        out._backward = backward
    return out


def upsample2x2(x):
    """Nearest-neighbour 2x upsampling; each pixel fills its 2x2 output block."""
    if x.ndim != 3:
        raise ValueError(f"upsample2x2: input must be [C,H,W], got shape {x.shape}")
    y = np.repeat(np.repeat(x.data, 2, axis=1), 2, axis=2)
    out = _make(y, (x,), "upsample2x2")
    if out._backward is _PENDING:
        def backward(g, x=x):
            c, h, w = x.data.shape
            _accumulate(x, g.reshape(c, h, 2, w, 2).sum(axis=(2, 4)))
        out._backward = backward
    return out


def concat0(tensors):
    """Concatenate any number of tensors along axis 0."""
    tensors = tuple(tensors)
    if not tensors:
        raise ValueError("concat0: nothing to concatenate")
    trailing = tensors[0].shape[1:]
    for t in tensors[1:]:
        if t.shape[1:] != trailing:
            raise ValueError(
                f"concat0: trailing-shape mismatch {tensors[0].shape} vs {t.shape}"
            )
        if t.dtype != tensors[0].dtype:
            raise ValueError(f"concat0: dtype mismatch {tensors[0].dtype} vs {t.dtype}")
    total = sum(t.shape[0] for t in tensors)
    data = _aligned_empty((total,) + trailing, tensors[0].dtype)
    off = 0
    for t in tensors:
        data[off : off + t.shape[0]] = t.data
        off += t.shape[0]
    out = _make(data, tensors, "concat0")
    if out._backward is _PENDING:
        def backward(g, tensors=tensors):
            off = 0
            for t in tensors:
                n = t.data.shape[0]
                _accumulate(t, g[off : off + n])
                off += n
        out._backward = backward
    return out


def concat_channels(a, b):
    """Concatenate two [C,H,W] tensors along the channel axis, a first."""
    if a.ndim != 3 or b.ndim != 3:
        raise ValueError(f"concat_channels: inputs must be [C,H,W], got {a.shape} and {b.shape}")
    if a.shape[1:] != b.shape[1:]:
        raise ValueError(f"concat_channels: spatial mismatch {a.shape} vs {b.shape}")
    return concat0((a, b))


def slice_channels(x, start, stop):
    """Contiguous channel slice x[start:stop]; gradient zero-fills the rest."""
    if not 0 <= start < stop <= x.shape[0]:
        raise ValueError(f"slice_channels: bad range [{start}, {stop}) for shape {x.shape}")
    out = _make(x.data[start:stop], (x,), "slice_channels")
    if out._backward is _PENDING:
        def backward(g, x=x, start=start, stop=stop):
            gx = np.zeros_like(x.data)
            gx[start:stop] = g
            _accumulate(x, gx)
        out._backward = backward
    return out


# -- gradient verification --------------------------------------------------


def finite_difference_grad(f, x, h=1e-5):
    """Central-difference gradient of the scalar function f at x.

    Evaluates f once per coordinate and sign in double precision; intended
    as the independent oracle for ``backward()``.  Returns a float64 array
    shaped like x.
    """
    if h <= 0:
        raise ValueError(f"finite_difference_grad: h must be positive, got {h}")
    base = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    for i in range(flat.size):
        for sign in (+1.0, -1.0):
            probe = flat.copy()
            probe[i] += sign * h
            val = f(Tensor(probe.reshape(base.shape)))
            val = val.item() if isinstance(val, Tensor) else float(val)
            grad.reshape(-1)[i] += sign * val
    grad /= 2.0 * h
    return grad


def finite_difference_at(f, x, flat_indices, h=1e-5):
    """Central differences at selected flat coordinates only.

    Used for spot checks on large parameter tensors where the full
    per-coordinate sweep of ``finite_difference_grad`` is too expensive.
    """
    base = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    out = {}
    for i in flat_indices:
        vals = []
        for sign in (+1.0, -1.0):
            probe = base.reshape(-1).copy()
            probe[i] += sign * h
            val = f(Tensor(probe.reshape(base.shape)))
            vals.append(val.item() if isinstance(val, Tensor) else float(val))
        out[int(i)] = (vals[0] - vals[1]) / (2.0 * h)
    return out
