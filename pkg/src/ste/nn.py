"""Minimal dense-tensor core with reverse-mode gradients and Adam.

Tensors wrap numpy arrays of up to 4 dims (batch, channel, height, width).
Values are stored in 32-bit floats by default; explicit reductions (sum,
mean, L1) accumulate in 64-bit before rounding back to the storage dtype.
The operator set is fixed to what the erasing/discriminator/policy models
need; it is not a general autodiff library.

Gradient conventions: relu/leaky-relu use the negative-side slope at 0,
and the L1 subgradient at 0 is 0.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, InvalidArgumentError, NumericError

DEFAULT_DTYPE = np.float32


def _tune_allocator():
    # Large temporaries churn through mmap/munmap by default, paying page
    # faults on every conv call. Keep big blocks on the retained heap.
    try:
        import ctypes

        libc = ctypes.CDLL("libc.so.6", use_errno=True)
        libc.mallopt(-3, 1 << 30)    # M_MMAP_THRESHOLD
        libc.mallopt(-1, 1 << 30)    # M_TRIM_THRESHOLD
    except (OSError, AttributeError):
        pass


_tune_allocator()


class Tensor:
    """A dense array plus an optional gradient accumulator."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        if arr.ndim > 4:
            raise InvalidArgumentError(f"tensors are limited to 4 dims, got {arr.ndim}")
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, grad):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += grad.astype(self.data.dtype, copy=False)

    def backward(self):
        """Reverse-mode sweep from a scalar output."""
        if self.data.size != 1:
            raise ContractError("backward() requires a scalar output")
        topo = []
        seen = set()
        stack = [(self, False)]
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
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


_GRAD_ENABLED = [True]


class no_grad:
    """Context manager suppressing graph construction (snapshot forwards)."""

    def __enter__(self):
        _GRAD_ENABLED.append(False)
        return self

    def __exit__(self, *exc):
        _GRAD_ENABLED.pop()
        return False


def _make(data, parents, backward):
    """Build a graph node; gradient tracking follows the parents."""
    out = Tensor(data)
    if _GRAD_ENABLED[-1] and any(p.requires_grad or p._parents for p in parents):
        out.requires_grad = any(p.requires_grad for p in parents)
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _needs(t):
    return t.requires_grad or t._parents


def _unbroadcast(grad, shape):
    """Sum a broadcast gradient back down to ``shape``."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise ops


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data + b.data

    def backward(g):
        if _needs(a):
            a._accumulate(_unbroadcast(g, a.shape))
        if _needs(b):
            b._accumulate(_unbroadcast(g, b.shape))

    return _make(out_data, (a, b), backward)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data - b.data

    def backward(g):
        if _needs(a):
            a._accumulate(_unbroadcast(g, a.shape))
        if _needs(b):
            b._accumulate(-_unbroadcast(g, b.shape))

    return _make(out_data, (a, b), backward)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data * b.data

    def backward(g):
        if _needs(a):
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if _needs(b):
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _make(out_data, (a, b), backward)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data / b.data

    def backward(g):
        if _needs(a):
            a._accumulate(_unbroadcast(g / b.data, a.shape))
        if _needs(b):
            b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make(out_data, (a, b), backward)


def pow_const(a, p):
    """a ** p for a constant exponent p."""
    a = as_tensor(a)
    out_data = a.data ** p

    def backward(g):
        if _needs(a):
            a._accumulate(g * p * a.data ** (p - 1))

    return _make(out_data, (a,), backward)


def relu(a):
    a = as_tensor(a)
    out_data = np.maximum(a.data, 0)

    def backward(g):
        if _needs(a):
            a._accumulate(g * (a.data > 0))

    return _make(out_data, (a,), backward)


def leaky_relu(a, slope=0.2):
    a = as_tensor(a)
    out_data = np.where(a.data > 0, a.data, slope * a.data)

    def backward(g):
        if _needs(a):
            a._accumulate(g * np.where(a.data > 0, 1.0, slope).astype(a.dtype))

    return _make(out_data, (a,), backward)


def sigmoid(a):
    a = as_tensor(a)
    out_data = 1.0 / (1.0 + np.exp(-a.data))

    def backward(g):
        if _needs(a):
            a._accumulate(g * out_data * (1.0 - out_data))

    return _make(out_data, (a,), backward)


def tanh(a):
    a = as_tensor(a)
    out_data = np.tanh(a.data)

    def backward(g):
        if _needs(a):
            a._accumulate(g * (1.0 - out_data * out_data))

    return _make(out_data, (a,), backward)


def exp(a):
    a = as_tensor(a)
    out_data = np.exp(a.data)

    def backward(g):
        if _needs(a):
            a._accumulate(g * out_data)

    return _make(out_data, (a,), backward)


def absolute(a):
    """|a|; subgradient at 0 is 0."""
    a = as_tensor(a)
    out_data = np.abs(a.data)

    def backward(g):
        if _needs(a):
            a._accumulate(g * np.sign(a.data))

    return _make(out_data, (a,), backward)


# ---------------------------------------------------------------------------
# shape ops


def concat(tensors, axis=1):
    tensors = [as_tensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if _needs(t):
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t._accumulate(g[tuple(sl)])

    return _make(out_data, tuple(tensors), backward)


def narrow(a, axis, start, length):
    """Slice ``length`` entries from ``start`` along ``axis``."""
    a = as_tensor(a)
    sl = [slice(None)] * a.data.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)
    out_data = a.data[sl]

    def backward(g):
        if _needs(a):
            full = np.zeros_like(a.data)
            full[sl] = g
            a._accumulate(full)

    return _make(out_data, (a,), backward)


def reshape(a, shape):
    a = as_tensor(a)
    out_data = a.data.reshape(shape)
    orig = a.data.shape

    def backward(g):
        if _needs(a):
            a._accumulate(g.reshape(orig))

    return _make(out_data, (a,), backward)


# ---------------------------------------------------------------------------
# reductions (64-bit accumulation, rounded back to storage dtype)


def sum_all(a):
    a = as_tensor(a)
    out_data = np.asarray(a.data.sum(dtype=np.float64), dtype=a.dtype)

    def backward(g):
        if _needs(a):
            a._accumulate(np.broadcast_to(g, a.shape))

    return _make(out_data, (a,), backward)


def mean_all(a):
    a = as_tensor(a)
    n = a.data.size
    out_data = np.asarray(a.data.sum(dtype=np.float64) / n, dtype=a.dtype)

    def backward(g):
        if _needs(a):
            a._accumulate(np.broadcast_to(g / n, a.shape))

    return _make(out_data, (a,), backward)


def l1_distance(a, b):
    """Mean absolute difference, as a scalar graph node."""
    a, b = as_tensor(a), as_tensor(b)
    diff = a.data - b.data
    n = diff.size
    out_data = np.asarray(np.abs(diff).sum(dtype=np.float64) / n, dtype=a.dtype)

    def backward(g):
        s = g * np.sign(diff) / n
        if _needs(a):
            a._accumulate(s)
        if _needs(b):
            b._accumulate(-s)

    return _make(out_data, (a, b), backward)


# ---------------------------------------------------------------------------
# linear algebra / network layers


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise InvalidArgumentError("matmul expects 2-D operands")
    if a.shape[1] != b.shape[0]:
        raise InvalidArgumentError(f"matmul shapes {a.shape} x {b.shape} do not align")
    out_data = a.data @ b.data

    def backward(g):
        if _needs(a):
            a._accumulate(g @ b.data.T)
        if _needs(b):
            b._accumulate(a.data.T @ g)

    return _make(out_data, (a, b), backward)


def conv2d(x, w, bias=None, stride=1):
    """2-D convolution, zero padding k//2, stride 1 or 2.

    x: (B, Cin, H, W); w: (Cout, Cin, kh, kw); bias: (Cout,) or None.

    Implementation note: the padded input is laid out per batch item as a
    flat plane with a trailing guard band of zeros, so every im2col row
    block is a plain shifted copy of the plane (no gathers), and one
    batched GEMM per call does all the arithmetic. The guard band keeps
    shifted reads from crossing into the next batch item.
    """
    x, w = as_tensor(x), as_tensor(w)
    if stride not in (1, 2):
        raise InvalidArgumentError(f"stride must be 1 or 2, got {stride}")
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise InvalidArgumentError("conv2d expects 4-D input and weight")
    b_, cin, h, wd = x.shape
    cout, cin_w, kh, kw = w.shape
    if cin != cin_w:
        raise InvalidArgumentError(f"conv2d channel mismatch: input {cin}, weight {cin_w}")
    ph, pw = kh // 2, kw // 2
    hp, wp = h + 2 * ph, wd + 2 * pw
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    guard = (kh - 1) * wp + (kw - 1)
    plane = hp * wp + guard
    taps = kh * kw
    dtype = x.dtype

    xp = np.empty((b_, cin, plane), dtype=dtype)
    xp[:, :, hp * wp:] = 0.0
    xp4 = xp[:, :, :hp * wp].reshape(b_, cin, hp, wp)
    if ph or pw:
        xp4[:, :, :ph, :] = 0.0
        xp4[:, :, ph + h:, :] = 0.0
        xp4[:, :, :, :pw] = 0.0
        xp4[:, :, :, pw + wd:] = 0.0
    xp4[:, :, ph:ph + h, pw:pw + wd] = x.data

    cols = np.empty((b_, taps * cin, plane), dtype=dtype)
    for t in range(taps):
        i, j = divmod(t, kw)
        k = i * wp + j
        block = cols[:, t * cin:(t + 1) * cin]
        if k:
            block[:, :, :plane - k] = xp[:, :, k:]
            block[:, :, plane - k:] = 0.0
        else:
            block[:, :, :] = xp
    # weight flattened tap-major to match the cols row blocks
    w2 = np.ascontiguousarray(w.data.transpose(0, 2, 3, 1).reshape(cout, taps * cin))

    yfull = np.matmul(w2, cols)                     # (B, Cout, plane), contiguous
    y4 = yfull[:, :, :hp * wp].reshape(b_, cout, hp, wp)
    out_data = np.ascontiguousarray(y4[:, :, 0:ho * stride:stride, 0:wo * stride:stride])
    if bias is not None:
        bias = as_tensor(bias)
        out_data += bias.data.reshape(1, cout, 1, 1)
    parents = (x, w) if bias is None else (x, w, bias)

    def backward(g):
        if bias is not None and _needs(bias):
            bias._accumulate(g.sum(axis=(0, 2, 3), dtype=np.float64).astype(g.dtype))
        need_w, need_x = _needs(w), _needs(x)
        if not (need_w or need_x):
            return
        if stride == 1:
            gye = np.empty((b_, cout, plane), dtype=dtype)
            gye[:, :, hp * wp:] = 0.0
            gye4 = gye[:, :, :hp * wp].reshape(b_, cout, hp, wp)
            gye4[:, :, ho:, :] = 0.0
            gye4[:, :, :, wo:] = 0.0
        else:
            gye = np.zeros((b_, cout, plane), dtype=dtype)
            gye4 = gye[:, :, :hp * wp].reshape(b_, cout, hp, wp)
        gye4[:, :, 0:ho * stride:stride, 0:wo * stride:stride] = g
        if need_w:
            dw2 = np.matmul(gye, cols.transpose(0, 2, 1)).sum(axis=0)  # (cout, taps*cin)
            w._accumulate(dw2.reshape(cout, kh, kw, cin).transpose(0, 3, 1, 2))
        if need_x:
            dcols = np.matmul(np.ascontiguousarray(w2.T), gye)   # (B, taps*cin, plane)
            dxp = np.empty((b_, cin, plane), dtype=dtype)
            dxp[:, :, :] = dcols[:, :cin]
            for t in range(1, taps):
                i, j = divmod(t, kw)
                k = i * wp + j
                dxp[:, :, k:] += dcols[:, t * cin:(t + 1) * cin, :plane - k]
            dxp4 = dxp[:, :, :hp * wp].reshape(b_, cin, hp, wp)
            x._accumulate(dxp4[:, :, ph:ph + h, pw:pw + wd])

    return _make(out_data, parents, backward)


def upsample2x(x):
    """Nearest-neighbour 2x upsampling on the spatial dims."""
    x = as_tensor(x)
    if x.data.ndim != 4:
        raise InvalidArgumentError("upsample2x expects a 4-D tensor")
    out_data = x.data.repeat(2, axis=2).repeat(2, axis=3)
    b, c, h, w = x.shape

    def backward(g):
        if _needs(x):
            x._accumulate(g.reshape(b, c, h, 2, w, 2).sum(axis=(3, 5)))

    return _make(out_data, (x,), backward)


def log_softmax(a, axis=-1):
    """Numerically stable log-softmax."""
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out_data = shifted - lse

    def backward(g):
        if _needs(a):
            soft = np.exp(out_data)
            a._accumulate(g - soft * g.sum(axis=axis, keepdims=True))

    return _make(out_data, (a,), backward)


def index_scalar(a, idx):
    """Pick a single entry from a 1-D tensor as a scalar node."""
    a = as_tensor(a)
    flat = a.data.reshape(-1)
    out_data = np.asarray(flat[idx], dtype=a.dtype)

    def backward(g):
        if _needs(a):
            full = np.zeros_like(a.data)
            full.reshape(-1)[idx] = g
            a._accumulate(full)

    return _make(out_data, (a,), backward)


def take_rows(a, indices):
    """Gather rows of a 2-D tensor (embedding lookup)."""
    a = as_tensor(a)
    indices = np.asarray(indices, dtype=np.int64)
    out_data = a.data[indices]

    def backward(g):
        if _needs(a):
            full = np.zeros_like(a.data)
            np.add.at(full, indices, g)
            a._accumulate(full)

    return _make(out_data, (a,), backward)


def select_columns(a, cols):
    """Per-row column pick from a 2-D tensor; returns a 1-D tensor."""
    a = as_tensor(a)
    cols = np.asarray(cols, dtype=np.int64)
    rows = np.arange(a.shape[0])
    out_data = a.data[rows, cols]

    def backward(g):
        if _needs(a):
            full = np.zeros_like(a.data)
            full[rows, cols] = g
            a._accumulate(full)

    return _make(out_data, (a,), backward)


def lstm_cell(x, h, c, wx, wh, b):
    """One LSTM step; gate order (input, forget, cell, output).

    x: (B, In); h, c: (B, H); wx: (In, 4H); wh: (H, 4H); b: (4H,).
    Returns (h', c').
    """
    x, h, c = as_tensor(x), as_tensor(h), as_tensor(c)
    hidden = h.shape[1]
    gates = add(add(matmul(x, wx), matmul(h, wh)), b)
    i = sigmoid(narrow(gates, 1, 0, hidden))
    f = sigmoid(narrow(gates, 1, hidden, hidden))
    g = tanh(narrow(gates, 1, 2 * hidden, hidden))
    o = sigmoid(narrow(gates, 1, 3 * hidden, hidden))
    c2 = add(mul(f, c), mul(i, g))
    h2 = mul(o, tanh(c2))
    return h2, c2


def check_finite(t, what="value"):
    """Raise NumericError when a forward value is not finite."""
    if not np.all(np.isfinite(t.data if isinstance(t, Tensor) else t)):
        raise NumericError(f"non-finite {what} encountered")
    return t


# ---------------------------------------------------------------------------
# parameters and Adam

ADAM_BETA1 = 0.5
ADAM_BETA2 = 0.9
ADAM_EPS = 1e-8


class ParamSet:
    """Named parameter tensors plus per-parameter Adam state."""

    def __init__(self):
        self.params = {}        # name -> Tensor(requires_grad=True)
        self.adam_m = {}
        self.adam_v = {}
        self.adam_step_count = {}

    def add(self, name, data, dtype=None):
        if name in self.params:
            raise InvalidArgumentError(f"duplicate parameter name {name!r}")
        t = Tensor(np.asarray(data), requires_grad=True, dtype=dtype)
        self.params[name] = t
        self.adam_m[name] = np.zeros_like(t.data)
        self.adam_v[name] = np.zeros_like(t.data)
        self.adam_step_count[name] = 0
        return t

    def __getitem__(self, name):
        return self.params[name]

    def __contains__(self, name):
        return name in self.params

    def names(self):
        return list(self.params)

    def zero_grads(self):
        for t in self.params.values():
            t.grad = None

    def state_hash(self):
        """Digest of all parameter bytes; used to assert no-update contracts."""
        import hashlib

        h = hashlib.sha256()
        for name in self.params:
            h.update(name.encode())
            h.update(self.params[name].data.tobytes())
        return h.hexdigest()

    def astype(self, dtype):
        """Copy of this ParamSet with parameters cast to ``dtype``."""
        out = ParamSet()
        for name, t in self.params.items():
            out.add(name, t.data.astype(dtype))
            out.adam_m[name] = self.adam_m[name].astype(dtype)
            out.adam_v[name] = self.adam_v[name].astype(dtype)
            out.adam_step_count[name] = self.adam_step_count[name]
        return out


def adam_step(params: ParamSet, lr, beta1=ADAM_BETA1, beta2=ADAM_BETA2, eps=ADAM_EPS):
    """Standard Adam with bias correction; clears grads afterwards."""
    for name, t in params.params.items():
        if t.grad is None:
            raise ContractError(f"adam_step: parameter {name!r} has no gradient")
        if not np.all(np.isfinite(t.grad)):
            raise NumericError(f"adam_step: non-finite gradient for {name!r}")
    for name, t in params.params.items():
        g = t.grad
        params.adam_step_count[name] += 1
        k = params.adam_step_count[name]
        m = params.adam_m[name]
        v = params.adam_v[name]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        m_hat = m / (1 - beta1 ** k)
        v_hat = v / (1 - beta2 ** k)
        t.data -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(t.dtype)
        t.grad = None


def grad_check(build_fn, params: ParamSet, eps=1e-4):
    """Max relative error between backward grads and central differences.

    ``build_fn()`` must rebuild the scalar-output graph from the live
    parameter values each call. The check runs on the parameters as given;
    build them in float64 for a tight comparison. Relative error uses
    max(|analytic|, |numeric|, 1e-6) in the denominator.
    """
    params.zero_grads()
    loss = build_fn()
    if loss.data.size != 1:
        raise ContractError("grad_check requires a scalar-output graph")
    loss.backward()
    analytic = {name: t.grad.copy() if t.grad is not None else np.zeros_like(t.data)
                for name, t in params.params.items()}
    worst = 0.0
    for name, t in params.params.items():
        flat = t.data.reshape(-1)
        a_flat = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = build_fn().item()
            flat[i] = orig - eps
            f_minus = build_fn().item()
            flat[i] = orig
            num = (f_plus - f_minus) / (2 * eps)
            denom = max(abs(a_flat[i]), abs(num), 1e-6)
            worst = max(worst, abs(a_flat[i] - num) / denom)
    params.zero_grads()
    return worst


def kaiming_uniform(rng, shape, fan_in):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def conv_init(rng, cout, cin, k):
    return kaiming_uniform(rng, (cout, cin, k, k), cin * k * k)


def linear_init(rng, n_in, n_out):
    return kaiming_uniform(rng, (n_in, n_out), n_in)


def lstm_init(rng, n_in, hidden):
    """Uniform(+-0.08) LSTM weights, zero bias."""
    wx = rng.uniform(-0.08, 0.08, size=(n_in, 4 * hidden))
    wh = rng.uniform(-0.08, 0.08, size=(hidden, 4 * hidden))
    b = np.zeros(4 * hidden)
    return wx, wh, b
