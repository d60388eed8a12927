"""Reverse-mode differentiation on dense numpy tensors.

Define-by-run: primitives executed while a Tape is active are recorded and
replayed in exact reverse order by ``Tape.backward``.  Without an active
tape the same primitives are plain numpy forward computations, which is
what evaluation and finite differencing use.

Double precision is the reference dtype for tests and oracles; training
may run in single precision.  All primitives preserve the input dtype.
"""

from __future__ import annotations

import threading

import numpy as np


class AutodiffError(Exception):
    pass


class ShapeMismatch(AutodiffError):
    def __init__(self, what: str, got, expected):
        super().__init__(f"{what}: got shape {tuple(got)}, expected {tuple(expected)}")


class NotScalar(AutodiffError):
    def __init__(self, shape):
        super().__init__(f"backward needs a scalar loss, got shape {tuple(shape)}")


class Tensor:
    """A dense array node.  ``requires_grad`` marks graph-relevant inputs."""

    __slots__ = ("data", "requires_grad", "_param", "_grad", "_grad_owned")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data)
        self.requires_grad = requires_grad
        self._param = None
        self._grad = None  # scratch used only inside Tape.backward
        self._grad_owned = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"


class Param:
    """Named trainable tensor with a persistent, additively-updated grad."""

    def __init__(self, name: str, value: np.ndarray):
        self.name = name
        self.value = Tensor(np.asarray(value), requires_grad=True)
        self.value._param = self
        self.grad = np.zeros_like(self.value.data)

    @property
    def data(self) -> np.ndarray:
        return self.value.data

    @data.setter
    def data(self, arr) -> None:
        arr = np.asarray(arr)
        if arr.shape != self.value.data.shape:
            raise ShapeMismatch(f"param {self.name}", arr.shape, self.value.data.shape)
        self.value.data = arr
        if self.grad.dtype != arr.dtype:
            self.grad = np.zeros_like(arr)

    def zero_grad(self) -> None:
        self.grad[...] = 0


_ACTIVE = threading.local()


def _tape_stack():
    if not hasattr(_ACTIVE, "stack"):
        _ACTIVE.stack = []
    return _ACTIVE.stack


def _current_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of executed primitives; single-writer per pass."""

    def __init__(self):
        self._ops = []

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        popped = _tape_stack().pop()
        assert popped is self
        return False

    def _record(self, out: Tensor, inputs, vjp) -> None:
        self._ops.append((out, inputs, vjp))

    def backward(self, loss: Tensor) -> None:
        """Populate Param.grad for every parameter reachable from ``loss``.

        Repeated calls without zero_grad accumulate into Param.grad; the
        per-call intermediate gradients live in scratch slots on the
        tensors, so each call contributes exactly one full gradient.
        Single-threaded per process (training is a single logical writer).
        """
        if loss.data.size != 1:
            raise NotScalar(loss.data.shape)
        loss._grad = np.ones_like(loss.data)
        loss._grad_owned = True
        if loss._param is not None:
            loss._param.grad += loss._grad
        touched = [loss]
        for out, inputs, vjp in reversed(self._ops):
            g = out._grad
            if g is None:
                continue
            out._grad = None  # outputs are produced once; consume and clear
            for t, gi in zip(inputs, vjp(g)):
                if gi is None or not t.requires_grad:
                    continue
                if t._grad is None:
                    t._grad = gi
                    t._grad_owned = False
                    touched.append(t)
                elif t._grad_owned:
                    t._grad += gi
                else:
                    t._grad = t._grad + gi  # first copy; vjps may return views
                    t._grad_owned = True
                if t._param is not None:
                    t._param.grad += gi
        for t in touched:
            t._grad = None


def _wrap(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if isinstance(x, Param):
        return x.value
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _make(out_data, inputs, vjp) -> Tensor:
    tape = _current_tape()
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if tape is not None and needs:
        tape._record(out, inputs, vjp)
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum gradients over axes that were broadcast in the forward op."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a = _wrap(a)
    b = _wrap(b, like=a)
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeMismatch("add operand b", b.shape, a.shape) from None
    na, nb = a.requires_grad, b.requires_grad
    return _make(
        out,
        (a, b),
        lambda g: (
            _unbroadcast(g, a.shape) if na else None,
            _unbroadcast(g, b.shape) if nb else None,
        ),
    )


def sub(a, b) -> Tensor:
    a = _wrap(a)
    b = _wrap(b, like=a)
    try:
        out = a.data - b.data
    except ValueError:
        raise ShapeMismatch("sub operand b", b.shape, a.shape) from None
    na, nb = a.requires_grad, b.requires_grad
    return _make(
        out,
        (a, b),
        lambda g: (
            _unbroadcast(g, a.shape) if na else None,
            _unbroadcast(-g, b.shape) if nb else None,
        ),
    )


def mul(a, b) -> Tensor:
    a = _wrap(a)
    b = _wrap(b, like=a)
    try:
        out = a.data * b.data
    except ValueError:
        raise ShapeMismatch("mul operand b", b.shape, a.shape) from None
    ad, bd = a.data, b.data
    na, nb = a.requires_grad, b.requires_grad
    return _make(
        out,
        (a, b),
        lambda g: (
            _unbroadcast(g * bd, a.shape) if na else None,
            _unbroadcast(g * ad, b.shape) if nb else None,
        ),
    )


def scale(a, c: float) -> Tensor:
    a = _wrap(a)
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,))


def matmul(a, b) -> Tensor:
    a = _wrap(a)
    b = _wrap(b, like=a)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch("matmul operand b", b.shape, (a.shape[1], "*"))
    ad, bd = a.data, b.data
    na, nb = a.requires_grad, b.requires_grad
    return _make(
        ad @ bd,
        (a, b),
        lambda g: (g @ bd.T if na else None, ad.T @ g if nb else None),
    )


def relu(a) -> Tensor:
    a = _wrap(a)
    data = a.data
    return _make(np.maximum(data, 0), (a,), lambda g: (g * (data > 0),))


def tanh(a) -> Tensor:
    a = _wrap(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)
    shape = a.shape

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, shape).astype(g.dtype, copy=True),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, shape).astype(g.dtype, copy=True),)

    return _make(out, (a,), vjp)


def mean(a) -> Tensor:
    a = _wrap(a)
    return scale(tsum(a), 1.0 / a.data.size)


def reshape(a, shape) -> Tensor:
    a = _wrap(a)
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, tuple(tensors), vjp)


def window_slice(seq, start: int, length: int) -> Tensor:
    """Rows ``start .. start+length-1`` of a 2-D tensor, zero-padded out of
    bounds.  Gradient flows only to in-bounds rows."""
    seq = _wrap(seq)
    if seq.ndim != 2:
        raise ShapeMismatch("window_slice input", seq.shape, ("n", "d"))
    n, d = seq.shape
    lo = max(start, 0)
    hi = min(start + length, n)
    out = np.zeros((length, d), dtype=seq.dtype)
    if hi > lo:
        out[lo - start : hi - start] = seq.data[lo:hi]

    def vjp(g):
        gs = np.zeros((n, d), dtype=g.dtype)
        if hi > lo:
            gs[lo:hi] = g[lo - start : hi - start]
        return (gs,)

    return _make(out, (seq,), vjp)


def stack_windows(seq, shifts) -> Tensor:
    """Row i holds [seq[i+s] for s in shifts] side by side, zero-padded out
    of bounds.  One fused allocation instead of slice-then-concat."""
    seq = _wrap(seq)
    if seq.ndim != 2:
        raise ShapeMismatch("stack_windows input", seq.shape, ("n", "d"))
    n, d = seq.shape
    shifts = tuple(shifts)
    out = np.zeros((n, len(shifts) * d), dtype=seq.dtype)
    spans = []
    for j, s in enumerate(shifts):
        lo, hi = max(0, -s), min(n, n - s)
        spans.append((j, s, lo, hi))
        if hi > lo:
            out[lo:hi, j * d : (j + 1) * d] = seq.data[lo + s : hi + s]

    def vjp(g):
        gs = np.zeros((n, d), dtype=g.dtype)
        for j, s, lo, hi in spans:
            if hi > lo:
                gs[lo + s : hi + s] += g[lo:hi, j * d : (j + 1) * d]
        return (gs,)

    return _make(out, (seq,), vjp)


def softmax(a, axis: int = -1) -> Tensor:
    a = _wrap(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _make(out, (a,), vjp)


def logsumexp(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Max-subtracted logsumexp; rows of all -inf stay -inf without NaNs."""
    a = _wrap(a)
    m = a.data.max(axis=axis, keepdims=True)
    m_safe = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(a.data - m_safe)
    s = e.sum(axis=axis, keepdims=True)
    out_k = np.where(np.isfinite(m), m_safe + np.log(s), m)
    out = out_k if keepdims else np.squeeze(out_k, axis=axis)

    def vjp(g):
        gg = g if keepdims else np.expand_dims(g, axis)
        with np.errstate(invalid="ignore"):
            w = np.where(np.isfinite(out_k), np.exp(a.data - np.where(
                np.isfinite(out_k), out_k, 0.0)), 0.0)
        return (gg * w,)

    return _make(out, (a,), vjp)


def dropout(a, p: float, train_flag: bool, rng: np.random.Generator) -> Tensor:
    """Inverted dropout: identity when not training or p == 0."""
    a = _wrap(a)
    if not train_flag or p == 0.0:
        return _make(a.data, (a,), lambda g: (g,))
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout rate {p} outside [0, 1)")
    draw_dtype = np.float32 if a.dtype == np.float32 else np.float64
    # floor(u + (1-p)) is 1 with probability 1-p, else 0; keeps it all-float
    keep = rng.random(a.shape, dtype=draw_dtype)
    keep += 1.0 - p
    np.floor(keep, out=keep)
    keep *= 1.0 / (1.0 - p)
    if keep.dtype != a.dtype:
        keep = keep.astype(a.dtype)
    return _make(a.data * keep, (a,), lambda g: (g * keep,))


def embedding_lookup(table, ids) -> Tensor:
    """Rows of ``table`` selected by an integer id array (gather)."""
    table = _wrap(table)
    ids = np.asarray(ids, dtype=np.int64)
    out = table.data[ids]
    shape = table.shape

    def vjp(g):
        gt = np.zeros(shape, dtype=g.dtype)
        np.add.at(gt, ids, g)
        return (gt,)

    return _make(out, (table,), vjp)


def masked_fill(a, mask, value: float) -> Tensor:
    """Replace entries where ``mask`` is true; gradient is blocked there."""
    a = _wrap(a)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)
    out = np.where(mask, np.asarray(value, dtype=a.dtype), a.data)
    return _make(out, (a,), lambda g: (np.where(mask, 0.0, g),))


def custom_op(out_data, inputs, vjp) -> Tensor:
    """Register a hand-fused primitive.

    ``inputs`` are the Tensors the output depends on; ``vjp`` maps the
    output gradient to one gradient per input (None where unneeded).
    """
    return _make(out_data, tuple(inputs), vjp)


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, dtype=np.float64):
    """Uniform(-lim, lim) weight init with lim = sqrt(6 / (fan_in + fan_out))."""
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=(fan_in, fan_out)).astype(dtype)


# ---------------------------------------------------------------------------
# checkpoint format
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = "segner-checkpoint"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, params) -> None:
    """Text manifest (name, dtype, shape per param) + raw little-endian data.

    Values are written in manifest order, so save -> load -> save is
    byte-identical.
    """
    params = list(params)
    names = [p.name for p in params]
    if len(set(names)) != len(names):
        raise ValueError("duplicate param names in checkpoint")
    lines = [CHECKPOINT_MAGIC, f"format_version {CHECKPOINT_VERSION}"]
    for p in params:
        dt = np.dtype(p.data.dtype).newbyteorder("<")
        dims = ",".join(str(d) for d in p.data.shape)
        lines.append(f"param {p.name} {dt.str} {dims}")
    lines.append("data")
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode("utf-8"))
        for p in params:
            dt = np.dtype(p.data.dtype).newbyteorder("<")
            fh.write(np.ascontiguousarray(p.data, dtype=dt).tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        blob = fh.read()
    header_end = blob.index(b"data\n") + len(b"data\n")
    lines = blob[:header_end].decode("utf-8").splitlines()
    if not lines or lines[0] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    if lines[1] != f"format_version {CHECKPOINT_VERSION}":
        raise ValueError(f"{path}: unsupported {lines[1]!r}")
    out: dict[str, np.ndarray] = {}
    offset = header_end
    for line in lines[2:-1]:
        _, name, dtype_str, dims = line.split(" ")
        shape = tuple(int(d) for d in dims.split(",")) if dims else ()
        dt = np.dtype(dtype_str)
        nbytes = int(np.prod(shape)) * dt.itemsize if shape else dt.itemsize
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype=dt, count=count, offset=offset)
        out[name] = arr.reshape(shape).copy()
        offset += nbytes
    return out


def restore_params(params, state: dict[str, np.ndarray]) -> None:
    for p in params:
        if p.name not in state:
            raise KeyError(f"checkpoint missing param {p.name}")
        p.data = state[p.name]


# ---------------------------------------------------------------------------
# finite-difference verification
# ---------------------------------------------------------------------------


def nudge_from_zero(arr: np.ndarray, gap: float = 1e-3) -> np.ndarray:
    """Push entries with |x| < gap away from 0 (relu kinks break central
    differences; test instances are nudged so no pre-activation sits on one)."""
    out = np.array(arr)
    small = np.abs(out) < gap
    out[small] = np.where(out[small] >= 0, gap, -gap)
    return out


def finite_diff_check(
    model_fn,
    params,
    epsilon: float = 1e-5,
    max_coords_per_param: int = 16,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``model_fn`` must be deterministic (dropout off).  Every param gets up
    to ``max_coords_per_param`` sampled coordinates; the relative error is
    |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
    """
    params = list(params)
    rng = rng or np.random.default_rng(0)
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        loss = model_fn()
    tape.backward(loss)
    analytic = {p.name: p.grad.copy() for p in params}

    worst = 0.0
    for p in params:
        size = p.data.size
        if size <= max_coords_per_param:
            coords = np.arange(size)
        else:
            coords = rng.choice(size, size=max_coords_per_param, replace=False)
        flat = p.data.reshape(-1)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + epsilon
            f_plus = model_fn().item()
            flat[c] = orig - epsilon
            f_minus = model_fn().item()
            flat[c] = orig
            numeric = (f_plus - f_minus) / (2.0 * epsilon)
            a = float(analytic[p.name].reshape(-1)[c])
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst
