"""Dense float64 tensors with a define-by-run reverse-mode tape.

Every differentiable op computes its value with numpy and, when a tape is
active and at least one input requires a gradient, appends the output node to
that tape together with a closure that pushes the output gradient back to the
inputs.  ``backward`` walks the tape in reverse.

The ops here work on batched arrays (leading axes are broadcast), so a padded
``[batch, frames, dim]`` tensor flows through the model without reshaping.
"""

from __future__ import annotations

import hashlib
import io
import math
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

DTYPE = np.float64

_TAPES: list["Tape"] = []


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"

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

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Ordered record of the ops executed while the tape is active.

    Nodes are appended in execution order, so the list is already
    topologically sorted.
    """

    def __init__(self):
        self.ops: list[Tensor] = []

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False

    def __len__(self):
        return len(self.ops)

    def clear(self):
        for node in self.ops:
            node.grad = None
            node._parents = ()
            node._backward = None
        self.ops.clear()


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(data, parents, backward) -> Tensor:
    out = Tensor(data)
    if _TAPES and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        _TAPES[-1].ops.append(out)
    return out


def _accum(t: Tensor, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=DTYPE, copy=True)
    else:
        t.grad += g


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def backward(tape: Tape, loss: Tensor):
    """Accumulate d(loss)/d(leaf) into every reachable leaf, then clear the tape."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.requires_grad and loss._backward is not None:
        loss.grad = np.ones_like(loss.data)
        for node in reversed(tape.ops):
            if node.grad is not None:
                node._backward(node.grad)
    tape.clear()


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _record(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(-g, b.shape))

    return _record(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        _accum(a, _unbroadcast(g * b.data, a.shape))
        _accum(b, _unbroadcast(g * a.data, b.shape))

    return _record(a.data * b.data, (a, b), bw)


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    return _record(a.data * c, (a,), lambda g: _accum(a, g * c))


def total(a) -> Tensor:
    """Sum of all elements."""
    a = as_tensor(a)
    return _record(np.array(a.data.sum()), (a,), lambda g: _accum(a, np.broadcast_to(g, a.shape)))


def mean(a) -> Tensor:
    a = as_tensor(a)
    n = a.data.size

    return _record(
        np.array(a.data.mean()), (a,), lambda g: _accum(a, np.broadcast_to(g / n, a.shape))
    )


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x) -> Tensor:
    """Tanh-approximated GELU."""
    x = as_tensor(x)
    xd = x.data
    x2 = xd * xd
    t = np.tanh(_GELU_C * xd * (1.0 + 0.044715 * x2))
    out = 0.5 * xd * (1.0 + t)

    def bw(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        _accum(x, g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * du))

    return _record(out, (x,), bw)


# ---------------------------------------------------------------- shape ops


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _record(a.data.reshape(shape), (a,), lambda g: _accum(a, g.reshape(a.shape)))


def concat(tensors, axis=-1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        for t, piece in zip(tensors, np.split(g, cuts, axis=axis)):
            _accum(t, piece)

    return _record(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw)


def take(a, index, axis=0) -> Tensor:
    """Gather entries of ``a`` along ``axis`` (gradient scatters back)."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.int64)

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, (slice(None),) * (axis % a.ndim) + (index,), g)
        _accum(a, full)

    return _record(np.take(a.data, index, axis=axis), (a,), bw)


def column(a, j) -> Tensor:
    """Last-axis slice ``a[..., j]``."""
    a = as_tensor(a)

    def bw(g):
        full = np.zeros_like(a.data)
        full[..., j] = g
        _accum(a, full)

    return _record(a.data[..., j], (a,), bw)


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            if b.ndim == 2:
                ga = a.data.reshape(-1, a.shape[-1])
                _accum(b, ga.T @ g.reshape(-1, g.shape[-1]))
            else:
                _accum(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return _record(a.data @ b.data, (a, b), bw)


def linear(x, w, b=None) -> Tensor:
    """``x @ w + b`` over the last axis of ``x`` (``w`` is ``[in, out]``)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.shape[-1] != w.shape[0]:
        raise ValueError(f"linear shape mismatch: {x.shape} @ {w.shape}")
    x2 = x.data.reshape(-1, x.shape[-1])
    out = x2 @ w.data
    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        out = out + b.data
        parents.append(b)
    out = out.reshape(x.shape[:-1] + (w.shape[1],))

    def bw(g):
        g2 = g.reshape(-1, w.shape[1])
        if x.requires_grad:
            _accum(x, (g2 @ w.data.T).reshape(x.shape))
        if w.requires_grad:
            _accum(w, x2.T @ g2)
        if b is not None and b.requires_grad:
            _accum(b, g2.sum(axis=0))

    return _record(out, parents, bw)


def rowwise_matmul(a, b):
    """Plain-numpy ``a @ b`` whose rows do not depend on how many rows are passed.

    BLAS picks kernels by matrix shape, so the same row multiplied inside a
    1-row and a 100-row matrix can differ in the last bit.  Streaming
    inference relies on bit-exact agreement between chunked and whole-utterance
    evaluation, so it goes through this instead.
    """
    return np.einsum("...ik,kj->...ij", a, b, optimize=False)


# ---------------------------------------------------------------- normalisation


def softmax(x, axis=-1) -> Tensor:
    x = as_tensor(x)
    if not np.all(np.isfinite(x.data)):
        raise ValueError("softmax input contains non-finite values")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        _accum(x, p * (g - (g * p).sum(axis=axis, keepdims=True)))

    return _record(p, (x,), bw)


def log_softmax(x, axis=-1) -> Tensor:
    x = as_tensor(x)
    if not np.all(np.isfinite(x.data)):
        raise ValueError("log_softmax input contains non-finite values")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def bw(g):
        _accum(x, g - np.exp(out) * g.sum(axis=axis, keepdims=True))

    return _record(out, (x,), bw)


def layer_norm(x, gain, bias, eps=1e-5) -> Tensor:
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ValueError(f"layer_norm gain/bias must have shape ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def bw(g):
        if gain.requires_grad:
            _accum(gain, (g * xhat).reshape(-1, d).sum(axis=0))
        if bias.requires_grad:
            _accum(bias, g.reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            dxh = g * gain.data
            _accum(
                x,
                inv
                * (
                    dxh
                    - dxh.mean(axis=-1, keepdims=True)
                    - xhat * (dxh * xhat).mean(axis=-1, keepdims=True)
                ),
            )

    return _record(xhat * gain.data + bias.data, (x, gain, bias), bw)


# ---------------------------------------------------------------- attention


def _split_heads(a, heads):
    *lead, t, d = a.shape
    return np.swapaxes(a.reshape(*lead, t, heads, d // heads), -2, -3)


def _merge_heads(a):
    *lead, h, t, dh = a.shape
    return np.swapaxes(a, -2, -3).reshape(*lead, t, h * dh)


def masked_attention(q, k, v, heads: int, mask) -> Tensor:
    """Multi-head scaled dot-product attention.

    ``q`` is ``[..., Tq, D]``, ``k``/``v`` are ``[..., Tk, D]`` and ``mask`` is a
    boolean array broadcastable to ``[..., Tq, Tk]`` where True means "may
    attend".  Every query row must be allowed at least one key.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    d = q.shape[-1]
    if d % heads:
        raise ValueError(f"model dim {d} is not divisible by {heads} heads")
    mask = np.asarray(mask, dtype=bool)
    if not mask.any(axis=-1).all():
        raise ValueError("attention mask leaves a query row with no visible key")
    scale_ = 1.0 / math.sqrt(d // heads)
    qh, kh, vh = (_split_heads(t.data, heads) for t in (q, k, v))
    bias = np.where(mask, 0.0, -np.inf)[..., None, :, :]
    s = (qh @ np.swapaxes(kh, -1, -2)) * scale_ + bias
    s -= s.max(axis=-1, keepdims=True)
    p = np.exp(s)
    p /= p.sum(axis=-1, keepdims=True)
    out = _merge_heads(p @ vh)

    def bw(g):
        gh = _split_heads(g, heads)
        if v.requires_grad:
            _accum(v, _unbroadcast(_merge_heads(np.swapaxes(p, -1, -2) @ gh), v.shape))
        dp = gh @ np.swapaxes(vh, -1, -2)
        ds = p * (dp - (dp * p).sum(axis=-1, keepdims=True)) * scale_
        if q.requires_grad:
            _accum(q, _unbroadcast(_merge_heads(ds @ kh), q.shape))
        if k.requires_grad:
            _accum(k, _unbroadcast(_merge_heads(np.swapaxes(ds, -1, -2) @ qh), k.shape))

    return _record(out, (q, k, v), bw)


# ---------------------------------------------------------------- losses


def nll_loss(logprobs, targets, mask=None, class_weights=None) -> Tensor:
    """Weighted mean of ``-logprobs[..., target]`` over the unmasked frames.

    The mean is normalised by the summed frame weights, so without class
    weights it is the plain per-frame average.
    """
    logprobs = as_tensor(logprobs)
    targets = np.asarray(targets, dtype=np.int64)
    n_cls = logprobs.shape[-1]
    if targets.shape != logprobs.shape[:-1]:
        raise ValueError(f"targets shape {targets.shape} does not match {logprobs.shape[:-1]}")
    bad = np.flatnonzero((targets < 0) | (targets >= n_cls))
    if bad.size:
        i = int(bad[0])
        raise ValueError(
            f"target {int(targets.reshape(-1)[i])} out of range [0, {n_cls}) at frame {i}"
        )
    w = np.ones(targets.shape) if mask is None else np.asarray(mask, dtype=DTYPE)
    if class_weights is not None:
        w = w * np.asarray(class_weights, dtype=DTYPE)[targets]
    denom = w.sum()
    if denom <= 0:
        raise ValueError("nll_loss has no frames with positive weight")
    picked = np.take_along_axis(logprobs.data, targets[..., None], axis=-1)[..., 0]
    loss = -(w * picked).sum() / denom

    def bw(g):
        full = np.zeros_like(logprobs.data)
        np.put_along_axis(full, targets[..., None], (-w * g / denom)[..., None], axis=-1)
        _accum(logprobs, full)

    return _record(np.array(loss), (logprobs,), bw)


def cross_entropy(logits, targets, class_weights=None, mask=None) -> Tensor:
    """Mean frame cross-entropy of ``logits`` ``[frames, classes]`` against ids."""
    return nll_loss(log_softmax(logits), targets, mask=mask, class_weights=class_weights)


# ---------------------------------------------------------------- parameters


def glorot(rng, fan_in, fan_out, shape=None):
    lim = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=shape or (fan_in, fan_out))


class ParameterStore:
    """Named trainable tensors plus their Adam moment buffers."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self.state: dict[str, dict] = {}

    def add(self, name, value) -> Tensor:
        if name in self.params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=DTYPE), requires_grad=True, name=name)
        self.params[name] = t
        return t

    def __getitem__(self, name) -> Tensor:
        return self.params[name]

    def __contains__(self, name):
        return name in self.params

    def __iter__(self):
        return iter(self.params.items())

    def __len__(self):
        return len(self.params)

    def names(self):
        return list(self.params)

    def size(self):
        return sum(p.data.size for p in self.params.values())

    def set_trainable(self, frozen_prefixes=()):
        for name, p in self.params.items():
            p.requires_grad = not any(name.startswith(pre) for pre in frozen_prefixes)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = np.zeros_like(p.data) if p.requires_grad else None

    def load_values(self, other: "ParameterStore"):
        for name, p in self.params.items():
            if name not in other.params or other[name].shape != p.shape:
                raise KeyError(f"parameter {name!r} missing or reshaped in source store")
            p.data = other[name].data.copy()

    def checksum(self, prefix="") -> str:
        h = hashlib.blake2b(digest_size=8)
        for name in sorted(self.params):
            if name.startswith(prefix):
                h.update(name.encode())
                h.update(np.ascontiguousarray(self.params[name].data).tobytes())
        return h.hexdigest()


def adam_step(store: ParameterStore, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update of every trainable parameter; clears grads."""
    for name, p in store:
        if not p.requires_grad:
            continue
        if p.grad is None:
            raise ValueError(f"parameter {name!r} has no gradient; run backward first")
        st = store.state.get(name)
        if st is None:
            st = store.state[name] = {
                "m": np.zeros_like(p.data),
                "v": np.zeros_like(p.data),
                "step": 0,
            }
        st["step"] += 1
        g = p.grad
        st["m"] = beta1 * st["m"] + (1 - beta1) * g
        st["v"] = beta2 * st["v"] + (1 - beta2) * g * g
        mhat = st["m"] / (1 - beta1 ** st["step"])
        vhat = st["v"] / (1 - beta2 ** st["step"])
        p.data = p.data - lr * mhat / (np.sqrt(vhat) + eps)
        p.grad = None


# ---------------------------------------------------------------- checkpoint io

MAGIC = b"BLXAM1"


class CheckpointError(ValueError):
    pass


def _write_record(buf, name, arr):
    arr = np.asarray(arr, dtype="<f8")
    nb = name.encode("utf-8")
    buf.write(struct.pack("<I", len(nb)))
    buf.write(nb)
    buf.write(struct.pack("<I", arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    buf.write(np.ascontiguousarray(arr).tobytes())


def _read_exact(buf, n):
    b = buf.read(n)
    if len(b) != n:
        raise CheckpointError("checkpoint is truncated")
    return b


def _read_record(buf):
    (n,) = struct.unpack("<I", _read_exact(buf, 4))
    name = _read_exact(buf, n).decode("utf-8")
    (rank,) = struct.unpack("<I", _read_exact(buf, 4))
    dims = struct.unpack(f"<{rank}Q", _read_exact(buf, 8 * rank))
    count = int(np.prod(dims)) if rank else 1
    arr = np.frombuffer(_read_exact(buf, 8 * count), dtype="<f8").astype(DTYPE)
    return name, arr.reshape(dims)


def store_to_bytes(store: ParameterStore) -> bytes:
    body = io.BytesIO()
    body.write(struct.pack("<I", len(store.params)))
    for name, p in store:
        _write_record(body, name, p.data)
    state = []
    for name in store.params:
        st = store.state.get(name)
        if st is not None:
            state += [
                ("adam.m/" + name, st["m"]),
                ("adam.v/" + name, st["v"]),
                ("adam.step/" + name, np.array(float(st["step"]))),
            ]
    body.write(struct.pack("<I", len(state)))
    for name, arr in state:
        _write_record(body, name, arr)
    payload = body.getvalue()
    digest = hashlib.blake2b(payload, digest_size=8).digest()
    return MAGIC + payload + digest


def store_from_bytes(raw: bytes) -> ParameterStore:
    if raw[:5] != MAGIC[:5]:
        raise CheckpointError("not a parameter checkpoint (bad magic)")
    if raw[:6] != MAGIC:
        raise CheckpointError(f"unsupported checkpoint version {raw[5:6]!r}, expected {MAGIC[5:6]!r}")
    if len(raw) < len(MAGIC) + 8 + 8:
        raise CheckpointError("checkpoint is truncated")
    payload, digest = raw[len(MAGIC):-8], raw[-8:]
    if hashlib.blake2b(payload, digest_size=8).digest() != digest:
        raise CheckpointError("checkpoint checksum mismatch (corrupt or truncated file)")
    buf = io.BytesIO(payload)
    store = ParameterStore()
    (n,) = struct.unpack("<I", _read_exact(buf, 4))
    for _ in range(n):
        name, arr = _read_record(buf)
        store.add(name, arr)
    (n,) = struct.unpack("<I", _read_exact(buf, 4))
    for _ in range(n):
        name, arr = _read_record(buf)
        kind, pname = name.split("/", 1)
        st = store.state.setdefault(pname, {})
        if kind == "adam.step":
            st["step"] = int(arr)
        else:
            st[kind[5:]] = arr
    if buf.read(1):
        raise CheckpointError("trailing bytes after checkpoint payload")
    return store


def atomic_write_bytes(path, data: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_store(store: ParameterStore, path):
    atomic_write_bytes(path, store_to_bytes(store))


def load_store(path) -> ParameterStore:
    return store_from_bytes(Path(path).read_bytes())
