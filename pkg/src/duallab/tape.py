"""Dense tensors with reverse-mode automatic differentiation on a flat tape.

Forward ops append nodes to the active ComputationRecord; backward walks the
tape in reverse and accumulates gradients additively across fan-out.  Running
an op with no active record (or on detached inputs) evaluates forward only,
which is how inference and gradient-blocked pseudo-data passes are done.
"""

from __future__ import annotations

import os

import numpy as np

# NaN/Inf detection on every forward output. Costs one pass per op; turn off
# only for throwaway benchmarks.
CHECK_FINITE = True


class TapeError(Exception):
    pass


class ShapeMismatch(TapeError):
    pass


class NonFiniteValue(TapeError):
    pass


_ACTIVE: list["ComputationRecord"] = []


def active_record():
    return _ACTIVE[-1] if _ACTIVE else None


class ComputationRecord:
    """Append-only op tape; node ids are indices, so inputs always precede uses.

    Single-writer: one record belongs to one thread.  backward() may be called
    once per record unless reset() is used.
    """

    def __init__(self):
        self._kinds: list[str] = []
        self._input_ids: list[tuple[int, ...]] = []
        self._backwards: list = []          # callable(grad, grads) or None for leaves
        self._shapes: list[tuple[int, ...]] = []
        self._dtypes: list = []
        self.gradients: dict[int, np.ndarray] = {}
        self._spent = False

    def __enter__(self):
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        popped = _ACTIVE.pop()
        assert popped is self
        return False

    def __len__(self):
        return len(self._kinds)

    def _record(self, kind, input_ids, shape, dtype, backward) -> int:
        node_id = len(self._kinds)
        self._kinds.append(kind)
        self._input_ids.append(input_ids)
        self._shapes.append(shape)
        self._dtypes.append(dtype)
        self._backwards.append(backward)
        return node_id

    def leaf(self, value: np.ndarray) -> "Tensor":
        """Record a gradient-carrying input (parameter or differentiable data)."""
        value = np.asarray(value)
        node_id = self._record("leaf", (), value.shape, value.dtype, None)
        return Tensor(value, node_id=node_id, record=self)

    def reset(self):
        self.gradients = {}
        self._spent = False

    def backward(self, loss: "Tensor") -> dict[int, np.ndarray]:
        """Chain-rule sweep from a scalar loss; returns {node_id: gradient}.

        Leaves that the loss does not depend on get explicit zero gradients.
        """
        if self._spent:
            raise TapeError("backward() already ran on this record; call reset() first")
        if loss.record is not self or loss.node_id is None:
            raise TapeError("loss tensor was not recorded on this record")
        if loss.data.size != 1:
            raise ShapeMismatch(f"loss must be scalar, got shape {loss.data.shape}")
        self._spent = True

        grads: list = [None] * len(self._kinds)
        grads[loss.node_id] = np.ones_like(loss.data)
        for nid in range(loss.node_id, -1, -1):
            g = grads[nid]
            if g is None:
                continue
            bwd = self._backwards[nid]
            if bwd is not None:
                bwd(g, grads)
        out: dict[int, np.ndarray] = {}
        for nid in range(len(self._kinds)):
            g = grads[nid]
            if g is None:
                if self._kinds[nid] == "leaf":
                    g = np.zeros(self._shapes[nid], dtype=self._dtypes[nid])
                else:
                    continue
            out[nid] = g
        self.gradients = out
        return out


class Tensor:
    """Immutable view of a numpy array, optionally tied to a tape node."""

    __slots__ = ("data", "node_id", "record")

    def __init__(self, data, node_id=None, record=None):
        self.data = np.asarray(data)
        self.node_id = node_id
        self.record = record

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        tag = f", node={self.node_id}" if self.node_id is not None else ""
        return f"Tensor(shape={self.data.shape}{tag})"

    # operator sugar; everything funnels through apply()
    def __add__(self, other):
        return apply("add", self, other)

    def __radd__(self, other):
        return apply("add", other, self)

    def __sub__(self, other):
        return apply("sub", self, other)

    def __rsub__(self, other):
        return apply("sub", other, self)

    def __mul__(self, other):
        return apply("mul_elementwise", self, other)

    def __rmul__(self, other):
        return apply("mul_elementwise", other, self)

    def __matmul__(self, other):
        return apply("matmul", self, other)

    def __neg__(self):
        return apply("mul_elementwise", self, -1.0)

    def sum(self, axis=None):
        return apply("sum", self, axis=axis)

    def mean(self, axis=None):
        return apply("mean", self, axis=axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return apply("reshape", self, shape=shape)

    def slice(self, axis, start, stop):
        return apply("slice", self, axis=axis, start=start, stop=stop)


def constant(value, dtype=None) -> Tensor:
    arr = np.asarray(value, dtype=dtype)
    return Tensor(arr)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _accumulate(grads, node_id, g, fresh: bool = False):
    """Add into a gradient slot.  `fresh` marks arrays the caller just
    allocated, which may be stored without a defensive copy."""
    if node_id is None:
        return
    cur = grads[node_id]
    if cur is None:
        if not (fresh and isinstance(g, np.ndarray) and g.flags.owndata):
            g = np.array(g)
        grads[node_id] = g
    else:
        cur += g


# ---------------------------------------------------------------------------
# op table: each entry returns (out_value, make_backward) where make_backward
# builds the closure only when something is actually recording.


def _op_add(a, b, **_):
    out = a.data + b.data

    def bwd(g, grads):
        ga = _unbroadcast(g, a.data.shape)
        _accumulate(grads, a.node_id, ga, fresh=ga is not g)
        gb = _unbroadcast(g, b.data.shape)
        _accumulate(grads, b.node_id, gb, fresh=gb is not g)

    return out, bwd


def _op_sub(a, b, **_):
    out = a.data - b.data

    def bwd(g, grads):
        ga = _unbroadcast(g, a.data.shape)
        _accumulate(grads, a.node_id, ga, fresh=ga is not g)
        _accumulate(grads, b.node_id, _unbroadcast(-g, b.data.shape), fresh=True)

    return out, bwd


def _op_mul(a, b, **_):
    out = a.data * b.data

    def bwd(g, grads):
        if a.node_id is not None:
            _accumulate(grads, a.node_id, _unbroadcast(g * b.data, a.data.shape), fresh=True)
        if b.node_id is not None:
            _accumulate(grads, b.node_id, _unbroadcast(g * a.data, b.data.shape), fresh=True)

    return out, bwd


def _op_matmul(a, b, **_):
    av, bv = a.data, b.data
    if not ((av.ndim == 2 and bv.ndim == 2)
            or (av.ndim == 3 and bv.ndim == 2)
            or (av.ndim == 3 and bv.ndim == 3 and av.shape[0] == bv.shape[0])):
        raise ShapeMismatch(f"matmul: unsupported shapes {av.shape} @ {bv.shape}")
    if av.shape[-1] != bv.shape[-2]:
        raise ShapeMismatch(f"matmul: inner dims differ {av.shape} @ {bv.shape}")
    out = av @ bv

    def bwd(g, grads):
        if a.node_id is not None:
            _accumulate(grads, a.node_id, g @ bv.swapaxes(-1, -2), fresh=True)
        if b.node_id is not None:
            if av.ndim == 3 and bv.ndim == 2:
                k = av.shape[-1]
                gb = av.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = av.swapaxes(-1, -2) @ g
            _accumulate(grads, b.node_id, gb, fresh=True)

    return out, bwd


def _op_tanh(a, **_):
    out = np.tanh(a.data)

    def bwd(g, grads):
        _accumulate(grads, a.node_id, g * (1.0 - out * out), fresh=True)

    return out, bwd


def _op_sigmoid(a, **_):
    # stable in both tails: exp of a non-positive argument only
    x = a.data
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0, e) / (1.0 + e)

    def bwd(g, grads):
        _accumulate(grads, a.node_id, g * out * (1.0 - out), fresh=True)

    return out, bwd


def _op_relu(a, **_):
    out = np.maximum(a.data, 0.0)

    def bwd(g, grads):
        _accumulate(grads, a.node_id, g * (a.data > 0), fresh=True)

    return out, bwd


def _op_concat(*xs, axis=-1):
    sizes = [x.data.shape[axis] for x in xs]
    out = np.concatenate([x.data for x in xs], axis=axis)

    def bwd(g, grads):
        offset = 0
        for x, n in zip(xs, sizes):
            idx = [slice(None)] * g.ndim
            idx[axis if axis >= 0 else g.ndim + axis] = slice(offset, offset + n)
            _accumulate(grads, x.node_id, g[tuple(idx)])
            offset += n

    return out, bwd


def _op_slice(a, axis=0, start=0, stop=None, **_):
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    out = a.data[idx]

    def bwd(g, grads):
        if a.node_id is None:
            return
        cur = grads[a.node_id]
        if cur is None:
            cur = np.zeros_like(a.data)
            grads[a.node_id] = cur
        cur[idx] += g

    return out, bwd


def _op_log_softmax(a, **_):
    x = a.data
    m = x.max(axis=-1, keepdims=True)
    shifted = x - m
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse

    def bwd(g, grads):
        _accumulate(grads, a.node_id,
                    g - np.exp(out) * g.sum(axis=-1, keepdims=True), fresh=True)

    return out, bwd


def _op_softmax(a, **_):
    x = a.data
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    out = e / e.sum(axis=-1, keepdims=True)

    def bwd(g, grads):
        dot = (g * out).sum(axis=-1, keepdims=True)
        _accumulate(grads, a.node_id, out * (g - dot), fresh=True)

    return out, bwd


def _op_sum(a, axis=None, **_):
    out = a.data.sum(axis=axis)

    def bwd(g, grads):
        if axis is None:
            full = np.broadcast_to(g, a.data.shape)
        else:
            full = np.broadcast_to(np.expand_dims(g, axis), a.data.shape)
        _accumulate(grads, a.node_id, np.ascontiguousarray(full), fresh=True)

    return out, bwd


def _op_mean(a, axis=None, **_):
    out = a.data.mean(axis=axis)
    count = a.data.size if axis is None else a.data.shape[axis]

    def bwd(g, grads):
        if axis is None:
            full = np.broadcast_to(g / count, a.data.shape)
        else:
            full = np.broadcast_to(np.expand_dims(g / count, axis), a.data.shape)
        _accumulate(grads, a.node_id, np.ascontiguousarray(full), fresh=True)

    return out, bwd


def _op_l1_distance(a, b, **_):
    if a.data.shape != b.data.shape:
        raise ShapeMismatch(f"l1_distance: {a.data.shape} vs {b.data.shape}")
    diff = a.data - b.data
    out = np.abs(diff).mean()

    def bwd(g, grads):
        s = np.sign(diff) * (g / diff.size)
        if a.node_id is not None:
            _accumulate(grads, a.node_id, s, fresh=b.node_id is None)
        if b.node_id is not None:
            _accumulate(grads, b.node_id, -s, fresh=True)

    return out, bwd


def _op_reshape(a, shape=None, **_):
    out = a.data.reshape(shape)

    def bwd(g, grads):
        _accumulate(grads, a.node_id, g.reshape(a.data.shape))

    return out, bwd


def _op_broadcast_axis(a, axis=0, reps=1, **_):
    if a.data.shape[axis] != 1:
        raise ShapeMismatch(f"broadcast_axis: axis {axis} of {a.data.shape} is not 1")
    target = list(a.data.shape)
    target[axis] = reps
    out = np.ascontiguousarray(np.broadcast_to(a.data, target))

    def bwd(g, grads):
        _accumulate(grads, a.node_id, g.sum(axis=axis, keepdims=True), fresh=True)

    return out, bwd


def _op_embed(table, ids=None, **_):
    idx = np.asarray(ids)
    out = table.data[idx]

    def bwd(g, grads):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx.ravel(), g.reshape(-1, table.data.shape[-1]))
        _accumulate(grads, table.node_id, gt, fresh=True)

    return out, bwd


def _op_conv1d_same(x, kernels, **_):
    """Same-padded correlation along the second-to-last axis.

    x: (..., K, C_in), kernels: (w, C_in, C_out) with odd w.
    """
    xv = x.data
    kv = kernels.data
    w, c_in, c_out = kv.shape
    if w % 2 == 0:
        raise ShapeMismatch(f"conv1d_same: kernel width must be odd, got {w}")
    if xv.shape[-1] != c_in:
        raise ShapeMismatch(f"conv1d_same: input channels {xv.shape[-1]} != kernel {c_in}")
    if xv.shape[-2] == 0:
        raise ShapeMismatch("conv1d_same: empty sequence")
    squeeze = xv.ndim == 2
    if squeeze:
        xv = xv[None]
    pad = w // 2
    steps = xv.shape[-2]
    xp = np.pad(xv, [(0, 0)] * (xv.ndim - 2) + [(pad, pad), (0, 0)])
    windows = np.lib.stride_tricks.sliding_window_view(xp, w, axis=-2)  # (..., K, C_in, w)
    flat = np.ascontiguousarray(windows.swapaxes(-1, -2)).reshape(*xv.shape[:-1], w * c_in)
    out = flat @ kv.reshape(w * c_in, c_out)
    if squeeze:
        out = out[0]

    def bwd(g, grads):
        gv = g[None] if squeeze else g
        if kernels.node_id is not None:
            gk = flat.reshape(-1, w * c_in).T @ gv.reshape(-1, c_out)
            _accumulate(grads, kernels.node_id, gk.reshape(w, c_in, c_out), fresh=True)
        if x.node_id is not None:
            gxp = np.zeros(xp.shape, dtype=gv.dtype)
            for j in range(w):
                gxp[..., j:j + steps, :] += gv @ kv[j].T
            gx = gxp[..., pad:pad + steps, :]
            _accumulate(grads, x.node_id, gx[0] if squeeze else gx, fresh=True)

    return out, bwd


def _op_bce_logits(logits, targets=None, **_):
    """Mean binary cross-entropy on raw scores; targets are plain 0/1 arrays."""
    z = logits.data
    y = np.asarray(targets, dtype=z.dtype)
    out = (np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))).mean()

    def bwd(g, grads):
        sig = 1.0 / (1.0 + np.exp(-z))
        _accumulate(grads, logits.node_id, g * (sig - y) / z.size, fresh=True)

    return out, bwd


_OPS = {
    "add": _op_add,
    "sub": _op_sub,
    "mul_elementwise": _op_mul,
    "matmul": _op_matmul,
    "tanh": _op_tanh,
    "sigmoid": _op_sigmoid,
    "relu": _op_relu,
    "concat_last_axis": _op_concat,
    "slice": _op_slice,
    "log_softmax_last_axis": _op_log_softmax,
    "softmax_last_axis": _op_softmax,
    "sum": _op_sum,
    "mean": _op_mean,
    "l1_distance": _op_l1_distance,
    "reshape": _op_reshape,
    "broadcast_axis": _op_broadcast_axis,
    "embed": _op_embed,
    "conv1d_same": _op_conv1d_same,
    "bce_logits": _op_bce_logits,
}


def apply(op_kind: str, *inputs, **params) -> Tensor:
    """Evaluate an op, recording it on the active tape if any input is live."""
    if op_kind not in _OPS:
        raise TapeError(f"unknown op kind {op_kind!r}")
    tensors = tuple(_as_tensor(x) for x in inputs)
    out_value, bwd = _OPS[op_kind](*tensors, **params)
    out_value = np.asarray(out_value)
    if CHECK_FINITE and not np.isfinite(out_value).all():
        raise NonFiniteValue(f"op {op_kind!r} produced non-finite values")
    rec = active_record()
    tracked = tuple(t for t in tensors if t.record is rec and t.node_id is not None)
    if rec is None or not tracked:
        return Tensor(out_value)
    node_id = rec._record(op_kind, tuple(t.node_id for t in tracked),
                          out_value.shape, out_value.dtype, bwd)
    return Tensor(out_value, node_id=node_id, record=rec)


def apply_custom(op_kind: str, out_value: np.ndarray, inputs, backward) -> Tensor:
    """Record an externally computed op with a hand-written backward.

    `backward(grad)` must return one gradient array per input, aligned with
    `inputs`; inputs that are detached are skipped automatically.
    """
    out_value = np.asarray(out_value)
    if CHECK_FINITE and not np.isfinite(out_value).all():
        raise NonFiniteValue(f"custom op {op_kind!r} produced non-finite values")
    rec = active_record()
    tensors = tuple(_as_tensor(x) for x in inputs)
    tracked = tuple(t for t in tensors if t.record is rec and t.node_id is not None)
    if rec is None or not tracked:
        return Tensor(out_value)

    def bwd(g, grads):
        partials = backward(g)
        for t, p in zip(tensors, partials):
            if t.record is rec and t.node_id is not None and p is not None:
                _accumulate(grads, t.node_id, p)

    node_id = rec._record(op_kind, tuple(t.node_id for t in tracked),
                          out_value.shape, out_value.dtype, bwd)
    return Tensor(out_value, node_id=node_id, record=rec)


def concat(tensors, axis=-1) -> Tensor:
    return apply("concat_last_axis", *tensors, axis=axis)


# ---------------------------------------------------------------------------
# named parameter storage


class ParamStore:
    """Named parameter arrays plus gradient slots, in insertion order."""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}

    def add(self, name: str, value: np.ndarray) -> np.ndarray:
        if name in self.params:
            raise KeyError(f"duplicate parameter {name!r}")
        self.params[name] = np.asarray(value, dtype=np.float64)
        return self.params[name]

    def __getitem__(self, name):
        return self.params[name]

    def __contains__(self, name):
        return name in self.params

    def names(self):
        return list(self.params)

    def num_values(self) -> int:
        return sum(v.size for v in self.params.values())

    def zero_grads(self):
        self.grads = {name: np.zeros_like(v) for name, v in self.params.items()}

    def bind(self, record: ComputationRecord) -> dict[str, Tensor]:
        """Expose every parameter as a leaf on `record`."""
        return {name: record.leaf(v) for name, v in self.params.items()}

    def accumulate(self, bound: dict[str, Tensor], gradients: dict[int, np.ndarray],
                   scale: float = 1.0):
        """Add a backward pass's leaf gradients into the store's slots."""
        if not self.grads:
            self.zero_grads()
        for name, tensor in bound.items():
            g = gradients.get(tensor.node_id)
            if g is not None:
                self.grads[name] += scale * g

    # flat little-endian float64 blob + plain-text index (name, offset, shape)
    def save(self, path_prefix: str):
        blob = bytearray()
        lines = []
        offset = 0
        for name, v in self.params.items():
            raw = np.ascontiguousarray(v, dtype="<f8").tobytes()
            lines.append(f"{name}\t{offset}\t{','.join(str(d) for d in v.shape)}\n")
            blob.extend(raw)
            offset += v.size
        with open(path_prefix + ".bin", "wb") as f:
            f.write(bytes(blob))
        with open(path_prefix + ".idx", "w") as f:
            f.writelines(lines)

    @classmethod
    def load(cls, path_prefix: str) -> "ParamStore":
        store = cls()
        with open(path_prefix + ".bin", "rb") as f:
            flat = np.frombuffer(f.read(), dtype="<f8")
        with open(path_prefix + ".idx") as f:
            for line in f:
                line = line.rstrip("\n")
                if not line:
                    continue
                name, offset, shape_s = line.split("\t")
                shape = tuple(int(d) for d in shape_s.split(",")) if shape_s else ()
                n = int(np.prod(shape)) if shape else 1
                value = flat[int(offset):int(offset) + n].reshape(shape).copy()
                store.add(name, value)
        return store


def thread_limit(default: int = 1) -> int:
    """Worker-thread cap from DUALLAB_THREADS, else `default`."""
    raw = os.environ.get("DUALLAB_THREADS", "")
    try:
        return max(1, int(raw))
    except ValueError:
        return default
