"""Small reverse-mode autodiff core on top of numpy.

Every operation records its parents and a closure that pushes the output
gradient back to them. Leading batch dimensions broadcast the numpy way, and
gradients are summed back down to each operand's shape.

Parameters live in a :class:`ParamStore`, addressed by dotted path. The layer
helpers at the bottom of the module (``linear``, ``layer_norm``,
``multi_head_attention`` ...) create their parameters lazily under a path
prefix, so the same code path always resolves to the same weights.
"""
from __future__ import annotations

import contextlib
import hashlib
import io
import json
import math
import struct
import zlib
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np

CHECKPOINT_MAGIC = b"FUSELAB1"

# Transformer layer layout: post-norm, feed-forward hidden = 4 x width.
POST_NORM = True
FFN_EXPANSION = 4
LAYER_NORM_EPS = 1e-5


class DimensionError(ValueError):
    pass


class NonFiniteError(ArithmeticError):
    pass


class ContractError(ValueError):
    pass


class ConfigurationError(ValueError):
    pass


class GradCheckError(RuntimeError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


def _check_finite(out: np.ndarray, op: str) -> np.ndarray:
    # a sum is cheaper than isfinite().all(); only fall back when it overflows
    s = out.sum()
    if not np.isfinite(s) and not np.isfinite(out).all():
        raise NonFiniteError(f"non-finite value produced by {op}")
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    nlead = grad.ndim - len(shape)
    if nlead > 0:
        grad = grad.sum(axis=tuple(range(nlead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A numpy array plus the bookkeeping needed for reverse-mode gradients."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "path")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, path: str | None = None,
                 _parents: tuple = (), _backward: Callable | None = None):
        self.data = np.asarray(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.path = path

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f", path={self.path!r}" if self.path else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- graph construction ----------------------------------------------
    @staticmethod
    def _make(data: np.ndarray, parents: tuple, backward: Callable, op: str) -> "Tensor":
        _check_finite(data, op)
        needs = any(p.requires_grad for p in parents)
        if not needs:
            return Tensor(data)
        return Tensor(data, requires_grad=True, _parents=parents, _backward=backward)

    def _accumulate(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    # -- arithmetic -------------------------------------------------------
    def __add__(self, other):
        other = as_tensor(other, self.dtype)
        out = self.data + other.data

        def back(g):
            self._accumulate(_unbroadcast(g, self.shape))
            other._accumulate(_unbroadcast(g, other.shape))
        return Tensor._make(out, (self, other), back, "add")

    __radd__ = __add__

    def __sub__(self, other):
        other = as_tensor(other, self.dtype)
        out = self.data - other.data

        def back(g):
            self._accumulate(_unbroadcast(g, self.shape))
            other._accumulate(_unbroadcast(-g, other.shape))
        return Tensor._make(out, (self, other), back, "sub")

    def __rsub__(self, other):
        return as_tensor(other, self.dtype) - self

    def __neg__(self):
        def back(g):
            self._accumulate(-g)
        return Tensor._make(-self.data, (self,), back, "neg")

    def __mul__(self, other):
        other = as_tensor(other, self.dtype)
        a, b = self.data, other.data
        out = a * b

        def back(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g * b, self.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(g * a, other.shape))
        return Tensor._make(out, (self, other), back, "mul")

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other, self.dtype)
        a, b = self.data, other.data
        out = a / b

        def back(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g / b, self.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(-g * a / (b * b), other.shape))
        return Tensor._make(out, (self, other), back, "div")

    def __rtruediv__(self, other):
        return as_tensor(other, self.dtype) / self

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(as_tensor(other, self.dtype), self)

    # -- shape ops ---------------------------------------------------------
    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        src = self.shape

        def back(g):
            self._accumulate(g.reshape(src))
        return Tensor._make(self.data.reshape(shape), (self,), back, "reshape")

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        inv = tuple(np.argsort(axes))

        def back(g):
            self._accumulate(g.transpose(inv))
        return Tensor._make(self.data.transpose(axes), (self,), back, "transpose")

    def swap_last(self):
        axes = list(range(self.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
        return self.transpose(axes)

    def __getitem__(self, idx):
        src_shape = self.shape
        dtype = self.dtype

        basic = all(isinstance(i, (slice, int, type(None), type(Ellipsis)))
                    for i in (idx if isinstance(idx, tuple) else (idx,)))

        def back(g):
            full = np.zeros(src_shape, dtype=dtype)
            if basic:
                full[idx] += g
            else:
                np.add.at(full, idx, g)
            self._accumulate(full)
        return Tensor._make(self.data[idx], (self,), back, "getitem")

    def broadcast_to(self, shape):
        src = self.shape

        def back(g):
            self._accumulate(_unbroadcast(g, src))
        return Tensor._make(np.broadcast_to(self.data, shape), (self,), back, "broadcast")

    # -- reductions ----------------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False):
        src = self.shape

        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            self._accumulate(np.broadcast_to(g, src))
        return Tensor._make(np.asarray(self.data.sum(axis=axis, keepdims=keepdims)),
                            (self,), back, "sum")

    def mean(self, axis=None, keepdims: bool = False):
        n = self.data.size if axis is None else np.prod(
            [self.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def max(self, axis: int):
        """Max over one axis; the gradient goes to the first maximal entry."""
        arg = self.data.argmax(axis=axis)
        out = np.take_along_axis(self.data, np.expand_dims(arg, axis), axis).squeeze(axis)
        src, dtype = self.shape, self.dtype

        def back(g):
            full = np.zeros(src, dtype=dtype)
            np.put_along_axis(full, np.expand_dims(arg, axis), np.expand_dims(g, axis), axis)
            self._accumulate(full)
        return Tensor._make(out, (self,), back, "max")

    # -- elementwise -------------------------------------------------------
    def abs(self):
        sign = np.sign(self.data)

        def back(g):
            self._accumulate(g * sign)
        return Tensor._make(np.abs(self.data), (self,), back, "abs")

    def exp(self):
        out = np.exp(self.data)

        def back(g):
            self._accumulate(g * out)
        return Tensor._make(out, (self,), back, "exp")

    def relu(self):
        mask = self.data > 0

        def back(g):
            self._accumulate(g * mask)
        return Tensor._make(self.data * mask, (self,), back, "relu")

    def tanh(self):
        out = np.tanh(self.data)

        def back(g):
            self._accumulate(g * (1.0 - out * out))
        return Tensor._make(out, (self,), back, "tanh")

    def square(self):
        x = self.data

        def back(g):
            self._accumulate(2.0 * g * x)
        return Tensor._make(x * x, (self,), back, "square")

    def sqrt(self):
        out = np.sqrt(self.data)

        def back(g):
            self._accumulate(0.5 * g / out)
        return Tensor._make(out, (self,), back, "sqrt")


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype) if dtype is not None else np.asarray(x)
    return Tensor(arr)


# -- free-function primitives ---------------------------------------------------

def matmul(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    A, B = a.data, b.data
    out = np.matmul(A, B)

    def back(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(np.matmul(g, np.swapaxes(B, -1, -2)), a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(np.matmul(np.swapaxes(A, -1, -2), g), b.shape))
    return Tensor._make(out, (a, b), back, "matmul")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    ax = axis % out.ndim
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def back(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[ax] = slice(lo, hi)
                t._accumulate(g[tuple(sl)])
    return Tensor._make(out, tuple(tensors), back, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = []
    for t in tensors:
        t = as_tensor(t)
        shape = list(t.shape)
        shape.insert(axis % (t.ndim + 1), 1)
        parts.append(t.reshape(shape))
    return concat(parts, axis=axis)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        x._accumulate(out * (g - (g * out).sum(axis=axis, keepdims=True)))
    return Tensor._make(out, (x,), back, "softmax")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """tanh-approximated GELU (smooth, so finite differences behave)."""
    v = x.data
    v2 = v * v
    t = np.tanh(_GELU_C * v * (1.0 + 0.044715 * v2))
    out = 0.5 * v * (1.0 + t)

    def back(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * v2)
        x._accumulate(g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * dinner))
    return Tensor._make(out, (x,), back, "gelu")


def layer_norm_raw(x: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    v = x.data
    mu = v.mean(axis=-1, keepdims=True)
    xc = v - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def back(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        x._accumulate(inv * (g - gm - xhat * gx))
    return Tensor._make(xhat, (x,), back, "layer_norm")


# -- backward pass -----------------------------------------------------------------

def _topo_order(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack_ = [(root, False)]
    while stack_:
        node, done = stack_.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(loss: Tensor, params: "ParamStore | None" = None) -> dict[str, np.ndarray]:
    """Propagate d(loss)/d(.) through the recorded graph.

    Returns a map from parameter path to gradient array; parameters that the
    loss does not reach map to zeros.
    """
    if not isinstance(loss, Tensor) or loss.data.size != 1 or loss.ndim != 0:
        shape = getattr(loss, "shape", type(loss))
        raise ContractError(f"backward needs a scalar loss, got shape {shape}")
    if params is not None:
        for t in params.values():
            t.grad = None
    if loss.requires_grad:
        order = _topo_order(loss)
        for node in order:
            if node._parents:
                node.grad = None
        loss.grad = np.ones_like(loss.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                if node._parents:
                    node.grad = None  # free intermediates
    if params is None:
        return {}
    return {p: (t.grad if t.grad is not None else np.zeros_like(t.data))
            for p, t in params.items()}


# -- parameters ----------------------------------------------------------------------

class ParamStore:
    """Learnable tensors addressed by dotted path.

    Initialization is seeded per path (``rng_seed`` combined with a CRC of the
    path), so a parameter's initial value does not depend on creation order.
    """

    def __init__(self, rng_seed: int = 0, dtype=np.float64):
        self.rng_seed = int(rng_seed)
        self.dtype = np.dtype(dtype)
        self._params: dict[str, Tensor] = {}
        self._frozen = False
        self._recording: list[set] = []

    # mapping protocol, sorted by path
    def __contains__(self, path: str) -> bool:
        return path in self._params

    def __getitem__(self, path: str) -> Tensor:
        return self._params[path]

    def __len__(self) -> int:
        return len(self._params)

    def __iter__(self) -> Iterator[str]:
        return iter(sorted(self._params))

    def keys(self) -> list[str]:
        return sorted(self._params)

    def values(self) -> list[Tensor]:
        return [self._params[k] for k in self.keys()]

    def items(self) -> list[tuple[str, Tensor]]:
        return [(k, self._params[k]) for k in self.keys()]

    def numel(self) -> int:
        return sum(t.data.size for t in self._params.values())

    def freeze(self) -> "ParamStore":
        """Disallow creating new paths (used for loaded checkpoints)."""
        self._frozen = True
        return self

    def _rng(self, path: str) -> np.random.Generator:
        return np.random.default_rng([self.rng_seed, zlib.crc32(path.encode())])

    def get(self, path: str, shape: Sequence[int], init="xavier") -> Tensor:
        shape = tuple(int(s) for s in shape)
        for rec in self._recording:
            rec.add(path)
        t = self._params.get(path)
        if t is not None:
            if t.shape != shape:
                raise DimensionError(f"parameter {path} has shape {t.shape}, requested {shape}")
            return t
        if self._frozen:
            raise KeyError(f"parameter {path} missing from a frozen store")
        if callable(init):
            data = np.ascontiguousarray(init(shape, self._rng(path)), dtype=self.dtype)
        elif init == "zeros":
            data = np.zeros(shape, dtype=self.dtype)
        elif init == "ones":
            data = np.ones(shape, dtype=self.dtype)
        elif init == "xavier":
            fan_in = shape[0] if len(shape) > 1 else 1
            fan_out = shape[-1]
            lim = math.sqrt(6.0 / (fan_in + fan_out))
            data = self._rng(path).uniform(-lim, lim, size=shape).astype(self.dtype)
        else:
            raise ConfigurationError(f"unknown initializer {init!r}")
        if data.shape != shape:
            raise DimensionError(f"initializer for {path} returned {data.shape}, expected {shape}")
        t = Tensor(data, requires_grad=True, path=path)
        self._params[path] = t
        return t

    def set(self, path: str, value: np.ndarray) -> None:
        t = self._params[path]
        value = np.asarray(value, dtype=self.dtype)
        if value.shape != t.shape:
            raise DimensionError(f"{path}: expected {t.shape}, got {value.shape}")
        t.data = value.copy()

    @contextlib.contextmanager
    def record(self) -> Iterator[set]:
        """Collect the set of paths accessed inside the block."""
        touched: set = set()
        self._recording.append(touched)
        try:
            yield touched
        finally:
            self._recording.remove(touched)

    def copy(self, dtype=None) -> "ParamStore":
        out = ParamStore(self.rng_seed, dtype or self.dtype)
        for p, t in self.items():
            out._params[p] = Tensor(t.data.astype(out.dtype, copy=True), requires_grad=True, path=p)
        return out

    def state(self) -> dict[str, np.ndarray]:
        return {p: t.data.copy() for p, t in self.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for p, v in state.items():
            if p in self._params:
                self.set(p, v)
            else:
                self._params[p] = Tensor(np.asarray(v, dtype=self.dtype).copy(),
                                         requires_grad=True, path=p)


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def save_checkpoint(params: ParamStore, path, config: dict, meta: dict | None = None) -> str:
    """Write ``params`` as FUSELAB1 magic, JSON header, then sorted float32 records."""
    header = {"config": config, "config_hash": config_hash(config), "meta": meta or {},
              "rng_seed": params.rng_seed}
    hbytes = json.dumps(header, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", len(hbytes)))
    buf.write(hbytes)
    buf.write(struct.pack("<I", len(params)))
    for p, t in params.items():
        pb = p.encode()
        buf.write(struct.pack("<H", len(pb)))
        buf.write(pb)
        buf.write(struct.pack("<B", t.ndim))
        buf.write(struct.pack(f"<{t.ndim}I", *t.shape))
        buf.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    Path(path).write_bytes(buf.getvalue())
    return header["config_hash"]


def load_checkpoint(path, dtype=np.float32) -> tuple[ParamStore, dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise ContractError(f"{path} is not a FUSELAB1 checkpoint")
    off = 8
    (hlen,) = struct.unpack_from("<I", raw, off)
    off += 4
    header = json.loads(raw[off:off + hlen])
    off += hlen
    (count,) = struct.unpack_from("<I", raw, off)
    off += 4
    store = ParamStore(header.get("rng_seed", 0), dtype)
    for _ in range(count):
        (plen,) = struct.unpack_from("<H", raw, off)
        off += 2
        p = raw[off:off + plen].decode()
        off += plen
        (ndim,) = struct.unpack_from("<B", raw, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", raw, off)
        off += 4 * ndim
        n = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(raw, dtype="<f4", count=n, offset=off).reshape(shape)
        off += 4 * n
        store._params[p] = Tensor(data.astype(dtype), requires_grad=True, path=p)
    return store.freeze(), header


# -- layers ---------------------------------------------------------------------------

def linear(params: ParamStore, path: str, x: Tensor, d_out: int, bias: bool = True,
           init="xavier") -> Tensor:
    x = as_tensor(x, params.dtype)
    W = params.get(f"{path}.W", (x.shape[-1], d_out), init)
    y = matmul(x, W)
    if bias:
        y = y + params.get(f"{path}.b", (d_out,), "zeros")
    return y


def mlp(params: ParamStore, path: str, x: Tensor, widths: Sequence[int],
        final_act: bool = False) -> Tensor:
    for i, w in enumerate(widths):
        x = linear(params, f"{path}.fc{i}", x, w)
        if i < len(widths) - 1 or final_act:
            x = gelu(x)
    return x


def layer_norm(params: ParamStore, path: str, x: Tensor) -> Tensor:
    d = x.shape[-1]
    return (layer_norm_raw(x) * params.get(f"{path}.gamma", (d,), "ones")
            + params.get(f"{path}.beta", (d,), "zeros"))


def scaled_dot_attention(Q: Tensor, K: Tensor, V: Tensor) -> tuple[Tensor, Tensor]:
    """softmax(Q K^T / sqrt(d)) V over the last two axes."""
    Q, K, V = as_tensor(Q), as_tensor(K), as_tensor(V)
    if K.shape[-2] == 0:
        raise ContractError("attention needs at least one key")
    d = Q.shape[-1]
    if d < 1 or K.shape[-1] != d:
        raise DimensionError(f"query/key width mismatch: {Q.shape} vs {K.shape}")
    scores = matmul(Q, K.swap_last()) * (1.0 / math.sqrt(d))
    w = softmax(scores, axis=-1)
    return matmul(w, V), w


def attention(params: ParamStore, path: str, xq: Tensor, xkv: Tensor, heads: int,
              keep: list | None = None) -> Tensor:
    """Projection, per-head scaled dot attention, concatenation, output projection."""
    width = xq.shape[-1]
    if width % heads:
        raise ConfigurationError(f"width {width} not divisible by {heads} heads")
    dh = width // heads
    q = linear(params, f"{path}.Wq", xq, width)
    # no key bias: it shifts every score in a row equally, so softmax ignores it
    k = linear(params, f"{path}.Wk", xkv, width, bias=False)
    v = linear(params, f"{path}.Wv", xkv, width)

    def split(t):
        lead = t.shape[:-2]
        n = t.shape[-2]
        t = t.reshape(*lead, n, heads, dh)
        ax = list(range(t.ndim))
        ax[-3], ax[-2] = ax[-2], ax[-3]
        return t.transpose(ax)

    out, w = scaled_dot_attention(split(q), split(k), split(v))
    if keep is not None:
        keep.append(w.data)
    ax = list(range(out.ndim))
    ax[-3], ax[-2] = ax[-2], ax[-3]
    out = out.transpose(ax)
    out = out.reshape(*out.shape[:-2], width)
    return linear(params, f"{path}.Wo", out, width)


def multi_head_attention(tokens_q: Tensor, tokens_kv: Tensor, params: ParamStore, heads: int,
                         path: str = "mha", keep: list | None = None) -> Tensor:
    """One transformer encoder layer: attention then feed-forward, each residual + norm."""
    tokens_q = as_tensor(tokens_q, params.dtype)
    tokens_kv = as_tensor(tokens_kv, params.dtype)
    width = tokens_q.shape[-1]
    if not POST_NORM:
        raise ConfigurationError("only the post-norm layout is implemented")
    x = layer_norm(params, f"{path}.ln1",
                   tokens_q + attention(params, f"{path}.attn", tokens_q, tokens_kv, heads, keep))
    h = gelu(linear(params, f"{path}.ffn.fc0", x, FFN_EXPANSION * width))
    return layer_norm(params, f"{path}.ln2", x + linear(params, f"{path}.ffn.fc1", h, width))


# -- gradient checking ---------------------------------------------------------------

def grad_check_detailed(forward: Callable[[ParamStore], Tensor], params: ParamStore,
                        eps: float = 1e-5, max_entries_per_tensor: int | None = None,
                        seed: int = 0, min_total: int = 200,
                        paths: Sequence[str] | None = None,
                        tamper: Callable[[dict], None] | None = None) -> dict[str, float]:
    """Central-difference check of ``backward`` for every parameter tensor.

    Returns the worst relative error per path, with relative error
    ``|a - b| / max(|a|, |b|, 1e-8)``. Tensors larger than
    ``max_entries_per_tensor`` are checked on a seeded random subsample, which
    is widened so at least ``min_total`` entries are checked overall.
    ``tamper`` may mutate the analytic gradients first (negative controls).
    """
    if params.dtype != np.float64:
        raise ContractError("gradient checks run in double precision")
    forward(params)  # materialize lazily created parameters
    loss = forward(params)
    grads = backward(loss, params)
    if tamper is not None:
        tamper(grads)
    names = list(paths) if paths is not None else params.keys()
    if not names:
        return {}
    total = sum(params[p].data.size for p in names)
    cap = max_entries_per_tensor
    if cap is not None and total > min_total:
        # widen the per-tensor cap until small tensors no longer starve the total
        sizes = [params[p].data.size for p in names]
        while sum(min(s, cap) for s in sizes) < min_total:
            cap += 1
    rng = np.random.default_rng(seed)
    report: dict[str, float] = {}
    for p in names:
        t = params[p]
        if not t.data.flags.c_contiguous:
            t.data = np.ascontiguousarray(t.data)
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if cap is not None and flat.size > cap:
            idx = np.sort(rng.choice(flat.size, size=cap, replace=False))
        g = grads[p].reshape(-1)
        worst = 0.0
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            try:
                fp = float(forward(params).data)
                flat[i] = orig - eps
                fm = float(forward(params).data)
            except NonFiniteError as exc:
                raise GradCheckError(p, f"non-finite loss at perturbed entry {i}: {exc}") from exc
            finally:
                flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise GradCheckError(p, f"non-finite loss at perturbed entry {i}")
            num = (fp - fm) / (2 * eps)
            a = float(g[i])
            err = abs(a - num) / max(abs(a), abs(num), 1e-8)
            worst = max(worst, err)
        report[p] = worst
    return report


def grad_check(forward: Callable[[ParamStore], Tensor], params: ParamStore, eps: float = 1e-5,
               **kwargs) -> float:
    report = grad_check_detailed(forward, params, eps, **kwargs)
    return max(report.values(), default=0.0)
