"""Dense-tensor library with reverse-mode automatic differentiation.

Tensors wrap row-major float32 numpy arrays (float64 inputs are kept as
float64, which the gradient-check tooling relies on).  Each differentiable
operation records its parents and a closure that scatters the incoming
gradient back to them; ``Tensor.backward`` walks the graph in reverse
topological order.  The graph is rebuilt on every forward pass, so
variable-length sequences need no special handling.

Also hosts the LSTM cell, inverted dropout, the Adam optimizer, the seeded
``Rng`` used for every random draw in the package, and the central-difference
gradient checker.
"""

from __future__ import annotations

import hashlib
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DimensionError, TrainingError, UsageError

DEFAULT_DTYPE = np.float32

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph construction inside the block (inference fast path)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _coerce_data(data):
    # float arrays and numpy float scalars keep their precision; everything
    # else (python numbers, lists, int arrays) becomes float32
    if isinstance(data, np.ndarray) and np.issubdtype(data.dtype, np.floating):
        return data
    if isinstance(data, np.floating):
        return np.asarray(data)
    return np.asarray(data, dtype=DEFAULT_DTYPE)


class Tensor:
    """N-dimensional float array, optionally a node in the autodiff graph.

    ``grad`` is allocated lazily on the first backward pass and accumulates
    across calls until ``zero_grad`` clears it.
    """

    def __init__(self, data, parents=(), backward_fn=None, requires_grad=False, name=None):
        self.data = _coerce_data(data)
        self.grad = None
        self.name = name
        if _grad_enabled and (requires_grad or any(p.requires_grad for p in parents)):
            self.requires_grad = True
            self._parents = tuple(parents)
            self._backward_fn = backward_fn
        else:
            self.requires_grad = False
            self._parents = ()
            self._backward_fn = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        nm = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{nm})"

    def item(self):
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        # copy: backward closures may hand the same array to several parents
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype)
        else:
            self.grad += g

    def backward(self, seed=None):
        """Accumulate gradients of this tensor into every reachable parent.

        Without an explicit ``seed`` gradient the tensor must be scalar
        (size 1); repeated calls without zeroing add up.
        """
        if seed is None:
            if self.data.size != 1:
                raise UsageError(
                    f"backward() without a seed gradient needs a scalar output, got shape {self.shape}"
                )
            seed = np.ones_like(self.data)
        order = _toposort(self)
        grads = {id(self): np.asarray(seed, dtype=self.data.dtype)}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            node._accumulate(g)
            if node._backward_fn is None:
                continue
            for parent, pg in node._backward_fn(g):
                if not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _toposort(root):
    """Iterative reverse topological order (graphs are too deep for recursion)."""
    order = []
    seen = set()
    stack = [(root, False)]
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    order.reverse()
    return order


def _as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else DEFAULT_DTYPE
    return Tensor(np.asarray(x, dtype=dtype))


def _unbroadcast(g, shape):
    """Sum-reduce a gradient back to the shape it was broadcast from."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b):
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    out_data = a.data + b.data

    def backward_fn(g):
        return ((a, _unbroadcast(g, a.shape)), (b, _unbroadcast(g, b.shape)))

    return Tensor(out_data, (a, b), backward_fn)


def mul(a, b):
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    out_data = a.data * b.data

    def backward_fn(g):
        return ((a, _unbroadcast(g * b.data, a.shape)), (b, _unbroadcast(g * a.data, b.shape)))

    return Tensor(out_data, (a, b), backward_fn)


def neg(a):
    return mul(a, -1.0)


def sub(a, b):
    return add(a, neg(_as_tensor(b, like=_as_tensor(a))))


Tensor.__add__ = add
Tensor.__radd__ = lambda self, other: add(other if isinstance(other, Tensor) else _as_tensor(other, like=self), self)
Tensor.__mul__ = mul
Tensor.__rmul__ = lambda self, other: mul(self, other)
Tensor.__sub__ = sub
Tensor.__rsub__ = lambda self, other: sub(_as_tensor(other, like=self), self)
Tensor.__neg__ = neg


def exp(a):
    out_data = np.exp(a.data)

    def backward_fn(g):
        return ((a, g * out_data),)

    return Tensor(out_data, (a,), backward_fn)


def log(a):
    out_data = np.log(a.data)

    def backward_fn(g):
        return ((a, g / a.data),)

    return Tensor(out_data, (a,), backward_fn)


def sigmoid(a):
    out_data = 1.0 / (1.0 + np.exp(-a.data))

    def backward_fn(g):
        return ((a, g * out_data * (1.0 - out_data)),)

    return Tensor(out_data, (a,), backward_fn)


def tanh(a):
    out_data = np.tanh(a.data)

    def backward_fn(g):
        return ((a, g * (1.0 - out_data * out_data)),)

    return Tensor(out_data, (a,), backward_fn)


# ---------------------------------------------------------------------------
# shape / structure


def reshape(a, shape):
    old_shape = a.shape
    out_data = a.data.reshape(shape)

    def backward_fn(g):
        return ((a, g.reshape(old_shape)),)

    return Tensor(out_data, (a,), backward_fn)


def transpose(a, axes):
    inverse = np.argsort(axes)
    out_data = a.data.transpose(axes)

    def backward_fn(g):
        return ((a, g.transpose(inverse)),)

    return Tensor(out_data, (a,), backward_fn)


def getitem(a, idx):
    out_data = a.data[idx]

    def backward_fn(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        return ((a, full),)

    return Tensor(out_data, (a,), backward_fn)


Tensor.__getitem__ = getitem


def concat(tensors, axis=0):
    if not tensors:
        raise DimensionError("concat of zero tensors")
    ref = tensors[0]
    for t in tensors[1:]:
        a, b = list(ref.shape), list(t.shape)
        if len(a) != len(b):
            raise DimensionError(f"concat rank mismatch: {ref.shape} vs {t.shape}")
        a.pop(axis)
        b.pop(axis)
        if a != b:
            raise DimensionError(f"concat shape mismatch on non-concat axes: {ref.shape} vs {t.shape}")
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward_fn(g):
        pieces = []
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            pieces.append((t, g[tuple(sl)]))
        return tuple(pieces)

    return Tensor(out_data, tuple(tensors), backward_fn)


def stack(tensors, axis=0):
    out_data = np.stack([t.data for t in tensors], axis=axis)

    def backward_fn(g):
        slabs = np.moveaxis(g, axis, 0)
        return tuple((t, slabs[i]) for i, t in enumerate(tensors))

    return Tensor(out_data, tuple(tensors), backward_fn)


def tsum(a, axis=None, keepdims=False):
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward_fn(g):
        if axis is None:
            return ((a, np.broadcast_to(g, a.shape).copy()),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return ((a, np.broadcast_to(gg, a.shape).copy()),)

    return Tensor(out_data, (a,), backward_fn)


def tmean(a, axis=None, keepdims=False):
    n = a.data.size if axis is None else a.data.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b):
    """Matrix product with numpy batching semantics on leading axes."""
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise DimensionError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    out_data = a.data @ b.data

    def backward_fn(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return ((a, _unbroadcast(ga, a.shape)), (b, _unbroadcast(gb, b.shape)))

    return Tensor(out_data, (a, b), backward_fn)


Tensor.__matmul__ = matmul


def softmax(a, axis=-1):
    """Stable softmax along ``axis`` (max-subtracted before exponentiation)."""
    if a.data.shape[axis] == 0:
        raise DimensionError(f"softmax over empty axis {axis} of shape {a.shape}")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward_fn(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        return ((a, out_data * (g - dot)),)

    return Tensor(out_data, (a,), backward_fn)


def embedding_lookup(table, ids):
    """Pick rows of ``table`` (V x d) by integer id array; differentiable in the table."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(
            f"embedding id out of range: ids span [{ids.min()}, {ids.max()}], table has {table.shape[0]} rows"
        )
    out_data = table.data[ids]

    def backward_fn(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
        return ((table, full),)

    return Tensor(out_data, (table,), backward_fn)


def gather_last(a, ids):
    """out[..., k] = a[..., ids[..., k]] along the last axis."""
    ids = np.asarray(ids)
    lead = np.indices(ids.shape[:-1])
    index = tuple(l[..., None] for l in lead) + (ids,) if ids.ndim > 1 else (ids,)
    out_data = a.data[index]

    def backward_fn(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return ((a, full),)

    return Tensor(out_data, (a,), backward_fn)


def scatter_add(base, ids, values):
    """base + sum of ``values`` scattered into the last axis at ``ids``.

    ``ids``/``values`` share shape (..., N); duplicates accumulate.
    """
    ids = np.asarray(ids)
    if ids.shape != values.shape:
        raise DimensionError(f"scatter ids {ids.shape} and values {values.shape} differ")
    lead = np.indices(ids.shape[:-1])
    index = tuple(l[..., None] for l in lead) + (ids,) if ids.ndim > 1 else (ids,)
    out_data = base.data.copy()
    np.add.at(out_data, index, values.data)

    def backward_fn(g):
        return ((base, g), (values, g[index]))

    return Tensor(out_data, (base, values), backward_fn)


def cross_entropy(probs, target_ids, floor=1e-12):
    """Per-row negative log likelihood of ``target_ids`` under probability rows.

    Probabilities are floored before the log so all-but-certain mistakes stay
    finite; rows at the floor get zero gradient through the clamp.
    """
    target_ids = np.asarray(target_ids)
    rows = np.arange(probs.shape[0])
    p = probs.data[rows, target_ids]
    clamped = np.maximum(p, floor)
    out_data = -np.log(clamped)

    def backward_fn(g):
        full = np.zeros_like(probs.data)
        live = (p >= floor).astype(probs.data.dtype)
        full[rows, target_ids] = -g * live / clamped
        return ((probs, full),)

    return Tensor(out_data, (probs,), backward_fn)


# ---------------------------------------------------------------------------
# recurrent cell, dropout


@dataclass
class LSTMParams:
    """One LSTM layer: input weights (d_in x 4H), recurrent weights (H x 4H), bias (4H)."""

    w_input: Tensor
    w_hidden: Tensor
    bias: Tensor

    @property
    def hidden_dim(self):
        return self.w_hidden.shape[0]

    def named(self, prefix):
        return {f"{prefix}.w_input": self.w_input, f"{prefix}.w_hidden": self.w_hidden, f"{prefix}.bias": self.bias}


def lstm_cell(x, h, c, params: LSTMParams):
    """Standard LSTM step; gate order input/forget/candidate/output.

    Returns (h', c'); h' components lie in (-1, 1).
    """
    hd = params.hidden_dim
    if x.shape[-1] != params.w_input.shape[0] or h.shape[-1] != hd or c.shape[-1] != hd:
        raise DimensionError(
            f"lstm_cell shapes inconsistent: x {x.shape}, h {h.shape}, c {c.shape}, "
            f"w_input {params.w_input.shape}, w_hidden {params.w_hidden.shape}"
        )
    gates = add(add(matmul(x, params.w_input), matmul(h, params.w_hidden)), params.bias)
    i = sigmoid(gates[:, :hd])
    f = sigmoid(gates[:, hd : 2 * hd])
    cand = tanh(gates[:, 2 * hd : 3 * hd])
    o = sigmoid(gates[:, 3 * hd :])
    c_new = add(mul(f, c), mul(i, cand))
    h_new = mul(o, tanh(c_new))
    return h_new, c_new


def dropout(x, rate, rng, training):
    """Inverted dropout: kept units scaled by 1/(1-rate); identity at inference."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.data.dtype) / (1.0 - rate)
    return mul(x, Tensor(keep))


# ---------------------------------------------------------------------------
# deterministic randomness


class Rng:
    """Seeded random source; identical seed gives an identical sample stream.

    ``fork(label)`` derives an independent child stream so that e.g. parameter
    init and dropout masks stay reproducible regardless of draw interleaving.
    """

    def __init__(self, seed):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def fork(self, label):
        digest = hashlib.blake2b(f"{self.seed}/{label}".encode(), digest_size=8).digest()
        return Rng(int.from_bytes(digest, "little"))

    def random(self, size=None):
        return self._gen.random(size=size)

    def uniform(self, low, high, size=None, dtype=DEFAULT_DTYPE):
        return self._gen.uniform(low, high, size=size).astype(dtype)

    def integers(self, low, high, size=None):
        return self._gen.integers(low, high, size=size)

    def choice(self, seq):
        return seq[int(self._gen.integers(0, len(seq)))]

    def shuffled(self, seq):
        order = self._gen.permutation(len(seq))
        return [seq[i] for i in order]


INIT_SCALE = 0.08


def init_param(rng, shape, name=None):
    """Trainable tensor initialized uniform(-0.08, 0.08) from the seeded stream."""
    return Tensor(rng.uniform(-INIT_SCALE, INIT_SCALE, size=shape), requires_grad=True, name=name)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    """Per-parameter moment accumulators plus the shared step counter."""

    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


class Adam:
    """Bias-corrected Adam over a name -> Tensor parameter dict."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.98, eps=1e-9):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.state = AdamState(
            m={k: np.zeros_like(p.data) for k, p in params.items()},
            v={k: np.zeros_like(p.data) for k, p in params.items()},
        )

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def step(self):
        self.state.step += 1
        t = self.state.step
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise TrainingError(f"non-finite gradient in parameter '{name}'")
            m = self.state.m[name]
            v = self.state.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            m_hat = m / (1.0 - self.beta1**t)
            v_hat = v / (1.0 - self.beta2**t)
            p.data -= (self.lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.data.dtype)


def clip_grad_norm(params, max_norm):
    """Scale all gradients so the global L2 norm is at most ``max_norm``."""
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float((p.grad.astype(np.float64) ** 2).sum())
    norm = total**0.5
    if norm > max_norm and norm > 0:
        scale = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad *= scale
    return norm


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(scalar_fn, params, eps=None):
    """Max relative error between analytic and central-difference gradients.

    ``scalar_fn`` rebuilds its graph on every call and returns a scalar
    Tensor; ``params`` is a name -> Tensor dict whose entries the function
    closes over.  Per component the perturbation is eps * max(1, |x|)
    (eps defaults to 1e-3) and the error is
    |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
    """
    if eps is None:
        eps = 1e-3
    for p in params.values():
        p.zero_grad()
    out = scalar_fn()
    if not isinstance(out, Tensor) or out.data.size != 1:
        raise UsageError("grad_check needs a function returning a scalar Tensor")
    out.backward()
    analytic = {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}

    worst = 0.0
    for name, p in params.items():
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            h = eps * max(1.0, abs(float(orig)))
            flat[i] = orig + h
            f_plus = scalar_fn().item()
            flat[i] = orig - h
            f_minus = scalar_fn().item()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * h)
            a = float(analytic[name].reshape(-1)[i])
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst
