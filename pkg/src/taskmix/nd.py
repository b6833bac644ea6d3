"""Dense float64 tensors with tape-based reverse-mode differentiation.

Everything is 64-bit and CPU-only: the models here are tiny, and exact-ish
gradient checks matter more than speed. The tape is rebuilt on every forward
pass; calling backward() on a scalar walks it once in reverse topological
order and accumulates into .grad buffers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, DimensionError, LabelError


class Tensor:
    """A dense float64 array plus an optional gradient buffer.

    Non-leaf tensors carry closures linking them to their parents; leaves
    created with requires_grad=True receive gradients during backward().
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backprop")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = ()
        self._backprop = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def backward(self):
        """Reverse-mode sweep from a scalar output."""
        if self.data.size != 1:
            raise DimensionError("backward() requires a scalar tensor")
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
            if node._backprop is not None and node.grad is not None:
                node._backprop(node.grad)

    def __repr__(self):
        return f"Tensor(shape={tuple(self.shape)}, requires_grad={self.requires_grad})"


def _result(data, parents, backprop):
    """Wrap an op result, recording the tape edge only if some parent needs grad."""
    needs = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs)
    if needs:
        out._parents = tuple(parents)
        out._backprop = backprop
    return out


def _accum(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum g down to `shape`, undoing numpy broadcasting."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# primitive ops
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum with numpy broadcasting."""
    data = a.data + b.data

    def backprop(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _result(data, (a, b), backprop)


def scale(a: Tensor, c) -> Tensor:
    """Multiply by a non-differentiable constant (scalar or broadcastable array)."""
    c = np.asarray(c, dtype=np.float64)
    data = a.data * c

    def backprop(g):
        _accum(a, _unbroadcast(g * c, a.shape))

    return _result(data, (a,), backprop)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, broadcasting leading axes.

    Gradients accumulate into both operands; a 2-D weight multiplied against
    a batched activation receives the batch-summed gradient.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul operands must have at least 2 dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(
            f"matmul inner dimensions disagree: {tuple(a.shape)} x {tuple(b.shape)}"
        )
    data = np.matmul(a.data, b.data)

    def backprop(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        _accum(a, _unbroadcast(ga, a.shape))
        _accum(b, _unbroadcast(gb, b.shape))

    return _result(data, (a, b), backprop)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    data = np.transpose(a.data, axes)
    inverse = tuple(np.argsort(axes))

    def backprop(g):
        _accum(a, np.transpose(g, inverse))

    return _result(data, (a,), backprop)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    data = a.data.reshape(shape)

    def backprop(g):
        _accum(a, g.reshape(a.shape))

    return _result(data, (a,), backprop)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    data = np.where(mask, a.data, 0.0)

    def backprop(g):
        _accum(a, g * mask)

    return _result(data, (a,), backprop)


def sum_axis(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backprop(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.shape).copy())

    return _result(data, (a,), backprop)


def embedding(table: Tensor, ids) -> Tensor:
    """Row gather: table (R,d), ids int array (...,) -> (...,d)."""
    ids = np.asarray(ids)
    data = table.data[ids]

    def backprop(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        _accum(table, gt)

    return _result(data, (table,), backprop)


def softmax(a: Tensor, additive_mask=None) -> Tensor:
    """Softmax over the last axis. `additive_mask` is a constant added to the
    logits first (large negative entries zero out the masked positions)."""
    z = a.data if additive_mask is None else a.data + additive_mask
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def backprop(g):
        _accum(a, s * (g - (g * s).sum(axis=-1, keepdims=True)))

    return _result(s, (a,), backprop)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-9) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    data = xhat * gamma.data + beta.data
    n = x.shape[-1]

    def backprop(g):
        _accum(gamma, _unbroadcast(g * xhat, gamma.shape))
        _accum(beta, _unbroadcast(g, beta.shape))
        gx_hat = g * gamma.data
        # d/dx of (x - mu) / sqrt(var + eps) with mu, var both functions of x
        gx = inv * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        _accum(x, gx)

    return _result(data, (x, gamma, beta), backprop)


def softmax_xent(logits: Tensor, labels) -> Tensor:
    """Mean negative log softmax probability of the true class.

    logits (B,C), labels length-B ints in [0,C). Stabilized by max-subtraction.
    """
    if logits.ndim != 2:
        raise DimensionError("softmax_xent expects 2-D logits (batch, classes)")
    labels = np.asarray(labels, dtype=np.int64)
    if labels.ndim != 1 or labels.shape[0] != logits.shape[0]:
        raise DimensionError("labels must be a vector matching the batch size")
    batch, num_classes = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise LabelError(f"labels must lie in [0, {num_classes})")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=-1))
    nll = logsumexp - z[np.arange(batch), labels]
    data = nll.mean()

    def backprop(g):
        probs = np.exp(z - logsumexp[:, None])
        probs[np.arange(batch), labels] -= 1.0
        _accum(logits, probs * (float(g) / batch))

    return _result(data, (logits,), backprop)


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------


@dataclass
class AttentionParams:
    """QKV + output projection weights for one multi-head self-attention block."""

    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor
    num_heads: int

    def tensors(self):
        return [self.wq, self.bq, self.wk, self.bk, self.wv, self.bv, self.wo, self.bo]


MASK_NEG = -1e30  # additive mask value; exp() underflows to exactly 0.0


def self_attention(x: Tensor, params: AttentionParams, key_mask=None) -> Tensor:
    """Scaled dot-product multi-head self-attention.

    x is (seq, d) or (batch, seq, d); output matches. `key_mask` (batch, seq)
    marks real positions with 1; masked keys receive no attention weight.
    Scale is 1/sqrt(d / num_heads).
    """
    d = x.shape[-1]
    h = params.num_heads
    if d % h != 0:
        raise ConfigurationError(f"model width {d} not divisible by {h} heads")
    squeeze = x.ndim == 2
    if squeeze:
        x = reshape(x, (1,) + tuple(x.shape))
    b, s, _ = x.shape
    dh = d // h

    def split_heads(t):
        return transpose(reshape(t, (b, s, h, dh)), (0, 2, 1, 3))

    q = split_heads(add(matmul(x, params.wq), params.bq))
    k = split_heads(add(matmul(x, params.wk), params.bk))
    v = split_heads(add(matmul(x, params.wv), params.bv))

    scores = scale(matmul(q, transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    additive = None
    if key_mask is not None:
        additive = np.where(np.asarray(key_mask, dtype=bool), 0.0, MASK_NEG)
        additive = additive[:, None, None, :]
    weights = softmax(scores, additive_mask=additive)
    ctx = reshape(transpose(matmul(weights, v), (0, 2, 1, 3)), (b, s, d))
    out = add(matmul(ctx, params.wo), params.bo)
    if squeeze:
        out = reshape(out, (s, d))
    return out


# ---------------------------------------------------------------------------
# parameters and the optimizer
# ---------------------------------------------------------------------------


@dataclass
class Parameter:
    """A named, trainable leaf tensor.

    `name` is a slash-separated path unique within a model. trainable=False
    keeps the value fixed through optimizer steps (freezing support).
    """

    name: str
    tensor: Tensor
    trainable: bool = True

    def __post_init__(self):
        self.tensor.requires_grad = True

    @property
    def data(self):
        return self.tensor.data

    @property
    def grad(self):
        return self.tensor.grad


def zero_grads(params):
    for p in params:
        p.tensor.zero_grad()


def all_finite(params) -> bool:
    return all(np.isfinite(p.data).all() for p in params)


@dataclass
class AdamState:
    """Per-parameter first/second moments and step counters, keyed by name."""

    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    steps: dict = field(default_factory=dict)

    def ensure(self, p: Parameter):
        if p.name not in self.m:
            self.m[p.name] = np.zeros_like(p.data)
            self.v[p.name] = np.zeros_like(p.data)
            self.steps[p.name] = 0
        elif self.m[p.name].shape != p.data.shape:
            raise DimensionError(f"optimizer state shape mismatch for {p.name}")


def adamw_step(
    params,
    state: AdamState,
    lr: float,
    betas=(0.9, 0.999),
    eps: float = 1e-8,
    weight_decay: float = 0.0,
):
    """One AdamW update: bias-corrected moments, decoupled weight decay.

    Parameters with trainable=False are left untouched, moments included.
    A missing gradient counts as zero. Deterministic: identical inputs give
    bit-identical outputs.
    """
    b1, b2 = betas
    for p in params:
        if not p.trainable:
            continue
        state.ensure(p)
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise DimensionError(f"gradient shape mismatch for {p.name}")
        t = state.steps[p.name] + 1
        state.steps[p.name] = t
        m = state.m[p.name]
        v = state.v[p.name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        w = p.tensor.data
        if weight_decay:
            w -= lr * weight_decay * w
        w -= lr * m_hat / (np.sqrt(v_hat) + eps)
