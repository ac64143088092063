"""Layer kernels (forward and backward) and the Adam optimizer.

Arrays are channel-first: ``(N, C, H, W)`` for images, ``(N, C, H, W, D)``
for volumes.  Convolution gathers the shifted inputs of every kernel offset
into one patch matrix and applies the kernel as a single matrix product.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Node, Tape
from .errors import ContractError, NonFiniteGradientError, ShapeError


def _tuple(v, rank):
    if isinstance(v, int):
        return (v,) * rank
    v = tuple(int(i) for i in v)
    if len(v) != rank:
        raise ShapeError(f"expected {rank} values, got {v}")
    return v


@dataclass(frozen=True)
class ConvSpec:
    rank: int
    in_channels: int
    out_channels: int
    kernel: tuple = 3
    stride: tuple = 1
    padding: str = "same"

    def __post_init__(self):
        if self.rank not in (2, 3):
            raise ContractError(f"convolution rank must be 2 or 3, got {self.rank}")
        object.__setattr__(self, "kernel", _tuple(self.kernel, self.rank))
        object.__setattr__(self, "stride", _tuple(self.stride, self.rank))
        if self.padding not in ("same", "valid"):
            raise ContractError(f"unknown padding mode {self.padding!r}")
        if any(s < 1 for s in self.stride):
            raise ContractError("stride must be >= 1")
        if any(k < 1 for k in self.kernel):
            raise ContractError("kernel extents must be >= 1")
        if self.padding == "same" and any(k % 2 == 0 for k in self.kernel):
            raise ContractError("same padding requires odd kernel extents")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ContractError("channel counts must be >= 1")

    @property
    def weight_shape(self):
        return (self.out_channels, self.in_channels) + self.kernel

    @property
    def pads(self):
        if self.padding == "same":
            return tuple(k // 2 for k in self.kernel)
        return (0,) * self.rank

    def output_spatial(self, spatial):
        return tuple(
            (n + 2 * p - k) // s + 1
            for n, p, k, s in zip(spatial, self.pads, self.kernel, self.stride)
        )


def _check_conv(x, spec, w, b):
    if x.ndim != spec.rank + 2:
        raise ShapeError(f"conv{spec.rank}d expects rank-{spec.rank + 2} input, got {x.shape}")
    if x.shape[1] != spec.in_channels:
        raise ShapeError(f"conv expects {spec.in_channels} input channels, got {x.shape[1]}")
    if w.shape != spec.weight_shape:
        raise ShapeError(f"conv weight shape {w.shape} != {spec.weight_shape}")
    if b.shape != (spec.out_channels,):
        raise ShapeError(f"conv bias shape {b.shape} != {(spec.out_channels,)}")
    if spec.padding == "valid" and any(n < k for n, k in zip(x.shape[2:], spec.kernel)):
        raise ShapeError(f"input {x.shape[2:]} smaller than kernel {spec.kernel}")


def _windows(spec, out_sp):
    """Yield (kernel offset, slice tuple selecting the inputs it touches)."""
    for offs in itertools.product(*(range(k) for k in spec.kernel)):
        sl = tuple(
            slice(o, o + s * (n - 1) + 1, s)
            for o, s, n in zip(offs, spec.stride, out_sp)
        )
        yield offs, sl


def _pad(x, pads):
    if not any(pads):
        return x
    return np.pad(x, [(0, 0), (0, 0)] + [(p, p) for p in pads])


def _patches(x, spec: ConvSpec):
    """Patch matrix of shape (C * prod(kernel), N * prod(out spatial)).

    Row order is (channel, kernel offset...) to match ``w.reshape(O, -1)``.
    """
    n = x.shape[0]
    out_sp = spec.output_spatial(x.shape[2:])
    xc = np.moveaxis(_pad(x, spec.pads), 1, 0)
    cols = np.empty((spec.in_channels,) + spec.kernel + (n,) + out_sp, dtype=x.dtype)
    lead = (slice(None), slice(None))
    for offs, sl in _windows(spec, out_sp):
        cols[(slice(None),) + offs] = xc[lead + sl]
    return cols.reshape(spec.in_channels * int(np.prod(spec.kernel)), -1), out_sp


def conv_forward(x, spec: ConvSpec, w, b, _keep=None):
    """out[n,o,p] = bias[o] + sum_{c,k} w[o,c,k] * in[n,c,p*stride+k-pad]."""
    _check_conv(x, spec, w, b)
    cols, out_sp = _patches(x, spec)
    if _keep is not None:
        _keep.append(cols)
    acc = w.reshape(spec.out_channels, -1) @ cols
    out = np.moveaxis(acc.reshape((spec.out_channels, x.shape[0]) + out_sp), 0, 1)
    out = out + b.reshape((1, -1) + (1,) * spec.rank)
    return np.ascontiguousarray(out)


def conv_backward(g, x, spec: ConvSpec, w, need_input: bool = True, cols=None):
    """Return (dx, dw, db); dx is None when `need_input` is false."""
    n = x.shape[0]
    out_sp = tuple(g.shape[2:])
    if cols is None:
        cols, _ = _patches(x, spec)
    gc = np.moveaxis(g, 1, 0).reshape(spec.out_channels, -1)
    db = gc.sum(axis=1)
    dw = (gc @ cols.T).reshape(w.shape)
    if not need_input:
        return None, dw, db
    dcols = (w.reshape(spec.out_channels, -1).T @ gc).reshape(
        (spec.in_channels,) + spec.kernel + (n,) + out_sp)
    padded = tuple(s + 2 * p for s, p in zip(x.shape[2:], spec.pads))
    dxc = np.zeros((spec.in_channels, n) + padded, dtype=x.dtype)
    lead = (slice(None), slice(None))
    for offs, sl in _windows(spec, out_sp):
        dxc[lead + sl] += dcols[(slice(None),) + offs]
    crop = tuple(slice(p, p + s) for p, s in zip(spec.pads, x.shape[2:]))
    dx = np.moveaxis(dxc[lead + crop], 0, 1)
    return np.ascontiguousarray(dx), dw, db


def maxpool_forward(x, window=2, stride=None):
    """Max pooling over the trailing spatial axes.

    Returns the pooled tensor and, per output cell, the index of the winning
    window offset.  Ties go to the lowest flat index.
    """
    rank = x.ndim - 2
    if rank < 1:
        raise ShapeError(f"pooling expects (N, C, spatial...), got {x.shape}")
    window = _tuple(window, rank)
    stride = window if stride is None else _tuple(stride, rank)
    spatial = x.shape[2:]
    if any(wd > n for wd, n in zip(window, spatial)):
        raise ShapeError(f"pool window {window} larger than input {spatial}")
    out_sp = tuple((n - wd) // s + 1 for n, wd, s in zip(spatial, window, stride))
    lead = (slice(None), slice(None))
    out = None
    arg = np.zeros(x.shape[:2] + out_sp, dtype=np.int16)
    for k, offs in enumerate(itertools.product(*(range(wd) for wd in window))):
        sl = tuple(slice(o, o + s * (m - 1) + 1, s) for o, s, m in zip(offs, stride, out_sp))
        v = x[lead + sl]
        if out is None:
            out = v.copy()
            continue
        better = v > out
        out[better] = v[better]
        arg[better] = k
    return out, arg


def maxpool_backward(g, arg, input_shape, window=2, stride=None):
    rank = len(input_shape) - 2
    window = _tuple(window, rank)
    stride = window if stride is None else _tuple(stride, rank)
    out_sp = g.shape[2:]
    dx = np.zeros(input_shape, dtype=g.dtype)
    lead = (slice(None), slice(None))
    for k, offs in enumerate(itertools.product(*(range(wd) for wd in window))):
        sl = tuple(slice(o, o + s * (m - 1) + 1, s) for o, s, m in zip(offs, stride, out_sp))
        dx[lead + sl] += np.where(arg == k, g, 0)
    return dx


def dense_forward(x, w, b):
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"dense: input {x.shape} incompatible with weights {w.shape}")
    if b.shape != (w.shape[1],):
        raise ShapeError(f"dense: bias {b.shape} does not match {w.shape[1]} units")
    return x @ w + b


def dense_backward(g, x, w):
    return g @ w.T, x.T @ g, g.sum(axis=0)


def relu_forward(x):
    return np.maximum(x, 0)


def relu_backward(g, x):
    # subgradient 0 at x == 0
    return g * (x > 0)


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(g, p):
    return p * (g - (g * p).sum(axis=-1, keepdims=True))


def _check_labels(labels, n, k):
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ContractError(f"expected {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ContractError(f"labels must lie in [0, {k})")
    return labels.astype(np.int64)


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy of integer labels under softmax(logits).

    Returns ``(loss, probabilities)``; uses max-subtraction so extreme logits
    do not overflow.
    """
    if logits.ndim != 2:
        raise ShapeError(f"logits must be (N, K), got {logits.shape}")
    n, k = logits.shape
    labels = _check_labels(labels, n, k)
    z = logits.astype(np.float64) - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    probs = np.exp(z - lse[:, None]).astype(logits.dtype)
    loss = float((lse - z[np.arange(n), labels]).mean()) if n else 0.0
    return loss, probs


def softmax_cross_entropy_backward(probs, labels):
    n = probs.shape[0]
    g = probs.copy()
    g[np.arange(n), labels] -= 1
    return g / max(n, 1)


@dataclass
class AdamState:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState) -> dict:
    """One bias-corrected Adam update.

    Returns a new parameter dict; `state` (step count and moments) is
    updated in place.  Parameters without a gradient are carried over.
    A non-finite gradient rejects the whole step before anything changes.
    """
    bad = [name for name in sorted(grads) if not np.all(np.isfinite(grads[name]))]
    if bad:
        raise NonFiniteGradientError(bad)
    for name, g in grads.items():
        if name not in params:
            raise ContractError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {params[name].shape} for {name!r}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    out = dict(params)
    for name in sorted(grads):
        p = params[name]
        g = grads[name].astype(p.dtype, copy=False)
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
        v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
        state.m[name] = m
        state.v[name] = v
        step = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        out[name] = (p - step).astype(p.dtype, copy=False)
    return out


# --- tape-recording wrappers -------------------------------------------------

def t_conv(tape: Tape, x: Node, w: Node, b: Node, spec: ConvSpec) -> Node:
    xv, wv = x.value, w.value
    keep = []
    out = conv_forward(xv, spec, wv, b.value, _keep=keep)

    def bwd(g, needs):
        return conv_backward(g, xv, spec, wv, need_input=needs[0], cols=keep[0])

    return tape.record("conv", (x, w, b), out, bwd)


def t_pool(tape: Tape, x: Node, window=2, stride=None) -> Node:
    shape = x.value.shape
    out, arg = maxpool_forward(x.value, window, stride)

    def bwd(g, needs):
        return (maxpool_backward(g, arg, shape, window, stride),)

    return tape.record("pool", (x,), out, bwd)


def t_dense(tape: Tape, x: Node, w: Node, b: Node) -> Node:
    xv, wv = x.value, w.value
    out = dense_forward(xv, wv, b.value)

    def bwd(g, needs):
        return dense_backward(g, xv, wv)

    return tape.record("dense", (x, w, b), out, bwd)


def t_relu(tape: Tape, x: Node) -> Node:
    xv = x.value
    return tape.record("relu", (x,), relu_forward(xv), lambda g, needs: (relu_backward(g, xv),))


def t_softmax(tape: Tape, x: Node) -> Node:
    p = softmax(x.value)
    return tape.record("softmax", (x,), p, lambda g, needs: (softmax_backward(g, p),))


def t_flatten(tape: Tape, x: Node) -> Node:
    shape = x.value.shape
    out = x.value.reshape(shape[0], -1)
    return tape.record("flatten", (x,), out, lambda g, needs: (g.reshape(shape),))


def t_add(tape: Tape, a: Node, b: Node) -> Node:
    if a.value.shape != b.value.shape:
        raise ShapeError(f"add: shapes {a.value.shape} and {b.value.shape} differ")
    return tape.record("add", (a, b), a.value + b.value, lambda g, needs: (g, g))


def t_concat(tape: Tape, xs, axis: int = 1) -> Node:
    sizes = [x.value.shape[axis] for x in xs]
    out = np.concatenate([x.value for x in xs], axis=axis)
    bounds = np.cumsum([0] + sizes)

    def bwd(g, needs):
        idx = [slice(None)] * g.ndim
        parts = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx[axis] = slice(lo, hi)
            parts.append(g[tuple(idx)])
        return tuple(parts)

    return tape.record("concat", tuple(xs), out, bwd)


def t_crop(tape: Tape, x: Node, region) -> Node:
    """Copy a spatial box (tuple of slices over the spatial axes) out of x."""
    shape = x.value.shape
    sl = (slice(None), slice(None)) + tuple(region)
    out = x.value[sl].copy()

    def bwd(g, needs):
        if not needs[0]:
            return (None,)
        dx = np.zeros(shape, dtype=g.dtype)
        dx[sl] = g
        return (dx,)

    return tape.record("tile", (x,), out, bwd)


def t_scale(tape: Tape, x: Node, factor: float) -> Node:
    return tape.record("scale", (x,), x.value * factor, lambda g, needs: (g * factor,))


def t_weighted_sum(tape: Tape, x: Node, weights) -> Node:
    weights = np.asarray(weights, dtype=x.value.dtype)
    out = np.asarray((x.value * weights).sum()).reshape(1)
    return tape.record("wsum", (x,), out, lambda g, needs: (g.reshape(()) * weights,))


def t_softmax_ce(tape: Tape, logits: Node, labels) -> tuple[Node, np.ndarray]:
    loss, probs = softmax_cross_entropy(logits.value, labels)
    lab = np.asarray(labels, dtype=np.int64)
    value = np.array([loss], dtype=logits.value.dtype)

    def bwd(g, needs):
        return (softmax_cross_entropy_backward(probs, lab) * g.reshape(()),)

    return tape.record("softmax_ce", (logits,), value, bwd), probs
