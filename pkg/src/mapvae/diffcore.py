"""A minimal reverse-mode differentiation core on numpy arrays.

Only the primitives the MAP-VAE model needs are provided. Every op builds an
output ``Tensor`` holding a closure that pushes the output gradient back to
its inputs; ``Tensor.backward`` replays those closures in reverse
topological order.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, Optional

import numpy as np

from . import transport
from .errors import SizeError

DTYPE = np.float64


class Tensor:
    __array_priority__ = 100

    def __init__(self, value, requires_grad=False, parents=(), backward=None, name=None):
        self.value = np.asarray(value, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name
        self._parents = parents
        self._backward = backward

    shape = property(lambda self: self.value.shape)
    ndim = property(lambda self: self.value.ndim)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if not self.requires_grad:
            return
        g = np.asarray(g, dtype=DTYPE)
        if g.shape != self.value.shape:
            g = _unbroadcast(g, self.value.shape)
        self.grad = g.copy() if self.grad is None else self.grad + g

    def backward(self, grad=None):
        if grad is None:
            if self.value.size != 1:
                raise ValueError("backward() without a gradient needs a scalar output")
            grad = np.ones_like(self.value)
        order, seen = [], set()

        def visit(t):
            stack = [(t, False)]
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

        visit(self)
        self._accumulate(grad)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def detach(self):
        return Tensor(self.value)

    # operator sugar; broadcasting follows numpy
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __getitem__(self, key):
        return index(self, key)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(value, name=None) -> Tensor:
    return Tensor(np.array(value, dtype=DTYPE), requires_grad=True, name=name)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _node(value, parents, backward):
    parents = tuple(parents)
    if any(p.requires_grad for p in parents):
        return Tensor(value, True, parents, backward)
    return Tensor(value)


# --------------------------------------------------------------------------
# elementwise and structural ops


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def back(g):
        a._accumulate(g)
        b._accumulate(g)

    return _node(a.value + b.value, (a, b), back)


def neg(a):
    return _node(-a.value, (a,), lambda g: a._accumulate(-g))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def back(g):
        a._accumulate(g * b.value)
        b._accumulate(g * a.value)

    return _node(a.value * b.value, (a, b), back)


def square(a):
    return _node(a.value ** 2, (a,), lambda g: a._accumulate(2 * g * a.value))


def exp(a):
    out = np.exp(a.value)
    return _node(out, (a,), lambda g: a._accumulate(g * out))


def relu(a):
    mask = a.value > 0
    return _node(a.value * mask, (a,), lambda g: a._accumulate(g * mask))


def sigmoid_array(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a):
    out = sigmoid_array(a.value)
    return _node(out, (a,), lambda g: a._accumulate(g * out * (1 - out)))


def tanh(a):
    out = np.tanh(a.value)
    return _node(out, (a,), lambda g: a._accumulate(g * (1 - out ** 2)))


def sum(a, axis=None):  # noqa: A001 - mirrors numpy naming
    a = as_tensor(a)

    def back(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.shape))

    return _node(a.value.sum(axis=axis), (a,), back)


def mean(a, axis=None):
    a = as_tensor(a)
    count = a.value.size if axis is None else a.shape[axis]
    return mul(sum(a, axis), 1.0 / count)


def reshape(a, shape):
    return _node(a.value.reshape(shape), (a,), lambda g: a._accumulate(g.reshape(a.shape)))


def index(a, key):
    def back(g):
        full = np.zeros_like(a.value)
        np.add.at(full, key, g)
        a._accumulate(full)

    return _node(a.value[key], (a,), back)


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]

    def back(g):
        for i, t in enumerate(tensors):
            t._accumulate(np.take(g, i, axis=axis))

    return _node(np.stack([t.value for t in tensors], axis=axis), tensors, back)


# --------------------------------------------------------------------------
# network primitives


def affine(x, W, b=None):
    """``x @ W + b`` over the last axis of ``x``; leading axes are batch axes."""
    x, W = as_tensor(x), as_tensor(W)
    if x.shape[-1] != W.shape[0]:
        raise SizeError(f"affine: input dim {x.shape[-1]} vs weight rows {W.shape[0]}")
    out = x.value @ W.value
    if b is not None:
        b = as_tensor(b)
        out = out + b.value
    parents = (x, W) if b is None else (x, W, b)

    def back(g):
        x._accumulate(g @ W.value.T)
        x2 = x.value.reshape(-1, x.shape[-1])
        g2 = g.reshape(-1, g.shape[-1])
        W._accumulate(x2.T @ g2)
        if b is not None:
            b._accumulate(g2.sum(axis=0))

    return _node(out, parents, back)


def set_max_pool(x, axis=-2):
    """Max over the point axis; gradient goes to the first maximiser."""
    x = as_tensor(x)
    axis = axis % x.ndim
    if x.shape[axis] < 1:
        raise SizeError("max pool over an empty set")
    arg = np.argmax(x.value, axis=axis)
    out = np.take_along_axis(x.value, np.expand_dims(arg, axis), axis=axis).squeeze(axis)

    def back(g):
        full = np.zeros_like(x.value)
        np.put_along_axis(full, np.expand_dims(arg, axis), np.expand_dims(g, axis), axis=axis)
        x._accumulate(full)

    return _node(out, (x,), back)


@dataclass
class GRUParams:
    """Gate blocks are stacked [update | reset | candidate] along the last axis."""
    W: Tensor  # (D_in, 3 D_h)
    U: Tensor  # (D_h, 3 D_h)
    b: Tensor  # (3 D_h,)

    @classmethod
    def init(cls, rng, d_in, d_h, prefix="gru"):
        s_in, s_h = 1 / np.sqrt(d_in), 1 / np.sqrt(d_h)
        return cls(parameter(rng.uniform(-s_in, s_in, (d_in, 3 * d_h)), f"{prefix}.W"),
                   parameter(rng.uniform(-s_h, s_h, (d_h, 3 * d_h)), f"{prefix}.U"),
                   parameter(np.zeros(3 * d_h), f"{prefix}.b"))

    def tensors(self):
        return [self.W, self.U, self.b]


def gru_step(x, h, params: GRUParams):
    """One GRU update.

    update = sig(x Wz + h Uz + bz), reset = sig(x Wr + h Ur + br),
    cand = tanh(x Wn + (reset*h) Un + bn), h' = (1-update)*cand + update*h.
    """
    x, h = as_tensor(x), as_tensor(h)
    W, U, b = params.W, params.U, params.b
    d = h.shape[-1]
    if W.shape != (x.shape[-1], 3 * d) or U.shape != (d, 3 * d):
        raise SizeError("gru_step: parameter shapes do not match input/hidden sizes")
    xw = x.value @ W.value + b.value
    hu = h.value @ U.value[:, :2 * d]
    z = sigmoid_array(xw[..., :d] + hu[..., :d])
    r = sigmoid_array(xw[..., d:2 * d] + hu[..., d:])
    rh = r * h.value
    n = np.tanh(xw[..., 2 * d:] + rh @ U.value[:, 2 * d:])
    out = (1 - z) * n + z * h.value

    def back(g):
        dn = g * (1 - z)
        dz = g * (h.value - n)
        da_n = dn * (1 - n ** 2)
        da_z = dz * z * (1 - z)
        drh = da_n @ U.value[:, 2 * d:].T
        da_r = drh * h.value * r * (1 - r)
        da = np.concatenate([da_z, da_r, da_n], axis=-1)
        dh = g * z + drh * r + da[..., :2 * d] @ U.value[:, :2 * d].T
        h._accumulate(dh)
        x._accumulate(da @ W.value.T)
        x2 = x.value.reshape(-1, x.shape[-1])
        da2 = da.reshape(-1, 3 * d)
        W._accumulate(x2.T @ da2)
        b._accumulate(da2.sum(axis=0))
        dU = np.empty_like(U.value)
        h2 = h.value.reshape(-1, d)
        dU[:, :2 * d] = h2.T @ da2[:, :2 * d]
        dU[:, 2 * d:] = rh.reshape(-1, d).T @ da2[:, 2 * d:]
        U._accumulate(dU)

    return _node(out, (x, h, W, U, b), back)


def kl_diag_gaussian(mu, sigma):
    """KL(N(mu, diag sigma^2) || N(0, I)), reduced over the last axis."""
    mu, sigma = as_tensor(mu), as_tensor(sigma)
    if np.any(sigma.value <= 0):
        raise ValueError("sigma must be strictly positive")
    s2 = sigma.value ** 2
    out = 0.5 * (mu.value ** 2 + s2 - 1 - np.log(s2)).sum(axis=-1)

    def back(g):
        g = np.expand_dims(g, -1)
        mu._accumulate(g * mu.value)
        sigma._accumulate(g * (sigma.value - 1 / sigma.value))

    return _node(out, (mu, sigma), back)


@dataclass
class LatentGaussian:
    mu: Tensor
    sigma: Tensor
    eps: np.ndarray
    z: Tensor


def reparameterize(mu, sigma, seed=None, eps=None, rng=None) -> LatentGaussian:
    """z = mu + eps * sigma with eps ~ N(0, I).

    ``eps`` overrides the draw (pass zeros to decode the mean).
    """
    mu, sigma = as_tensor(mu), as_tensor(sigma)
    if np.any(sigma.value <= 0):
        raise ValueError("sigma must be strictly positive")
    if eps is None:
        rng = rng if rng is not None else np.random.default_rng(seed)
        eps = rng.standard_normal(mu.shape)
    eps = np.broadcast_to(np.asarray(eps, dtype=DTYPE), mu.shape).copy()

    def back(g):
        mu._accumulate(g)
        sigma._accumulate(g * eps)

    z = _node(mu.value + eps * sigma.value, (mu, sigma), back)
    return LatentGaussian(mu, sigma, eps, z)


@dataclass
class BatchNormState:
    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5
    enabled: bool = True

    @classmethod
    def init(cls, channels, prefix="bn", **kw):
        return cls(parameter(np.ones(channels), f"{prefix}.gamma"),
                   parameter(np.zeros(channels), f"{prefix}.beta"),
                   np.zeros(channels), np.ones(channels), **kw)


def batch_norm(x, state: BatchNormState, mode="train"):
    """Per-channel normalization over every axis but the last."""
    x = as_tensor(x)
    if not state.enabled:
        return x
    axes = tuple(range(x.ndim - 1))
    count = int(np.prod([x.shape[a] for a in axes]))
    if mode == "train":
        if x.shape[0] < 2:
            raise SizeError("batch_norm in training mode needs a batch of at least 2")
        mu = x.value.mean(axis=axes)
        var = x.value.var(axis=axes)
        m = state.momentum
        state.running_mean = (1 - m) * state.running_mean + m * mu
        state.running_var = (1 - m) * state.running_var + m * var * count / max(count - 1, 1)
    elif mode == "eval":
        mu, var = state.running_mean, state.running_var
    else:
        raise ValueError(f"unknown batch_norm mode {mode!r}")
    inv = 1.0 / np.sqrt(var + state.eps)
    xhat = (x.value - mu) * inv
    gamma, beta = state.gamma, state.beta

    def back(g):
        gamma._accumulate((g * xhat).sum(axis=axes))
        beta._accumulate(g.sum(axis=axes))
        dxhat = g * gamma.value
        if mode == "train":
            dx = inv / count * (count * dxhat - dxhat.sum(axis=axes)
                                - xhat * (dxhat * xhat).sum(axis=axes))
        else:
            dx = dxhat * inv
        x._accumulate(dx)

    return _node(gamma.value * xhat + beta.value, (x, gamma, beta), back)


# --------------------------------------------------------------------------
# point-set losses


def emd_loss(pred, target, solver="scipy"):
    """Per-sample exact EMD between predicted (B, P, 3) and target clouds.

    The optimal matching is recomputed on every call and held fixed for
    the backward pass.
    """
    pred = as_tensor(pred)
    target = np.asarray(target, dtype=DTYPE)
    if pred.shape != target.shape:
        raise SizeError(f"emd_loss shapes differ: {pred.shape} vs {target.shape}")
    results = [transport.emd_exact(p, t, solver) for p, t in zip(pred.value, target)]
    costs = np.array([r.cost for r in results])

    def back(g):
        grads = np.stack([transport.emd_subgradient(p, t, r.matching)
                          for p, t, r in zip(pred.value, target, results)])
        pred._accumulate(g[:, None, None] * grads)

    out = _node(costs, (pred,), back)
    out.matchings = [r.matching for r in results]
    return out


def chamfer_loss(pred, target):
    """Per-sample Chamfer distance between (B, P, 3) and (B, Q, 3) clouds."""
    pred = as_tensor(pred)
    target = np.asarray(target, dtype=DTYPE)
    diff = pred.value[:, :, None, :] - target[:, None, :, :]
    d2 = np.einsum("bpqk,bpqk->bpq", diff, diff)
    nn_pt = d2.argmin(axis=2)  # (B, P)
    nn_tp = d2.argmin(axis=1)  # (B, Q)
    out = d2.min(axis=2).mean(axis=1) + d2.min(axis=1).mean(axis=1)

    def back(g):
        B, P, _ = pred.shape
        Q = target.shape[1]
        bi = np.arange(B)[:, None]
        grad = 2.0 / P * (pred.value - target[bi, nn_pt])
        tp = 2.0 / Q * (pred.value[bi, nn_tp] - target)
        for b in range(B):
            np.add.at(grad[b], nn_tp[b], tp[b])
        pred._accumulate(g[:, None, None] * grad)

    return _node(out, (pred,), back)


# --------------------------------------------------------------------------
# optimizer


@dataclass
class AdamHyper:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class AdamState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params, grads, state: AdamState, hyper: AdamHyper = AdamHyper()):
    """In-place Adam update of the arrays in ``params`` (name -> ndarray)."""
    state.t += 1
    b1, b2 = hyper.beta1, hyper.beta2
    c1 = 1 - b1 ** state.t
    c2 = 1 - b2 ** state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape:
            raise SizeError(f"gradient for {name} has shape {g.shape}, param {p.shape}")
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p -= hyper.lr * (m / c1) / (np.sqrt(v / c2) + hyper.eps)
    return params


# --------------------------------------------------------------------------
# finite-difference gradient check


@dataclass
class GradCheckReport:
    errors: Dict[str, float]    # max relative error per block
    checked: Dict[str, int]
    excluded: Dict[str, int]    # entries skipped as non-smooth
    tolerance: float

    @property
    def passed(self) -> bool:
        return all(e <= self.tolerance for e in self.errors.values())

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)


def grad_check(function: Callable[[Dict[str, Tensor]], Tensor], point: Dict[str, np.ndarray],
               tolerance: float = 1e-4, step: float = 1e-4, max_entries: Optional[int] = None,
               kink_rtol: float = 1e-2, seed: int = 0) -> GradCheckReport:
    """Compare reverse-mode gradients with central finite differences.

    ``function`` maps a dict of tensors to a scalar tensor and must be
    deterministic. An entry whose one-sided slopes disagree by more than
    ``kink_rtol`` is treated as sitting on a kink and excluded.
    """
    tensors = {k: parameter(np.array(v, dtype=DTYPE), k) for k, v in point.items()}
    out = function(tensors)
    f0 = float(out.value)
    out.backward()
    analytic = {k: (t.grad if t.grad is not None else np.zeros_like(t.value)) for k, t in tensors.items()}
    floor = 1e-6 * max(1.0, abs(f0))
    rng = np.random.default_rng(seed)

    def evaluate(name, flat_idx, delta):
        vals = {k: np.array(v, dtype=DTYPE) for k, v in point.items()}
        vals[name].reshape(-1)[flat_idx] += delta
        return float(function({k: Tensor(v) for k, v in vals.items()}).value)

    errors, checked, excluded = {}, {}, {}
    for name, base in point.items():
        size = np.size(base)
        entries = np.arange(size)
        if max_entries is not None and size > max_entries:
            entries = np.sort(rng.choice(size, max_entries, replace=False))
        flat = np.asarray(base, dtype=DTYPE).reshape(-1)
        worst, n_ok, n_kink = 0.0, 0, 0
        for i in entries:
            h = step * max(1.0, abs(flat[i]))
            fp, fm = evaluate(name, i, h), evaluate(name, i, -h)
            numeric = (fp - fm) / (2 * h)
            right, left = (fp - f0) / h, (f0 - fm) / h
            if abs(right - left) > kink_rtol * max(abs(right), abs(left), floor):
                n_kink += 1
                continue
            a = analytic[name].reshape(-1)[i]
            worst = max(worst, abs(a - numeric) / max(abs(a), abs(numeric), floor))
            n_ok += 1
        errors[name], checked[name], excluded[name] = worst, n_ok, n_kink
    return GradCheckReport(errors, checked, excluded, tolerance)
