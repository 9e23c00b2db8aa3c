"""Reverse-mode tensor math for the association network.

A deliberately small engine: dense float64 arrays, a fixed set of primitives,
and a Tape that records one backward closure per primitive. Replaying the tape
in reverse accumulates gradients into every requires_grad leaf. The network
architecture is static, so this is sufficient and easy to audit.

Tapes are single-owner: build one per forward pass and do not share it across
threads. Ops executed on tensors without a tape run in pure inference mode and
record nothing.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class Tape:
    """Ordered record of primitive operations for one forward pass."""

    def __init__(self):
        self._records: list[tuple[str, callable]] = []
        # Conditioning telemetry for finite-difference checks: smallest
        # |pre-activation| seen by any relu (distance to the kink) and the
        # smallest train-mode batch variance (curvature of the rsqrt).
        self.min_relu_margin: float = math.inf
        self.min_batch_variance: float = math.inf

    def __len__(self) -> int:
        return len(self._records)

    def record(self, name: str, fn) -> None:
        self._records.append((name, fn))

    def backward(self, output: "Tensor") -> None:
        """Seed the scalar output with gradient 1 and replay in reverse."""
        if output.data.size != 1:
            raise ValueError("backward requires a scalar output")
        output.grad = np.ones_like(output.data)
        for _, fn in reversed(self._records):
            fn()


class Tensor:
    """Dense float64 array with optional gradient tracking."""

    __slots__ = ("data", "grad", "requires_grad", "tape")

    def __init__(self, data, requires_grad: bool = False, tape: Tape | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.size and not np.isfinite(arr).all():
            raise ValueError("tensor entries must be finite")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.tape = tape

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the original shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def _result(name: str, data, parents: tuple[Tensor, ...], make_backward) -> Tensor:
    tape = next((p.tape for p in parents if p.tape is not None), None)
    requires = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=requires, tape=tape)
    if tape is not None and requires:
        tape.record(name, make_backward(out))
    return out


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data + b.data

    def bwd(out):
        def fn():
            g = out.grad
            if a.requires_grad:
                a.accumulate(_unbroadcast(g, a.data.shape))
            if b.requires_grad:
                b.accumulate(_unbroadcast(g, b.data.shape))
        return fn

    return _result("add", data, (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data - b.data

    def bwd(out):
        def fn():
            g = out.grad
            if a.requires_grad:
                a.accumulate(_unbroadcast(g, a.data.shape))
            if b.requires_grad:
                b.accumulate(_unbroadcast(-g, b.data.shape))
        return fn

    return _result("sub", data, (a, b), bwd)


def neg(a) -> Tensor:
    a = _as_tensor(a)

    def bwd(out):
        def fn():
            if a.requires_grad:
                a.accumulate(-out.grad)
        return fn

    return _result("neg", -a.data, (a,), bwd)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data * b.data

    def bwd(out):
        def fn():
            g = out.grad
            if a.requires_grad:
                a.accumulate(_unbroadcast(g * b.data, a.data.shape))
            if b.requires_grad:
                b.accumulate(_unbroadcast(g * a.data, b.data.shape))
        return fn

    return _result("mul", data, (a, b), bwd)


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ValueError(
            f"matmul shape mismatch: {a.data.shape} @ {b.data.shape}"
        )
    data = a.data @ b.data

    def bwd(out):
        def fn():
            g = out.grad
            if a.requires_grad:
                a.accumulate(g @ b.data.T)
            if b.requires_grad:
                b.accumulate(a.data.T @ g)
        return fn

    return _result("matmul", data, (a, b), bwd)


def transpose(a) -> Tensor:
    a = _as_tensor(a)

    def bwd(out):
        def fn():
            if a.requires_grad:
                a.accumulate(out.grad.T)
        return fn

    return _result("transpose", a.data.T, (a,), bwd)


def relu(a) -> Tensor:
    a = _as_tensor(a)
    if a.tape is not None and a.data.size:
        margin = float(np.min(np.abs(a.data)))
        a.tape.min_relu_margin = min(a.tape.min_relu_margin, margin)
    mask = a.data > 0

    def bwd(out):
        def fn():
            if a.requires_grad:
                a.accumulate(out.grad * mask)
        return fn

    return _result("relu", np.where(mask, a.data, 0.0), (a,), bwd)


def exp(a) -> Tensor:
    a = _as_tensor(a)
    data = np.exp(a.data)

    def bwd(out):
        def fn():
            if a.requires_grad:
                a.accumulate(out.grad * data)
        return fn

    return _result("exp", data, (a,), bwd)


def log(a) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.data <= 0):
        raise ValueError("log requires strictly positive input")

    def bwd(out):
        def fn():
            if a.requires_grad:
                a.accumulate(out.grad / a.data)
        return fn

    return _result("log", np.log(a.data), (a,), bwd)


def clip_min(a, floor: float) -> Tensor:
    """Elementwise max(a, floor); gradient passes only where a > floor."""
    a = _as_tensor(a)
    mask = a.data > floor

    def bwd(out):
        def fn():
            if a.requires_grad:
                a.accumulate(out.grad * mask)
        return fn

    return _result("clip_min", np.where(mask, a.data, floor), (a,), bwd)


def scale(a, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)

    def bwd(out):
        def fn():
            if a.requires_grad:
                a.accumulate(out.grad * c)
        return fn

    return _result("scale", a.data * c, (a,), bwd)


def tsum(a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(out):
        def fn():
            if a.requires_grad:
                g = out.grad
                if axis is not None and not keepdims:
                    g = np.expand_dims(g, axis)
                a.accumulate(np.broadcast_to(g, a.data.shape).copy())
        return fn

    return _result("sum", data, (a,), bwd)


def softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def bwd(out):
        def fn():
            if a.requires_grad:
                g = out.grad
                inner = (g * s).sum(axis=axis, keepdims=True)
                a.accumulate(s * (g - inner))
        return fn

    return _result("softmax", s, (a,), bwd)


def logsumexp(a, axis: int, keepdims: bool = True) -> Tensor:
    a = _as_tensor(a)
    m = a.data.max(axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    se = e.sum(axis=axis, keepdims=True)
    data = np.log(se) + m
    soft = e / se
    if not keepdims:
        data = np.squeeze(data, axis=axis)

    def bwd(out):
        def fn():
            if a.requires_grad:
                g = out.grad
                if not keepdims:
                    g = np.expand_dims(g, axis)
                a.accumulate(soft * g)
        return fn

    return _result("logsumexp", data, (a,), bwd)


def concat(parts: list[Tensor], axis: int) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bwd(out):
        def fn():
            g = out.grad
            for p, start, stop in zip(parts, offsets[:-1], offsets[1:]):
                if p.requires_grad:
                    index = [slice(None)] * g.ndim
                    index[axis] = slice(start, stop)
                    p.accumulate(g[tuple(index)])
        return fn

    return _result("concat", data, tuple(parts), bwd)


def narrow(a, axis: int, start: int, size: int) -> Tensor:
    a = _as_tensor(a)
    index = [slice(None)] * a.data.ndim
    index[axis] = slice(start, start + size)
    index = tuple(index)

    def bwd(out):
        def fn():
            if a.requires_grad:
                g = np.zeros_like(a.data)
                g[index] = out.grad
                a.accumulate(g)
        return fn

    return _result("narrow", a.data[index].copy(), (a,), bwd)


def broadcast_to(a, shape: tuple[int, ...]) -> Tensor:
    a = _as_tensor(a)

    def bwd(out):
        def fn():
            if a.requires_grad:
                a.accumulate(_unbroadcast(out.grad, a.data.shape))
        return fn

    return _result(
        "broadcast", np.broadcast_to(a.data, shape).copy(), (a,), bwd
    )


def alias(a: Tensor, tape: Tape | None) -> Tensor:
    """Identity recorded on an explicit tape.

    Ops record only when some input already carries a tape, so a leaf that
    enters the graph through parameter-only expressions (e.g. broadcasting a
    scalar parameter) must be aliased onto the forward tape first or its
    gradient is silently dropped.
    """
    out = Tensor(a.data.copy(), requires_grad=a.requires_grad, tape=tape)
    if tape is not None and a.requires_grad:

        def fn():
            a.accumulate(out.grad)

        tape.record("alias", fn)
    return out


def linear(x, w, b) -> Tensor:
    """y = x @ w + b for x [n, p], w [p, q], b [q]."""
    return add(matmul(x, w), b)


@dataclass
class BatchNormState:
    """Running statistics, updated in train mode and used in infer mode."""

    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = BN_MOMENTUM

    @classmethod
    def create(cls, dim: int, momentum: float = BN_MOMENTUM) -> "BatchNormState":
        return cls(np.zeros(dim), np.ones(dim), momentum)

    def copy(self) -> "BatchNormState":
        return BatchNormState(
            self.running_mean.copy(), self.running_var.copy(), self.momentum
        )


@dataclass
class BatchNormParams:
    gamma: Tensor
    beta: Tensor
    state: BatchNormState

    @classmethod
    def create(cls, dim: int) -> "BatchNormParams":
        return cls(
            gamma=Tensor(np.ones(dim), requires_grad=True),
            beta=Tensor(np.zeros(dim), requires_grad=True),
            state=BatchNormState.create(dim),
        )


def batchnorm(x, params: BatchNormParams, mode: str = "infer") -> Tensor:
    """Normalize columns of x [n, q]; batch statistics in train mode.

    Train mode uses biased batch variance, updates the running statistics
    with the configured momentum, and requires n >= 2. Infer mode is a plain
    affine transform from the running statistics.
    """
    x = _as_tensor(x)
    gamma, beta, state = params.gamma, params.beta, params.state
    if mode == "train":
        n = x.data.shape[0]
        if n < 2:
            raise ValueError("batchnorm train mode needs n >= 2 (undefined variance)")
        mu = x.data.mean(axis=0)
        xc = x.data - mu
        var = (xc * xc).mean(axis=0)
        if x.tape is not None and var.size:
            x.tape.min_batch_variance = min(
                x.tape.min_batch_variance, float(var.min())
            )
        inv = 1.0 / np.sqrt(var + BN_EPS)
        xhat = xc * inv
        data = gamma.data * xhat + beta.data
        m = state.momentum
        state.running_mean = (1 - m) * state.running_mean + m * mu
        state.running_var = (1 - m) * state.running_var + m * var

        def bwd(out):
            def fn():
                g = out.grad
                if gamma.requires_grad:
                    gamma.accumulate((g * xhat).sum(axis=0))
                if beta.requires_grad:
                    beta.accumulate(g.sum(axis=0))
                if x.requires_grad:
                    dxhat = g * gamma.data
                    term = (
                        n * dxhat
                        - dxhat.sum(axis=0)
                        - xhat * (dxhat * xhat).sum(axis=0)
                    )
                    x.accumulate(inv / n * term)
            return fn

        return _result("batchnorm", data, (x, gamma, beta), bwd)

    if mode == "infer":
        inv = 1.0 / np.sqrt(state.running_var + BN_EPS)
        xhat = (x.data - state.running_mean) * inv
        data = gamma.data * xhat + beta.data

        def bwd(out):
            def fn():
                g = out.grad
                if gamma.requires_grad:
                    gamma.accumulate((g * xhat).sum(axis=0))
                if beta.requires_grad:
                    beta.accumulate(g.sum(axis=0))
                if x.requires_grad:
                    x.accumulate(g * gamma.data * inv)
            return fn

        return _result("batchnorm", data, (x, gamma, beta), bwd)

    raise ValueError(f"unknown batchnorm mode: {mode!r}")


@dataclass
class AttentionParams:
    """Learned projections for one multi-head attention block."""

    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    bq: Tensor
    bk: Tensor
    bv: Tensor
    bo: Tensor

    @classmethod
    def create(cls, dim: int, rng: np.random.Generator) -> "AttentionParams":
        def w():
            return Tensor(glorot(rng, dim, dim), requires_grad=True)

        def b():
            return Tensor(np.zeros(dim), requires_grad=True)

        return cls(w(), w(), w(), w(), b(), b(), b(), b())


def multi_head_attention(
    query_set, key_value_set, params: AttentionParams, heads: int = 4
) -> Tensor:
    """Scaled dot-product attention from query rows onto key/value rows."""
    q_in, kv_in = _as_tensor(query_set), _as_tensor(key_value_set)
    if kv_in.data.shape[0] == 0:
        raise ValueError("attention needs at least one key/value row")
    dim = q_in.data.shape[1]
    if dim % heads != 0:
        raise ValueError(f"model dim {dim} not divisible by {heads} heads")
    dh = dim // heads

    q = linear(q_in, params.wq, params.bq)
    k = linear(kv_in, params.wk, params.bk)
    v = linear(kv_in, params.wv, params.bv)

    outputs = []
    inv_sqrt = 1.0 / math.sqrt(dh)
    for h in range(heads):
        qh = narrow(q, 1, h * dh, dh)
        kh = narrow(k, 1, h * dh, dh)
        vh = narrow(v, 1, h * dh, dh)
        scores = scale(matmul(qh, transpose(kh)), inv_sqrt)
        attn = softmax(scores, axis=1)
        outputs.append(matmul(attn, vh))
    merged = concat(outputs, axis=1)
    return linear(merged, params.wo, params.bo)


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def grad_check(f, leaves: list[Tensor], step: float = 1e-4) -> float:
    """Max relative error between tape gradients and central differences.

    f takes no arguments, rebuilds its computation from the current leaf
    values on a fresh tape, and returns a scalar Tensor. The relative error
    denominator is max(1, |analytic|, |numeric|) per entry.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    for leaf in leaves:
        leaf.grad = None
    out = f()
    if out.data.size != 1:
        raise ValueError("grad_check requires a scalar-valued computation")
    if out.tape is not None:
        out.tape.backward(out)

    worst = 0.0
    for leaf in leaves:
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        flat = leaf.data.reshape(-1)
        aflat = np.asarray(analytic).reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = float(f().data)
            flat[i] = orig - step
            fm = float(f().data)
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * step)
            denom = max(1.0, abs(aflat[i]), abs(numeric))
            worst = max(worst, abs(aflat[i] - numeric) / denom)
    return worst
