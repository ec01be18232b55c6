"""A small reverse-mode tape over 2-D float64 matrices.

Ops are recorded in call order and replayed backwards. Besides the layer-level
ops used for training (linear, sign with straight-through estimator, fused
batch norm, center/scale, relu, softmax cross-entropy) the tape has a handful
of broadcasting primitives, enough to spell batch norm out by hand so the
closed-form backward can be checked against plain chain rule.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import normalizers as nz
from .core import as_matrix, check_finite, matmul
from .errors import ContractViolation, ShapeError

STE_CLIPPED = "clipped"
STE_IDENTITY = "identity"


class Var:
    __slots__ = ("tape", "id", "value", "name")

    def __init__(self, tape: "Tape", id: int, value: np.ndarray, name: str | None = None):
        self.tape = tape
        self.id = id
        self.value = value
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(id={self.id}, name={self.name!r}, shape={self.value.shape})"

    def __add__(self, other):
        return self.tape.add(self, other)

    def __sub__(self, other):
        return self.tape.sub(self, other)

    def __mul__(self, other):
        return self.tape.mul(self, other)

    def __truediv__(self, other):
        return self.tape.div(self, other)

    def __radd__(self, other):
        return self.tape.add(other, self)

    def __rsub__(self, other):
        return self.tape.sub(other, self)

    def __rmul__(self, other):
        return self.tape.mul(other, self)

    def __rtruediv__(self, other):
        return self.tape.div(other, self)


@dataclass
class Node:
    op: str
    inputs: tuple[int, ...]
    output: int
    backward: Callable[[np.ndarray], tuple[np.ndarray | None, ...]]


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    # operands are always 2-D, so broadcasting only ever stretches size-1 axes
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def sign(x: np.ndarray) -> np.ndarray:
    """Elementwise sign with ``sign(0) = +1``."""
    return np.where(x >= 0, 1.0, -1.0)


def ste_backward(x_saved: np.ndarray, dy: np.ndarray, mode: str = STE_CLIPPED) -> np.ndarray:
    """Straight-through gradient of sign: ``dy * 1[-1 <= x <= 1]`` when clipped."""
    if mode == STE_IDENTITY:
        return dy.copy()
    if mode != STE_CLIPPED:
        raise ValueError(f"unknown STE mode {mode!r}")
    return np.where(np.abs(x_saved) <= 1.0, dy, 0.0)


def linear_forward(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    return matmul(x, w)


def linear_backward(x: np.ndarray, w: np.ndarray, ds: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    if ds.shape != (x.shape[0], w.shape[1]) or x.shape[1] != w.shape[0]:
        raise ShapeError(f"linear_backward: x {x.shape}, w {w.shape}, ds {ds.shape}")
    return matmul(ds, np.ascontiguousarray(w.T)), matmul(np.ascontiguousarray(x.T), ds)


class Tape:
    """Records operations; ``backward`` returns gradients keyed by var id."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.values: list[np.ndarray] = []

    def _new(self, value, name=None) -> Var:
        v = Var(self, len(self.values), value, name)
        self.values.append(value)
        return v

    def _record(self, op, inputs, value, backward, name=None) -> Var:
        out = self._new(value, name)
        self.nodes.append(Node(op, tuple(i.id for i in inputs), out.id, backward))
        return out

    def _lift(self, x) -> Var:
        if isinstance(x, Var):
            if x.tape is not self:
                raise ValueError("variable belongs to another tape")
            return x
        return self.constant(x)

    def has_op(self, op: str) -> bool:
        return any(n.op == op for n in self.nodes)

    # leaves

    def leaf(self, value, name: str | None = None) -> Var:
        return self._new(as_matrix(value), name)

    def constant(self, value) -> Var:
        return self._new(as_matrix(value), "const")

    # broadcasting primitives

    def add(self, a, b) -> Var:
        a, b = self._lift(a), self._lift(b)
        sa, sb = a.shape, b.shape
        return self._record("add", (a, b), a.value + b.value,
                            lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))

    def sub(self, a, b) -> Var:
        a, b = self._lift(a), self._lift(b)
        sa, sb = a.shape, b.shape
        return self._record("sub", (a, b), a.value - b.value,
                            lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))

    def mul(self, a, b) -> Var:
        a, b = self._lift(a), self._lift(b)
        av, bv = a.value, b.value
        return self._record("mul", (a, b), av * bv,
                            lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))

    def div(self, a, b) -> Var:
        a, b = self._lift(a), self._lift(b)
        av, bv = a.value, b.value
        out = av / bv
        return self._record("div", (a, b), out,
                            lambda g: (_unbroadcast(g / bv, av.shape), _unbroadcast(-g * out / bv, bv.shape)))

    def sqrt(self, a) -> Var:
        a = self._lift(a)
        out = np.sqrt(a.value)
        return self._record("sqrt", (a,), out, lambda g: (g / (2.0 * out),))

    def col_mean(self, a) -> Var:
        a = self._lift(a)
        n, _ = a.shape
        return self._record("col_mean", (a,), a.value.mean(axis=0, keepdims=True),
                            lambda g: (np.repeat(g / n, n, axis=0),))

    def total(self, a) -> Var:
        a = self._lift(a)
        shape = a.shape
        return self._record("sum", (a,), np.array([[a.value.sum()]]),
                            lambda g: (np.full(shape, g[0, 0]),))

    # layer ops

    def linear(self, x, w) -> Var:
        x, w = self._lift(x), self._lift(w)
        xv, wv = x.value, w.value
        return self._record("linear", (x, w), linear_forward(xv, wv),
                            lambda g: linear_backward(xv, wv, g))

    def sign(self, x, ste: str = STE_CLIPPED) -> Var:
        x = self._lift(x)
        xv = x.value
        return self._record("sign", (x,), sign(xv), lambda g: (ste_backward(xv, g, ste),))

    def relu(self, x) -> Var:
        x = self._lift(x)
        mask = x.value > 0
        return self._record("relu", (x,), np.where(mask, x.value, 0.0),
                            lambda g: (np.where(mask, g, 0.0),))

    def batch_norm(self, s, gamma, beta, cfg: nz.NormalizerConfig | None = None, mode: str = "train",
                   running: nz.RunningStats | None = None, eps: float | None = None):
        """Fused batch norm with the closed-form backward. Returns ``(z, stats)``."""
        s, gamma, beta = self._lift(s), self._lift(gamma), self._lift(beta)
        params = nz.BNParams(gamma.value, beta.value)
        z, stats, s_hat = nz.bn_forward(s.value, params, cfg, mode, running, eps)

        def backward(g):
            dgamma, dbeta = nz.bn_param_grads(s_hat, g)
            if mode == "train":
                ds = nz.bn_backward_closed(s_hat, g, params, stats)
            else:
                ds = g * params.gamma / stats.std
            return ds, dgamma, dbeta

        return self._record("batch_norm", (s, gamma, beta), z, backward), stats

    def center_scale(self, s, c: float, mode: str = "train", running: nz.RunningStats | None = None):
        """Fused ``(s - batch mean) * c``. Returns ``(z, batch_mean)``."""
        s = self._lift(s)
        z, mu = nz.center_scale_forward(s.value, c, mode, running)
        if mode == "train":
            back = lambda g: (nz.center_scale_backward(g, c),)
        else:
            back = lambda g: (g * c,)
        return self._record("center_scale", (s,), z, back), mu

    def softmax_cross_entropy(self, logits, labels: np.ndarray) -> Var:
        """Mean cross-entropy over the batch, via log-sum-exp."""
        logits = self._lift(logits)
        lv = logits.value
        n = lv.shape[0]
        labels = np.asarray(labels, dtype=np.int64)
        shifted = lv - lv.max(axis=1, keepdims=True)
        logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        logp = shifted - logz
        loss = -logp[np.arange(n), labels].mean()

        def backward(g):
            p = np.exp(logp)
            p[np.arange(n), labels] -= 1.0
            return (p * (g[0, 0] / n),)

        return self._record("softmax_xent", (logits,), np.array([[loss]]), backward)

    # backward pass

    def backward(self, out: Var, seed: np.ndarray | None = None) -> dict[int, np.ndarray]:
        """Propagate from ``out`` (seeded with ones or ``seed``) to every var."""
        if seed is None:
            seed = np.ones_like(out.value)
        seed = as_matrix(seed)
        if seed.shape != out.shape:
            raise ShapeError(f"seed {seed.shape} does not match output {out.shape}")
        grads: dict[int, np.ndarray] = {out.id: seed}
        for node in reversed(self.nodes):
            g = grads.get(node.output)
            if g is None:
                continue
            for i, gi in zip(node.inputs, node.backward(g)):
                if gi is None:
                    continue
                if gi.shape != self.values[i].shape:
                    raise ShapeError(f"{node.op}: gradient {gi.shape} vs value {self.values[i].shape}")
                grads[i] = grads[i] + gi if i in grads else gi
        for g in grads.values():
            check_finite(g, "gradient")
        return grads


def composed_batch_norm(tape: Tape, s: Var, gamma: Var, beta: Var, eps: float = 0.0) -> Var:
    """Batch norm spelled out with tape primitives (reference for the fused op)."""
    mu = tape.col_mean(s)
    d = tape.sub(s, mu)
    var = tape.col_mean(tape.mul(d, d))
    sd = tape.sqrt(tape.add(var, np.array([[eps]])) if eps else var)
    return tape.add(tape.mul(tape.div(d, sd), gamma), beta)


@dataclass
class GradCheckReport:
    max_rel_error: dict[str, float]
    tolerance: float
    passed: bool = field(init=False)

    def __post_init__(self):
        self.passed = all(e <= self.tolerance for e in self.max_rel_error.values())

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """``max|a - n| / max(max|a|, max|n|, 1e-12)`` over one parameter tensor."""
    denom = max(float(np.abs(analytic).max(initial=0.0)), float(np.abs(numeric).max(initial=0.0)), 1e-12)
    return float(np.abs(analytic - numeric).max(initial=0.0)) / denom


def grad_check(fn: Callable[..., Var], inputs: dict[str, np.ndarray], tolerance: float = 1e-6,
               h: float = 1e-5, seed: int = 0) -> GradCheckReport:
    """Compare tape gradients of ``fn`` against central differences.

    ``fn(tape, **vars)`` builds the subgraph and returns its output. The
    scalar being differentiated is ``sum(out * R)`` for a fixed random ``R``
    so that outputs with constant sums (normalizers) still test every path.
    Subgraphs containing a sign node are rejected: the straight-through
    estimator is not the derivative of sign.
    """
    inputs = {k: as_matrix(v, copy=True) for k, v in inputs.items()}

    def build():
        tape = Tape()
        vs = {k: tape.leaf(v, k) for k, v in inputs.items()}
        return tape, vs, fn(tape, **vs)

    tape, vs, out = build()
    if tape.has_op("sign"):
        raise ContractViolation("grad_check cannot validate a straight-through estimator node")
    r = np.random.default_rng(seed).standard_normal(out.shape)
    grads = tape.backward(out, r)

    def objective():
        return float((build()[2].value * r).sum())

    errors = {}
    for name, x in inputs.items():
        analytic = grads.get(vs[name].id, np.zeros_like(x))
        numeric = np.zeros_like(x)
        for idx in np.ndindex(*x.shape):
            orig = x[idx]
            x[idx] = orig + h
            fp = objective()
            x[idx] = orig - h
            fm = objective()
            x[idx] = orig
            numeric[idx] = (fp - fm) / (2 * h)
        errors[name] = relative_error(analytic, numeric)
    return GradCheckReport(errors, tolerance)
