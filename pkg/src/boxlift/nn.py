"""Minimal reverse-mode autodiff over float64 numpy arrays.

Just enough machinery for a small conditional residual network: dense
affine maps, GELU, layer norm, single-head scaled dot-product attention,
embedding-row lookup, an adaptive-moment optimizer with decoupled weight
decay, and central-difference gradient checking. Graphs are built eagerly
per forward pass; backward() walks the tape once from a scalar loss.

Every freshly created tensor is checked for NaN/Inf while the module-level
`check_finite` flag is on (the default).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import NonFiniteError, ShapeMismatch

check_finite: bool = True


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient down to `shape` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A float64 array plus the tape hooks needed for reverse mode."""

    __slots__ = ("data", "grad", "_parents", "_bw")

    def __init__(self, data, parents=(), bw=None):
        self.data = np.asarray(data, dtype=np.float64)
        if check_finite and not np.all(np.isfinite(self.data)):
            raise NonFiniteError("tensor holds NaN or Inf")
        self.grad: np.ndarray | None = None
        self._parents = parents
        self._bw = bw

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def _accum(self, g: np.ndarray) -> None:
        self.grad = g if self.grad is None else self.grad + g

    # -- arithmetic -----------------------------------------------------

    def __add__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)
        out = Tensor(self.data + other.data, (self, other))

        def bw(g):
            self._accum(_unbroadcast(g, self.shape))
            other._accum(_unbroadcast(g, other.shape))

        out._bw = bw
        return out

    __radd__ = __add__

    def __sub__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)
        out = Tensor(self.data - other.data, (self, other))

        def bw(g):
            self._accum(_unbroadcast(g, self.shape))
            other._accum(_unbroadcast(-g, other.shape))

        out._bw = bw
        return out

    def __rsub__(self, other):
        return Tensor(other) - self

    def __mul__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)
        out = Tensor(self.data * other.data, (self, other))

        def bw(g):
            self._accum(_unbroadcast(g * other.data, self.shape))
            other._accum(_unbroadcast(g * self.data, other.shape))

        out._bw = bw
        return out

    __rmul__ = __mul__

    def __neg__(self):
        return self * -1.0

    def __truediv__(self, scalar):
        if isinstance(scalar, Tensor):
            raise ShapeMismatch("tensor/tensor division unsupported; use pow(-1)")
        return self * (1.0 / scalar)

    def __matmul__(self, other):
        if not isinstance(other, Tensor):
            other = Tensor(other)
        if self.data.ndim != 2 or other.data.ndim != 2:
            raise ShapeMismatch("matmul expects 2-D operands")
        if self.data.shape[1] != other.data.shape[0]:
            raise ShapeMismatch(
                f"matmul inner dims differ: {self.data.shape} @ {other.data.shape}"
            )
        out = Tensor(self.data @ other.data, (self, other))

        def bw(g):
            self._accum(g @ other.data.T)
            other._accum(self.data.T @ g)

        out._bw = bw
        return out

    def __pow__(self, p: float):
        out = Tensor(self.data**p, (self,))

        def bw(g):
            self._accum(g * p * self.data ** (p - 1))

        out._bw = bw
        return out

    # -- reductions and reshaping ---------------------------------------

    def sum(self, axis=None, keepdims=False):
        out = Tensor(self.data.sum(axis=axis, keepdims=keepdims), (self,))

        def bw(g):
            if axis is None:
                self._accum(np.broadcast_to(g, self.shape).copy())
            else:
                gg = g if keepdims else np.expand_dims(g, axis)
                self._accum(np.broadcast_to(gg, self.shape).copy())

        out._bw = bw
        return out

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape):
        out = Tensor(self.data.reshape(*shape), (self,))

        def bw(g):
            self._accum(g.reshape(self.shape))

        out._bw = bw
        return out

    def transpose(self):
        if self.data.ndim != 2:
            raise ShapeMismatch("transpose expects a 2-D tensor")
        out = Tensor(self.data.T, (self,))

        def bw(g):
            self._accum(g.T)

        out._bw = bw
        return out

    # -- pointwise nonlinearities ---------------------------------------

    def abs(self):
        out = Tensor(np.abs(self.data), (self,))

        def bw(g):
            self._accum(g * np.sign(self.data))

        out._bw = bw
        return out

    def exp(self):
        y = np.exp(self.data)
        out = Tensor(y, (self,))

        def bw(g):
            self._accum(g * y)

        out._bw = bw
        return out

    def log(self):
        out = Tensor(np.log(self.data), (self,))

        def bw(g):
            self._accum(g / self.data)

        out._bw = bw
        return out

    def tanh(self):
        y = np.tanh(self.data)
        out = Tensor(y, (self,))

        def bw(g):
            self._accum(g * (1.0 - y * y))

        out._bw = bw
        return out

    def sigmoid(self):
        y = 1.0 / (1.0 + np.exp(-np.abs(self.data)))
        y = np.where(self.data >= 0, y, 1.0 - y)
        out = Tensor(y, (self,))

        def bw(g):
            self._accum(g * y * (1.0 - y))

        out._bw = bw
        return out

    def softplus(self):
        y = np.logaddexp(0.0, self.data)
        out = Tensor(y, (self,))

        def bw(g):
            sig = 1.0 / (1.0 + np.exp(-np.abs(self.data)))
            sig = np.where(self.data >= 0, sig, 1.0 - sig)
            self._accum(g * sig)

        out._bw = bw
        return out

    def softmax(self):
        """Row softmax over the last axis."""
        z = self.data - self.data.max(axis=-1, keepdims=True)
        e = np.exp(z)
        y = e / e.sum(axis=-1, keepdims=True)
        out = Tensor(y, (self,))

        def bw(g):
            dot = (g * y).sum(axis=-1, keepdims=True)
            self._accum(y * (g - dot))

        out._bw = bw
        return out

    # -- backward --------------------------------------------------------

    def backward(self) -> None:
        if self.data.size != 1:
            raise ShapeMismatch("backward() requires a scalar loss")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._bw is not None and node.grad is not None:
                node._bw(node.grad)

    def __repr__(self):
        return f"Tensor(shape={self.shape})"


class Parameter(Tensor):
    """A named leaf tensor with adaptive-moment optimizer state."""

    __slots__ = ("name", "m", "v", "step")

    def __init__(self, data, name: str):
        super().__init__(data)
        self.name = name
        self.m = np.zeros_like(self.data)
        self.v = np.zeros_like(self.data)
        self.step = 0


def concat(tensors: list[Tensor], axis: int = 1) -> Tensor:
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors))
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for t, a, b in zip(tensors, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(a, b)
            t._accum(g[tuple(sl)])

    out._bw = bw
    return out


def split2(t: Tensor, n: int) -> tuple[Tensor, Tensor]:
    """Split a (1, k) tensor into its first n and remaining columns."""
    left = Tensor(t.data[:, :n], (t,))
    right = Tensor(t.data[:, n:], (t,))

    def bw_left(g):
        full = np.zeros_like(t.data)
        full[:, :n] = g
        t._accum(full)

    def bw_right(g):
        full = np.zeros_like(t.data)
        full[:, n:] = g
        t._accum(full)

    left._bw = bw_left
    right._bw = bw_right
    return left, right


def row(table: Tensor, index: int) -> Tensor:
    """Pick one row of a 2-D tensor as a (1, d) tensor (embedding lookup)."""
    out = Tensor(table.data[index : index + 1], (table,))

    def bw(g):
        full = np.zeros_like(table.data)
        full[index] = g[0]
        table._accum(full)

    out._bw = bw
    return out


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """y = x @ w + b with exact gradients for x, w, b."""
    return x @ w + b


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """GELU in its tanh approximation, as a single fused op."""
    u = _GELU_C * (x.data + 0.044715 * x.data**3)
    t = np.tanh(u)
    y = 0.5 * x.data * (1.0 + t)
    out = Tensor(y, (x,))

    def bw(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x.data**2)
        dy = 0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t * t) * du
        x._accum(g * dy)

    out._bw = bw
    return out


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply a learned affine."""
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = (var + eps) ** -0.5
    return xc * inv * gain + bias


def attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """Single-head scaled dot-product attention: softmax(q k^T / sqrt(d)) v.

    q is (1, d); k and v are (L, d) with L >= 1.
    """
    if q.data.ndim != 2 or q.data.shape[0] != 1:
        raise ShapeMismatch(f"query must be (1, d), got {q.data.shape}")
    if k.data.ndim != 2 or v.data.ndim != 2:
        raise ShapeMismatch("keys and values must be 2-D")
    if k.data.shape != v.data.shape or k.data.shape[1] != q.data.shape[1]:
        raise ShapeMismatch(
            f"inconsistent attention shapes: q {q.data.shape}, k {k.data.shape}, v {v.data.shape}"
        )
    if k.data.shape[0] < 1:
        raise ShapeMismatch("attention needs at least one key/value row")
    d = q.data.shape[1]
    logits = (q @ k.transpose()) * (1.0 / math.sqrt(d))
    return logits.softmax() @ v


def zero_grads(params: list[Parameter]) -> None:
    for p in params:
        p.grad = None


def optimizer_step(
    params: list[Parameter],
    lr: float,
    weight_decay: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """Adaptive-moment update with decoupled weight decay, in place."""
    for p in params:
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        p.step += 1
        p.m = beta1 * p.m + (1.0 - beta1) * g
        p.v = beta2 * p.v + (1.0 - beta2) * g * g
        m_hat = p.m / (1.0 - beta1**p.step)
        v_hat = p.v / (1.0 - beta2**p.step)
        p.data = p.data - lr * (m_hat / (np.sqrt(v_hat) + eps) + weight_decay * p.data)


def sinusoidal_embedding(t: float, dim: int) -> np.ndarray:
    """Fixed (1, dim) sin/cos embedding with geometric frequency spacing."""
    half = dim // 2
    exponents = np.arange(half) / max(half - 1, 1)
    freqs = np.exp(-math.log(10000.0) * exponents)
    ang = t * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)])[None, :]


@dataclass
class GradCheckReport:
    """Worst-case relative disagreement between analytic and numeric grads."""

    max_rel_error: float
    worst_param: str
    worst_index: int
    per_param: dict[str, float] = field(default_factory=dict)

    def ok(self, tol: float) -> bool:
        return self.max_rel_error < tol


def gradient_check(
    loss_fn,
    params: list[Parameter],
    step: float = 1e-5,
    rel_floor: float = 1e-3,
) -> GradCheckReport:
    """Compare every parameter coordinate's analytic gradient to central
    finite differences of `loss_fn` (a zero-argument closure returning a
    scalar Tensor built from the current parameter values).

    The relative error denominator is floored at `rel_floor`, so near-zero
    gradient pairs are compared absolutely at that scale.
    """
    zero_grads(params)
    loss = loss_fn()
    loss.backward()
    analytic = {
        p.name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for p in params
    }
    worst = 0.0
    worst_param = ""
    worst_index = -1
    per_param: dict[str, float] = {}
    for p in params:
        flat = p.data.ravel()
        num = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = float(loss_fn().data)
            flat[i] = orig - step
            lo = float(loss_fn().data)
            flat[i] = orig
            num[i] = (hi - lo) / (2.0 * step)
        ana = analytic[p.name].ravel()
        denom = np.maximum(np.maximum(np.abs(ana), np.abs(num)), rel_floor)
        rel = np.abs(ana - num) / denom
        idx = int(np.argmax(rel))
        per_param[p.name] = float(rel[idx])
        if rel[idx] > worst:
            worst = float(rel[idx])
            worst_param = p.name
            worst_index = idx
    return GradCheckReport(worst, worst_param, worst_index, per_param)


def params_to_state(params: list[Parameter]) -> dict:
    """JSON-serializable snapshot of parameter values and optimizer state."""
    return {
        p.name: {
            "shape": list(p.data.shape),
            "data": p.data.ravel().tolist(),
            "m": p.m.ravel().tolist(),
            "v": p.v.ravel().tolist(),
            "step": p.step,
        }
        for p in params
    }


def params_from_state(state: dict) -> dict[str, Parameter]:
    """Rebuild named parameters (values + optimizer state) from a snapshot."""
    out: dict[str, Parameter] = {}
    for name, entry in state.items():
        shape = tuple(entry["shape"])
        p = Parameter(np.asarray(entry["data"], dtype=np.float64).reshape(shape), name)
        p.m = np.asarray(entry["m"], dtype=np.float64).reshape(shape)
        p.v = np.asarray(entry["v"], dtype=np.float64).reshape(shape)
        p.step = int(entry["step"])
        out[name] = p
    return out
