"""Matrix-valued reverse-mode differentiation on a per-forward tape.

Every node is a 2-D float64 array. The graph is rebuilt implicitly on each
forward pass through parent links; ``backward`` topologically sorts from the
scalar loss and accumulates gradients into :class:`Parameter` leaves. The op
set is deliberately small: dense/sparse products, broadcast add, entrywise
multiply, sigmoid, row gather/scale/sum, fixed-size group means, row
concatenation, and a total sum.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DimensionError, GradCheckError
from .instrument import MACS
from .sparse import SparseMatrix


def _as_value(x) -> np.ndarray:
    v = np.asarray(x, dtype=np.float64)
    if v.ndim == 0:
        v = v.reshape(1, 1)
    if v.ndim == 1:
        v = v.reshape(1, -1)
    if v.ndim != 2:
        raise DimensionError(f"tape values must be 2-D, got shape {v.shape}")
    return v


class Tensor:
    """A node on the tape: a value plus (parent, grad_fn) links."""

    __slots__ = ("value", "_parents")

    # keep numpy from absorbing Tensor operands; arithmetic falls back to
    # the reflected Tensor operators instead
    __array_ufunc__ = None

    def __init__(self, value, parents=()):
        self.value = _as_value(value)
        self._parents = tuple(parents)

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Tensor(shape={self.value.shape})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -np.asarray(other))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __matmul__(self, other):
        return matmul(self, other)


class Parameter(Tensor):
    """A learnable leaf with a persistent gradient buffer and a unique name."""

    __slots__ = ("grad", "name")

    def __init__(self, value, name: str):
        super().__init__(value)
        self.grad = np.zeros_like(self.value)
        self.name = name

    def zero_grad(self):
        self.grad[...] = 0.0

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.value.shape})"


def zero_grads(params) -> None:
    for p in params:
        p.zero_grad()


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    if grad.shape == shape:
        return grad
    out = grad
    for ax in (0, 1):
        if shape[ax] == 1 and out.shape[ax] != 1:
            out = out.sum(axis=ax, keepdims=True)
    return out


def _dense_product(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    MACS.dense_macs += a.shape[0] * a.shape[1] * b.shape[1]
    return a @ b


def add(a, b) -> Tensor:
    """Elementwise sum; operands may broadcast (e.g. a (1, d) bias row)."""
    av = a.value if isinstance(a, Tensor) else _as_value(a)
    bv = b.value if isinstance(b, Tensor) else _as_value(b)
    out = av + bv
    parents = []
    if isinstance(a, Tensor):
        parents.append((a, lambda g, s=av.shape: _unbroadcast(g, s)))
    if isinstance(b, Tensor):
        parents.append((b, lambda g, s=bv.shape: _unbroadcast(g, s)))
    return Tensor(out, parents)


def mul(a, b) -> Tensor:
    """Elementwise (Hadamard) product with broadcasting; scalars allowed."""
    av = a.value if isinstance(a, Tensor) else np.asarray(a, dtype=np.float64)
    bv = b.value if isinstance(b, Tensor) else np.asarray(b, dtype=np.float64)
    out = av * bv
    parents = []
    if isinstance(a, Tensor):
        parents.append((a, lambda g, o=bv, s=av.shape: _unbroadcast(g * o, s)))
    if isinstance(b, Tensor):
        parents.append((b, lambda g, o=av, s=bv.shape: _unbroadcast(g * o, s)))
    return Tensor(out, parents)


def matmul(a, b) -> Tensor:
    av = a.value if isinstance(a, Tensor) else _as_value(a)
    bv = b.value if isinstance(b, Tensor) else _as_value(b)
    if av.shape[1] != bv.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {av.shape} @ {bv.shape}")
    out = _dense_product(av, bv)
    parents = []
    if isinstance(a, Tensor):
        parents.append((a, lambda g, o=bv: _dense_product(g, o.T)))
    if isinstance(b, Tensor):
        parents.append((b, lambda g, o=av: _dense_product(o.T, g)))
    return Tensor(out, parents)


def spmm(s: SparseMatrix, d: Tensor) -> Tensor:
    """Sparse (constant) times dense (differentiable) product."""
    if not isinstance(d, Tensor):
        return Tensor(s.matmul_dense(_as_value(d)))
    out = s.matmul_dense(d.value)
    return Tensor(out, [(d, lambda g, st=s.transpose(): st.matmul_dense(g))])


# Nearest representable values inside (0, 1); sigmoid saturates to these so
# the open-interval range contract holds for every finite input.
_SIG_LO = np.nextafter(0.0, 1.0)
_SIG_HI = np.nextafter(1.0, 0.0)


def _sigmoid_values(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return np.clip(out, _SIG_LO, _SIG_HI)


def sigmoid(a) -> Tensor:
    av = a.value if isinstance(a, Tensor) else _as_value(a)
    out = _sigmoid_values(av)
    parents = []
    if isinstance(a, Tensor):
        parents.append((a, lambda g, y=out: g * (y * (1.0 - y))))
    return Tensor(out, parents)


def scale_rows(a: Tensor, factors) -> Tensor:
    """Multiply row r by the constant ``factors[r]``."""
    f = np.asarray(factors, dtype=np.float64).reshape(-1, 1)
    if f.shape[0] != a.value.shape[0]:
        raise DimensionError("scale_rows factor length must match row count")
    return Tensor(a.value * f, [(a, lambda g, ff=f: g * ff)])


def gather_rows(a: Tensor, idx) -> Tensor:
    """Select rows by index; duplicate indices accumulate in the backward pass."""
    idx = np.asarray(idx, dtype=np.int64)

    def grad_fn(g, shape=a.value.shape, ii=idx):
        buf = np.zeros(shape)
        np.add.at(buf, ii, g)
        return buf

    return Tensor(a.value[idx], [(a, grad_fn)])


def group_mean(a: Tensor, group_size: int) -> Tensor:
    """Mean over consecutive blocks of ``group_size`` rows."""
    n, d = a.value.shape
    if group_size < 1 or n % group_size:
        raise ContractError(f"group_mean: {n} rows not divisible by group size {group_size}")
    out = a.value.reshape(n // group_size, group_size, d).mean(axis=1)
    return Tensor(out, [(a, lambda g, k=group_size: np.repeat(g, k, axis=0) / k)])


def concat_rows(a: Tensor, b: Tensor) -> Tensor:
    if a.value.shape[1] != b.value.shape[1]:
        raise DimensionError("concat_rows requires equal column counts")
    na = a.value.shape[0]
    out = np.concatenate([a.value, b.value], axis=0)
    return Tensor(out, [(a, lambda g: g[:na]), (b, lambda g: g[na:])])


def rowwise_sum(a: Tensor) -> Tensor:
    """Sum each row to a single column: (n, d) -> (n, 1)."""
    return Tensor(a.value.sum(axis=1, keepdims=True),
                  [(a, lambda g, d=a.value.shape[1]: np.repeat(g, d, axis=1))])


def total_sum(a: Tensor) -> Tensor:
    return Tensor(np.array([[a.value.sum()]]),
                  [(a, lambda g, s=a.value.shape: np.full(s, g[0, 0]))])


def _topo_order(root: Tensor):
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, _ in node._parents:
            stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(param) into every reachable Parameter's ``.grad``.

    Reachable parameter gradients are zeroed at the start of the pass, so
    each call reflects exactly one tape. Unreachable parameters are left
    untouched; callers that reuse buffers across passes should clear them
    with :func:`zero_grads`.
    """
    if loss.value.size != 1:
        raise ContractError(f"backward requires a scalar loss, got shape {loss.value.shape}")
    order = _topo_order(loss)
    for node in order:
        if isinstance(node, Parameter):
            node.zero_grad()
    grads = {id(loss): np.ones_like(loss.value)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if isinstance(node, Parameter):
            node.grad += g
            continue
        for parent, grad_fn in node._parents:
            pg = grad_fn(g)
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------------------
# Affine layers


@dataclass
class Layer:
    """One affine map with an optional entrywise sigmoid."""

    weight: Parameter
    bias: Parameter
    activation: str = "none"  # none | sigmoid


def make_layer(in_dim, out_dim, rng, name, activation="none") -> Layer:
    limit = math.sqrt(6.0 / (in_dim + out_dim))
    w = rng.uniform(-limit, limit, size=(in_dim, out_dim))
    return Layer(
        weight=Parameter(w, f"{name}.weight"),
        bias=Parameter(np.zeros((1, out_dim)), f"{name}.bias"),
        activation=activation,
    )


def make_mlp(dims, rng, prefix, final_activation="none") -> list[Layer]:
    """Chain of affine layers; hidden layers use sigmoid, the last one
    ``final_activation``."""
    layers = []
    for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        act = final_activation if i == len(dims) - 2 else "sigmoid"
        layers.append(make_layer(a, b, rng, f"{prefix}.{i}", act))
    return layers


def mlp_forward(layers, x) -> Tensor:
    """Apply the layer chain to ``x`` (rows are samples)."""
    h = x if isinstance(x, Tensor) else Tensor(x)
    for layer in layers:
        if layer.activation not in ("none", "sigmoid"):
            raise ContractError(f"unknown activation {layer.activation!r}")
        h = add(matmul(h, layer.weight), layer.bias)
        if layer.activation == "sigmoid":
            h = sigmoid(h)
    return h


def mlp_parameters(layers) -> list[Parameter]:
    out = []
    for layer in layers:
        out.extend([layer.weight, layer.bias])
    return out


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    """Per-parameter first/second moment buffers plus the shared step count."""

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    slots: dict = field(default_factory=dict)


def adam_step(params, state: AdamState, lr: float, weight_decay: float = 0.0) -> None:
    """One Adam update with bias correction.

    Weight decay is coupled: lambda * value is added to the gradient before
    the moment updates, which makes it equivalent to an explicit
    (lambda / 2) * ||value||^2 penalty in the loss.
    """
    if lr <= 0:
        raise ContractError("learning rate must be positive")
    if weight_decay < 0:
        raise ContractError("weight decay must be non-negative")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for p in params:
        g = p.grad + weight_decay * p.value if weight_decay else p.grad
        if p.name not in state.slots:
            state.slots[p.name] = (np.zeros_like(p.value), np.zeros_like(p.value))
        m, v = state.slots[p.name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.value -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


# ---------------------------------------------------------------------------
# Finite-difference gradient verification


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_param: str
    worst_index: tuple
    coords_checked: int


def finite_diff_check(closure, params, h: float = 1e-5, seed: int = 0,
                      max_coords: int = 200_000) -> GradCheckReport:
    """Compare analytic gradients against central differences.

    ``closure`` must rebuild the tape from the current parameter values and
    return the scalar loss Tensor. All coordinates are checked unless the
    total exceeds ``max_coords``, in which case a seeded uniform sample of
    that size is used. The relative error denominator is
    max(|analytic|, |numeric|, 1e-8).
    """
    if h <= 0:
        raise ContractError("step size h must be positive")
    loss = closure()
    if not np.isfinite(loss.value).all():
        raise GradCheckError("loss non-finite at the initial evaluation")
    backward(loss)
    analytic = {p.name: p.grad.copy() for p in params}

    coords = []
    for p in params:
        for flat in range(p.value.size):
            coords.append((p, flat))
    if len(coords) > max_coords:
        rng = np.random.default_rng(seed)
        picked = rng.choice(len(coords), size=max_coords, replace=False)
        coords = [coords[i] for i in np.sort(picked)]

    worst = GradCheckReport(0.0, "", (0, 0), len(coords))
    for p, flat in coords:
        idx = np.unravel_index(flat, p.value.shape)
        orig = p.value[idx]
        vals = []
        for delta in (h, -h):
            p.value[idx] = orig + delta
            out = closure().value.item()
            if not math.isfinite(out):
                p.value[idx] = orig
                raise GradCheckError(
                    f"loss non-finite while perturbing parameter {p.name!r}"
                )
            vals.append(out)
        p.value[idx] = orig
        numeric = (vals[0] - vals[1]) / (2.0 * h)
        a = analytic[p.name].reshape(-1)[flat]
        rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        if rel > worst.max_rel_error:
            worst = GradCheckReport(rel, p.name, np.unravel_index(flat, p.value.shape),
                                    len(coords))
    return worst
