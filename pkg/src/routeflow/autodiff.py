"""Minimal reverse-mode autodiff over dense numpy float64 arrays.

Single-threaded graphs; tensors that do not require grad are folded into
constants so value-only code paths build no graph.  backward() accumulates
into .grad, so repeated calls without zero_grads() sum their gradients.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ParameterError, RouteflowError


class AutodiffError(RouteflowError, RuntimeError):
    pass


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "_parents", "_vjps", "name")

    def __init__(self, value, requires_grad=False, parents=(), vjps=(), name=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = parents
        self._vjps = vjps
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def item(self) -> float:
        return float(self.value)

    def __repr__(self):
        tag = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.value.shape}, rg={self.requires_grad}{tag})"

    # -- graph traversal ----------------------------------------------------

    def backward(self) -> None:
        """Reverse-mode pass from a scalar root; accumulates into .grad."""
        if self.value.size != 1:
            raise ParameterError("backward() requires a scalar root")
        order = _toposort(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.value)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.grad is None:
                node.grad = g.copy()
            else:
                node.grad = node.grad + g
            for parent, vjp in zip(node._parents, node._vjps):
                if not parent.requires_grad:
                    continue
                pg = vjp(g)
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg

    # -- operators ------------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return take(self, key)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])


def _toposort(root: Tensor) -> list[Tensor]:
    """Iterative DFS postorder; raises on a cycle (impossible by construction)."""
    order: list[Tensor] = []
    state: dict[int, int] = {}  # 0 visiting, 1 done
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            state[id(node)] = 1
            order.append(node)
            continue
        st = state.get(id(node))
        if st == 1:
            continue
        if st == 0:
            raise AutodiffError("cycle detected in computation graph")
        state[id(node)] = 0
        stack.append((node, True))
        for parent in node._parents:
            if state.get(id(parent)) != 1:
                stack.append((parent, False))
    return order


def constant(value) -> Tensor:
    return Tensor(value)


def parameter(value, name=None) -> Tensor:
    return Tensor(value, requires_grad=True, name=name)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce grad back to `shape` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _node(value, parents, vjps, name=None) -> Tensor:
    keep_p, keep_v = [], []
    for p, v in zip(parents, vjps):
        if p.requires_grad:
            keep_p.append(p)
            keep_v.append(v)
    if not keep_p:
        return Tensor(value)
    return Tensor(value, requires_grad=True, parents=tuple(keep_p), vjps=tuple(keep_v), name=name)


# -- arithmetic ---------------------------------------------------------------

def add(a, b):
    a, b = _lift(a), _lift(b)
    return _node(
        a.value + b.value,
        (a, b),
        (lambda g: _unbroadcast(g, a.value.shape), lambda g: _unbroadcast(g, b.value.shape)),
    )


def sub(a, b):
    a, b = _lift(a), _lift(b)
    return _node(
        a.value - b.value,
        (a, b),
        (lambda g: _unbroadcast(g, a.value.shape), lambda g: _unbroadcast(-g, b.value.shape)),
    )


def mul(a, b):
    a, b = _lift(a), _lift(b)
    return _node(
        a.value * b.value,
        (a, b),
        (
            lambda g: _unbroadcast(g * b.value, a.value.shape),
            lambda g: _unbroadcast(g * a.value, b.value.shape),
        ),
    )


def div(a, b):
    a, b = _lift(a), _lift(b)
    return _node(
        a.value / b.value,
        (a, b),
        (
            lambda g: _unbroadcast(g / b.value, a.value.shape),
            lambda g: _unbroadcast(-g * a.value / (b.value * b.value), b.value.shape),
        ),
    )


def power(a, p: float):
    a = _lift(a)
    p = float(p)
    val = a.value ** p
    return _node(val, (a,), (lambda g: g * p * a.value ** (p - 1.0),))


def exp(a):
    a = _lift(a)
    val = np.exp(a.value)
    return _node(val, (a,), (lambda g: g * val,))


def log(a):
    a = _lift(a)
    return _node(np.log(a.value), (a,), (lambda g: g / a.value,))


def sqrt(a):
    a = _lift(a)
    val = np.sqrt(a.value)
    return _node(val, (a,), (lambda g: g * 0.5 / val,))


def sigmoid(a):
    a = _lift(a)
    val = 1.0 / (1.0 + np.exp(-a.value))
    return _node(val, (a,), (lambda g: g * val * (1.0 - val),))


def silu(a):
    a = _lift(a)
    s = 1.0 / (1.0 + np.exp(-a.value))
    val = a.value * s
    return _node(val, (a,), (lambda g: g * (s + val * (1.0 - s)),))


def relu(a):
    a = _lift(a)
    mask = a.value > 0
    return _node(np.where(mask, a.value, 0.0), (a,), (lambda g: g * mask,))


def matmul(a, b):
    a, b = _lift(a), _lift(b)
    if a.value.ndim != 2 or b.value.ndim != 2:
        raise ParameterError("matmul expects 2-D tensors")
    return _node(
        a.value @ b.value,
        (a, b),
        (lambda g: g @ b.value.T, lambda g: a.value.T @ g),
    )


def tsum(a, axis=None, keepdims=False):
    a = _lift(a)
    val = a.value.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return np.broadcast_to(g, a.value.shape).copy()
        gg = g
        if not keepdims:
            gg = np.expand_dims(g, axis)
        return np.broadcast_to(gg, a.value.shape).copy()

    return _node(val, (a,), (vjp,))


def tmean(a, axis=None, keepdims=False):
    a = _lift(a)
    if axis is None:
        count = a.value.size
    else:
        count = a.value.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def index_select(a, idx):
    """Rows of a 1-D or 2-D tensor at integer indices (with repetition)."""
    a = _lift(a)
    idx = np.asarray(idx, dtype=np.int64)

    def vjp(g):
        out = np.zeros_like(a.value)
        np.add.at(out, idx, g)
        return out

    return _node(a.value[idx], (a,), (vjp,))


def take(a, key):
    """Basic indexing (int / slice / tuple of them)."""
    a = _lift(a)
    val = a.value[key]

    def vjp(g):
        out = np.zeros_like(a.value)
        out[key] = g
        return out

    return _node(np.asarray(val, dtype=np.float64), (a,), (vjp,))


def cumsum(a):
    a = _lift(a)
    if a.value.ndim != 1:
        raise ParameterError("cumsum expects a 1-D tensor")
    return _node(
        np.cumsum(a.value),
        (a,),
        (lambda g: np.cumsum(g[::-1])[::-1],),
    )


def stack(tensors):
    """Stack 0-D tensors into a 1-D tensor."""
    ts = [_lift(t) for t in tensors]
    val = np.array([t.value for t in ts], dtype=np.float64)
    parents = tuple(ts)
    vjps = tuple((lambda g, i=i: np.asarray(g[i])) for i in range(len(ts)))
    return _node(val, parents, vjps)


def concat(tensors):
    """Concatenate 1-D tensors."""
    ts = [_lift(t) for t in tensors]
    sizes = [t.value.size for t in ts]
    offsets = np.cumsum([0] + sizes)
    val = np.concatenate([t.value.reshape(-1) for t in ts])
    vjps = tuple(
        (lambda g, s=offsets[i], e=offsets[i + 1], t=ts[i]: g[s:e].reshape(t.value.shape))
        for i in range(len(ts))
    )
    return _node(val, tuple(ts), vjps)


def reshape(a, shape):
    a = _lift(a)
    return _node(a.value.reshape(shape), (a,), (lambda g: g.reshape(a.value.shape),))


def logsumexp(a):
    """log sum exp of a 1-D tensor, max-shifted for stability (exact identity)."""
    a = _lift(a)
    shift = float(a.value.max())
    return add(log(tsum(exp(add(a, -shift)))), shift)


# -- parameter utilities ------------------------------------------------------

def zero_grads(params: dict[str, Tensor]) -> None:
    for t in params.values():
        t.grad = None


def backprop(loss: Tensor, params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    """Run reverse mode from `loss` and return the gradient table for `params`.

    Gradients accumulate across calls until zero_grads().
    """
    loss.backward()
    return {
        name: (t.grad if t.grad is not None else np.zeros_like(t.value))
        for name, t in params.items()
    }


def global_grad_norm(params: dict[str, Tensor]) -> float:
    total = 0.0
    for t in params.values():
        if t.grad is not None:
            total += float((t.grad * t.grad).sum())
    return float(np.sqrt(total))


def clip_grads_(params: dict[str, Tensor], max_norm: float) -> float:
    """Scale all gradients so the global norm is at most max_norm; returns the pre-clip norm."""
    norm = global_grad_norm(params)
    if norm > max_norm > 0:
        scale = max_norm / norm
        for t in params.values():
            if t.grad is not None:
                t.grad = t.grad * scale
    return norm


# -- finite differences --------------------------------------------------------

@dataclass
class FiniteDiffReport:
    max_rel_err: float
    worst_coord: tuple[str, int] | None
    n_checked: int
    excluded: list[tuple[str, int]] = field(default_factory=list)


def finite_diff_check(
    loss_fn,
    params: dict[str, Tensor],
    epsilon: float = 1e-4,
    num_coords: int = 200,
    rng: np.random.Generator | None = None,
) -> FiniteDiffReport:
    """Central-difference check of analytic gradients on a coordinate subsample.

    Relative error uses max(|analytic|, |numeric|, 1e-8) as denominator.
    Coordinates where the loss is locally non-smooth (a ReLU-style kink inside
    the +/- epsilon bracket, detected by a large second difference) are
    excluded and reported instead of checked; at most half the sample may be
    excluded.  Coordinates where both derivatives sit below the rounding floor
    of the difference quotient (roughly machine_eps * |loss| / epsilon) carry
    no signal and count as agreement.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    zero_grads(params)
    loss = loss_fn()
    f0 = float(loss.value)
    loss.backward()
    analytic = {
        name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.value))
        for name, t in params.items()
    }
    zero_grads(params)

    coords = [(name, i) for name, t in params.items() for i in range(t.value.size)]
    if len(coords) > num_coords:
        chosen = rng.choice(len(coords), size=num_coords, replace=False)
        coords = [coords[int(i)] for i in chosen]

    worst = 0.0
    worst_coord = None
    excluded: list[tuple[str, int]] = []
    checked = 0
    for name, i in coords:
        flat = params[name].value.reshape(-1)
        orig = flat[i]
        flat[i] = orig + epsilon
        f_plus = float(loss_fn().value)
        flat[i] = orig - epsilon
        f_minus = float(loss_fn().value)
        flat[i] = orig

        scale = max(1.0, abs(f0), abs(f_plus), abs(f_minus))
        if abs(f_plus + f_minus - 2.0 * f0) > 10.0 * scale * epsilon ** 1.5:
            excluded.append((name, i))
            continue
        numeric = (f_plus - f_minus) / (2.0 * epsilon)
        ana = float(analytic[name].reshape(-1)[i])
        checked += 1
        noise_floor = 64.0 * np.finfo(np.float64).eps * scale / (2.0 * epsilon)
        if max(abs(ana), abs(numeric)) < noise_floor:
            continue
        rel = abs(ana - numeric) / max(abs(ana), abs(numeric), 1e-8)
        if rel > worst:
            worst, worst_coord = rel, (name, i)

    if checked < max(1, len(coords) // 2):
        raise ParameterError(
            f"finite_diff_check excluded too many coordinates ({len(excluded)}/{len(coords)})"
        )
    return FiniteDiffReport(worst, worst_coord, checked, excluded)
