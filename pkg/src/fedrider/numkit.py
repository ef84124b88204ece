"""Dense float64 tensors with reverse-mode differentiation and plain SGD.

Every tensor op validates shapes loudly and rejects non-finite values at
node creation, so a NaN anywhere in a training loop aborts at the op that
produced it instead of poisoning downstream statistics. Broadcasting is
deliberately restricted: elementwise ops accept equal shapes, a size-1
scalar, or a row vector against the rows of a matrix (bias style), nothing
else.

Gradient conventions for kinks: relu'(0) == 0, d|x|/dx at the origin of
l2_norm == 0. `grad_check` flags finite-difference probes that straddle a
relu kink instead of reporting them as failures.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "NumkitError",
    "ShapeMismatchError",
    "NonFiniteError",
    "NonScalarLossError",
    "NotPositiveDefiniteError",
    "Tensor",
    "tensor",
    "param",
    "matmul",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "tanh",
    "relu",
    "exp",
    "log",
    "sqrt",
    "softmax",
    "reduce_sum",
    "reduce_mean",
    "l2_norm",
    "mse",
    "cross_entropy_softmax",
    "transpose",
    "reshape",
    "concat",
    "inverse",
    "logdet",
    "topo_order",
    "backward",
    "SgdConfig",
    "sgd_step",
    "AdamConfig",
    "AdamState",
    "adam_step",
    "GradCheckEntry",
    "GradCheckReport",
    "grad_check",
    "glorot_uniform",
    "Dense",
    "Mlp",
]


class NumkitError(Exception):
    """Base class for tensor-core failures."""


class ShapeMismatchError(NumkitError):
    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = shapes
        pretty = " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {pretty}")


class NonFiniteError(NumkitError):
    """NaN or Inf appeared in a tensor value or gradient."""


class NonScalarLossError(NumkitError):
    """backward() requires a scalar-shaped loss node."""


class NotPositiveDefiniteError(NumkitError):
    """Cholesky factorization failed on a matrix that must be PD."""


# Set by grad_check around finite-difference evaluations; relu appends its
# sign mask so probe pairs that flip any relu's active set can be skipped.
_KINK_TRACE: list[np.ndarray] | None = None


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values produced by op '{op}'")


class Tensor:
    """A float64 array plus the op record that produced it."""

    __slots__ = ("values", "op", "inputs", "requires_grad", "_vjps")

    def __init__(self, values, requires_grad: bool = False, *, op: str = "leaf",
                 inputs: tuple = (), vjps: tuple = ()):
        arr = np.asarray(values, dtype=np.float64)
        _check_finite(arr, op)
        self.values = arr
        self.op = op
        self.inputs = inputs
        self.requires_grad = requires_grad
        self._vjps = vjps

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    @property
    def ndim(self) -> int:
        return self.values.ndim

    def item(self) -> float:
        return float(self.values.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(op={self.op!r}, shape={self.shape}, grad={self.requires_grad})"

    # operator sugar; all real work happens in the module-level ops
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return neg(self)


def tensor(values) -> Tensor:
    """Constant leaf."""
    return Tensor(values, requires_grad=False)


def param(values) -> Tensor:
    """Trainable leaf."""
    return Tensor(values, requires_grad=True)


def _ensure(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(op: str, values: np.ndarray, inputs: tuple[Tensor, ...],
          vjps: tuple[Callable[[np.ndarray], np.ndarray], ...]) -> Tensor:
    rg = any(t.requires_grad for t in inputs)
    return Tensor(values, requires_grad=rg, op=op, inputs=inputs, vjps=vjps)


def _broadcast_ok(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape == b.shape:
        return
    if a.size == 1 or b.size == 1:
        return
    # row vector against matrix rows, either side
    for mat, vec in ((a, b), (b, a)):
        if mat.ndim == 2 and vec.ndim in (1, 2):
            cols = vec.shape[-1]
            rows_ok = vec.ndim == 1 or vec.shape[0] == 1
            if rows_ok and cols == mat.shape[1]:
                return
    raise ShapeMismatchError(op, a.shape, b.shape)


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


def _binary(op: str, a, b, fwd, vja, vjb) -> Tensor:
    a = _ensure(a)
    b = _ensure(b)
    _broadcast_ok(op, a, b)
    # overflow/div-by-zero surface as NonFiniteError, not numpy warnings
    with np.errstate(all="ignore"):
        out = fwd(a.values, b.values)
    return _node(
        op, out, (a, b),
        (lambda g: _reduce_to(vja(g, a.values, b.values), a.shape),
         lambda g: _reduce_to(vjb(g, a.values, b.values), b.shape)),
    )


def add(a, b) -> Tensor:
    return _binary("add", a, b, np.add,
                   lambda g, av, bv: g,
                   lambda g, av, bv: g)


def sub(a, b) -> Tensor:
    return _binary("sub", a, b, np.subtract,
                   lambda g, av, bv: g,
                   lambda g, av, bv: -g)


def mul(a, b) -> Tensor:
    return _binary("mul", a, b, np.multiply,
                   lambda g, av, bv: g * bv,
                   lambda g, av, bv: g * av)


def div(a, b) -> Tensor:
    return _binary("div", a, b, np.divide,
                   lambda g, av, bv: g / bv,
                   lambda g, av, bv: -g * av / (bv * bv))


def neg(a) -> Tensor:
    a = _ensure(a)
    return _node("neg", -a.values, (a,), (lambda g: -g,))


def matmul(a, b) -> Tensor:
    a = _ensure(a)
    b = _ensure(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatchError("matmul", a.shape, b.shape)
    out = a.values @ b.values
    return _node("matmul", out, (a, b),
                 (lambda g: g @ b.values.T,
                  lambda g: a.values.T @ g))


def tanh(a) -> Tensor:
    a = _ensure(a)
    y = np.tanh(a.values)
    return _node("tanh", y, (a,), (lambda g: g * (1.0 - y * y),))


def relu(a) -> Tensor:
    a = _ensure(a)
    mask = a.values > 0.0
    if _KINK_TRACE is not None:
        _KINK_TRACE.append(mask)
    return _node("relu", np.where(mask, a.values, 0.0), (a,),
                 (lambda g: g * mask,))


def exp(a) -> Tensor:
    a = _ensure(a)
    with np.errstate(all="ignore"):
        y = np.exp(a.values)
    return _node("exp", y, (a,), (lambda g: g * y,))


def log(a) -> Tensor:
    a = _ensure(a)
    with np.errstate(all="ignore"):
        y = np.log(a.values)
    return _node("log", y, (a,), (lambda g: g / a.values,))


def sqrt(a) -> Tensor:
    a = _ensure(a)
    with np.errstate(all="ignore"):
        y = np.sqrt(a.values)
    return _node("sqrt", y, (a,), (lambda g: g / (2.0 * y),))


def softmax(a) -> Tensor:
    """Row-wise softmax; a 1-D input is treated as a single row."""
    a = _ensure(a)
    if a.ndim not in (1, 2):
        raise ShapeMismatchError("softmax", a.shape)
    x = a.values if a.ndim == 2 else a.values[None, :]
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y2 = e / e.sum(axis=1, keepdims=True)
    y = y2 if a.ndim == 2 else y2[0]

    def vjp(g):
        g2 = g if g.ndim == 2 else g[None, :]
        inner = (g2 * y2).sum(axis=1, keepdims=True)
        out = (g2 - inner) * y2
        return out if a.ndim == 2 else out[0]

    return _node("softmax", y, (a,), (vjp,))


def _axis_ok(op: str, a: Tensor, axis) -> None:
    if axis is None:
        return
    if a.ndim != 2 or axis not in (0, 1):
        raise ShapeMismatchError(op, a.shape)


def reduce_sum(a, axis: int | None = None) -> Tensor:
    a = _ensure(a)
    _axis_ok("sum", a, axis)
    y = a.values.sum(axis=axis)

    def vjp(g):
        if axis is None:
            return np.broadcast_to(g, a.shape).copy()
        return np.broadcast_to(np.expand_dims(g, axis), a.shape).copy()

    return _node("sum", y, (a,), (vjp,))


def reduce_mean(a, axis: int | None = None) -> Tensor:
    a = _ensure(a)
    _axis_ok("mean", a, axis)
    y = a.values.mean(axis=axis)
    n = a.size if axis is None else a.shape[axis]

    def vjp(g):
        if axis is None:
            return np.broadcast_to(g / n, a.shape).copy()
        return np.broadcast_to(np.expand_dims(g / n, axis), a.shape).copy()

    return _node("mean", y, (a,), (vjp,))


def l2_norm(a) -> Tensor:
    a = _ensure(a)
    y = float(np.sqrt(np.sum(a.values * a.values)))

    def vjp(g):
        if y == 0.0:
            return np.zeros_like(a.values)
        return g * a.values / y

    return _node("l2_norm", np.float64(y), (a,), (vjp,))


def mse(pred, target) -> Tensor:
    pred = _ensure(pred)
    target = _ensure(target)
    if pred.shape != target.shape:
        raise ShapeMismatchError("mse", pred.shape, target.shape)
    d = pred.values - target.values
    y = np.float64(np.mean(d * d)) if pred.size else np.float64(0.0)
    scale = 2.0 / max(pred.size, 1)
    return _node("mse", y, (pred, target),
                 (lambda g: g * scale * d,
                  lambda g: -g * scale * d))


def cross_entropy_softmax(logits, labels) -> Tensor:
    """Mean negative log-likelihood of integer labels under row softmax."""
    logits = _ensure(logits)
    labels = np.asarray(labels)
    if labels.dtype.kind not in "iu":
        raise NumkitError("cross_entropy_softmax: labels must be integers")
    if logits.ndim != 2 or labels.ndim != 1 or labels.shape[0] != logits.shape[0]:
        raise ShapeMismatchError("cross_entropy_softmax", logits.shape, labels.shape)
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise NumkitError("cross_entropy_softmax: label out of range")
    n = logits.shape[0]
    x = logits.values
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    probs = e / e.sum(axis=1, keepdims=True)
    nll = -np.log(probs[np.arange(n), labels])
    y = np.float64(nll.mean())

    def vjp(g):
        grad = probs.copy()
        grad[np.arange(n), labels] -= 1.0
        return g * grad / n

    return _node("cross_entropy_softmax", y, (logits,), (vjp,))


def transpose(a) -> Tensor:
    a = _ensure(a)
    if a.ndim != 2:
        raise ShapeMismatchError("transpose", a.shape)
    return _node("transpose", a.values.T.copy(), (a,), (lambda g: g.T,))


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = _ensure(a)
    shape = tuple(shape)
    if int(np.prod(shape, dtype=np.int64)) != a.size:
        raise ShapeMismatchError("reshape", a.shape, shape)
    return _node("reshape", a.values.reshape(shape), (a,),
                 (lambda g: g.reshape(a.shape),))


def concat(parts: Iterable, axis: int = 0) -> Tensor:
    parts = [_ensure(p) for p in parts]
    if not parts:
        raise NumkitError("concat: empty input list")
    if axis not in (0, 1) or any(p.ndim != 2 for p in parts):
        raise ShapeMismatchError("concat", *[p.shape for p in parts])
    other = 1 - axis
    if len({p.shape[other] for p in parts}) != 1:
        raise ShapeMismatchError("concat", *[p.shape for p in parts])
    out = np.concatenate([p.values for p in parts], axis=axis)
    offsets = np.cumsum([0] + [p.shape[axis] for p in parts])

    def make_vjp(i):
        lo, hi = offsets[i], offsets[i + 1]
        if axis == 0:
            return lambda g: g[lo:hi, :]
        return lambda g: g[:, lo:hi]

    return _node("concat", out, tuple(parts),
                 tuple(make_vjp(i) for i in range(len(parts))))


def inverse(a) -> Tensor:
    a = _ensure(a)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeMismatchError("inverse", a.shape)
    try:
        y = np.linalg.inv(a.values)
    except np.linalg.LinAlgError as err:
        raise NumkitError(f"inverse: singular matrix ({err})") from err
    return _node("inverse", y, (a,), (lambda g: -y.T @ g @ y.T,))


def logdet(a) -> Tensor:
    """log(det(A)) for symmetric positive definite A, via Cholesky."""
    a = _ensure(a)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeMismatchError("logdet", a.shape)
    try:
        chol = np.linalg.cholesky(a.values)
    except np.linalg.LinAlgError as err:
        raise NotPositiveDefiniteError(f"logdet: matrix not positive definite ({err})") from err
    y = np.float64(2.0 * np.sum(np.log(np.diag(chol))))
    inv = np.linalg.inv(a.values)
    return _node("logdet", y, (a,), (lambda g: g * inv.T,))


def topo_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from `root`, every input before its consumer."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for inp in node.inputs:
            if id(inp) not in seen:
                stack.append((inp, False))
    return order


def backward(loss: Tensor, params: Sequence[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
    """Reverse-mode gradients of a scalar loss.

    Returns a dict mapping each trainable leaf reachable from `loss` (or each
    tensor in `params` if given) to its gradient array, shaped like the leaf.
    """
    if loss.size != 1:
        raise NonScalarLossError(f"loss must be scalar-shaped, got {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.values)}
    order = topo_order(loss)
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None or not node.requires_grad:
            continue
        if not node.inputs:
            grads[id(node)] = g  # keep leaf gradient
            continue
        for inp, vjp in zip(node.inputs, node._vjps):
            if not inp.requires_grad:
                continue
            contrib = np.asarray(vjp(g), dtype=np.float64)
            _check_finite(contrib, f"backward:{node.op}")
            if id(inp) in grads:
                grads[id(inp)] = grads[id(inp)] + contrib
            else:
                grads[id(inp)] = contrib
    if params is None:
        leaves = [n for n in order if n.requires_grad and not n.inputs]
    else:
        leaves = list(params)
    out: dict[Tensor, np.ndarray] = {}
    for leaf in leaves:
        g = grads.get(id(leaf))
        out[leaf] = np.zeros_like(leaf.values) if g is None else g.reshape(leaf.shape)
    return out


@dataclass(frozen=True)
class SgdConfig:
    """Plain SGD hyperparameters for one local training run."""

    learning_rate: float
    batch_size: int = 32
    epochs: int = 1

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")


def sgd_step(params: Sequence[Tensor], grads: Sequence[np.ndarray],
             cfg: SgdConfig | float) -> None:
    """In-place p <- p - lr * g for each (param, grad) pair."""
    lr = cfg.learning_rate if isinstance(cfg, SgdConfig) else float(cfg)
    if len(params) != len(grads):
        raise ShapeMismatchError("sgd_step", (len(params),), (len(grads),))
    for p, g in zip(params, grads):
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.shape:
            raise ShapeMismatchError("sgd_step", p.shape, g.shape)
        updated = p.values - lr * g
        _check_finite(updated, "sgd_step")
        p.values = updated


@dataclass(frozen=True)
class AdamConfig:
    """Adam hyperparameters (Kingma & Ba defaults except the step size)."""

    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if not 0 <= self.beta1 < 1 or not 0 <= self.beta2 < 1:
            raise ValueError("betas must lie in [0, 1)")
        if self.eps <= 0:
            raise ValueError("eps must be > 0")


class AdamState:
    """Per-parameter first/second moment buffers plus the step counter."""

    def __init__(self, params: Sequence[Tensor], cfg: AdamConfig | None = None):
        self.cfg = cfg if cfg is not None else AdamConfig()
        self.m = [np.zeros(p.shape) for p in params]
        self.v = [np.zeros(p.shape) for p in params]
        self.t = 0


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray],
              state: AdamState) -> None:
    """One in-place Adam update with bias-corrected moments."""
    cfg = state.cfg
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeMismatchError("adam_step", (len(params),), (len(grads),))
    state.t += 1
    b1t = 1.0 - cfg.beta1 ** state.t
    b2t = 1.0 - cfg.beta2 ** state.t
    for i, (p, g) in enumerate(zip(params, grads)):
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.shape:
            raise ShapeMismatchError("adam_step", p.shape, g.shape)
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g
        mhat = state.m[i] / b1t
        vhat = state.v[i] / b2t
        updated = p.values - cfg.learning_rate * mhat / (np.sqrt(vhat) + cfg.eps)
        _check_finite(updated, "adam_step")
        p.values = updated


@dataclass
class GradCheckEntry:
    param_index: int
    component: int
    analytic: float
    numeric: float
    rel_err: float
    skipped: bool = False
    note: str = ""


@dataclass
class GradCheckReport:
    entries: list[GradCheckEntry] = field(default_factory=list)
    tol: float = 1e-4

    @property
    def max_rel_err(self) -> float:
        errs = [e.rel_err for e in self.entries if not e.skipped]
        return max(errs) if errs else 0.0

    @property
    def skipped(self) -> list[GradCheckEntry]:
        return [e for e in self.entries if e.skipped]

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tol

    def summary(self) -> str:
        return (f"grad_check: {len(self.entries)} components, "
                f"max rel err {self.max_rel_err:.3e}, "
                f"{len(self.skipped)} skipped, "
                f"{'PASS' if self.passed else 'FAIL'} at tol {self.tol:g}")


def grad_check(build_loss: Callable[[], Tensor], params: Sequence[Tensor],
               h: float = 1e-5, tol: float = 1e-4) -> GradCheckReport:
    """Compare backward() against central finite differences.

    `build_loss` must rebuild the scalar loss from the live `params` tensors
    on every call (their values are perturbed in place). Probes that move a
    relu input across or near its kink (|input| < h) are flagged as skipped
    rather than failed.
    """
    global _KINK_TRACE
    if not 0.0 < h <= 1e-2:
        raise ValueError("h must lie in (0, 1e-2]")
    report = GradCheckReport(tol=tol)
    loss = build_loss()
    grads = backward(loss, params=params)
    for pi, p in enumerate(params):
        analytic = grads[p].reshape(-1)
        flat = p.values.reshape(-1)
        for ci in range(flat.size):
            orig = flat[ci]
            trace_plus: list[np.ndarray] = []
            trace_minus: list[np.ndarray] = []
            try:
                flat[ci] = orig + h
                _KINK_TRACE = trace_plus
                f_plus = build_loss().item()
                flat[ci] = orig - h
                _KINK_TRACE = trace_minus
                f_minus = build_loss().item()
            finally:
                flat[ci] = orig
                _KINK_TRACE = None
            straddles_kink = len(trace_plus) != len(trace_minus) or any(
                mp.shape != mm.shape or not np.array_equal(mp, mm)
                for mp, mm in zip(trace_plus, trace_minus))
            numeric = (f_plus - f_minus) / (2.0 * h)
            a = float(analytic[ci])
            denom = max(abs(a), abs(numeric), 1e-6)
            rel = abs(a - numeric) / denom
            entry = GradCheckEntry(pi, ci, a, numeric, rel)
            if straddles_kink:
                entry.skipped = True
                entry.note = "non-differentiable point skipped"
            report.entries.append(entry)
    return report


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int,
                   shape: tuple[int, ...] | None = None) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape or (fan_in, fan_out))


_ACTIVATIONS: dict[str, Callable[[Tensor], Tensor]] = {
    "tanh": tanh,
    "relu": relu,
    "linear": lambda t: t,
}


class Dense:
    """Fully connected layer: activation(x @ W + b)."""

    def __init__(self, rng: np.random.Generator, in_dim: int, out_dim: int,
                 activation: str = "linear"):
        if activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.W = param(glorot_uniform(rng, in_dim, out_dim))
        self.b = param(np.zeros(out_dim))
        self.activation = activation

    def __call__(self, x: Tensor) -> Tensor:
        return _ACTIVATIONS[self.activation](add(matmul(x, self.W), self.b))

    @property
    def params(self) -> list[Tensor]:
        return [self.W, self.b]


class Mlp:
    """Stack of Dense layers; parameter order is W0, b0, W1, b1, ...

    That order is the canonical flattening order used everywhere a model or
    update travels as a single vector.
    """

    def __init__(self, rng: np.random.Generator, sizes: Sequence[int],
                 hidden_activation: str = "tanh", final_activation: str = "linear"):
        if len(sizes) < 2:
            raise ValueError("Mlp needs at least input and output sizes")
        self.sizes = tuple(int(s) for s in sizes)
        self.layers = []
        for i in range(len(sizes) - 1):
            act = final_activation if i == len(sizes) - 2 else hidden_activation
            self.layers.append(Dense(rng, sizes[i], sizes[i + 1], activation=act))

    def __call__(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = layer(x)
        return x

    @property
    def params(self) -> list[Tensor]:
        out: list[Tensor] = []
        for layer in self.layers:
            out.extend(layer.params)
        return out

    @property
    def param_shapes(self) -> tuple[tuple[int, ...], ...]:
        return tuple(p.shape for p in self.params)

    def get_flat(self) -> np.ndarray:
        return np.concatenate([p.values.reshape(-1) for p in self.params])

    def set_flat(self, flat: np.ndarray) -> None:
        flat = np.asarray(flat, dtype=np.float64)
        offset = 0
        for p in self.params:
            n = p.size
            if offset + n > flat.size:
                raise ShapeMismatchError("set_flat", (flat.size,), self.param_shapes)
            p.values = flat[offset:offset + n].reshape(p.shape).copy()
            offset += n
        if offset != flat.size:
            raise ShapeMismatchError("set_flat", (flat.size,), self.param_shapes)
