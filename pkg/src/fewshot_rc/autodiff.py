"""Reverse-mode automatic differentiation over dense float64 tensors.

Define-by-run: each training step builds a fresh :class:`Tape`, runs the
forward ops, and calls :func:`backward` on the scalar loss.  The tape is an
append-only list of nodes (op kind, parent node ids, a vjp closure holding
whatever the backward rule needs), so node order is already topological.

Design rules, fixed and documented here once:

* float64 everywhere; any op producing NaN/Inf raises ``NonFiniteError``.
* no implicit broadcasting (``scale`` by a python float is the only
  exception) -- mismatched shapes raise ``ShapeError``.
* relu's derivative at exactly 0 is 0.
* min/max reductions route the gradient to the lowest winning index on ties.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "AutodiffError",
    "ShapeError",
    "NonFiniteError",
    "Tensor",
    "Tape",
    "backward",
    "matmul",
    "conv1d",
    "max_over_time",
    "embedding_lookup",
    "relu",
    "tanh",
    "add",
    "mul",
    "scale",
    "mean_axis",
    "sum_axis",
    "min_axis",
    "softmax_cross_entropy",
    "log_softmax",
    "grad_reverse",
    "reshape",
    "index_axis",
    "rows",
    "stack",
    "concat",
    "finite_diff_check",
    "GradCheckReport",
]


class AutodiffError(Exception):
    """Base error for the tensor layer."""


class ShapeError(AutodiffError):
    """Operand shapes violate an op's contract."""


class NonFiniteError(AutodiffError):
    """An op produced (or was handed) NaN or Inf."""


def _as_f64(data) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64)
    return arr


class Tensor:
    """Dense float64 array, optionally tracked on a tape.

    ``node`` is the tape-node id and is present iff the tensor participates
    in gradient tracking.  Constants (no tape) flow through ops freely and
    receive no gradient.
    """

    __slots__ = ("data", "tape", "node")

    def __init__(self, data, tape: "Tape | None" = None, node: int | None = None):
        self.data = _as_f64(data)
        if not np.all(np.isfinite(self.data)):
            raise NonFiniteError("tensor created with non-finite values")
        self.tape = tape
        self.node = node

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def tracked(self) -> bool:
        return self.node is not None

    def attach(self, tape: "Tape") -> "Tensor":
        """Register this tensor as a leaf (parameter) on ``tape``."""
        self.tape = tape
        self.node = tape.add_node("leaf", (), None)
        return self

    def detach(self) -> "Tensor":
        self.tape = None
        self.node = None
        return self

    def copy_data(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        tag = f", node={self.node}" if self.tracked else ""
        return f"Tensor(shape={self.shape}{tag})"


@dataclass
class Node:
    """One tape entry: op kind, parent node ids, and the backward closure.

    ``choice`` records discrete decisions (arg-min/max indices, relu
    activation pattern) so the finite-difference checker can detect
    non-smooth points.
    """

    op: str
    parents: tuple[int, ...]
    vjp: Callable[[np.ndarray], tuple[np.ndarray, ...]] | None
    choice: bytes | None = None


class Tape:
    """Append-only record of one forward pass; owns the gradient buffers."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.grads: list[np.ndarray | None] = []

    def add_node(self, op, parents, vjp, choice=None) -> int:
        self.nodes.append(Node(op, tuple(parents), vjp, choice))
        self.grads.append(None)
        return len(self.nodes) - 1

    def reset(self) -> None:
        """Clear gradient buffers so backward can run again."""
        self.grads = [None] * len(self.nodes)

    def grad(self, tensor: Tensor) -> np.ndarray | None:
        if tensor.tape is not self or tensor.node is None:
            raise AutodiffError("tensor is not tracked on this tape")
        return self.grads[tensor.node]

    def choice_signature(self) -> tuple[tuple[str, bytes], ...]:
        """Discrete-decision fingerprint of the recorded forward pass."""
        return tuple((n.op, n.choice) for n in self.nodes if n.choice is not None)

    def backward(self, loss: Tensor) -> None:
        if loss.tape is not self or loss.node is None:
            raise AutodiffError("loss is not tracked on this tape")
        if loss.data.shape != ():
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.data.shape}")
        if any(g is not None for g in self.grads):
            raise AutodiffError("gradients already populated; call reset() first")
        self.grads[loss.node] = np.ones((), dtype=np.float64)
        for nid in range(loss.node, -1, -1):
            g = self.grads[nid]
            if g is None:
                continue
            node = self.nodes[nid]
            if node.vjp is None:
                continue
            for pid, contrib in zip(node.parents, node.vjp(g)):
                if self.grads[pid] is None:
                    self.grads[pid] = contrib.astype(np.float64, copy=True)
                else:
                    self.grads[pid] = self.grads[pid] + contrib


def backward(loss: Tensor) -> None:
    """Reverse sweep from a scalar loss; populates gradients on its tape."""
    if loss.tape is None:
        raise AutodiffError("loss is not attached to any tape")
    loss.tape.backward(loss)


# ---------------------------------------------------------------------------
# op plumbing
# ---------------------------------------------------------------------------

def _result(op: str, out: np.ndarray, inputs: Sequence[tuple[Tensor, Callable]],
            choice: np.ndarray | None = None) -> Tensor:
    """Wrap an op result, registering a tape node if any input is tracked."""
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(f"op '{op}' produced non-finite values")
    tracked = [(t, fn) for t, fn in inputs if t.tracked]
    tapes = {t.tape for t, _ in tracked}
    if len(tapes) > 1:
        raise AutodiffError(f"op '{op}' mixes tensors from different tapes")
    if not tracked:
        return Tensor(out)
    tape = tracked[0][0].tape
    parents = tuple(t.node for t, _ in tracked)
    fns = [fn for _, fn in tracked]

    def vjp(g: np.ndarray) -> tuple[np.ndarray, ...]:
        return tuple(fn(g) for fn in fns)

    node = tape.add_node(op, parents, vjp,
                         None if choice is None else np.ascontiguousarray(choice).tobytes())
    return Tensor(out, tape, node)


def _require(cond: bool, op: str, msg: str) -> None:
    if not cond:
        raise ShapeError(f"{op}: {msg}")


# ---------------------------------------------------------------------------
# ops
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of a [m,k] by b [k,n]."""
    _require(a.data.ndim == 2 and b.data.ndim == 2, "matmul", "operands must be 2-D")
    _require(a.shape[1] == b.shape[0], "matmul",
             f"inner dimensions disagree: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data
    out = ad @ bd
    return _result("matmul", out, [
        (a, lambda g: g @ bd.T),
        (b, lambda g: ad.T @ g),
    ])


def conv1d(x: Tensor, kernels: Tensor, bias: Tensor, window: int) -> Tensor:
    """1-D convolution over rows of x [L,d] with zero padding.

    ``kernels`` is [F, window*d]: each filter is a flattened window.  Output
    row t, column f is dot(kernels[f], window centered at t) + bias[f].
    """
    _require(x.data.ndim == 2, "conv1d", "input must be 2-D [length, features]")
    L, d = x.shape
    _require(window % 2 == 1, "conv1d", f"window must be odd, got {window}")
    _require(window <= 2 * L + 1, "conv1d",
             f"window {window} larger than 2*length+1 = {2 * L + 1}")
    _require(kernels.data.ndim == 2 and kernels.shape[1] == window * d, "conv1d",
             f"kernels must be [F, {window * d}], got {kernels.shape}")
    F = kernels.shape[0]
    _require(bias.shape == (F,), "conv1d", f"bias must be [{F}], got {bias.shape}")

    pad = (window - 1) // 2
    padded = np.zeros((L + 2 * pad, d), dtype=np.float64)
    padded[pad:pad + L] = x.data
    windows = np.empty((L, window * d), dtype=np.float64)
    for j in range(window):
        windows[:, j * d:(j + 1) * d] = padded[j:j + L]
    kd = kernels.data
    out = windows @ kd.T + bias.data

    def d_x(g: np.ndarray) -> np.ndarray:
        dwin = g @ kd  # [L, window*d]
        dpad = np.zeros_like(padded)
        for j in range(window):
            dpad[j:j + L] += dwin[:, j * d:(j + 1) * d]
        return dpad[pad:pad + L]

    return _result("conv1d", out, [
        (x, d_x),
        (kernels, lambda g: g.T @ windows),
        (bias, lambda g: g.sum(axis=0)),
    ])


def max_over_time(x: Tensor) -> Tensor:
    """Columnwise maximum of x [L,F]; ties go to the lowest row index."""
    _require(x.data.ndim == 2, "max_over_time", "input must be 2-D")
    _require(x.shape[0] >= 1, "max_over_time", "input has no rows")
    arg = np.argmax(x.data, axis=0)  # first occurrence wins ties
    out = x.data[arg, np.arange(x.shape[1])]

    def d_x(g: np.ndarray) -> np.ndarray:
        dx = np.zeros_like(x.data)
        dx[arg, np.arange(x.shape[1])] = g
        return dx

    return _result("max_over_time", out, [(x, d_x)], choice=arg)


def embedding_lookup(table: Tensor, ids: Sequence[int]) -> Tensor:
    """Row gather from table [V,d]; backward scatter-adds into the rows."""
    _require(table.data.ndim == 2, "embedding_lookup", "table must be 2-D")
    idx = np.asarray(ids, dtype=np.int64)
    _require(idx.ndim == 1, "embedding_lookup", "ids must be a flat sequence")
    V = table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= V):
        raise ShapeError(f"embedding_lookup: id out of range [0, {V})")
    out = table.data[idx]

    def d_table(g: np.ndarray) -> np.ndarray:
        dt = np.zeros_like(table.data)
        np.add.at(dt, idx, g)
        return dt

    return _result("embedding_lookup", out, [(table, d_table)])


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0  # derivative at exactly 0 is 0
    out = np.where(mask, x.data, 0.0)
    return _result("relu", out, [(x, lambda g: g * mask)],
                   choice=mask.astype(np.int8))


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)
    return _result("tanh", t, [(x, lambda g: g * (1.0 - t * t))])


def add(a: Tensor, b: Tensor) -> Tensor:
    _require(a.shape == b.shape, "add", f"shape mismatch {a.shape} vs {b.shape}")
    return _result("add", a.data + b.data, [(a, lambda g: g), (b, lambda g: g)])


def mul(a: Tensor, b: Tensor) -> Tensor:
    _require(a.shape == b.shape, "mul", f"shape mismatch {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    return _result("mul", ad * bd, [(a, lambda g: g * bd), (b, lambda g: g * ad)])


def scale(x: Tensor, c: float) -> Tensor:
    """Multiply by a python scalar (the one sanctioned broadcast)."""
    c = float(c)
    return _result("scale", x.data * c, [(x, lambda g: g * c)])


def mean_axis(x: Tensor, axis: int) -> Tensor:
    _require(-x.data.ndim <= axis < x.data.ndim, "mean_axis",
             f"axis {axis} out of range for shape {x.shape}")
    axis = axis % x.data.ndim
    k = x.shape[axis]
    out = x.data.mean(axis=axis)

    def d_x(g: np.ndarray) -> np.ndarray:
        return np.repeat(np.expand_dims(g / k, axis), k, axis=axis)

    return _result("mean_axis", out, [(x, d_x)])


def sum_axis(x: Tensor, axis: int) -> Tensor:
    _require(-x.data.ndim <= axis < x.data.ndim, "sum_axis",
             f"axis {axis} out of range for shape {x.shape}")
    axis = axis % x.data.ndim
    k = x.shape[axis]
    out = x.data.sum(axis=axis)

    def d_x(g: np.ndarray) -> np.ndarray:
        return np.repeat(np.expand_dims(g, axis), k, axis=axis)

    return _result("sum_axis", out, [(x, d_x)])


def min_axis(x: Tensor, axis: int) -> tuple[Tensor, np.ndarray]:
    """Minimum along an axis; returns (values, argmin indices).

    Backward routes each slice's gradient only to its argmin element; ties
    break to the lowest index, so gradient mass per slice is conserved.
    """
    _require(-x.data.ndim <= axis < x.data.ndim, "min_axis",
             f"axis {axis} out of range for shape {x.shape}")
    axis = axis % x.data.ndim
    _require(x.shape[axis] >= 1, "min_axis", "reduced axis is empty")
    arg = np.argmin(x.data, axis=axis)  # first occurrence wins ties
    out = np.take_along_axis(x.data, np.expand_dims(arg, axis), axis).squeeze(axis)

    def d_x(g: np.ndarray) -> np.ndarray:
        dx = np.zeros_like(x.data)
        np.put_along_axis(dx, np.expand_dims(arg, axis),
                          np.expand_dims(g, axis), axis)
        return dx

    values = _result("min_axis", out, [(x, d_x)], choice=arg)
    return values, arg


def softmax_cross_entropy(logits: Tensor, label: int) -> Tensor:
    """-log softmax(logits)[label], computed with max-subtraction."""
    _require(logits.data.ndim == 1, "softmax_cross_entropy", "logits must be 1-D")
    C = logits.shape[0]
    if not 0 <= label < C:
        raise ShapeError(f"softmax_cross_entropy: label {label} out of range [0, {C})")
    z = logits.data - logits.data.max()
    ez = np.exp(z)
    p = ez / ez.sum()
    loss = np.log(ez.sum()) - z[label]

    def d_logits(g: np.ndarray) -> np.ndarray:
        d = p.copy()
        d[label] -= 1.0
        return d * g

    return _result("softmax_cross_entropy", np.asarray(loss), [(logits, d_logits)])


def log_softmax(x: Tensor) -> Tensor:
    """log softmax of a 1-D score vector (stable)."""
    _require(x.data.ndim == 1, "log_softmax", "input must be 1-D")
    z = x.data - x.data.max()
    lse = np.log(np.exp(z).sum())
    out = z - lse
    p = np.exp(out)
    return _result("log_softmax", out, [(x, lambda g: g - p * g.sum())])


def grad_reverse(x: Tensor, lam: float) -> Tensor:
    """Identity forward; backward multiplies the gradient by -lam."""
    lam = float(lam)
    if lam < 0:
        raise AutodiffError(f"grad_reverse: lambda must be >= 0, got {lam}")
    return _result("grad_reverse", x.data.copy(), [(x, lambda g: -lam * g)])


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    shape = tuple(shape)
    _require(int(np.prod(shape, dtype=np.int64)) == x.data.size, "reshape",
             f"cannot reshape {x.shape} to {shape}")
    old = x.data.shape
    return _result("reshape", x.data.reshape(shape), [(x, lambda g: g.reshape(old))])


def index_axis(x: Tensor, axis: int, i: int) -> Tensor:
    """Select index ``i`` along ``axis`` (rank drops by one)."""
    _require(-x.data.ndim <= axis < x.data.ndim, "index_axis",
             f"axis {axis} out of range for shape {x.shape}")
    axis = axis % x.data.ndim
    _require(0 <= i < x.shape[axis], "index_axis",
             f"index {i} out of range for axis {axis} of shape {x.shape}")
    out = np.take(x.data, i, axis=axis)

    def d_x(g: np.ndarray) -> np.ndarray:
        dx = np.zeros_like(x.data)
        sl = [slice(None)] * x.data.ndim
        sl[axis] = i
        dx[tuple(sl)] = g
        return dx

    return _result("index_axis", out, [(x, d_x)])


def rows(x: Tensor, start: int, stop: int) -> Tensor:
    """Contiguous row slice x[start:stop] along axis 0."""
    n = x.shape[0]
    _require(0 <= start < stop <= n, "rows",
             f"invalid row range [{start}, {stop}) for {n} rows")

    def d_x(g: np.ndarray) -> np.ndarray:
        dx = np.zeros_like(x.data)
        dx[start:stop] = g
        return dx

    return _result("rows", x.data[start:stop].copy(), [(x, d_x)])


def stack(tensors: Sequence[Tensor]) -> Tensor:
    """Stack equal-shaped tensors along a new leading axis."""
    _require(len(tensors) >= 1, "stack", "need at least one tensor")
    shape = tensors[0].shape
    _require(all(t.shape == shape for t in tensors), "stack",
             "all tensors must share one shape")
    out = np.stack([t.data for t in tensors], axis=0)
    inputs = [(t, (lambda k: lambda g: g[k])(i)) for i, t in enumerate(tensors)]
    return _result("stack", out, inputs)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Concatenate same-rank tensors along an existing axis."""
    _require(len(tensors) >= 1, "concat", "need at least one tensor")
    ndim = tensors[0].data.ndim
    _require(all(t.data.ndim == ndim for t in tensors), "concat",
             "all tensors must share one rank")
    _require(-ndim <= axis < ndim, "concat", f"axis {axis} out of range")
    axis = axis % ndim
    out = np.concatenate([t.data for t in tensors], axis=axis)
    offsets = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def make_vjp(i: int):
        def vjp(g: np.ndarray) -> np.ndarray:
            sl = [slice(None)] * ndim
            sl[axis] = slice(int(offsets[i]), int(offsets[i + 1]))
            return g[tuple(sl)]
        return vjp

    inputs = [(t, make_vjp(i)) for i, t in enumerate(tensors)]
    return _result("concat", out, inputs)


# ---------------------------------------------------------------------------
# finite-difference gradient checking
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    """Outcome of a finite-difference sweep over named parameters."""

    max_rel_err: float = 0.0
    n_checked: int = 0
    n_skipped: int = 0
    worst: tuple[str, tuple[int, ...]] | None = None
    skipped: list[tuple[str, tuple[int, ...], str]] = field(default_factory=list)

    def record(self, name: str, idx: tuple[int, ...], rel_err: float) -> None:
        self.n_checked += 1
        if rel_err > self.max_rel_err:
            self.max_rel_err = rel_err
            self.worst = (name, idx)

    def skip(self, name: str, idx: tuple[int, ...], reason: str) -> None:
        self.n_skipped += 1
        self.skipped.append((name, idx, reason))


def _evaluate(f: Callable[[], Tensor], params: dict[str, Tensor],
              want_grads: bool):
    """One forward pass on a fresh tape; optionally run backward too.

    Returns (loss value, choice signature, grads-by-name or None).  Params
    are detached again on exit so the caller can mutate their data between
    evaluations.
    """
    tape = Tape()
    for t in params.values():
        t.attach(tape)
    try:
        loss = f()
        if loss.tape is not tape:
            raise AutodiffError("loss does not depend on the supplied parameters")
        grads = None
        if want_grads:
            tape.backward(loss)
            grads = {}
            for name, t in params.items():
                g = tape.grads[t.node]
                grads[name] = np.zeros_like(t.data) if g is None else g.copy()
        return loss.item(), tape.choice_signature(), grads
    finally:
        for t in params.values():
            t.detach()


def finite_diff_check(f: Callable[[], Tensor], params: dict[str, Tensor],
                      eps: float = 1e-5, max_coords: int = 16,
                      rng: np.random.Generator | None = None) -> GradCheckReport:
    """Check analytic gradients of ``f`` against central finite differences.

    ``f`` must be a deterministic closure over ``params`` returning a scalar
    tensor.  For each parameter, up to ``max_coords`` coordinates are sampled
    and perturbed by +/-eps.  Coordinates where the forward pass is detected
    non-smooth (an arg-min/max flip or a relu activation-pattern flip between
    the two perturbed evaluations) are flagged and skipped rather than
    compared.  Relative error uses denominator max(|analytic|, |numeric|,
    1e-6).
    """
    if eps <= 0:
        raise AutodiffError("finite_diff_check: eps must be positive")
    rng = rng or np.random.default_rng(0)
    _, _, analytic = _evaluate(f, params, want_grads=True)

    report = GradCheckReport()
    for name, t in params.items():
        flat = t.data.reshape(-1)
        n = flat.size
        if n == 0:
            continue
        if n <= max_coords:
            coords = np.arange(n)
        else:
            coords = rng.choice(n, size=max_coords, replace=False)
        for c in coords:
            c = int(c)
            idx = np.unravel_index(c, t.data.shape)
            orig = flat[c]
            flat[c] = orig + eps
            loss_p, sig_p, _ = _evaluate(f, params, want_grads=False)
            flat[c] = orig - eps
            loss_m, sig_m, _ = _evaluate(f, params, want_grads=False)
            flat[c] = orig
            if sig_p != sig_m:
                report.skip(name, idx, "non-smooth, skipped")
                continue
            numeric = (loss_p - loss_m) / (2 * eps)
            a = float(analytic[name][idx])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-6)
            report.record(name, idx, rel)
    return report
