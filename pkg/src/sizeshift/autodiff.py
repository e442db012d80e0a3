"""Dense float64 tensors with reverse-mode differentiation on an explicit tape.

Operations executed while a Tape is active are recorded in execution
order (which is automatically topological); backward() replays the tape
in reverse, accumulating vector-Jacobian products. Without an active
tape every operation is a plain numpy computation.

A tape is single-threaded. Tensors that carry no tape reference are
immutable in practice and safe to share between threads.
"""

from __future__ import annotations

import threading

import numpy as np

_tls = threading.local()


def _active_tape():
    return getattr(_tls, "tape", None)


class Tape:
    """Ordered record of operations: (output, inputs, backward rule)."""

    def __init__(self):
        self.entries = []

    def __enter__(self):
        if _active_tape() is not None:
            raise RuntimeError("a tape is already active on this thread")
        _tls.tape = self
        return self

    def __exit__(self, *exc):
        _tls.tape = None
        return False

    def record(self, out, inputs, backward_fn):
        out.tape_node = (self, len(self.entries))
        self.entries.append((out, inputs, backward_fn))


class Tensor:
    """A dense float64 array, optionally tracked for differentiation."""

    __slots__ = ("values", "requires_grad", "grad", "tape_node")

    def __init__(self, values, requires_grad=False):
        self.values = np.asarray(values, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self.tape_node = None

    @property
    def shape(self):
        return self.values.shape

    def __repr__(self):
        return f"Tensor(shape={self.values.shape}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.values)

    # -- operator sugar ------------------------------------------------
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, reciprocal(other))
        return mul(self, _as_tensor(1.0 / float(other)))

    def __neg__(self):
        return mul(self, _as_tensor(-1.0))

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))

    def relu(self):
        return relu(self)

    def tanh(self):
        return tanh(self)

    def sum(self):
        return sum_all(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _tracked(*tensors) -> bool:
    tape = _active_tape()
    if tape is None:
        return False
    return any(t.requires_grad or t.tape_node is not None for t in tensors)


def _record(values, inputs, backward_fn) -> Tensor:
    out = Tensor(values)
    if _tracked(*inputs):
        _active_tape().record(out, inputs, backward_fn)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a gradient to the shape of a broadcast operand."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- elementwise and linear primitives ---------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    values = a.values + b.values

    def backward(g):
        return [(a, _unbroadcast(g, a.values.shape)), (b, _unbroadcast(g, b.values.shape))]

    return _record(values, [a, b], backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    values = a.values - b.values

    def backward(g):
        return [(a, _unbroadcast(g, a.values.shape)), (b, _unbroadcast(-g, b.values.shape))]

    return _record(values, [a, b], backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    values = a.values * b.values

    def backward(g):
        return [
            (a, _unbroadcast(g * b.values, a.values.shape)),
            (b, _unbroadcast(g * a.values, b.values.shape)),
        ]

    return _record(values, [a, b], backward)


def reciprocal(a: Tensor) -> Tensor:
    values = 1.0 / a.values

    def backward(g):
        return [(a, -g * values * values)]

    return _record(values, [a], backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.values.ndim != 2 or b.values.ndim != 2 or a.values.shape[1] != b.values.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.values.shape} @ {b.values.shape}")
    values = a.values @ b.values

    def backward(g):
        return [(a, g @ b.values.T), (b, a.values.T @ g)]

    return _record(values, [a, b], backward)


def relu(a: Tensor) -> Tensor:
    mask = a.values > 0
    values = np.where(mask, a.values, 0.0)

    def backward(g):
        return [(a, g * mask)]

    return _record(values, [a], backward)


def tanh(a: Tensor) -> Tensor:
    values = np.tanh(a.values)

    def backward(g):
        return [(a, g * (1.0 - values * values))]

    return _record(values, [a], backward)


def _int_power(x: np.ndarray, k: int) -> np.ndarray:
    # repeated multiplication beats np.power for the small exponents used here
    out = x
    for _ in range(k - 1):
        out = out * x
    return out


def elementwise_pow(a: Tensor, k: int) -> Tensor:
    """a**k for integer k >= 1."""
    if not isinstance(k, int) or k < 1:
        raise ValueError(f"pow exponent must be an integer >= 1, got {k!r}")
    values = _int_power(a.values, k)

    def backward(g):
        if k == 1:
            return [(a, g.copy())]
        return [(a, g * k * _int_power(a.values, k - 1))]

    return _record(values, [a], backward)


def sqrt_eps(a: Tensor, eps: float = 1e-12) -> Tensor:
    """sqrt(a + eps), differentiable at a = 0."""
    values = np.sqrt(a.values + eps)

    def backward(g):
        return [(a, g * 0.5 / values)]

    return _record(values, [a], backward)


# -- reductions and row structure --------------------------------------


def sum_all(a: Tensor) -> Tensor:
    values = np.asarray(a.values.sum())

    def backward(g):
        return [(a, np.broadcast_to(g, a.values.shape).copy())]

    return _record(values, [a], backward)


def row_mean(a: Tensor) -> Tensor:
    """Mean over axis 0 of a matrix: (n, d) -> (d,)."""
    if a.values.ndim != 2:
        raise ValueError("row_mean expects a matrix")
    n = a.values.shape[0]
    values = a.values.mean(axis=0)

    def backward(g):
        return [(a, np.broadcast_to(g / n, a.values.shape).copy())]

    return _record(values, [a], backward)


def rowwise_sum(a: Tensor) -> Tensor:
    """Sum over axis 1 of a matrix: (n, d) -> (n,)."""
    if a.values.ndim != 2:
        raise ValueError("rowwise_sum expects a matrix")
    values = a.values.sum(axis=1)

    def backward(g):
        return [(a, np.broadcast_to(g[:, None], a.values.shape).copy())]

    return _record(values, [a], backward)


def row_slice(a: Tensor, start: int, stop: int) -> Tensor:
    values = a.values[start:stop]

    def backward(g):
        full = np.zeros_like(a.values)
        full[start:stop] = g
        return [(a, full)]

    return _record(values, [a], backward)


def segment_mean(a: Tensor, offsets: np.ndarray) -> Tensor:
    """Per-segment row means: (N, d) with B segments -> (B, d).

    offsets has length B+1 and segments must be nonempty.
    """
    offsets = np.asarray(offsets, dtype=np.int64)
    counts = np.diff(offsets)
    if np.any(counts <= 0) or offsets[-1] != a.values.shape[0]:
        raise ValueError("segment offsets must cover all rows with nonempty segments")
    sums = np.add.reduceat(a.values, offsets[:-1], axis=0)
    values = sums / counts[:, None]

    def backward(g):
        per_row = np.repeat(g / counts[:, None], counts, axis=0)
        return [(a, per_row)]

    return _record(values, [a], backward)


def segment_expand(s: Tensor, offsets: np.ndarray) -> Tensor:
    """Broadcast one row per segment back to rows: (B, d) -> (N, d)."""
    offsets = np.asarray(offsets, dtype=np.int64)
    counts = np.diff(offsets)
    values = np.repeat(s.values, counts, axis=0)

    def backward(g):
        return [(s, np.add.reduceat(g, offsets[:-1], axis=0))]

    return _record(values, [s], backward)


# -- graph, regularization and loss primitives -------------------------


def neighbor_aggregate(h: Tensor, adj, mode: str = "sum") -> Tensor:
    """Aggregate neighbor rows through a sparse adjacency.

    mode "sum": row v becomes the sum of h over the neighbors of v.
    mode "sym_norm": self-loops are added and row v becomes
    sum_u h[u] / sqrt((deg_v+1) (deg_u+1)) over v's closed neighborhood.
    The operator matrix is symmetric in both modes, so the backward pass
    applies the same aggregation to the incoming gradient.
    """
    if h.values.ndim != 2 or h.values.shape[0] != adj.num_nodes:
        raise ValueError(
            f"row count {h.values.shape[0]} does not match graph size {adj.num_nodes}"
        )
    cols = adj.column_indices
    # reduceat cannot express empty segments, so reduce over the rows that
    # have neighbors (their start offsets are strictly increasing) and
    # scatter the results back; empty rows stay zero
    nonempty = adj.degrees > 0
    ne_starts = adj.row_offsets[:-1][nonempty]

    def gather_reduce(x_gathered):
        out = np.zeros((adj.num_nodes, x_gathered.shape[1]))
        if ne_starts.size:
            out[nonempty] = np.add.reduceat(x_gathered, ne_starts, axis=0)
        return out

    if mode == "sum":

        def apply(x):
            return gather_reduce(x[cols])

    elif mode == "sym_norm":
        inv_sqrt = 1.0 / np.sqrt(adj.degrees + 1.0)
        rows = np.repeat(np.arange(adj.num_nodes), adj.degrees)
        coef = (inv_sqrt[rows] * inv_sqrt[cols])[:, None]
        self_coef = (inv_sqrt * inv_sqrt)[:, None]

        def apply(x):
            return self_coef * x + gather_reduce(coef * x[cols])

    else:
        raise ValueError(f"unknown aggregation mode {mode!r}")

    values = apply(h.values)

    def backward(g):
        return [(h, apply(g))]

    return _record(values, [h], backward)


def dropout(a: Tensor, p: float, rng: np.random.Generator, train: bool = True) -> Tensor:
    """Inverted dropout: scales kept entries by 1/(1-p) at train time."""
    if not train or p <= 0.0:
        return a
    keep = rng.random(a.values.shape) >= p
    scale = keep / (1.0 - p)
    values = a.values * scale

    def backward(g):
        return [(a, g * scale)]

    return _record(values, [a], backward)


def weighted_softmax_cross_entropy(
    logits: Tensor, labels: np.ndarray, class_weights: np.ndarray
) -> Tensor:
    """Class-weighted mean of softmax cross-entropy over rows of logits."""
    labels = np.asarray(labels, dtype=np.int64)
    class_weights = np.asarray(class_weights, dtype=np.float64)
    z = logits.values
    if z.ndim != 2 or labels.shape != (z.shape[0],):
        raise ValueError("logits must be (B, C) with one label per row")
    m = z.max(axis=1, keepdims=True)
    ez = np.exp(z - m)
    log_probs = (z - m) - np.log(ez.sum(axis=1, keepdims=True))
    w = class_weights[labels]
    wsum = w.sum()
    if wsum <= 0:
        raise ValueError("all sample weights are zero")
    per_row = -log_probs[np.arange(len(labels)), labels]
    values = np.asarray((w * per_row).sum() / wsum)

    def backward(g):
        probs = np.exp(log_probs)
        probs[np.arange(len(labels)), labels] -= 1.0
        return [(logits, g * probs * (w / wsum)[:, None])]

    return _record(values, [logits], backward)


# -- reverse sweep and finite-difference check --------------------------


def backward(loss: Tensor) -> dict:
    """Reverse sweep from a scalar loss, returning gradients per leaf.

    Gradients accumulate additively for shared inputs. Returns a dict
    mapping each requires_grad Tensor reached by the sweep to its
    gradient array, and mirrors the values into Tensor.grad.
    """
    if loss.values.ndim != 0:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.values.shape}")
    if loss.tape_node is None:
        raise ValueError("loss is not attached to a tape (detached or untracked)")
    tape, idx = loss.tape_node
    grads = {id(loss): np.ones(())}
    by_id = {id(loss): loss}
    for out, inputs, backward_fn in reversed(tape.entries[: idx + 1]):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for tensor, contrib in backward_fn(g):
            if not (tensor.requires_grad or tensor.tape_node is not None):
                continue
            key = id(tensor)
            if key in grads:
                grads[key] = grads[key] + contrib
            else:
                grads[key] = contrib
                by_id[key] = tensor
    result = {}
    for key, g in grads.items():
        t = by_id[key]
        if t.requires_grad:
            t.grad = g
            result[t] = g
    return result


def gradient_check(f, params, step: float = 1e-5) -> float:
    """Compare reverse-mode gradients of f() against central differences.

    f must be deterministic (dropout disabled, batch norm in eval mode)
    and must read the current .values of each parameter on every call.
    Returns the maximum relative error over all parameter coordinates.
    """
    with Tape():
        loss = f()
        # a loss that never touched a tracked tensor is constant in the params
        grads = backward(loss) if loss.tape_node is not None else {}
    max_err = 0.0
    for p in params:
        ad = grads.get(p)
        ad = np.zeros_like(p.values) if ad is None else np.asarray(ad)
        flat = p.values.reshape(-1)
        fd = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = float(f().values)
            flat[i] = orig - step
            lo = float(f().values)
            flat[i] = orig
            fd[i] = (hi - lo) / (2.0 * step)
        fd = fd.reshape(p.values.shape)
        denom = np.maximum(1e-8, np.abs(ad) + np.abs(fd))
        max_err = max(max_err, float(np.max(np.abs(ad - fd) / denom)))
    return max_err
