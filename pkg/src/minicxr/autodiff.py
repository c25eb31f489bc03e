"""Reverse-mode automatic differentiation over dense float64 arrays.

Everything trainable in this project runs through the ops in this module.
Values and gradients are plain numpy arrays; a Tape records each op in
execution order so that walking the record backwards is a valid reverse
topological sweep. Gradients accumulate additively -- callers zero them
between optimizer steps.
"""

from __future__ import annotations

import itertools
import math
import threading

import numpy as np

LAYERNORM_EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)

_node_counter = itertools.count()


class _TapeStacks(threading.local):
    """Per-thread active-tape stacks; tapes never share mutable state."""

    def __init__(self):
        self.stack: list["Tape"] = []


_tapes = _TapeStacks()


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class DegenerateRowError(ValueError):
    """A softmax row has no unmasked entries."""


class TrainingDivergenceError(RuntimeError):
    """A gradient or loss became non-finite during training."""


class DiffArray:
    """Dense array carrying a value and an accumulated gradient.

    The gradient buffer is allocated on first use so forward-only code
    pays nothing for it. ``stop_grad`` marks detached constants: backward
    passes never write into their ``grad``, so it stays identically zero.
    """

    __slots__ = ("values", "_grad", "node_id", "stop_grad")

    def __init__(self, values, stop_grad: bool = False):
        self.values = np.asarray(values, dtype=np.float64)
        self._grad = None
        self.node_id = next(_node_counter)
        self.stop_grad = stop_grad

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            self._grad = np.zeros_like(self.values)
        return self._grad

    @grad.setter
    def grad(self, value) -> None:
        self._grad = value

    @property
    def shape(self):
        return self.values.shape

    def zero_grad(self) -> None:
        if self._grad is not None:
            self._grad[...] = 0.0

    def item(self) -> float:
        return float(self.values)

    def __repr__(self):
        return f"DiffArray(shape={self.values.shape}, node_id={self.node_id})"


def param(values) -> DiffArray:
    """Trainable leaf."""
    return DiffArray(values, stop_grad=False)


def constant(values) -> DiffArray:
    """Detached leaf; gradient never accumulates into it."""
    return DiffArray(values, stop_grad=True)


class TapeEntry:
    __slots__ = ("op", "input_ids", "output_id", "backward_fn", "forward_fn", "output")

    def __init__(self, op, inputs, output, backward_fn, forward_fn):
        self.op = op
        self.input_ids = [a.node_id for a in inputs]
        self.output_id = output.node_id
        self.output = output
        self.backward_fn = backward_fn
        self.forward_fn = forward_fn


class Tape:
    """Ordered record of ops; reverse iteration is the backward pass.

    Ops executed while the tape is active (``with tape:``) are recorded in
    execution order, so every entry's inputs precede it. ``seed`` is kept
    so that any seeded computation bound to this tape replays identically.
    """

    def __init__(self, seed: int = 0):
        self.seed = int(seed)
        self.entries: list[TapeEntry] = []
        self._leaves: dict[int, DiffArray] = {}

    def __enter__(self) -> "Tape":
        _tapes.stack.append(self)
        return self

    def __exit__(self, *exc):
        popped = _tapes.stack.pop()
        assert popped is self
        return False

    def _record(self, entry: TapeEntry, inputs) -> None:
        for a in inputs:
            if a.node_id not in self._leaves:
                self._leaves.setdefault(a.node_id, a)
        self.entries.append(entry)

    def backward(self, loss: DiffArray) -> None:
        """Seed ``loss.grad`` with 1.0 and sweep the record in reverse."""
        if loss.values.ndim != 0:
            raise DimensionError(
                f"backward() needs a scalar loss, got shape {loss.values.shape}"
            )
        if not self.entries or self.entries[-1].output_id < loss.node_id:
            # Loss must have been produced on this tape.
            recorded = any(e.output_id == loss.node_id for e in self.entries)
            if not recorded:
                raise ValueError("loss was not produced on this tape")
        loss.grad = np.ones_like(loss.values)
        for entry in reversed(self.entries):
            entry.backward_fn()

    def replay(self) -> dict[int, np.ndarray]:
        """Recompute every recorded output from leaf values.

        Returns node-id -> recomputed values; deterministic ops make this
        bit-identical to the original forward pass.
        """
        vals: dict[int, np.ndarray] = {k: v.values for k, v in self._leaves.items()}
        for entry in self.entries:
            vals[entry.output_id] = entry.forward_fn(vals)
        return vals


def active_tape() -> Tape | None:
    return _tapes.stack[-1] if _tapes.stack else None


def _emit(op, inputs, out_values, backward_fn_builder, forward_fn):
    """Create the output array and record the op on the active tape.

    With no active tape the op runs forward-only (inference mode).
    ``backward_fn_builder(out)`` defers closure creation so untaped
    forwards skip it entirely.
    """
    out = DiffArray(out_values)
    tape = active_tape()
    if tape is not None:
        entry = TapeEntry(op, inputs, out, backward_fn_builder(out), forward_fn)
        tape._record(entry, inputs)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _acc(a: DiffArray, g: np.ndarray) -> None:
    if not a.stop_grad:
        a.grad += _unbroadcast(g, a.values.shape)


# ---------------------------------------------------------------------------
# core ops


def matmul(a: DiffArray, b: DiffArray) -> DiffArray:
    """Matrix product with numpy batching semantics over leading axes."""
    if a.values.ndim < 2 or b.values.ndim < 2:
        raise DimensionError(
            f"matmul needs >=2-d operands, got {a.values.shape} and {b.values.shape}"
        )
    if a.values.shape[-1] != b.values.shape[-2]:
        raise DimensionError(
            f"matmul inner extents differ: {a.values.shape} vs {b.values.shape}"
        )
    out_values = a.values @ b.values

    def build(out):
        def backward():
            g = out.grad
            _acc(a, g @ np.swapaxes(b.values, -1, -2))
            _acc(b, np.swapaxes(a.values, -1, -2) @ g)

        return backward

    ai, bi = a.node_id, b.node_id
    return _emit("matmul", (a, b), out_values,
                 build, lambda v: v[ai] @ v[bi])


def add(a: DiffArray, b: DiffArray) -> DiffArray:
    try:
        out_values = a.values + b.values
    except ValueError as e:
        raise DimensionError(f"add: {a.values.shape} vs {b.values.shape}") from e

    def build(out):
        def backward():
            _acc(a, out.grad)
            _acc(b, out.grad)

        return backward

    ai, bi = a.node_id, b.node_id
    return _emit("add", (a, b), out_values, build, lambda v: v[ai] + v[bi])


def sub(a: DiffArray, b: DiffArray) -> DiffArray:
    try:
        out_values = a.values - b.values
    except ValueError as e:
        raise DimensionError(f"sub: {a.values.shape} vs {b.values.shape}") from e

    def build(out):
        def backward():
            _acc(a, out.grad)
            _acc(b, -out.grad)

        return backward

    ai, bi = a.node_id, b.node_id
    return _emit("sub", (a, b), out_values, build, lambda v: v[ai] - v[bi])


def mul(a: DiffArray, b: DiffArray) -> DiffArray:
    try:
        out_values = a.values * b.values
    except ValueError as e:
        raise DimensionError(f"mul: {a.values.shape} vs {b.values.shape}") from e

    def build(out):
        def backward():
            _acc(a, out.grad * b.values)
            _acc(b, out.grad * a.values)

        return backward

    ai, bi = a.node_id, b.node_id
    return _emit("mul", (a, b), out_values, build, lambda v: v[ai] * v[bi])


def scale(a: DiffArray, c: float) -> DiffArray:
    c = float(c)

    def build(out):
        def backward():
            _acc(a, out.grad * c)

        return backward

    ai = a.node_id
    return _emit("scale", (a,), a.values * c, build, lambda v: v[ai] * c)


def exp(a: DiffArray) -> DiffArray:
    out_values = np.exp(a.values)

    def build(out):
        def backward():
            _acc(a, out.grad * out.values)

        return backward

    ai = a.node_id
    return _emit("exp", (a,), out_values, build, lambda v: np.exp(v[ai]))


def log(a: DiffArray) -> DiffArray:
    out_values = np.log(a.values)

    def build(out):
        def backward():
            _acc(a, out.grad / a.values)

        return backward

    ai = a.node_id
    return _emit("log", (a,), out_values, build, lambda v: np.log(v[ai]))


def _sigmoid_values(x: np.ndarray) -> np.ndarray:
    z = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))


def sigmoid(a: DiffArray) -> DiffArray:
    out_values = _sigmoid_values(a.values)

    def build(out):
        def backward():
            _acc(a, out.grad * out.values * (1.0 - out.values))

        return backward

    ai = a.node_id
    return _emit("sigmoid", (a,), out_values,
                 build, lambda v: _sigmoid_values(v[ai]))


def logsigmoid(a: DiffArray) -> DiffArray:
    """log(sigmoid(x)), computed stably for large |x|."""
    x = a.values
    out_values = np.minimum(x, 0.0) - np.log1p(np.exp(-np.abs(x)))

    def build(out):
        def backward():
            z = np.exp(-np.abs(a.values))
            sig_neg = np.where(a.values >= 0, z / (1.0 + z), 1.0 / (1.0 + z))
            _acc(a, out.grad * sig_neg)

        return backward

    ai = a.node_id

    def fwd(v):
        xv = v[ai]
        return np.minimum(xv, 0.0) - np.log1p(np.exp(-np.abs(xv)))

    return _emit("logsigmoid", (a,), out_values, build, fwd)


def tanh(a: DiffArray) -> DiffArray:
    out_values = np.tanh(a.values)

    def build(out):
        def backward():
            _acc(a, out.grad * (1.0 - out.values ** 2))

        return backward

    ai = a.node_id
    return _emit("tanh", (a,), out_values, build, lambda v: np.tanh(v[ai]))


def gelu(a: DiffArray) -> DiffArray:
    """Gaussian error linear unit, tanh approximation."""
    x = a.values
    t = np.tanh(_GELU_C * (x + 0.044715 * (x * x * x)))
    out_values = 0.5 * x * (1.0 + t)

    def build(out):
        def backward():
            dinner = _GELU_C * (1.0 + 3 * 0.044715 * (x * x))
            da = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
            _acc(a, out.grad * da)

        return backward

    ai = a.node_id

    def fwd(v):
        xv = v[ai]
        return 0.5 * xv * (1.0 + np.tanh(_GELU_C * (xv + 0.044715 * (xv * xv * xv))))

    return _emit("gelu", (a,), out_values, build, fwd)


def swap_axes(a: DiffArray, ax1: int, ax2: int) -> DiffArray:
    out_values = np.swapaxes(a.values, ax1, ax2)

    def build(out):
        def backward():
            _acc(a, np.swapaxes(out.grad, ax1, ax2))

        return backward

    ai = a.node_id
    return _emit("swap_axes", (a,), out_values,
                 build, lambda v: np.swapaxes(v[ai], ax1, ax2))


def layernorm(x: DiffArray, gamma: DiffArray, beta: DiffArray,
              eps: float = LAYERNORM_EPS) -> DiffArray:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    if gamma.values.shape != (x.values.shape[-1],) or beta.values.shape != gamma.values.shape:
        raise DimensionError(
            f"layernorm affine shapes {gamma.values.shape}/{beta.values.shape} "
            f"do not match feature dim of {x.values.shape}"
        )
    mu = x.values.mean(axis=-1, keepdims=True)
    var = x.values.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.values - mu) * inv
    out_values = xhat * gamma.values + beta.values

    def build(out):
        def backward():
            g = out.grad
            gg = g * gamma.values
            dx = inv * (gg - gg.mean(axis=-1, keepdims=True)
                        - xhat * (gg * xhat).mean(axis=-1, keepdims=True))
            _acc(x, dx)
            _acc(gamma, (g * xhat).reshape(-1, xhat.shape[-1]).sum(axis=0))
            _acc(beta, g.reshape(-1, g.shape[-1]).sum(axis=0))

        return backward

    xi, gi, bi = x.node_id, gamma.node_id, beta.node_id

    def fwd(v):
        xv = v[xi]
        m = xv.mean(axis=-1, keepdims=True)
        iv = 1.0 / np.sqrt(xv.var(axis=-1, keepdims=True) + eps)
        return (xv - m) * iv * v[gi] + v[bi]

    return _emit("layernorm", (x, gamma, beta), out_values, build, fwd)


def softmax_rows(x: DiffArray, mask: np.ndarray | None = None) -> DiffArray:
    """Row softmax over the last axis.

    ``mask`` (same shape, boolean) marks positions to exclude: their output
    is exactly 0. Rows are stabilized by subtracting the row max over the
    kept positions.
    """
    xv = x.values
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != xv.shape:
            raise DimensionError(f"mask shape {mask.shape} != input shape {xv.shape}")
        if np.any(mask.all(axis=-1)):
            raise DegenerateRowError("softmax row with every position masked")
        shifted = np.where(mask, -np.inf, xv)
    else:
        shifted = xv
    rowmax = shifted.max(axis=-1, keepdims=True)
    e = np.exp(shifted - rowmax)
    if mask is not None:
        e = np.where(mask, 0.0, e)
    out_values = e / e.sum(axis=-1, keepdims=True)

    def build(out):
        def backward():
            g = out.grad
            y = out.values
            dx = y * (g - (g * y).sum(axis=-1, keepdims=True))
            _acc(x, dx)

        return backward

    xi = x.node_id
    frozen_mask = None if mask is None else mask.copy()

    def fwd(v):
        sv = v[xi] if frozen_mask is None else np.where(frozen_mask, -np.inf, v[xi])
        ev = np.exp(sv - sv.max(axis=-1, keepdims=True))
        if frozen_mask is not None:
            ev = np.where(frozen_mask, 0.0, ev)
        return ev / ev.sum(axis=-1, keepdims=True)

    return _emit("softmax_rows", (x,), out_values, build, fwd)


def log_softmax_rows(x: DiffArray) -> DiffArray:
    """Row log-softmax over the last axis (stabilized)."""
    xv = x.values
    shifted = xv - xv.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out_values = shifted - lse

    def build(out):
        def backward():
            g = out.grad
            p = np.exp(out.values)
            _acc(x, g - p * g.sum(axis=-1, keepdims=True))

        return backward

    xi = x.node_id

    def fwd(v):
        sv = v[xi] - v[xi].max(axis=-1, keepdims=True)
        return sv - np.log(np.exp(sv).sum(axis=-1, keepdims=True))

    return _emit("log_softmax_rows", (x,), out_values, build, fwd)


def _check_targets(logits_shape, targets: np.ndarray) -> None:
    V = logits_shape[-1]
    if targets.size and (targets.min() < 0 or targets.max() >= V):
        bad = int(targets[(targets < 0) | (targets >= V)][0])
        raise IndexError(f"target id {bad} out of range for vocabulary size {V}")


def cross_entropy_nll(logits: DiffArray, targets, mask=None) -> DiffArray:
    """Mean negative log-likelihood of ``targets`` under row softmax.

    ``logits`` is (T, V); ``targets`` length-T integer ids. ``mask``, if
    given, is a length-T boolean keep-vector; masked-out positions do not
    contribute to the mean.
    """
    targets = np.asarray(targets, dtype=np.int64)
    if logits.values.ndim != 2 or targets.shape != (logits.values.shape[0],):
        raise DimensionError(
            f"cross_entropy_nll needs (T,V) logits and (T,) targets, got "
            f"{logits.values.shape} and {targets.shape}"
        )
    _check_targets(logits.values.shape, targets)
    keep = np.ones(targets.shape[0], dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    n = int(keep.sum())
    if n == 0:
        raise DimensionError("cross_entropy_nll: no unmasked positions")
    xv = logits.values
    shifted = xv - xv.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    lsm = shifted - lse
    rows = np.arange(targets.shape[0])
    out_values = np.float64(-(lsm[rows, targets] * keep).sum() / n)

    def build(out):
        def backward():
            p = np.exp(lsm)
            d = p.copy()
            d[rows, targets] -= 1.0
            d *= (keep / n)[:, None]
            _acc(logits, out.grad * d)

        return backward

    li = logits.node_id
    frozen_t, frozen_k = targets.copy(), keep.copy()

    def fwd(v):
        s = v[li] - v[li].max(axis=-1, keepdims=True)
        l2 = s - np.log(np.exp(s).sum(axis=-1, keepdims=True))
        return np.float64(-(l2[rows, frozen_t] * frozen_k).sum() / n)

    return _emit("cross_entropy_nll", (logits,), out_values, build, fwd)


def token_logprobs(logits: DiffArray, targets) -> DiffArray:
    """Per-position log-probability of each target id; (T,V) -> (T,)."""
    targets = np.asarray(targets, dtype=np.int64)
    if logits.values.ndim != 2 or targets.shape != (logits.values.shape[0],):
        raise DimensionError(
            f"token_logprobs needs (T,V) logits and (T,) targets, got "
            f"{logits.values.shape} and {targets.shape}"
        )
    _check_targets(logits.values.shape, targets)
    xv = logits.values
    shifted = xv - xv.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    lsm = shifted - lse
    rows = np.arange(targets.shape[0])
    out_values = lsm[rows, targets]

    def build(out):
        def backward():
            g = out.grad
            p = np.exp(lsm)
            d = -p * g[:, None]
            d[rows, targets] += g
            _acc(logits, d)

        return backward

    li = logits.node_id
    frozen_t = targets.copy()

    def fwd(v):
        s = v[li] - v[li].max(axis=-1, keepdims=True)
        l2 = s - np.log(np.exp(s).sum(axis=-1, keepdims=True))
        return l2[rows, frozen_t]

    return _emit("token_logprobs", (logits,), out_values, build, fwd)


def embedding_lookup(table: DiffArray, ids) -> DiffArray:
    """Gather rows of ``table`` by integer ids; backward scatter-adds."""
    ids = np.asarray(ids, dtype=np.int64)
    V = table.values.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= V):
        bad = int(ids[(ids < 0) | (ids >= V)].flat[0])
        raise IndexError(f"embedding id {bad} out of range for table of {V} rows")
    out_values = table.values[ids]

    def build(out):
        def backward():
            if not table.stop_grad:
                np.add.at(table.grad, ids, out.grad)

        return backward

    ti = table.node_id
    frozen = ids.copy()
    return _emit("embedding_lookup", (table,), out_values,
                 build, lambda v: v[ti][frozen])


def sum_all(a: DiffArray) -> DiffArray:
    out_values = np.float64(a.values.sum())

    def build(out):
        def backward():
            _acc(a, np.broadcast_to(out.grad, a.values.shape))

        return backward

    ai = a.node_id
    return _emit("sum_all", (a,), out_values, build, lambda v: np.float64(v[ai].sum()))


def mean_all(a: DiffArray) -> DiffArray:
    n = a.values.size
    out_values = np.float64(a.values.mean())

    def build(out):
        def backward():
            _acc(a, np.broadcast_to(out.grad / n, a.values.shape))

        return backward

    ai = a.node_id
    return _emit("mean_all", (a,), out_values, build, lambda v: np.float64(v[ai].mean()))


def mean_axis(a: DiffArray, axis: int) -> DiffArray:
    """Mean over one axis, keepdims=True."""
    n = a.values.shape[axis]
    out_values = a.values.mean(axis=axis, keepdims=True)

    def build(out):
        def backward():
            _acc(a, np.broadcast_to(out.grad / n, a.values.shape).copy())

        return backward

    ai = a.node_id
    return _emit("mean_axis", (a,), out_values,
                 build, lambda v: v[ai].mean(axis=axis, keepdims=True))


def slice_last(a: DiffArray, lo: int, hi: int) -> DiffArray:
    out_values = a.values[..., lo:hi]

    def build(out):
        def backward():
            g = np.zeros_like(a.values)
            g[..., lo:hi] = out.grad
            _acc(a, g)

        return backward

    ai = a.node_id
    return _emit("slice_last", (a,), out_values, build, lambda v: v[ai][..., lo:hi])


def concat_last(parts: list[DiffArray]) -> DiffArray:
    out_values = np.concatenate([p.values for p in parts], axis=-1)
    widths = [p.values.shape[-1] for p in parts]

    def build(out):
        def backward():
            off = 0
            for p, w in zip(parts, widths):
                _acc(p, out.grad[..., off:off + w])
                off += w

        return backward

    idx = [p.node_id for p in parts]
    return _emit("concat_last", tuple(parts), out_values, build,
                 lambda v: np.concatenate([v[i] for i in idx], axis=-1))


def reshape(a: DiffArray, shape: tuple) -> DiffArray:
    out_values = a.values.reshape(shape)

    def build(out):
        def backward():
            _acc(a, out.grad.reshape(a.values.shape))

        return backward

    ai = a.node_id
    return _emit("reshape", (a,), out_values, build, lambda v: v[ai].reshape(shape))


def transpose_last2(a: DiffArray) -> DiffArray:
    out_values = np.swapaxes(a.values, -1, -2)

    def build(out):
        def backward():
            _acc(a, np.swapaxes(out.grad, -1, -2))

        return backward

    ai = a.node_id
    return _emit("transpose_last2", (a,), out_values,
                 build, lambda v: np.swapaxes(v[ai], -1, -2))


def minimum(a: DiffArray, b: DiffArray) -> DiffArray:
    """Elementwise min; the gradient follows the smaller branch (ties -> a)."""
    out_values = np.minimum(a.values, b.values)

    def build(out):
        def backward():
            take_a = a.values <= b.values
            _acc(a, out.grad * take_a)
            _acc(b, out.grad * ~take_a)

        return backward

    ai, bi = a.node_id, b.node_id
    return _emit("minimum", (a, b), out_values,
                 build, lambda v: np.minimum(v[ai], v[bi]))


def clip(a: DiffArray, lo: float, hi: float) -> DiffArray:
    """Clamp; gradient passes only where the input lies inside [lo, hi]."""
    out_values = np.clip(a.values, lo, hi)

    def build(out):
        def backward():
            inside = (a.values >= lo) & (a.values <= hi)
            _acc(a, out.grad * inside)

        return backward

    ai = a.node_id
    return _emit("clip", (a,), out_values, build, lambda v: np.clip(v[ai], lo, hi))


def extract_patches(image: DiffArray, patch: int) -> DiffArray:
    """Tile an (H, W) image into ((H/p)*(W/p), p*p) row-major flat patches.

    Also accepts a (B, H, W) stack, yielding (B, T, p*p).
    """
    v = image.values
    H, W = v.shape[-2], v.shape[-1]
    if H % patch or W % patch:
        raise DimensionError(f"image {H}x{W} not divisible by patch size {patch}")
    gh, gw = H // patch, W // patch

    def tile(arr):
        lead = arr.shape[:-2]
        r = arr.reshape(*lead, gh, patch, gw, patch)
        r = np.swapaxes(r, -3, -2)
        return r.reshape(*lead, gh * gw, patch * patch)

    out_values = tile(v)

    def build(out):
        def backward():
            g = out.grad
            lead = g.shape[:-2]
            r = g.reshape(*lead, gh, gw, patch, patch)
            r = np.swapaxes(r, -3, -2)
            _acc(image, r.reshape(*lead, H, W))

        return backward

    ii = image.node_id
    return _emit("extract_patches", (image,), out_values, build, lambda v2: tile(v2[ii]))


def reassemble_patches(flat: np.ndarray, patch: int, H: int, W: int) -> np.ndarray:
    """Inverse of :func:`extract_patches` on plain arrays (lossless)."""
    gh, gw = H // patch, W // patch
    r = np.asarray(flat).reshape(gh, gw, patch, patch)
    r = np.swapaxes(r, 1, 2)
    return r.reshape(H, W)


# ---------------------------------------------------------------------------
# optimizer

ADAM_LR = 3e-4
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


class Adam:
    """Standard Adam with bias correction over a named parameter dict.

    ``lr_scales`` maps name prefixes to learning-rate multipliers, so a
    parameter group (e.g. the fusion sublayers) can train faster than the
    rest without a separate optimizer.
    """

    def __init__(self, params: dict[str, DiffArray], lr: float = ADAM_LR,
                 betas: tuple[float, float] = ADAM_BETAS, eps: float = ADAM_EPS,
                 lr_scales: dict[str, float] | None = None):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.values) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.values) for k, p in params.items()}
        self.rates = {}
        for name in params:
            rate = lr
            for prefix, mult in (lr_scales or {}).items():
                if name.startswith(prefix):
                    rate = lr * mult
            self.rates[name] = rate

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name, p in self.params.items():
            g = p.grad
            if not np.all(np.isfinite(g)):
                raise TrainingDivergenceError(f"non-finite gradient in parameter '{name}'")
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            mhat = self.m[name] / (1 - b1 ** self.t)
            vhat = self.v[name] / (1 - b2 ** self.t)
            p.values -= self.rates[name] * mhat / (np.sqrt(vhat) + self.eps)


# ---------------------------------------------------------------------------
# gradient checking

def finite_difference_check(build_loss, leaves: list[DiffArray], h: float = 1e-4,
                            rtol: float = 1e-4, atol: float = 1e-7) -> float:
    """Compare tape gradients of ``build_loss()`` against central differences.

    ``build_loss`` must construct a scalar DiffArray from ``leaves`` using
    ops from this module each time it is called. Returns the worst relative
    error; raises AssertionError when any element exceeds tolerance.
    """
    with Tape() as tape:
        loss = build_loss()
    for leaf in leaves:
        leaf.zero_grad()
    tape.backward(loss)
    analytic = [leaf.grad.copy() for leaf in leaves]

    worst = 0.0
    for k, leaf in enumerate(leaves):
        flat = leaf.values.reshape(-1)
        num = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = float(build_loss().values)
            flat[i] = orig - h
            dn = float(build_loss().values)
            flat[i] = orig
            num[i] = (up - dn) / (2 * h)
        num = num.reshape(leaf.values.shape)
        denom = np.maximum(np.maximum(np.abs(num), np.abs(analytic[k])), atol / rtol)
        rel = np.abs(analytic[k] - num) / denom
        worst = max(worst, float(rel.max()) if rel.size else 0.0)
        if not np.all(np.abs(analytic[k] - num) <= rtol * denom):
            j = int(np.argmax(rel))
            raise AssertionError(
                f"gradient mismatch in leaf {k} at flat index {j}: "
                f"analytic {analytic[k].reshape(-1)[j]:.8g} vs numeric {num.reshape(-1)[j]:.8g}"
            )
    return worst
