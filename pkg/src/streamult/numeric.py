"""Dense float64 primitives with a small dynamic reverse-mode tape.

Every activation in the model is a :class:`Tensor`. Operations record their
parents and a backward closure only while gradient recording is enabled and
at least one input requires a gradient, so inference under :func:`no_grad`
keeps no graph alive.

Frame projections (:func:`linear`, :func:`conv1d`) accumulate their inner
products in a fixed column order that does not depend on how many rows are
processed together. A row projected alone is therefore bit-identical to the
same row projected inside a larger batch, which is what lets cached keys and
values match a recomputation exactly.
"""

from __future__ import annotations

import contextlib
import math
from collections.abc import Callable, Iterator, Sequence
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, MaskError, NonFiniteError, ShapeError

_grad_enabled = True


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """A 1-, 2- or 3-D float64 array that can take part in backpropagation."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        _parents: tuple[Tensor, ...] = (),
        _backward: Callable | None = None,
    ):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim not in (1, 2, 3):
            raise ShapeError(f"tensors are 1-, 2- or 3-D, got shape {arr.shape}")
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"non-finite entries in matrix of shape {arr.shape}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[-1]

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        flag = ", requires_grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(_as_tensor(other), scale(self, -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, _as_tensor(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every leaf that requires it."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        pending: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(_topological_order(self)):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = pg if key not in pending else pending[key] + pg


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, finished = stack.pop()
        if finished:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def _as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _result(data: np.ndarray, parents: tuple[Tensor, ...], backward: Callable) -> Tensor:
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=parents, _backward=backward)
    return Tensor(data)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def zeros(rows: int, cols: int) -> Tensor:
    return Tensor(np.zeros((rows, cols)))


# ---------------------------------------------------------------------------
# Elementwise and structural ops
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeError(f"cannot add shapes {a.shape} and {b.shape}") from None

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(out, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"elementwise product needs equal shapes, got {a.shape} and {b.shape}")

    def backward(g):
        return g * b.data, g * a.data

    return _result(a.data * b.data, (a, b), backward)


def scale(x: Tensor, factor: float) -> Tensor:
    return _result(x.data * factor, (x,), lambda g: (g * factor,))


def relu(x: Tensor) -> Tensor:
    positive = x.data > 0
    return _result(np.where(positive, x.data, 0.0), (x,), lambda g: (g * positive,))


def absolute(x: Tensor) -> Tensor:
    return _result(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


def square(x: Tensor) -> Tensor:
    return _result(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,))


def sum_all(x: Tensor) -> Tensor:
    return _result(np.array([x.data.sum()]), (x,), lambda g: (np.full(x.shape, g[0]),))


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    if n == 0:
        raise ShapeError("mean of an empty matrix")
    return scale(sum_all(x), 1.0 / n)


def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError(f"transpose needs a matrix, got shape {x.shape}")
    return _result(x.data.T.copy(), (x,), lambda g: (g.T,))


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ShapeError("concat_rows needs at least one block")
    widths = {p.cols for p in parts}
    if len(widths) != 1:
        raise ShapeError(f"row blocks have different widths: {[p.shape for p in parts]}")
    if len(parts) == 1:
        return parts[0]
    out = np.concatenate([p.data for p in parts], axis=0)
    cuts = np.cumsum([p.rows for p in parts])[:-1]

    def backward(g):
        return tuple(np.split(g, cuts, axis=0))

    return _result(out, tuple(parts), backward)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ShapeError("concat_cols needs at least one block")
    heights = {p.rows for p in parts}
    if len(heights) != 1:
        raise ShapeError(f"column blocks have different heights: {[p.shape for p in parts]}")
    if len(parts) == 1:
        return parts[0]
    out = np.concatenate([p.data for p in parts], axis=1)
    cuts = np.cumsum([p.cols for p in parts])[:-1]

    def backward(g):
        return tuple(np.split(g, cuts, axis=1))

    return _result(out, tuple(parts), backward)


def take_rows(x: Tensor, index) -> Tensor:
    """Select rows by slice or integer array (repeats allowed)."""
    if isinstance(index, slice):
        out = x.data[index].copy()

        def backward(g):
            full = np.zeros_like(x.data)
            full[index] = g
            return (full,)

        return _result(out, (x,), backward)
    idx = np.asarray(index, dtype=np.intp)
    out = x.data[idx]

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        return (full,)

    return _result(out, (x,), backward)


def take_cols(x: Tensor, start: int, stop: int) -> Tensor:
    def backward(g):
        full = np.zeros_like(x.data)
        full[:, start:stop] = g
        return (full,)

    return _result(x.data[:, start:stop].copy(), (x,), backward)


def mean_rows(x: Tensor) -> Tensor:
    """Column-wise mean as a 1-row matrix."""
    n = x.rows
    if n == 0:
        raise ShapeError("mean of zero rows")

    def backward(g):
        return (np.repeat(g / n, n, axis=0),)

    return _result(x.data.sum(axis=0, keepdims=True) / n, (x,), backward)


# ---------------------------------------------------------------------------
# Products
# ---------------------------------------------------------------------------


def _rowwise_matmul(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    # Accumulate over the inner index in order k = 0..p-1 with separate
    # multiply and add, one row at a time in effect.
    out = np.zeros((x.shape[0], w.shape[1]))
    for k in range(x.shape[1]):
        out += x[:, k : k + 1] * w[k]
    return out


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w (+ b)`` with row-independent accumulation order."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.cols != w.rows:
        raise ShapeError(f"linear: cannot multiply {x.shape} by {w.shape}")
    if b is not None and b.shape not in ((w.cols,), (1, w.cols)):
        raise ShapeError(f"linear: bias shape {b.shape} does not match output width {w.cols}")
    out = _rowwise_matmul(x.data, w.data)
    if b is not None:
        out = out + b.data

    def backward(g):
        gx = g @ w.data.T
        gw = x.data.T @ g
        if b is None:
            return gx, gw
        return gx, gw, _unbroadcast(g, b.shape)

    parents = (x, w) if b is None else (x, w, b)
    return _result(out, parents, backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Plain BLAS product, used inside attention where rows never move between batches."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.cols != b.rows:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return _result(a.data @ b.data, (a, b), backward)


# ---------------------------------------------------------------------------
# Normalization, softmax, attention
# ---------------------------------------------------------------------------


class AttentionMask:
    """Boolean admissibility table of shape (queries, keys)."""

    def __init__(self, allowed):
        allowed = np.asarray(allowed, dtype=bool)
        if allowed.ndim != 2:
            raise ShapeError(f"attention mask must be 2-D, got shape {allowed.shape}")
        empty = ~allowed.any(axis=1)
        if allowed.shape[1] == 0 or empty.any():
            rows = np.flatnonzero(empty).tolist() if allowed.shape[1] else list(range(allowed.shape[0]))
            raise MaskError(f"query rows {rows} have no admissible key")
        self.allowed = allowed

    @property
    def shape(self) -> tuple[int, int]:
        return self.allowed.shape


def softmax_rows(m: Tensor, mask: AttentionMask | np.ndarray | None = None) -> Tensor:
    """Row-wise softmax; masked cells are exactly zero."""
    z = m.data
    if z.ndim != 2:
        raise ShapeError(f"softmax_rows needs a matrix, got shape {m.shape}")
    if mask is not None:
        if not isinstance(mask, AttentionMask):
            mask = AttentionMask(mask)
        if mask.shape != z.shape:
            raise ShapeError(f"mask shape {mask.shape} does not match scores {z.shape}")
        z = np.where(mask.allowed, z, -np.inf)
    elif z.shape[1] == 0 and z.shape[0] > 0:
        raise MaskError("softmax over zero keys")
    if z.shape[0] == 0:
        p = np.zeros(z.shape)
    else:
        e = np.exp(z - z.max(axis=1, keepdims=True))
        p = e / e.sum(axis=1, keepdims=True)
        if mask is not None:
            p = np.where(mask.allowed, p, 0.0)

    def backward(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return _result(p, (m,), backward)


def _row_sum(x: np.ndarray) -> np.ndarray:
    total = np.zeros((x.shape[0], 1))
    for c in range(x.shape[1]):
        total += x[:, c : c + 1]
    return total


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    n, d = x.shape
    if d < 2:
        raise ShapeError("layer_norm needs at least two features")
    if eps <= 0:
        raise ConfigError(f"layer_norm eps must be positive, got {eps}")
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm gain/bias {gain.shape}/{bias.shape} do not match width {d}")
    mu = _row_sum(x.data) / d
    centered = x.data - mu
    var = _row_sum(centered * centered) / d
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        gxhat = g * gain.data
        gx = inv / d * (d * gxhat - gxhat.sum(axis=1, keepdims=True) - xhat * (gxhat * xhat).sum(axis=1, keepdims=True))
        return gx, (g * xhat).sum(axis=0), g.sum(axis=0)

    return _result(out, (x, gain, bias), backward)


@dataclass
class LayerNormWeights:
    gain: Tensor
    bias: Tensor

    def __call__(self, x: Tensor, eps: float = 1e-5) -> Tensor:
        return layer_norm(x, self.gain, self.bias, eps)


@dataclass
class AttentionWeights:
    """Query/key/value/output projections, each ``d x d``."""

    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor


def attend(q: Tensor, k: Tensor, v: Tensor, w_o: Tensor, heads: int, mask=None) -> Tensor:
    """Multi-head attention on already-projected queries, keys and values."""
    d = q.cols
    if d % heads:
        raise ConfigError(f"feature width {d} is not divisible by {heads} heads")
    if k.cols != d or v.cols != d or k.rows != v.rows:
        raise ShapeError(f"attention operands disagree: q {q.shape}, k {k.shape}, v {v.shape}")
    if q.rows == 0:
        return zeros(0, w_o.cols)
    dk = d // heads
    factor = 1.0 / math.sqrt(dk)
    outputs = []
    for h in range(heads):
        lo, hi = h * dk, (h + 1) * dk
        qh, kh, vh = (q, k, v) if heads == 1 else (take_cols(q, lo, hi), take_cols(k, lo, hi), take_cols(v, lo, hi))
        weights = softmax_rows(scale(matmul(qh, transpose(kh)), factor), mask)
        outputs.append(matmul(weights, vh))
    return linear(concat_cols(outputs), w_o)


def multi_head_attention(
    queries_in: Tensor,
    keys_in: Tensor,
    values_in: Tensor,
    weights: AttentionWeights,
    heads: int,
    mask=None,
) -> Tensor:
    q = linear(queries_in, weights.w_q)
    k = linear(keys_in, weights.w_k)
    v = linear(values_in, weights.w_v)
    return attend(q, k, v, weights.w_o, heads, mask)


@dataclass
class FeedForwardWeights:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


def ffn(x: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    return linear(relu(linear(x, w1, b1)), w2, b2)


def conv1d(x: Tensor, kernel: Tensor) -> Tensor:
    """Temporal convolution over rows with zero "same" padding.

    ``kernel`` has shape ``(k, d_in, d_out)``; offset ``o`` multiplies the
    frame ``t + o - k // 2``.
    """
    if kernel.data.ndim != 3:
        raise ShapeError(f"conv kernel must be (k, d_in, d_out), got {kernel.shape}")
    k, d_in, d_out = kernel.shape
    if k % 2 == 0:
        raise ConfigError(f"conv kernel size must be odd for symmetric padding, got {k}")
    if x.data.ndim != 2 or x.cols != d_in:
        raise ShapeError(f"conv1d: input {x.shape} does not match kernel {kernel.shape}")
    steps = x.rows
    if steps == 0:
        raise ShapeError("conv1d needs at least one frame")
    half = k // 2
    padded = np.zeros((steps + 2 * half, d_in))
    padded[half : half + steps] = x.data
    out = np.zeros((steps, d_out))
    for o in range(k):
        window = padded[o : o + steps]
        for c in range(d_in):
            out += window[:, c : c + 1] * kernel.data[o, c]

    def backward(g):
        gpad = np.zeros_like(padded)
        gk = np.empty_like(kernel.data)
        for o in range(k):
            gpad[o : o + steps] += g @ kernel.data[o].T
            gk[o] = padded[o : o + steps].T @ g
        return gpad[half : half + steps], gk

    return _result(out, (x, kernel), backward)


# ---------------------------------------------------------------------------
# Parameters and gradient checking
# ---------------------------------------------------------------------------


class ParamTape:
    """Ordered registry of named parameters."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, data) -> Tensor:
        if name in self._params:
            raise ConfigError(f"duplicate parameter name {name!r}")
        param = Tensor(np.array(data, dtype=np.float64), requires_grad=True)
        self._params[name] = param
        return param

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __iter__(self):
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self._params.values())

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad = np.zeros_like(p.data)

    def grad(self, name: str) -> np.ndarray:
        g = self._params[name].grad
        return np.zeros_like(self._params[name].data) if g is None else g

    def flat(self) -> np.ndarray:
        if not self._params:
            return np.zeros(0)
        return np.concatenate([p.data.reshape(-1) for p in self._params.values()])

    def load_flat(self, values: np.ndarray) -> None:
        values = np.asarray(values, dtype=np.float64)
        if values.size != self.num_parameters():
            raise ShapeError(f"expected {self.num_parameters()} values, got {values.size}")
        offset = 0
        for p in self._params.values():
            n = p.data.size
            p.data[...] = values[offset : offset + n].reshape(p.shape)
            offset += n


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_parameter: str | None
    worst_index: tuple[int, ...] | None
    checked: int
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol


def grad_check(
    f: Callable[[ParamTape], Tensor],
    params: ParamTape,
    eps: float = 1e-6,
    tol: float = 1e-4,
) -> GradCheckReport:
    """Compare reverse-mode gradients to central finite differences, coordinate by coordinate.

    The relative error of a coordinate is ``|g_ad - g_fd| / max(1, |g_ad|, |g_fd|)``.
    """
    if not 1e-7 <= eps <= 1e-4:
        raise ConfigError(f"finite-difference step must lie in [1e-7, 1e-4], got {eps}")
    params.zero_grad()
    loss = f(params)
    loss.backward()
    analytic = {name: params.grad(name).copy() for name in params}

    def evaluate(name: str) -> float:
        try:
            with no_grad():
                value = f(params).item()
        except NonFiniteError as exc:
            raise NonFiniteError(f"loss became non-finite while perturbing {name!r}: {exc}") from None
        if not math.isfinite(value):
            raise NonFiniteError(f"loss became non-finite while perturbing {name!r}")
        return value

    worst, worst_name, worst_index, checked = 0.0, None, None, 0
    for name, param in params.items():
        for index in np.ndindex(param.shape):
            original = param.data[index]
            param.data[index] = original + eps
            plus = evaluate(name)
            param.data[index] = original - eps
            minus = evaluate(name)
            param.data[index] = original
            numeric = (plus - minus) / (2 * eps)
            g = analytic[name][index]
            err = float(abs(g - numeric) / max(1.0, abs(g), abs(numeric)))
            checked += 1
            if err > worst or worst_name is None:
                worst, worst_name, worst_index = err, name, tuple(int(i) for i in index)
    return GradCheckReport(worst, worst_name, worst_index, checked, tol)
