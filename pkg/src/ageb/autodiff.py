"""Dense float32 tensors with reverse-mode differentiation.

The operation set is exactly what the toolkit's small transformer needs:
matrix products (2-D and stacked 3-D), row softmax, layer normalisation,
GELU, cross-entropy, plus shape plumbing (reshape, head split/merge, token
concat/select, bias adds). There is no general broadcasting; every shape
combination an operation accepts is listed in its checks.

Values are stored as immutable float32 arrays. Gradients never live on the
tensors themselves: ``backward`` walks the recorded graph once in reverse
topological order and returns a :class:`Gradients` table, so parameter
tensors can be shared freely across concurrent read-only workers.

Numerically sensitive reductions (softmax, layer-norm statistics, the
cross-entropy log-sum-exp and their backward formulas) run in float64
internally and cast their results back to float32.
"""

from __future__ import annotations

import math
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ShapeError

DTYPE = np.float32

LAYERNORM_EPS = 1e-5

# sqrt(2/pi), used by the tanh form of GELU
_GELU_C = 0.7978845608028654
_GELU_A = 0.044715


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


class Tensor:
    """A node in the computation graph: a float32 array plus provenance.

    ``data`` is read-only once the tensor exists. ``_parents`` and ``_vjp``
    record how the value was produced; leaves have neither.
    """

    __slots__ = ("data", "requires_grad", "_parents", "_vjp")

    def __init__(
        self,
        data: np.ndarray,
        requires_grad: bool = False,
        _parents: tuple["Tensor", ...] = (),
        _vjp: Optional[Callable[[np.ndarray], tuple]] = None,
    ):
        self.data = _freeze(data)
        self.requires_grad = requires_grad
        self._parents = _parents
        self._vjp = _vjp

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def tensor(data, requires_grad: bool = False) -> Tensor:
    """Wrap array-like data as a leaf tensor (copied, cast to float32)."""
    arr = np.array(data, dtype=DTYPE)
    if not np.all(np.isfinite(arr)):
        raise ValueError("tensor data must be finite (no NaN/Inf)")
    return Tensor(arr, requires_grad=requires_grad)


def _result(data: np.ndarray, parents: tuple[Tensor, ...], vjp) -> Tensor:
    req = any(p.requires_grad for p in parents)
    return Tensor(
        np.ascontiguousarray(data, dtype=DTYPE),
        requires_grad=req,
        _parents=parents if req else (),
        _vjp=vjp if req else None,
    )


def topo_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` through grad-requiring edges, parents first.

    Deterministic: traversal follows the recorded parent order, so repeated
    calls on the same graph yield the same list.
    """
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
        for parent in reversed(node._parents):
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


class Gradients:
    """Gradient slots for one backward pass, keyed by graph node.

    Keeps the node list alive so ``id``-based lookup stays valid.
    """

    def __init__(self, nodes: list[Tensor], table: dict[int, np.ndarray]):
        self._nodes = nodes
        self._table = table

    def get(self, t: Tensor) -> Optional[np.ndarray]:
        return self._table.get(id(t))

    def __contains__(self, t: Tensor) -> bool:
        return id(t) in self._table


def backward(root: Tensor, seed: Optional[np.ndarray] = None) -> Gradients:
    """Reverse-mode sweep from ``root``; returns gradients for every node.

    ``root`` must be a scalar unless ``seed`` supplies the output gradient.
    Each node is visited exactly once; accumulation order is fixed by the
    topological order, so results are bit-reproducible.
    """
    if seed is None:
        if root.data.size != 1:
            raise ShapeError(
                f"backward on non-scalar of shape {root.shape} requires a seed gradient"
            )
        seed = np.ones_like(root.data)
    if seed.shape != root.data.shape:
        raise ShapeError(f"seed shape {seed.shape} != root shape {root.shape}")

    order = topo_order(root)
    table: dict[int, np.ndarray] = {id(root): seed.astype(DTYPE)}
    for node in reversed(order):
        grad = table.get(id(node))
        if grad is None or node._vjp is None:
            continue
        for parent, pg in zip(node._parents, node._vjp(grad)):
            if pg is None or not parent.requires_grad:
                continue
            pg = np.ascontiguousarray(pg, dtype=DTYPE)
            if pg.shape != parent.data.shape:
                raise ShapeError(
                    f"gradient shape {pg.shape} != value shape {parent.data.shape}"
                )
            held = table.get(id(parent))
            table[id(parent)] = pg if held is None else held + pg
    return Gradients(order, table)


# ---------------------------------------------------------------------------
# arithmetic
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum of two same-shape tensors."""
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
    return _result(a.data + b.data, (a, b), lambda g: (g, g))


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add ``b`` along the trailing axes of ``x`` (b.shape == x.shape[-b.ndim:])."""
    if b.data.ndim > x.data.ndim or x.shape[x.data.ndim - b.data.ndim :] != b.shape:
        raise ShapeError(f"add_bias: bias {b.shape} does not suffix {x.shape}")
    lead = x.data.ndim - b.data.ndim

    def vjp(g):
        gb = g.sum(axis=tuple(range(lead))) if lead else g
        return g, gb

    return _result(x.data + b.data, (x, b), vjp)


def mul_scalar(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result(x.data * DTYPE(c), (x,), lambda g: (g * DTYPE(c),))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product: 2-D x 2-D, stacked 3-D x shared 2-D, or 3-D x 3-D."""
    ad, bd = a.data, b.data
    if ad.ndim == 2 and bd.ndim == 2:
        if ad.shape[1] != bd.shape[0]:
            raise ShapeError(f"matmul: inner dims of {ad.shape} x {bd.shape} disagree")

        def vjp(g):
            return g @ bd.T, ad.T @ g

    elif ad.ndim == 3 and bd.ndim == 2:
        if ad.shape[2] != bd.shape[0]:
            raise ShapeError(f"matmul: inner dims of {ad.shape} x {bd.shape} disagree")

        def vjp(g):
            ga = g @ bd.T
            a2 = ad.reshape(-1, ad.shape[2])
            g2 = g.reshape(-1, g.shape[2])
            return ga, a2.T @ g2

    elif ad.ndim == 3 and bd.ndim == 3:
        if ad.shape[0] != bd.shape[0] or ad.shape[2] != bd.shape[1]:
            raise ShapeError(f"matmul: stacked shapes {ad.shape} x {bd.shape} disagree")

        def vjp(g):
            return g @ bd.swapaxes(-1, -2), ad.swapaxes(-1, -2) @ g

    else:
        raise ShapeError(f"matmul: unsupported ranks {ad.shape} x {bd.shape}")
    return _result(np.matmul(ad, bd), (a, b), vjp)


def transpose_last2(x: Tensor) -> Tensor:
    if x.data.ndim < 2:
        raise ShapeError(f"transpose_last2: rank-{x.data.ndim} input {x.shape}")
    return _result(x.data.swapaxes(-1, -2), (x,), lambda g: (g.swapaxes(-1, -2),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if math.prod(shape) != x.data.size:
        raise ShapeError(f"reshape: {x.shape} has {x.data.size} values, target {shape}")
    old = x.data.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


# ---------------------------------------------------------------------------
# token / head plumbing
# ---------------------------------------------------------------------------


def split_heads(x: Tensor, heads: int) -> Tensor:
    """[B, T, D] -> [B*heads, T, D/heads], folding heads into the batch axis."""
    B, T, D = _expect_rank(x, 3, "split_heads")
    if D % heads != 0:
        raise ShapeError(f"split_heads: width {D} not divisible by {heads} heads")
    dh = D // heads
    out = x.data.reshape(B, T, heads, dh).transpose(0, 2, 1, 3).reshape(B * heads, T, dh)

    def vjp(g):
        return (g.reshape(B, heads, T, dh).transpose(0, 2, 1, 3).reshape(B, T, D),)

    return _result(out, (x,), vjp)


def merge_heads(x: Tensor, heads: int) -> Tensor:
    """[B*heads, T, dh] -> [B, T, heads*dh]; inverse of :func:`split_heads`."""
    BH, T, dh = _expect_rank(x, 3, "merge_heads")
    if BH % heads != 0:
        raise ShapeError(f"merge_heads: batch axis {BH} not divisible by {heads} heads")
    B = BH // heads
    out = x.data.reshape(B, heads, T, dh).transpose(0, 2, 1, 3).reshape(B, T, heads * dh)

    def vjp(g):
        return (g.reshape(B, T, heads, dh).transpose(0, 2, 1, 3).reshape(BH, T, dh),)

    return _result(out, (x,), vjp)


def concat_tokens(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate two [B, T, D] tensors along the token axis."""
    if a.data.ndim != 3 or b.data.ndim != 3:
        raise ShapeError(f"concat_tokens: ranks {a.shape} / {b.shape}")
    if a.shape[0] != b.shape[0] or a.shape[2] != b.shape[2]:
        raise ShapeError(f"concat_tokens: shapes {a.shape} and {b.shape} disagree")
    ta = a.shape[1]

    def vjp(g):
        return g[:, :ta, :], g[:, ta:, :]

    return _result(np.concatenate([a.data, b.data], axis=1), (a, b), vjp)


def select_token(x: Tensor, index: int) -> Tensor:
    """Pick one token: [B, T, D] -> [B, D]."""
    B, T, D = _expect_rank(x, 3, "select_token")
    if not 0 <= index < T:
        raise ShapeError(f"select_token: index {index} outside {T} tokens")

    def vjp(g):
        gx = np.zeros((B, T, D), dtype=DTYPE)
        gx[:, index, :] = g
        return (gx,)

    return _result(x.data[:, index, :], (x,), vjp)


def repeat_batch(x: Tensor, batch: int) -> Tensor:
    """Tile a [1, D] row into [batch, 1, D] (class-token expansion)."""
    if x.data.ndim != 2 or x.shape[0] != 1:
        raise ShapeError(f"repeat_batch: expected [1, D], got {x.shape}")
    out = np.repeat(x.data[None, :, :], batch, axis=0)
    return _result(out, (x,), lambda g: (g.sum(axis=0),))


def _expect_rank(x: Tensor, rank: int, op: str) -> tuple[int, ...]:
    if x.data.ndim != rank:
        raise ShapeError(f"{op}: expected rank-{rank} input, got {x.shape}")
    return x.shape


# ---------------------------------------------------------------------------
# nonlinear blocks
# ---------------------------------------------------------------------------


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis, stabilised by per-row max subtraction.

    Elementwise math runs in float32; the normalising row sum accumulates in
    float64 so each output row sums to 1 within per-entry cast error.
    """
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    denom = e.sum(axis=-1, keepdims=True, dtype=np.float64).astype(DTYPE)
    probs = e / denom

    def vjp(g):
        inner = (g * probs).sum(axis=-1, keepdims=True)
        return (probs * (g - inner),)

    return _result(probs, (x,), vjp)


def layernorm(x: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    """Normalise each vector along the last axis, then apply the affine pair."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(
            f"layernorm: gain {gain.shape} / bias {bias.shape} must be ({d},)"
        )
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True, dtype=np.float64)
    var = (np.square(xd - mu.astype(DTYPE))).mean(axis=-1, keepdims=True, dtype=np.float64)
    inv = (1.0 / np.sqrt(var + LAYERNORM_EPS)).astype(DTYPE)
    xhat = (xd - mu.astype(DTYPE)) * inv
    out = xhat * gain.data + bias.data

    def vjp(g):
        gxhat = g * gain.data
        lead = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=lead, dtype=np.float64)
        dbias = g.sum(axis=lead, dtype=np.float64)
        dx = inv * (
            gxhat
            - gxhat.mean(axis=-1, keepdims=True, dtype=np.float64).astype(DTYPE)
            - xhat
            * (gxhat * xhat).mean(axis=-1, keepdims=True, dtype=np.float64).astype(DTYPE)
        )
        return dx.astype(DTYPE), dgain.astype(DTYPE), dbias.astype(DTYPE)

    return _result(out, (x, gain, bias), vjp)


def gelu(x: Tensor) -> Tensor:
    """GELU nonlinearity, tanh approximation."""
    xd = x.data
    c = DTYPE(_GELU_C)
    a = DTYPE(_GELU_A)
    half = DTYPE(0.5)
    sq = xd * xd
    t = np.tanh(c * (xd + a * (sq * xd)))
    out = half * xd * (DTYPE(1.0) + t)

    def vjp(g):
        du = c * (DTYPE(1.0) + DTYPE(3.0) * a * sq)
        local = half * (DTYPE(1.0) + t) + half * xd * (DTYPE(1.0) - t * t) * du
        return (g * local,)

    return _result(out, (x,), vjp)


def cross_entropy(logits: Tensor, labels: Sequence[int]) -> Tensor:
    """Mean negative log-softmax of the true class over a [b, K] batch."""
    if logits.data.ndim != 2:
        raise ShapeError(f"cross_entropy: expected [batch, classes], got {logits.shape}")
    b, k = logits.shape
    idx = np.asarray(labels, dtype=np.int64)
    if idx.shape != (b,):
        raise ShapeError(f"cross_entropy: {len(idx)} labels for batch of {b}")
    if idx.size and (idx.min() < 0 or idx.max() >= k):
        raise ValueError(f"cross_entropy: label outside [0, {k})")

    z = logits.data.astype(np.float64)
    m = z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z - m).sum(axis=1, keepdims=True)) + m
    loss = float((lse[:, 0] - z[np.arange(b), idx]).mean())
    probs = np.exp(z - lse)

    def vjp(g):
        onehot = np.zeros((b, k))
        onehot[np.arange(b), idx] = 1.0
        return ((float(g) * (probs - onehot) / b).astype(DTYPE),)

    return _result(np.float64(loss), (logits,), vjp)
