"""Dense-tensor reverse-mode autodiff on top of numpy.

Only the primitives the elastic hybrid model needs are provided. Every
primitive records a closure computing the adjoint of its inputs; ``backward``
replays them in reverse topological order.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """An ndarray plus the bookkeeping needed for reverse-mode differentiation."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def backward(self) -> dict["Tensor", np.ndarray]:
        return backward(self)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype if dtype is not None else np.float64)
    return Tensor(arr)


def _data(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def _node(out: np.ndarray, parents: Sequence, backward_fn: Callable) -> Tensor:
    """Wrap ``out`` and record ``backward_fn`` if any parent needs a gradient."""
    t = Tensor(out)
    if _GRAD_ENABLED:
        tparents = tuple(p for p in parents if isinstance(p, Tensor))
        if any(p.requires_grad for p in tparents):
            t.requires_grad = True
            t._parents = tuple(parents)
            t._backward = backward_fn
    return t


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _needs(x) -> bool:
    return isinstance(x, Tensor) and x.requires_grad


# ---------------------------------------------------------------------------
# backward


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Propagate d(loss)/d(.) to every leaf that requires a gradient.

    Returns a map from leaf tensor to gradient; the same arrays are stored on
    ``leaf.grad`` (overwriting any previous value).
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if isinstance(p, Tensor) and p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[Tensor, np.ndarray] = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g
            leaves[node] = g
            continue
        pgrads = node._backward(g)
        for p, pg in zip(node._parents, pgrads):
            if pg is None or not _needs(p):
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return leaves


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    ad, bd = _data(a), _data(b)
    out = ad + bd

    def bw(g):
        return (
            _unbroadcast(g, ad.shape) if _needs(a) else None,
            _unbroadcast(g, bd.shape) if _needs(b) else None,
        )

    return _node(out, (a, b), bw)


def sub(a, b) -> Tensor:
    ad, bd = _data(a), _data(b)
    out = ad - bd

    def bw(g):
        return (
            _unbroadcast(g, ad.shape) if _needs(a) else None,
            _unbroadcast(-g, bd.shape) if _needs(b) else None,
        )

    return _node(out, (a, b), bw)


def mul(a, b) -> Tensor:
    ad, bd = _data(a), _data(b)
    out = ad * bd

    def bw(g):
        return (
            _unbroadcast(g * bd, ad.shape) if _needs(a) else None,
            _unbroadcast(g * ad, bd.shape) if _needs(b) else None,
        )

    return _node(out, (a, b), bw)


def div(a, b) -> Tensor:
    ad, bd = _data(a), _data(b)
    out = ad / bd

    def bw(g):
        return (
            _unbroadcast(g / bd, ad.shape) if _needs(a) else None,
            _unbroadcast(-g * ad / (bd * bd), bd.shape) if _needs(b) else None,
        )

    return _node(out, (a, b), bw)


def neg(a) -> Tensor:
    return _node(-_data(a), (a,), lambda g: (-g,))


def exp(a) -> Tensor:
    out = np.exp(_data(a))
    return _node(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    ad = _data(a)
    return _node(np.log(ad), (a,), lambda g: (g / ad,))


def abs_(a) -> Tensor:
    ad = _data(a)
    return _node(np.abs(ad), (a,), lambda g: (g * np.sign(ad),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form cannot overflow
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a) -> Tensor:
    s = _sigmoid(_data(a))
    return _node(s, (a,), lambda g: (g * s * (1.0 - s),))


def silu(a) -> Tensor:
    ad = _data(a)
    s = _sigmoid(ad)
    out = ad * s
    return _node(out, (a,), lambda g: (g * s * (1.0 + ad * (1.0 - s)),))


def softplus(a) -> Tensor:
    ad = _data(a)
    out = np.logaddexp(0.0, ad).astype(ad.dtype, copy=False)
    return _node(out, (a,), lambda g: (g * _sigmoid(ad),))


def leaky_relu(a, slope: float = 0.01) -> Tensor:
    ad = _data(a)
    scale = np.where(ad > 0, 1.0, slope).astype(ad.dtype, copy=False)
    return _node(ad * scale, (a,), lambda g: (g * scale,))


# ---------------------------------------------------------------------------
# shape manipulation and reductions


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    ad = _data(a)
    out = np.sum(ad, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, ad.shape).copy(),)

    return _node(np.asarray(out), (a,), bw)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    ad = _data(a)
    n = ad.size if axis is None else np.prod([ad.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum_(a, axis, keepdims), 1.0 / float(n))


def reshape(a, shape) -> Tensor:
    ad = _data(a)
    return _node(ad.reshape(shape), (a,), lambda g: (g.reshape(ad.shape),))


def transpose(a, axes=None) -> Tensor:
    ad = _data(a)
    out = np.transpose(ad, axes)
    inv = None if axes is None else np.argsort(axes)
    return _node(out, (a,), lambda g: (np.transpose(g, inv),))


def getitem(a, index) -> Tensor:
    ad = _data(a)
    out = ad[index]

    def bw(g):
        full = np.zeros_like(ad)
        np.add.at(full, index, g)
        return (full,)

    return _node(np.array(out), (a,), bw)


def cumsum(a, axis: int = -1) -> Tensor:
    ad = _data(a)

    def bw(g):
        return (np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis),)

    return _node(np.cumsum(ad, axis=axis), (a,), bw)


def cast(a, dtype) -> Tensor:
    """Change precision; the gradient is cast back to the input's precision."""
    ad = _data(a)
    if ad.dtype == np.dtype(dtype):
        return a if isinstance(a, Tensor) else Tensor(ad)

    def bw(g):
        return (g.astype(ad.dtype),)

    return _node(ad.astype(dtype), (a,), bw)


def stack(items: Sequence, axis: int = 0) -> Tensor:
    arrs = [_data(t) for t in items]
    out = np.stack(arrs, axis=axis)

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(arrs)))

    return _node(out, tuple(items), bw)


def concat(items: Sequence, axis: int = 0) -> Tensor:
    arrs = [_data(t) for t in items]
    out = np.concatenate(arrs, axis=axis)
    bounds = np.cumsum([x.shape[axis] for x in arrs])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _node(out, tuple(items), bw)


def take_along(a, idx: np.ndarray, axis: int = -1) -> Tensor:
    """Gather ``a`` along ``axis`` with integer ``idx`` (same rank as ``a``)."""
    ad = _data(a)
    out = np.take_along_axis(ad, idx, axis=axis)

    def bw(g):
        full = np.zeros_like(ad)
        np.put_along_axis(full, idx, g, axis=axis)
        return (full,)

    return _node(out, (a,), bw)


def embedding(weight, idx: np.ndarray) -> Tensor:
    """Row lookup ``weight[idx]``; ``idx`` is an integer array of any shape."""
    wd = _data(weight)
    idx = np.asarray(idx)
    out = wd[idx]

    def bw(g):
        full = np.zeros_like(wd)
        np.add.at(full, idx.reshape(-1), g.reshape(-1, wd.shape[1]))
        return (full,)

    return _node(out, (weight,), bw)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading axes."""
    ad, bd = _data(a), _data(b)
    if ad.ndim < 2 or bd.ndim < 2:
        raise ValueError(f"matmul needs rank >= 2 operands, got ranks {ad.ndim} and {bd.ndim}")
    if ad.shape[-1] != bd.shape[-2]:
        raise ValueError(
            f"matmul inner dimension mismatch: left has {ad.shape[-1]} columns, "
            f"right has {bd.shape[-2]} rows"
        )
    out = ad @ bd

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if _needs(a) else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if _needs(b) else None
        return ga, gb

    return _node(out, (a, b), bw)


def linear(x, weight) -> Tensor:
    """``x @ weight.T`` for ``weight`` of shape (out, in)."""
    xd, wd = _data(x), _data(weight)
    if xd.shape[-1] != wd.shape[1]:
        raise ValueError(
            f"linear input dimension mismatch: input has {xd.shape[-1]} features, "
            f"weight expects {wd.shape[1]}"
        )
    out = xd @ wd.T

    def bw(g):
        gx = g @ wd if _needs(x) else None
        gw = None
        if _needs(weight):
            gw = g.reshape(-1, wd.shape[0]).T @ xd.reshape(-1, wd.shape[1])
        return gx, gw

    return _node(out, (x, weight), bw)


# ---------------------------------------------------------------------------
# normalisations and softmax


def softmax(a, axis: int = -1) -> Tensor:
    ad = _data(a)
    z = ad - ad.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _node(y, (a,), bw)


def log_softmax(a, axis: int = -1) -> Tensor:
    ad = _data(a)
    z = ad - ad.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def bw(g):
        p = np.exp(out)
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _node(out, (a,), bw)


def layer_norm(x, weights=None, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis without affine parameters.

    ``weights`` (nonnegative, broadcast against the last axis) restricts the
    mean/variance statistics to the weighted channels; a binary vector makes
    this exactly the layer norm of the selected channels.
    """
    xd = _data(x)
    if weights is None:
        w = np.ones(xd.shape[-1], dtype=xd.dtype)
    else:
        w = _data(weights)
        if w.shape[-1] != xd.shape[-1]:
            raise ValueError(
                f"layer_norm weight length {w.shape[-1]} does not match channel dim {xd.shape[-1]}"
            )
    S = w.sum(axis=-1, keepdims=True)
    mu = (w * xd).sum(axis=-1, keepdims=True) / S
    c = xd - mu
    v = (w * c * c).sum(axis=-1, keepdims=True) / S
    r = 1.0 / np.sqrt(v + eps)
    out = c * r

    def bw(g):
        sg = g.sum(axis=-1, keepdims=True)
        sgc = (g * c).sum(axis=-1, keepdims=True)
        gx = r * (g - w * sg / S) - (r**3) * w * c * sgc / S if _needs(x) else None
        gw = None
        if _needs(weights):
            gw = -(r * c / S) * sg - (r**3 / (2.0 * S)) * (c * c - v) * sgc
            gw = _unbroadcast(gw, w.shape)
        return gx, gw

    return _node(out, (x, weights), bw)


def rms_norm(x, weights=None, eps: float = 1e-5) -> Tensor:
    """Root-mean-square normalisation over the last axis (weighted like ``layer_norm``)."""
    xd = _data(x)
    if weights is None:
        w = np.ones(xd.shape[-1], dtype=xd.dtype)
    else:
        w = _data(weights)
        if w.shape[-1] != xd.shape[-1]:
            raise ValueError(
                f"rms_norm weight length {w.shape[-1]} does not match channel dim {xd.shape[-1]}"
            )
    S = w.sum(axis=-1, keepdims=True)
    q = (w * xd * xd).sum(axis=-1, keepdims=True) / S
    r = 1.0 / np.sqrt(q + eps)
    out = xd * r

    def bw(g):
        sgu = (g * xd).sum(axis=-1, keepdims=True)
        gx = r * g - (r**3) * w * xd * sgu / S if _needs(x) else None
        gw = None
        if _needs(weights):
            gw = _unbroadcast(-0.5 * (r**3) * (xd * xd - q) * sgu / S, w.shape)
        return gx, gw

    return _node(out, (x, weights), bw)


# ---------------------------------------------------------------------------
# sequence primitives


def causal_conv1d(x, kernel) -> Tensor:
    """Depthwise causal convolution.

    x: (batch, length, channels); kernel: (channels, width). Output position t
    sees inputs t-width+1 .. t, with zero left padding.
    """
    xd, kd = _data(x), _data(kernel)
    if xd.shape[-1] != kd.shape[0]:
        raise ValueError(
            f"causal_conv1d channel mismatch: input has {xd.shape[-1]} channels, "
            f"kernel has {kd.shape[0]}"
        )
    width = kd.shape[1]
    L = xd.shape[1]
    xp = np.concatenate([np.zeros(xd.shape[:1] + (width - 1,) + xd.shape[2:], dtype=xd.dtype), xd], axis=1)
    out = np.zeros_like(xd, dtype=np.result_type(xd, kd))
    for i in range(width):
        out += xp[:, i : i + L] * kd[:, i]

    def bw(g):
        gx = gk = None
        if _needs(x):
            gp = np.zeros_like(xp)
            for i in range(width):
                gp[:, i : i + L] += g * kd[:, i]
            gx = gp[:, width - 1 :]
        if _needs(kernel):
            gk = np.stack([(g * xp[:, i : i + L]).sum(axis=(0, 1)) for i in range(width)], axis=1)
        return gx, gk

    return _node(out, (x, kernel), bw)


SCAN_CHUNK = 64


def selective_scan(x, dt, a, B, C, D, chunk: int = SCAN_CHUNK) -> Tensor:
    """Scalar-decay multi-head selective state-space scan.

    Per head h with group g(h):
        state_t = exp(dt_t * a_h) * state_{t-1} + dt_t * outer(x_t, B_t)
        y_t     = state_t @ C_t + D_h * x_t

    Shapes: x (b, L, H, P); dt (b, L, H); a, D (H,); B, C (b, L, G, N) with
    H divisible by G and heads of one group contiguous.

    Sequences up to ``chunk`` long use the quadratic (masked-kernel) form
    directly. Longer ones run it inside each chunk and carry the state across
    chunk boundaries, so cost grows as L * chunk rather than L**2.
    """
    L = _data(x).shape[1]
    if L <= chunk:
        return _scan_quadratic(x, dt, a, B, C, D)
    return _scan_chunked(x, dt, a, B, C, D, chunk)


def _scan_chunked(x, dt, a, B, C, D, Q: int) -> Tensor:
    b, L, H, P = _data(x).shape
    G, N = _data(B).shape[2:]
    rep = H // G
    nc = -(-L // Q)
    pad = nc * Q - L
    if pad:
        def zpad(t):
            td = _data(t)
            return concat([t, np.zeros((b, pad) + td.shape[2:], dtype=td.dtype)], axis=1)
        x, dt, B, C = zpad(x), zpad(dt), zpad(B), zpad(C)

    xc = reshape(x, (b * nc, Q, H, P))
    dtc = reshape(dt, (b * nc, Q, H))
    Bc = reshape(B, (b * nc, Q, G, N))
    Cc = reshape(C, (b * nc, Q, G, N))
    y = reshape(_scan_quadratic(xc, dtc, a, Bc, Cc, D), (b, nc, Q, H, P))

    # cumulative log-decay inside each chunk, (b, nc, Q, H)
    acs = cumsum(mul(reshape(dt, (b, nc, Q, H)), a), axis=2)
    a_last = getitem(acs, (slice(None), slice(None), slice(Q - 1, Q)))
    w = mul(reshape(x, (b, nc, Q, H, P)),
            reshape(mul(reshape(dt, (b, nc, Q, H)), exp(sub(a_last, acs))), (b, nc, Q, H, 1)))
    # end-of-chunk state contributions, (b, nc, G, rep, P, N)
    w = transpose(reshape(w, (b, nc, Q, G, rep, P)), (0, 1, 3, 4, 5, 2))
    Bg = reshape(transpose(reshape(B, (b, nc, Q, G, N)), (0, 1, 3, 2, 4)), (b, nc, G, 1, Q, N))
    st = matmul(w, Bg)
    chunk_decay = exp(reshape(a_last, (b, nc, G, rep, 1, 1)))

    carried = [None]
    state = None
    for c in range(1, nc):
        prev = getitem(st, (slice(None), c - 1))
        if state is None:
            state = prev
        else:
            state = add(mul(state, getitem(chunk_decay, (slice(None), c - 1))), prev)
        carried.append(state)
    zero = np.zeros((b, G, rep, P, N), dtype=_data(x).dtype)
    S_in = stack([zero if s is None else s for s in carried], axis=1)  # (b, nc, G, rep, P, N)

    Cg = reshape(transpose(reshape(C, (b, nc, Q, G, N)), (0, 1, 3, 4, 2)), (b, nc, G, 1, N, Q))
    y_off = matmul(S_in, Cg)  # (b, nc, G, rep, P, Q)
    y_off = reshape(transpose(y_off, (0, 1, 5, 2, 3, 4)), (b, nc, Q, H, P))
    y_off = mul(y_off, reshape(exp(acs), (b, nc, Q, H, 1)))
    y = reshape(add(y, y_off), (b, nc * Q, H, P))
    if pad:
        y = getitem(y, (slice(None), slice(0, L)))
    return y


def _scan_quadratic(x, dt, a, B, C, D) -> Tensor:
    """Single-chunk scan in masked-kernel form with a hand-written adjoint."""
    xd, dtd, ad, Bd, Cd, Dd = (_data(v) for v in (x, dt, a, B, C, D))
    b, L, H, P = xd.shape
    G = Bd.shape[2]
    if dtd.shape != (b, L, H):
        raise ValueError(f"selective_scan dt shape {dtd.shape} does not match (batch, len, heads)={(b, L, H)}")
    if Bd.shape != Cd.shape or Bd.shape[:2] != (b, L):
        raise ValueError(f"selective_scan B/C shapes {Bd.shape} / {Cd.shape} incompatible with x {xd.shape}")
    if H % G:
        raise ValueError(f"selective_scan heads {H} not divisible by groups {G}")
    if ad.shape != (H,) or Dd.shape != (H,):
        raise ValueError(f"selective_scan decay/skip must have shape ({H},), got {ad.shape} and {Dd.shape}")
    rep = H // G

    xh = xd.transpose(0, 2, 1, 3)  # b H L P
    dth = dtd.transpose(0, 2, 1)  # b H L
    Bg = Bd.transpose(0, 2, 1, 3)  # b G L N
    Cg = Cd.transpose(0, 2, 1, 3)
    tril = np.tril(np.ones((L, L), dtype=bool))
    cs = np.cumsum(dth, axis=-1)
    seg = np.where(tril, cs[..., :, None] - cs[..., None, :], 0.0)
    E = np.exp(ad[None, :, None, None] * seg) * tril
    CB = Cg @ np.swapaxes(Bg, -1, -2)  # b G L(t) L(s)
    CBh = np.repeat(CB, rep, axis=1)
    W = CBh * E * dth[..., None, :]
    yh = W @ xh + Dd[None, :, None, None] * xh
    out = yh.transpose(0, 2, 1, 3)

    def bw(g):
        gyh = g.transpose(0, 2, 1, 3)
        gx = gdt = ga = gB = gC = gD = None
        if _needs(x):
            gxh = np.swapaxes(W, -1, -2) @ gyh + Dd[None, :, None, None] * gyh
            gx = gxh.transpose(0, 2, 1, 3)
        if _needs(D):
            gD = (gyh * xh).sum(axis=(0, 2, 3))
        if _needs(dt) or _needs(a) or _needs(B) or _needs(C):
            gW = (gyh @ np.swapaxes(xh, -1, -2)) * tril
            K = gW * W
            if _needs(a):
                ga = (K * seg).sum(axis=(0, 2, 3))
            if _needs(dt):
                gcs = ad[None, :, None] * (K.sum(-1) - K.sum(-2))
                gdth = (gW * CBh * E).sum(-2)
                gdth = gdth + np.cumsum(gcs[..., ::-1], axis=-1)[..., ::-1]
                gdt = gdth.transpose(0, 2, 1)
            if _needs(B) or _needs(C):
                gCB = (gW * E * dth[..., None, :]).reshape(b, G, rep, L, L).sum(axis=2)
                if _needs(C):
                    gC = (gCB @ Bg).transpose(0, 2, 1, 3)
                if _needs(B):
                    gB = (np.swapaxes(gCB, -1, -2) @ Cg).transpose(0, 2, 1, 3)
        return gx, gdt, ga, gB, gC, gD

    return _node(out, (x, dt, a, B, C, D), bw)


def selective_scan_reference(x, dt, a, B, C, D) -> np.ndarray:
    """Step-by-step recurrence; slow, used as an independent check of ``selective_scan``."""
    x, dt, a, B, C, D = (np.asarray(_data(v), dtype=np.float64) for v in (x, dt, a, B, C, D))
    b, L, H, P = x.shape
    G, N = B.shape[2], B.shape[3]
    rep = H // G
    state = np.zeros((b, H, P, N))
    y = np.zeros_like(x)
    for t in range(L):
        for h in range(H):
            grp = h // rep
            decay = np.exp(dt[:, t, h] * a[h])[:, None, None]
            state[:, h] = decay * state[:, h] + dt[:, t, h][:, None, None] * (
                x[:, t, h][:, :, None] * B[:, t, grp][:, None, :]
            )
            y[:, t, h] = (state[:, h] @ C[:, t, grp][:, :, None])[..., 0] + D[h] * x[:, t, h]
    return y


# ---------------------------------------------------------------------------
# random sampling and gradient checking


def gumbel_sample(shape, seed: int | np.random.Generator | None = None, u: np.ndarray | None = None) -> Tensor:
    """Standard Gumbel samples via ``-log(-log(u))``.

    ``seed`` may be an integer or an existing Generator. Passing ``u`` bypasses
    the uniform draw (values must lie in (0, 1)).
    """
    if u is None:
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        u = rng.random(shape)
        u = np.clip(u, np.finfo(np.float64).tiny, 1.0 - np.finfo(np.float64).epsneg)
    u = np.asarray(u, dtype=np.float64)
    return Tensor(-np.log(-np.log(u)))


def numeric_gradient(f: Callable[[], float], arr: np.ndarray, step: float, index=None) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` w.r.t. ``arr`` (mutated in place, then restored).

    ``index`` optionally restricts the check to an iterable of flat positions.
    """
    flat = arr.reshape(-1)
    positions = range(flat.size) if index is None else index
    grad = np.zeros(flat.size)
    for i in positions:
        orig = flat[i]
        flat[i] = orig + step
        fp = f()
        flat[i] = orig - step
        fm = f()
        flat[i] = orig
        grad[i] = (fp - fm) / (2.0 * step)
    return grad.reshape(arr.shape)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    return float(np.max(np.abs(analytic - numeric) / (np.abs(numeric) + 1e-8)))


def check_gradients(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    step: float = 1e-5,
    seed: int = 0,
    max_coords: int | None = None,
) -> float:
    """Compare analytic and central-difference gradients of ``sum(fn(*inputs) * R)``.

    R is a fixed random projection so every output element contributes. When
    ``max_coords`` is set only that many random coordinates per input are
    differenced. Returns the maximum relative error over all checked entries.
    """
    rng = np.random.default_rng(seed)
    with no_grad():
        probe = fn(*inputs)
    proj = rng.standard_normal(probe.shape)

    for t in inputs:
        t.requires_grad = True
        t.grad = None
    out = fn(*inputs)
    grads = backward(sum_(mul(out, proj)))

    def f() -> float:
        with no_grad():
            return float(np.sum(_data(fn(*inputs)) * proj))

    worst = 0.0
    for t in inputs:
        analytic = grads.get(t, np.zeros_like(t.data))
        idx = None
        if max_coords is not None and t.data.size > max_coords:
            idx = rng.choice(t.data.size, size=max_coords, replace=False)
        numeric = numeric_gradient(f, t.data, step, idx)
        if idx is None:
            worst = max(worst, relative_error(analytic, numeric))
        else:
            worst = max(worst, relative_error(analytic.reshape(-1)[idx], numeric.reshape(-1)[idx]))
    return worst


def _primitive_table() -> dict[str, Callable[[Tensor, np.random.Generator], Callable[[Tensor], Tensor]]]:
    """Single-input closures for each differentiable primitive (other operands fixed at random)."""

    def fixed(rng, *shape):
        return Tensor(rng.standard_normal(shape))

    def matmul_(t, rng):
        other = fixed(rng, t.shape[-1], 4)
        return lambda v: matmul(v, other)

    def linear_(t, rng):
        w = fixed(rng, 3, t.shape[-1])
        return lambda v: linear(v, w)

    def mul_(t, rng):
        other = fixed(rng, *t.shape)
        return lambda v: mul(v, other)

    def add_(t, rng):
        other = fixed(rng, *t.shape)
        return lambda v: add(v, other)

    def div_(t, rng):
        other = Tensor(rng.uniform(0.5, 2.0, t.shape))
        return lambda v: div(other, v * v + 1.0)

    def layer_norm_(t, rng):
        w = Tensor(rng.uniform(0.2, 1.0, t.shape[-1]))
        return lambda v: layer_norm(v, w)

    def rms_norm_(t, rng):
        w = Tensor(rng.uniform(0.2, 1.0, t.shape[-1]))
        return lambda v: rms_norm(v, w)

    def gated_rms_norm_(t, rng):
        z = fixed(rng, *t.shape)
        return lambda v: rms_norm(mul(v, silu(z)))

    def conv_(t, rng):
        k = fixed(rng, t.shape[-1], 4)
        return lambda v: causal_conv1d(v, k)

    def scan_(t, rng):
        # t supplies x of shape (b, L, H, P)
        b, L, H, P = t.shape
        G, N = 1 if H == 1 else 2, 3
        dt = Tensor(rng.uniform(0.1, 0.8, (b, L, H)))
        a = Tensor(-rng.uniform(0.2, 1.5, H))
        B = fixed(rng, b, L, G, N)
        C = fixed(rng, b, L, G, N)
        D = fixed(rng, H)
        return lambda v: selective_scan(v, dt, a, B, C, D)

    def unary(fn):
        return lambda t, rng: fn

    return {
        "add": add_,
        "mul": mul_,
        "div": div_,
        "matmul": matmul_,
        "linear": linear_,
        "exp": unary(exp),
        "log": unary(lambda v: log(v * v + 1.0)),
        "sigmoid": unary(sigmoid),
        "silu": unary(silu),
        "softplus": unary(softplus),
        "leaky_relu": unary(leaky_relu),
        "softmax": unary(softmax),
        "log_softmax": unary(log_softmax),
        "layer_norm": layer_norm_,
        "rms_norm": rms_norm_,
        "gated_rms_norm": gated_rms_norm_,
        "causal_conv1d": conv_,
        "selective_scan": scan_,
    }


PRIMITIVES = tuple(_primitive_table())


def grad_check(op_id: str, input: Tensor, step: float = 1e-5, seed: int = 0) -> float:
    """Max relative error between analytic and central-difference gradients of one primitive.

    ``input`` must be double precision. Auxiliary operands (the right-hand
    matrix of ``matmul``, the kernel of ``causal_conv1d`` ...) are drawn from
    ``seed``.
    """
    table = _primitive_table()
    if op_id not in table:
        raise KeyError(f"unknown primitive {op_id!r}; known: {', '.join(sorted(table))}")
    if not (0.0 < step <= 1e-3):
        raise ValueError(f"step must lie in (0, 1e-3], got {step}")
    if input.dtype != np.float64:
        raise TypeError(f"grad_check needs float64 input, got {input.dtype}")
    rng = np.random.default_rng(seed)
    fn = table[op_id](input, rng)
    x = Tensor(input.data.copy())
    return check_gradients(fn, [x], step=step, seed=seed + 1)
