"""Reverse-mode differentiation for the handful of kernels the decomposer needs.

Values are float64 numpy arrays wrapped in :class:`Var`. Every op records a
vector-Jacobian product closure; :func:`backward` walks the recorded graph
from a scalar output and accumulates ``d output / d param`` into each
:class:`Param`'s ``grad``.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .exceptions import InvalidInputError, StateError

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Evaluate ops without recording them (inference)."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Var:
    __slots__ = ("value", "parents", "vjp", "requires_grad")

    def __init__(self, value, parents=(), vjp=None, requires_grad=False):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = parents
        self.vjp = vjp
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.value.shape

    def __len__(self):
        return len(self.value)

    def __repr__(self):
        return f"Var(shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, c):
        return scale(self, c)

    __rmul__ = __mul__


class Param(Var):
    """A named leaf with an accumulated gradient."""

    __slots__ = ("name", "grad")

    def __init__(self, value, name: str):
        super().__init__(np.array(value, dtype=np.float64), requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.value)

    def zero_grad(self):
        self.grad[...] = 0.0

    def __repr__(self):
        return f"Param({self.name!r}, shape={self.shape})"


def as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def _record(value, parents, vjp) -> Var:
    if grad_enabled() and any(p.requires_grad for p in parents):
        return Var(value, parents, vjp, True)
    return Var(value)


def backward(out: Var) -> None:
    """Accumulate ``d out / d p`` into ``p.grad`` for every reachable Param."""
    if not isinstance(out, Var) or not out.requires_grad or out.vjp is None:
        raise StateError("backward() needs the output of a recorded forward pass")
    if out.value.size != 1:
        raise InvalidInputError("backward() needs a scalar output")

    order = []
    seen = set()
    stack = [(out, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads = {id(out): np.ones_like(out.value)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if isinstance(node, Param):
            node.grad += g
            continue
        for parent, pg in zip(node.parents, node.vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# -- elementwise ---------------------------------------------------------------

def add(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    return _record(a.value + b.value, (a, b), lambda g: (g, g))


def sub(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    return _record(a.value - b.value, (a, b), lambda g: (g, -g))


def scale(a, c: float) -> Var:
    a = as_var(a)
    c = float(c)
    return _record(a.value * c, (a,), lambda g: (g * c,))


def tanh_act(x) -> Var:
    x = as_var(x)
    y = np.tanh(x.value)
    return _record(y, (x,), lambda g: (g * (1.0 - y * y),))


def relu_act(x) -> Var:
    x = as_var(x)
    mask = x.value > 0
    return _record(np.where(mask, x.value, 0.0), (x,), lambda g: (g * mask,))


ACTIVATIONS = {"tanh": tanh_act, "relu": relu_act}


def total(x) -> Var:
    x = as_var(x)
    return _record(x.value.sum(), (x,), lambda g: (np.full_like(x.value, g),))


def squared_error(pred, target) -> Var:
    """``sum((pred - target)**2)``; ``target`` is treated as a constant."""
    pred = as_var(pred)
    r = pred.value - np.asarray(target, dtype=np.float64)
    return _record(np.dot(r.ravel(), r.ravel()), (pred,), lambda g: (2.0 * g * r,))


def squared_residuals(pred, target) -> Var:
    """Elementwise ``(pred - target)**2``; ``target`` is a constant."""
    pred = as_var(pred)
    r = pred.value - np.asarray(target, dtype=np.float64)
    return _record(r * r, (pred,), lambda g: (2.0 * g * r,))


def squared_diff_sum(x) -> Var:
    """``sum(diff(x)**2)`` along the time axis."""
    x = as_var(x)
    d = np.diff(x.value, axis=0)

    def vjp(g):
        out = np.zeros_like(x.value)
        out[1:] += 2.0 * g * d
        out[:-1] -= 2.0 * g * d
        return (out,)

    return _record(np.sum(d * d), (x,), vjp)


def straight_through(x, fn) -> Var:
    """Apply ``fn`` in the forward pass and the identity in the backward pass."""
    x = as_var(x)
    return _record(fn(x.value), (x,), lambda g: (g,))


# -- structured kernels -------------------------------------------------------------

def softmax_vec(w) -> Var:
    w = as_var(w)
    e = np.exp(w.value - w.value.max())
    p = e / e.sum()
    return _record(p, (w,), lambda g: (p * (g - np.dot(g, p)),))


def concat_channels(parts) -> Var:
    """Stack equal-length vectors as the columns of an ``(N, C)`` map."""
    parts = [as_var(p) for p in parts]
    if not parts:
        raise InvalidInputError("concat_channels needs at least one part")
    n = parts[0].shape
    for i, p in enumerate(parts):
        if p.value.ndim != 1 or p.shape != n:
            raise InvalidInputError(f"part {i} has shape {p.shape}, expected {n}")
    value = np.stack([p.value for p in parts], axis=1)
    return _record(value, tuple(parts), lambda g: tuple(g[:, j] for j in range(g.shape[1])))


def _pad_index(n: int, left: int, right: int, mode: str) -> np.ndarray:
    # Source index of every padded position; -1 marks a zero pad.
    idx = np.arange(n)
    if mode == "zero":
        return np.concatenate([np.full(left, -1), idx, np.full(right, -1)])
    if mode == "reflect":
        if n < 2:
            raise InvalidInputError("reflect padding needs at least two samples")
        return np.pad(idx, (left, right), mode="reflect")
    raise InvalidInputError(f"unknown pad_mode {mode!r}")


def conv1d_same(x, w, pad_mode: str = "zero") -> Var:
    """Length-preserving multi-channel correlation without bias.

    ``out[t] = sum_c sum_j x_pad[t + j, c] * w[c, j]`` with
    ``floor((K-1)/2)`` samples of padding on the left and ``ceil((K-1)/2)``
    on the right. ``x`` is ``(N,)`` or ``(N, C)``; ``w`` is ``(K,)`` or
    ``(C, K)``.
    """
    x, w = as_var(x), as_var(w)
    xv = x.value[:, None] if x.value.ndim == 1 else x.value
    wv = w.value[None, :] if w.value.ndim == 1 else w.value
    n, c = xv.shape
    if wv.shape[0] != c:
        raise InvalidInputError(f"kernel has {wv.shape[0]} channels, input has {c}")
    k = wv.shape[1]
    if k > n:
        raise InvalidInputError(f"kernel length {k} exceeds signal length {n}")
    left = (k - 1) // 2
    right = k - 1 - left
    src = _pad_index(n, left, right, pad_mode)
    xpad = np.zeros((n + k - 1, c))
    valid = src >= 0
    xpad[valid] = xv[src[valid]]
    win = sliding_window_view(xpad, k, axis=0)  # (N, C, K): win[t, c, j] = xpad[t + j, c]
    out = np.einsum("tcj,cj->t", win, wv)

    def vjp(g):
        dw = np.einsum("tcj,t->cj", win, g).reshape(w.shape)
        dx = None
        if x.requires_grad:
            dpad = np.stack([np.convolve(g, wv[ci]) for ci in range(c)], axis=1)
            dxv = np.zeros((n, c))
            np.add.at(dxv, src[valid], dpad[valid])
            dx = dxv.reshape(x.shape)
        return dx, dw

    return _record(out, (x, w), vjp)


_ATT_CHUNK = 64


def _score_blocks(u, x, row_max):
    # Yields (rows, exp(u[rows, None] * x - row_max[rows, None])) in cache-sized chunks.
    n = x.size
    buf = np.empty((min(_ATT_CHUNK, n), n))
    for start in range(0, n, _ATT_CHUNK):
        stop = min(n, start + _ATT_CHUNK)
        e = buf[: stop - start]
        np.multiply.outer(u[start:stop], x, out=e)
        e -= row_max[start:stop, None]
        np.exp(e, out=e)
        yield slice(start, stop), e


def attention(x, w_q, w_k, w_v, w_o, b_o) -> Var:
    """Single-head scaled dot-product self-attention over a scalar sequence.

    Each sample is embedded as ``x[t] * w`` for the query, key and value
    vectors (width ``d``); ``out[t] = (softmax(Q K^T / sqrt(d)) V)[t] . w_o + b_o``.

    Because the embeddings are rank one, the score matrix is
    ``a * outer(x, x)`` with ``a = w_q . w_k / sqrt(d)`` and the output is
    ``(w_v . w_o) * (P x) + b_o``. The ``N x N`` weights are streamed in row
    blocks and recomputed in the backward pass instead of stored.
    """
    x, w_q, w_k, w_v, w_o, b_o = map(as_var, (x, w_q, w_k, w_v, w_o, b_o))
    xv = x.value
    if xv.ndim != 1 or xv.size < 1:
        raise InvalidInputError("attention expects a non-empty 1-D sequence")
    d = w_q.value.size
    if not (w_k.value.size == w_v.value.size == w_o.value.size == d):
        raise InvalidInputError("attention projections must share one width")
    sqrt_d = np.sqrt(d)
    a = float(np.dot(w_q.value, w_k.value)) / sqrt_d
    c = float(np.dot(w_v.value, w_o.value))
    u = a * xv
    row_max = np.where(u >= 0.0, u * xv.max(), u * xv.min())
    powers = np.stack([np.ones_like(xv), xv, xv * xv], axis=1)
    mom = np.empty((xv.size, 3))
    for rows, e in _score_blocks(u, xv, row_max):
        np.matmul(e, powers, out=mom[rows])
    z = mom[:, 0]
    gx = mom[:, 1] / z  # attention-weighted mean of x per row
    out = c * gx + b_o.value

    def vjp(g):
        r = g * c
        du = r * (mom[:, 2] / z - gx * gx)  # d gx / d u is the weighted variance
        da = float(np.dot(du, xv))
        dc = float(np.dot(g, gx))
        coef = np.stack([r * (1.0 - u * gx) / z, r * u / z])
        back = np.zeros((2, xv.size))
        for rows, e in _score_blocks(u, xv, row_max):
            back += coef[:, rows] @ e
        dx = du * a + back[0] + xv * back[1]
        return (dx, da * w_k.value / sqrt_d, da * w_q.value / sqrt_d,
                dc * w_o.value, dc * w_v.value, np.asarray(g.sum()).reshape(b_o.shape))

    return _record(out, (x, w_q, w_k, w_v, w_o, b_o), vjp)


# -- optimizer ---------------------------------------------------------------------

class Adam:
    """Adaptive-moment optimizer with bias correction."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        self.step_count += 1
        bc1 = 1.0 - self.beta1 ** self.step_count
        bc2 = 1.0 - self.beta2 ** self.step_count
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.value -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def state_dict(self) -> dict:
        return {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps,
                "step": self.step_count,
                "m": [m.ravel().tolist() for m in self.m],
                "v": [v.ravel().tolist() for v in self.v]}

    def load_state_dict(self, state: dict) -> None:
        if len(state["m"]) != len(self.params):
            raise InvalidInputError("optimizer state does not match parameter list")
        self.step_count = int(state["step"])
        for p, m, v, sm, sv in zip(self.params, self.m, self.v, state["m"], state["v"]):
            m[...] = np.asarray(sm, dtype=np.float64).reshape(p.shape)
            v[...] = np.asarray(sv, dtype=np.float64).reshape(p.shape)


# -- finite differences ----------------------------------------------------------------

def numerical_grad(f, param: Param, eps: float = 1e-6) -> np.ndarray:
    """Central finite-difference gradient of ``sum(f())`` w.r.t. ``param``.

    ``f`` may return a vector of loss terms; the two perturbed evaluations
    are differenced term by term before summing, which keeps cancellation
    error at the scale of one term instead of the whole loss.
    """
    out = np.zeros_like(param.value)
    flat = param.value.reshape(-1)
    gflat = out.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = f().value
            flat[i] = orig - eps
            fm = f().value
            flat[i] = orig
            gflat[i] = np.sum(fp - fm) / (2.0 * eps)
    return out


def max_relative_error(analytic, numeric, floor: float = 0.0) -> float:
    """Normwise relative error ``||a - n|| / max(||a||, ||n||, floor)``.

    Normwise rather than elementwise: entries far below the tensor's scale
    are dominated by finite-difference round-off.
    """
    analytic = np.asarray(analytic, dtype=float).ravel()
    numeric = np.asarray(numeric, dtype=float).ravel()
    denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric), floor, 1e-300)
    return float(np.linalg.norm(analytic - numeric) / denom)


def gradient_check(f, params, eps: float = 1e-6, floor_ratio: float = 1e-3) -> dict:
    """Compare :func:`backward` against central differences.

    ``f`` returns a scalar or a vector of loss terms (summed). Returns the
    relative error per parameter name. Each tensor's denominator is floored
    at ``floor_ratio`` times the norm of the full gradient, since central
    differences carry an absolute round-off error of roughly
    ``machine_eps * |f| / eps`` that no near-zero tensor can beat.
    """
    params = list(params)
    for p in params:
        p.zero_grad()
    out = f()
    backward(out if out.value.size == 1 else total(out))
    analytic = [p.grad.copy() for p in params]
    floor = floor_ratio * float(np.sqrt(sum(np.sum(g * g) for g in analytic)))
    return {p.name: max_relative_error(g, numerical_grad(f, p, eps), floor)
            for p, g in zip(params, analytic)}
