"""Dense-network substrate: a small reverse-mode autodiff over numpy arrays,
the skip-connected conditional MLP used by both denoisers, sinusoidal
timestep embeddings, and an Adam optimizer.

The graph machinery covers exactly the operations the denoiser and its
training losses need; it is not a general autodiff. All values are float64.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .errors import ConfigError, GraphError, NumericsError, ShapeError

Array = np.ndarray


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Reduce ``grad`` back to ``shape``, reversing numpy broadcasting.
    Always returns an array the caller owns (never a view of the input)."""
    original = grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    if grad is original:  # reshape-only path: do not hand out a view
        return grad.reshape(shape).copy()
    return grad.reshape(shape)


class Var:
    """One node of a recorded computation: a float64 array plus the closure
    that routes an incoming output gradient to the node's parents."""

    __slots__ = ("value", "grad", "_parents", "_push", "_consumed")

    # keep numpy from absorbing us in mixed expressions; defer to __r*__ ops
    __array_ufunc__ = None

    def __init__(self, value, parents: tuple = (), push=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: Array | None = None
        self._parents = parents
        self._push = push
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def _acc(self, g: Array) -> None:
        g = np.asarray(g, dtype=np.float64)
        if g.shape != self.value.shape:
            g = _unbroadcast(g, self.value.shape)  # reduction: freshly allocated
            if self.grad is None:
                self.grad = g
                return
        if self.grad is None:
            # copy: callers may pass shared buffers (e.g. add routes one
            # gradient array to both parents)
            self.grad = g.copy()
        else:
            self.grad += g

    # arithmetic; scalars and ndarrays are wrapped as constant leaves
    def __add__(self, other):
        return add(self, as_var(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, as_var(other))

    def __rsub__(self, other):
        return sub(as_var(other), self)

    def __mul__(self, other):
        return mul(self, as_var(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, as_var(other))

    def __rtruediv__(self, other):
        return div(as_var(other), self)

    def __neg__(self):
        return mul(self, as_var(-1.0))

    def __repr__(self):
        return f"Var(shape={self.value.shape})"


def as_var(x) -> Var:
    """Wrap a scalar/array as a constant leaf; pass Vars through."""
    return x if isinstance(x, Var) else Var(np.asarray(x, dtype=np.float64))


def add(a: Var, b: Var) -> Var:
    out = Var(a.value + b.value, (a, b))
    out._push = lambda g: (a._acc(g), b._acc(g))
    return out


def sub(a: Var, b: Var) -> Var:
    out = Var(a.value - b.value, (a, b))
    out._push = lambda g: (a._acc(g), b._acc(-g))
    return out


def mul(a: Var, b: Var) -> Var:
    out = Var(a.value * b.value, (a, b))
    out._push = lambda g: (a._acc(g * b.value), b._acc(g * a.value))
    return out


def div(a: Var, b: Var) -> Var:
    out = Var(a.value / b.value, (a, b))

    def push(g):
        a._acc(g / b.value)
        b._acc(-g * a.value / (b.value * b.value))

    out._push = push
    return out


def matmul(a: Var, b: Var) -> Var:
    a, b = as_var(a), as_var(b)
    out = Var(a.value @ b.value, (a, b))
    out._push = lambda g: (a._acc(g @ b.value.T), b._acc(a.value.T @ g))
    return out


def relu(x: Var) -> Var:
    mask = x.value > 0.0
    out = Var(np.where(mask, x.value, 0.0), (x,))
    out._push = lambda g: x._acc(g * mask)
    return out


def clip_min(x: Var, lo: float) -> Var:
    """max(x, lo) elementwise; gradient passes only where x > lo."""
    mask = x.value > lo
    out = Var(np.where(mask, x.value, lo), (x,))
    out._push = lambda g: x._acc(g * mask)
    return out


def log(x: Var) -> Var:
    out = Var(np.log(x.value), (x,))
    out._push = lambda g: x._acc(g / x.value)
    return out


def exp(x: Var) -> Var:
    out = Var(np.exp(x.value), (x,))
    out._push = lambda g: x._acc(g * out.value)
    return out


def sqrt(x: Var) -> Var:
    out = Var(np.sqrt(x.value), (x,))
    out._push = lambda g: x._acc(g * 0.5 / out.value)
    return out


def vsum(x: Var, axis: int | None = None, keepdims: bool = False) -> Var:
    out = Var(x.value.sum(axis=axis, keepdims=keepdims), (x,))

    def push(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        x._acc(np.broadcast_to(g, x.value.shape))

    out._push = push
    return out


def vmean(x: Var) -> Var:
    return vsum(x) * (1.0 / x.value.size)


def concat_cols(parts: Sequence[Var | Array]) -> Var:
    """Column-wise concatenation; zero-width parts are dropped."""
    live = [as_var(p) for p in parts if as_var(p).value.shape[1] > 0]
    if len(live) == 1:
        return live[0]
    vals = [p.value for p in live]
    out = Var(np.concatenate(vals, axis=1), tuple(live))
    offs = np.cumsum([0] + [v.shape[1] for v in vals])

    def push(g):
        for p, j0, j1 in zip(live, offs[:-1], offs[1:]):
            p._acc(g[:, j0:j1])

    out._push = push
    return out


def slice_cols(x: Var, j0: int, j1: int) -> Var:
    out = Var(x.value[:, j0:j1], (x,))

    def push(g):
        z = np.zeros_like(x.value)
        z[:, j0:j1] = g
        x._acc(z)

    out._push = push
    return out


def take_rows(x: Var, idx: Array) -> Var:
    out = Var(x.value[idx], (x,))

    def push(g):
        z = np.zeros_like(x.value)
        np.add.at(z, idx, g)
        x._acc(z)

    out._push = push
    return out


def softmax_rows(x: Var) -> Var:
    """Row-wise softmax. The max-shift is treated as a constant, which gives
    the exact softmax value and gradient."""
    shift = x.value.max(axis=1, keepdims=True)
    e = exp(sub(x, as_var(shift)))
    return div(e, vsum(e, axis=1, keepdims=True))


def _topo(root: Var) -> list[Var]:
    order: list[Var] = []
    seen: set[int] = set()
    stack: list[tuple[Var, bool]] = [(root, False)]
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
            if id(p) not in seen:
                stack.append((p, False))
    return order  # parents precede children


def backward(loss: Var, params: dict[str, Var]) -> dict[str, Array]:
    """Gradients of a scalar ``loss`` for every named parameter.

    Parameters the loss does not reach get zero gradients. Calling this a
    second time on the same loss node is an error.
    """
    if loss._consumed:
        raise GraphError("backward already called on this loss node")
    if loss.value.size != 1:
        raise ShapeError(f"loss must be scalar, got shape {loss.value.shape}")
    loss._consumed = True
    order = _topo(loss)
    for node in order:
        node.grad = None
    loss.grad = np.ones_like(loss.value)
    for node in reversed(order):
        if node._push is not None and node.grad is not None:
            node._push(node.grad)
    out = {}
    for name, p in params.items():
        out[name] = p.grad if p.grad is not None else np.zeros_like(p.value)
    return out


# ---------------------------------------------------------------------------
# timestep embedding

def sinusoidal_embed(t: int, dim: int) -> Array:
    """Sinusoidal positional embedding of a single timestep.

    Entries come in (sin, cos) pairs: pair k holds (sin(t*w_k), cos(t*w_k))
    with w_k = 10000**(-2k/dim).
    """
    if dim % 2 != 0 or dim < 2:
        raise ConfigError(f"embedding dim must be even and >= 2, got {dim}")
    if t < 0:
        raise ConfigError(f"timestep must be >= 0, got {t}")
    k = np.arange(dim // 2, dtype=np.float64)
    omega = 10000.0 ** (-2.0 * k / dim)
    ang = float(t) * omega
    out = np.empty(dim, dtype=np.float64)
    out[0::2] = np.sin(ang)
    out[1::2] = np.cos(ang)
    return out


def sinusoidal_embed_batch(ts: Array, dim: int) -> Array:
    """Embed a vector of timesteps; returns (len(ts), dim)."""
    if dim % 2 != 0 or dim < 2:
        raise ConfigError(f"embedding dim must be even and >= 2, got {dim}")
    ts = np.asarray(ts, dtype=np.float64)
    if np.any(ts < 0):
        raise ConfigError("timesteps must be >= 0")
    k = np.arange(dim // 2, dtype=np.float64)
    omega = 10000.0 ** (-2.0 * k / dim)
    ang = ts[:, None] * omega[None, :]
    out = np.empty((ts.shape[0], dim), dtype=np.float64)
    out[:, 0::2] = np.sin(ang)
    out[:, 1::2] = np.cos(ang)
    return out


# ---------------------------------------------------------------------------
# layers and the denoiser network

class Linear:
    """Fully connected layer with uniform fan-in initialization."""

    def __init__(self, name: str, in_dim: int, out_dim: int, rng: np.random.Generator):
        self.name = name
        self.in_dim = in_dim
        self.out_dim = out_dim
        bound = 1.0 / math.sqrt(in_dim) if in_dim > 0 else 0.0
        self.w = Var(rng.uniform(-bound, bound, size=(in_dim, out_dim)))
        self.b = Var(rng.uniform(-bound, bound, size=(out_dim,)))

    def __call__(self, x: Var) -> Var:
        x = as_var(x)
        if x.value.ndim != 2 or x.value.shape[1] != self.in_dim:
            raise ShapeError(
                f"layer {self.name}: expected input with {self.in_dim} columns, "
                f"got shape {x.value.shape}"
            )
        return add(matmul(x, self.w), self.b)

    def params(self) -> dict[str, Var]:
        return {f"{self.name}.w": self.w, f"{self.name}.b": self.b}


class DiffusionMLP:
    """Time-conditioned denoiser: an MLP with a two-level encoder/decoder and
    skip connections, a condition branch, and per-block timestep injection.

    Layout for hidden widths (d1, d2, d3):

        h_c = cond(c)                          # width ceil(in_dim/2)
        h0  = [x, h_c]
        h1  = fc1(h0)                          # no activation here
        h2  = relu(fc2_2(relu(fc2_1(h1)) + relu(fc2_t(temb))))
        h3  = relu(fc3_2(relu(fc3_1(h2)) + relu(fc3_t(temb))))
        h4  = relu(fc4(h3))
        h5  = relu(fc5_2(relu(fc5_1([h4, h3])) + relu(fc5_t(temb))))
        h6  = relu(fc6_2(relu(fc6_1([h5, h2])) + relu(fc6_t(temb))))
        out = fc7(h6)                          # raw linear output

    temb = emb2(relu(emb1(sinusoidal(t)))), width 4 * emb_dim.
    """

    def __init__(
        self,
        in_dim: int,
        cond_dim: int,
        out_dim: int,
        hidden: tuple[int, int, int],
        emb_dim: int,
        rng: np.random.Generator,
    ):
        if in_dim < 1:
            raise ConfigError(f"in_dim must be >= 1, got {in_dim}")
        if cond_dim < 0 or out_dim < 1:
            raise ConfigError("cond_dim must be >= 0 and out_dim >= 1")
        d1, d2, d3 = hidden
        if min(d1, d2, d3) < 1:
            raise ConfigError(f"hidden dims must be >= 1, got {hidden}")
        self.in_dim = in_dim
        self.cond_dim = cond_dim
        self.out_dim = out_dim
        self.hidden = (d1, d2, d3)
        self.emb_dim = emb_dim
        self.cond_hidden = math.ceil(in_dim / 2) if cond_dim > 0 else 0
        te = 4 * emb_dim

        L = lambda name, i, o: Linear(name, i, o, rng)
        self._layers: list[Linear] = []

        def reg(layer: Linear) -> Linear:
            self._layers.append(layer)
            return layer

        self.cond = reg(L("cond", cond_dim, self.cond_hidden)) if cond_dim > 0 else None
        self.emb1 = reg(L("emb1", emb_dim, te))
        self.emb2 = reg(L("emb2", te, te))
        self.fc1 = reg(L("fc1", in_dim + self.cond_hidden, d1))
        self.fc2_1 = reg(L("fc2_1", d1, d2))
        self.fc2_t = reg(L("fc2_t", te, d2))
        self.fc2_2 = reg(L("fc2_2", d2, d2))
        self.fc3_1 = reg(L("fc3_1", d2, d3))
        self.fc3_t = reg(L("fc3_t", te, d3))
        self.fc3_2 = reg(L("fc3_2", d3, d3))
        self.fc4 = reg(L("fc4", d3, d3))
        self.fc5_1 = reg(L("fc5_1", 2 * d3, d2))
        self.fc5_t = reg(L("fc5_t", te, d2))
        self.fc5_2 = reg(L("fc5_2", d2, d2))
        self.fc6_1 = reg(L("fc6_1", 2 * d2, d1))
        self.fc6_t = reg(L("fc6_t", te, d1))
        self.fc6_2 = reg(L("fc6_2", d1, d1))
        self.fc7 = reg(L("fc7", d1, out_dim))

    def params(self) -> dict[str, Var]:
        out: dict[str, Var] = {}
        for layer in self._layers:
            out.update(layer.params())
        return out

    def forward(self, x, cond, t) -> Var:
        """Run the denoiser on a batch.

        ``x``: (B, in_dim); ``cond``: (B, cond_dim) or None when cond_dim=0;
        ``t``: one timestep for the whole batch or an int array of shape (B,).
        """
        x = as_var(x)
        if x.value.ndim != 2 or x.value.shape[1] != self.in_dim:
            raise ShapeError(
                f"input x: expected (batch, {self.in_dim}), got {x.value.shape}"
            )
        rows = x.value.shape[0]
        tvec = np.full(rows, int(t)) if np.ndim(t) == 0 else np.asarray(t)
        if tvec.shape != (rows,):
            raise ShapeError(f"t: expected scalar or shape ({rows},), got {np.shape(t)}")
        temb_in = sinusoidal_embed_batch(tvec, self.emb_dim)
        temb = self.emb2(relu(self.emb1(as_var(temb_in))))

        if self.cond is not None:
            cond = as_var(cond)
            if cond.value.shape != (rows, self.cond_dim):
                raise ShapeError(
                    f"layer cond: expected ({rows}, {self.cond_dim}), "
                    f"got {cond.value.shape}"
                )
            h0 = concat_cols([x, self.cond(cond)])
        else:
            h0 = x

        h1 = self.fc1(h0)
        h2 = relu(self.fc2_2(add(relu(self.fc2_1(h1)), relu(self.fc2_t(temb)))))
        h3 = relu(self.fc3_2(add(relu(self.fc3_1(h2)), relu(self.fc3_t(temb)))))
        h4 = relu(self.fc4(h3))
        h5 = relu(self.fc5_2(add(relu(self.fc5_1(concat_cols([h4, h3]))),
                                 relu(self.fc5_t(temb)))))
        h6 = relu(self.fc6_2(add(relu(self.fc6_1(concat_cols([h5, h2]))),
                                 relu(self.fc6_t(temb)))))
        return self.fc7(h6)

    def dims(self) -> dict:
        return {
            "in_dim": self.in_dim,
            "cond_dim": self.cond_dim,
            "out_dim": self.out_dim,
            "hidden": list(self.hidden),
            "emb_dim": self.emb_dim,
        }


# ---------------------------------------------------------------------------
# optimizer

class AdamState:
    """First/second moment accumulators plus step counter for one net."""

    def __init__(self, params: dict[str, Var], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = float(lr)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step = 0
        self.m = {k: np.zeros_like(p.value) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.value) for k, p in params.items()}


def adam_step(params: dict[str, Var], grads: dict[str, Array], state: AdamState) -> None:
    """One in-place Adam update; raises on non-finite gradients."""
    state.step += 1
    b1c = 1.0 - state.beta1 ** state.step
    b2c = 1.0 - state.beta2 ** state.step
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.value.shape:
            raise ShapeError(f"gradient for {name}: shape {g.shape} != {p.value.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericsError(f"non-finite gradient for parameter {name}")
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.value -= state.lr * (m / b1c) / (np.sqrt(v / b2c) + state.eps)
