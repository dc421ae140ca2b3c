"""A small reverse-mode autodiff engine over numpy arrays.

Only what the score network needs: broadcasting arithmetic, batched matmul,
reductions, indexing, and a few fused kernels (softmax, layer norm, GELU) whose
backward passes are written out by hand.
"""

from __future__ import annotations

import math

import numpy as np


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    ndim_extra = grad.ndim - len(shape)
    if ndim_extra:
        grad = grad.sum(axis=tuple(range(ndim_extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_prev", "_backward", "name")

    def __init__(self, data, requires_grad=False, _prev=(), _backward=None, name=None):
        self.data = np.asarray(data, dtype=np.float64) if not isinstance(data, np.ndarray) else data
        self.grad = None
        self.requires_grad = requires_grad
        self._prev = _prev
        self._backward = _backward
        self.name = name

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    # -- graph construction -------------------------------------------------

    @staticmethod
    def _make(data, parents, backward):
        parents = tuple(p for p in parents if p.requires_grad)
        if not parents:
            return Tensor(data)
        return Tensor(data, True, parents, backward)

    def backward(self, grad=None):
        if not self.requires_grad:
            return
        if grad is None:
            if self.data.size != 1:
                raise ValueError("grad must be given for non-scalar outputs")
            grad = np.ones_like(self.data)
        order, seen, stack = [], set(), [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._prev:
                if id(p) not in seen:
                    stack.append((p, False))
        grads = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._prev, node._backward(g)):
                if pg is None:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, other):
        other = as_tensor(other)
        a, b = self, other

        def bw(g):
            return [_unbroadcast(g, p.shape) for p in out_parents]

        out = Tensor._make(a.data + b.data, (a, b), bw)
        out_parents = out._prev
        return out

    __radd__ = __add__

    def __neg__(self):
        return Tensor._make(-self.data, (self,), lambda g: [-g])

    def __sub__(self, other):
        return self + (-as_tensor(other))

    def __rsub__(self, other):
        return as_tensor(other) + (-self)

    def __mul__(self, other):
        other = as_tensor(other)
        a, b = self, other

        def bw(g):
            res = []
            for p in out._prev:
                q = b if p is a else a
                res.append(_unbroadcast(g * q.data, p.shape))
            return res

        if a is b:
            return a.pow(2)
        out = Tensor._make(a.data * b.data, (a, b), bw)
        return out

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)
        return self * other.pow(-1)

    def __rtruediv__(self, other):
        return as_tensor(other) * self.pow(-1)

    def pow(self, k: float):
        x = self.data
        if k == -1:
            y = 1.0 / x
            return Tensor._make(y, (self,), lambda g: [-g * y * y])
        if k == 2:
            return Tensor._make(x * x, (self,), lambda g: [2.0 * g * x])
        return Tensor._make(x ** k, (self,), lambda g: [g * k * x ** (k - 1)])

    def __matmul__(self, other):
        other = as_tensor(other)
        a, b = self, other

        def bw(g):
            res = []
            for p in out._prev:
                if p is a:
                    res.append(_unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
                elif b.ndim == 2 and a.ndim > 2:
                    # weight gradient of a shared matrix: fold the batch axes into one GEMM
                    res.append(a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1]))
                else:
                    res.append(_unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))
            return res

        out = Tensor._make(a.data @ b.data, (a, b), bw)
        return out

    # -- elementwise --------------------------------------------------------

    def exp(self):
        y = np.exp(self.data)
        return Tensor._make(y, (self,), lambda g: [g * y])

    def log(self):
        x = self.data
        return Tensor._make(np.log(x), (self,), lambda g: [g / x])

    def abs(self):
        x = self.data
        return Tensor._make(np.abs(x), (self,), lambda g: [g * np.sign(x)])

    def silu(self):
        x = self.data
        s = 1.0 / (1.0 + np.exp(-x))
        return Tensor._make(x * s, (self,), lambda g: [g * (s * (1 + x * (1 - s)))])

    def gelu(self):
        """tanh approximation of GELU."""
        x = self.data
        c = math.sqrt(2.0 / math.pi)
        x2 = x * x
        th = np.tanh(c * x * (1.0 + 0.044715 * x2))
        y = 0.5 * x * (1.0 + th)

        def bw(g):
            dinner = c * (1.0 + 3 * 0.044715 * x2)
            return [g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * dinner)]

        return Tensor._make(y, (self,), bw)

    # -- shape and reductions ----------------------------------------------

    def sum(self, axis=None, keepdims=False):
        shape = self.shape

        def bw(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return [np.broadcast_to(g, shape)]

        return Tensor._make(self.data.sum(axis=axis, keepdims=keepdims), (self,), bw)

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape):
        old = self.shape
        return Tensor._make(self.data.reshape(*shape), (self,), lambda g: [g.reshape(old)])

    def transpose(self, *axes):
        inv = np.argsort(axes)
        return Tensor._make(self.data.transpose(axes), (self,), lambda g: [g.transpose(inv)])

    def __getitem__(self, idx):
        shape = self.shape

        def bw(g):
            out = np.zeros(shape)
            np.add.at(out, idx, g)
            return [out]

        return Tensor._make(self.data[idx], (self,), bw)

    def softmax(self, axis=-1):
        x = self.data - self.data.max(axis=axis, keepdims=True)
        e = np.exp(x)
        y = e / e.sum(axis=axis, keepdims=True)

        def bw(g):
            return [y * (g - (g * y).sum(axis=axis, keepdims=True))]

        return Tensor._make(y, (self,), bw)

    def layer_norm(self, eps=1e-6):
        """Normalise over the last axis without affine parameters."""
        x = self.data
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        y = xc * inv

        def bw(g):
            gm = g.mean(axis=-1, keepdims=True)
            gy = (g * y).mean(axis=-1, keepdims=True)
            return [inv * (g - gm - y * gy)]

        return Tensor._make(y, (self,), bw)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def parameter(data, name=None) -> Tensor:
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=True, name=name)


def concat(tensors, axis=-1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    req = [t.requires_grad for t in tensors]

    def bw(g):
        parts = np.split(g, splits, axis=axis)
        return [p for p, r in zip(parts, req) if r]

    return Tensor._make(data, tensors, bw)


def where(cond, a, b) -> Tensor:
    """Select ``a`` where ``cond`` else ``b``; ``cond`` is a constant boolean array."""
    a, b = as_tensor(a), as_tensor(b)
    cond = np.asarray(cond, dtype=bool)
    data = np.where(cond, a.data, b.data)
    parents = [t for t in (a, b) if t.requires_grad]

    def bw(g):
        res = []
        for p in parents:
            mask = cond if p is a else ~cond
            res.append(_unbroadcast(np.where(mask, g, 0.0), p.shape))
        return res

    return Tensor._make(data, (a, b), bw)


def embedding(table: Tensor, idx: np.ndarray) -> Tensor:
    idx = np.asarray(idx)
    shape = table.shape

    def bw(g):
        out = np.zeros(shape)
        np.add.at(out, idx.ravel(), g.reshape(-1, shape[-1]))
        return [out]

    return Tensor._make(table.data[idx], (table,), bw)


class Module:
    """Parameter container; attributes that are Tensors or Modules are registered."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_modules", {})

    def __setattr__(self, key, value):
        if isinstance(value, Tensor) and value.requires_grad:
            self._params[key] = value
        elif isinstance(value, Module):
            self._modules[key] = value
        elif isinstance(value, (list, tuple)) and value and all(isinstance(v, Module) for v in value):
            for i, v in enumerate(value):
                self._modules[f"{key}.{i}"] = v
        object.__setattr__(self, key, value)

    def named_parameters(self, prefix=""):
        for k, p in self._params.items():
            yield prefix + k, p
        for k, m in self._modules.items():
            yield from m.named_parameters(prefix + k + ".")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def backward(self, loss, loss_grad=1.0) -> dict[str, np.ndarray]:
        """Backpropagate ``loss`` and return a gradient for every parameter."""
        if not isinstance(loss, Tensor):
            raise RuntimeError("backward called before a forward pass produced a loss tensor")
        self.zero_grad()
        loss.backward(np.full(loss.shape, loss_grad, dtype=np.float64))
        return {
            name: (np.zeros_like(p.data) if p.grad is None else p.grad)
            for name, p in self.named_parameters()
        }

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise ValueError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, p in params.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"shape mismatch for {name}: {arr.shape} vs {p.shape}")
            p.data = arr.copy()


class Linear(Module):
    def __init__(self, rng, d_in, d_out, bias=True, zero=False, scale=None):
        super().__init__()
        if zero:
            w = np.zeros((d_in, d_out))
        else:
            # xavier-uniform
            lim = math.sqrt(6.0 / (d_in + d_out)) if scale is None else scale
            w = rng.uniform(-lim, lim, size=(d_in, d_out))
        self.weight = parameter(w)
        self.bias = parameter(np.zeros(d_out)) if bias else None

    def __call__(self, x):
        y = as_tensor(x) @ self.weight
        return y + self.bias if self.bias is not None else y


class MLP(Module):
    """Linear -> activation -> Linear."""

    def __init__(self, rng, d_in, d_hidden, d_out, act="silu", zero_out=False):
        super().__init__()
        self.fc1 = Linear(rng, d_in, d_hidden)
        self.fc2 = Linear(rng, d_hidden, d_out, zero=zero_out)
        self.act = act

    def __call__(self, x):
        h = self.fc1(x)
        h = h.gelu() if self.act == "gelu" else h.silu()
        return self.fc2(h)
