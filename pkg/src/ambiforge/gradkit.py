"""Reverse-mode automatic differentiation on dense float64 arrays.

A :class:`Tensor` records the operation that produced it; calling
:meth:`Tensor.backward` on a scalar walks the recorded graph once in
reverse topological order and accumulates gradients into the leaves that
have ``requires_grad=True``.

Also holds the GRU cell, the Adam optimizer, the plateau learning-rate
scheduler and the checkpoint format used for training.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

__all__ = [
    "Tensor",
    "NonFiniteError",
    "tensor",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "scale",
    "matmul",
    "einsum",
    "square",
    "sqrt",
    "hypot",
    "exp",
    "tanh",
    "sigmoid",
    "relu",
    "softmax",
    "sum_axis",
    "mean",
    "reshape",
    "transpose",
    "slice_",
    "concat",
    "stack",
    "pad",
    "conv2d_3x3_grouped",
    "gru_cell",
    "gru_layer",
    "init_gru_params",
    "Adam",
    "PlateauScheduler",
    "save_checkpoint",
    "load_checkpoint",
]


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "_parents", "_backward", "op", "__weakref__")

    def __init__(self, value, requires_grad=False, _parents=(), _backward=None, op="leaf"):
        self.value = np.asarray(value, dtype=float)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.op = op

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def numpy(self) -> np.ndarray:
        return self.value

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        """Accumulate ``d self / d leaf`` into every reachable leaf's ``grad``."""
        if grad is None:
            if self.value.size != 1:
                raise ValueError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.value)
        order = _topological(self)
        grads = {id(self): np.asarray(grad, dtype=float)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # operator sugar
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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return slice_(self, idx)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    def sum(self, axis=None, keepdims=False):
        return sum_axis(self, axis, keepdims)


def tensor(value, requires_grad=False) -> Tensor:
    return Tensor(value, requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _topological(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _make(value, parents, backward, op) -> Tensor:
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(f"non-finite values produced by {op}")
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(value, op=op)
    return Tensor(value, True, tuple(parents), backward, op)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# elementwise arithmetic

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _make(a.value + b.value, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _make(a.value - b.value, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _make(a.value * b.value, (a, b),
                 lambda g: (_unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)), "mul")


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.value / b.value

    def backward(g):
        ga = g / b.value
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * out, b.shape)

    return _make(out, (a, b), backward, "div")


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _make(-a.value, (a,), lambda g: (-g,), "neg")


def scale(a, c: float) -> Tensor:
    a = _as_tensor(a)
    return _make(a.value * c, (a,), lambda g: (g * c,), "scale")


def square(a) -> Tensor:
    a = _as_tensor(a)
    return _make(a.value**2, (a,), lambda g: (2 * a.value * g,), "square")


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    out = np.sqrt(a.value)
    return _make(out, (a,), lambda g: (np.divide(0.5 * g, out, out=np.zeros_like(out), where=out > 0),), "sqrt")


def hypot(re, im) -> Tensor:
    """Modulus of ``re + j im``; the gradient at zero is taken as zero."""
    re, im = _as_tensor(re), _as_tensor(im)
    out = np.hypot(re.value, im.value)

    def backward(g):
        inv = np.divide(g, out, out=np.zeros_like(out), where=out > 0)
        return _unbroadcast(inv * re.value, re.shape), _unbroadcast(inv * im.value, im.shape)

    return _make(out, (re, im), backward, "hypot")


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.value)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out = np.tanh(a.value)
    return _make(out, (a,), lambda g: (g * (1 - out**2),), "tanh")


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    out = 0.5 * (1 + np.tanh(0.5 * a.value))
    return _make(out, (a,), lambda g: (g * out * (1 - out),), "sigmoid")


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.value > 0
    return _make(a.value * mask, (a,), lambda g: (g * mask,), "relu")


def softmax(a, axis=-1) -> Tensor:
    a = _as_tensor(a)
    e = np.exp(a.value - a.value.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)
    return _make(out, (a,), lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),), "softmax")


# reductions and shape ops

def sum_axis(a, axis=None, keepdims=False) -> Tensor:
    a = _as_tensor(a)
    out = a.value.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), backward, "sum")


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = _as_tensor(a)
    count = a.value.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum_axis(a, axis, keepdims), 1.0 / count)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    return _make(a.value.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    inv = np.argsort(axes)
    return _make(np.transpose(a.value, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (slice, int, np.integer)) or i is Ellipsis or i is None for i in items)


def slice_(a, idx) -> Tensor:
    a = _as_tensor(a)

    def backward(g):
        full = np.zeros(a.shape)
        if _is_basic_index(idx):
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _make(a.value[idx], (a,), backward, "slice")


def concat(tensors, axis=0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _make(np.concatenate([t.value for t in tensors], axis=axis), tensors,
                 lambda g: tuple(np.split(g, sizes, axis=axis)), "concat")


def stack(tensors, axis=0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _make(np.stack([t.value for t in tensors], axis=axis), tensors, backward, "stack")


def pad(a, pad_width) -> Tensor:
    """Zero padding as in :func:`numpy.pad` (constant mode)."""
    a = _as_tensor(a)
    crop = tuple(slice(lo, lo + n) for (lo, _), n in zip(pad_width, a.shape))
    return _make(np.pad(a.value, pad_width), (a,), lambda g: (g[crop],), "pad")


# linear algebra

def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy broadcasting; 1-D operands are promoted."""
    a, b = _as_tensor(a), _as_tensor(b)
    av = a.value[None, :] if a.ndim == 1 else a.value
    bv = b.value[:, None] if b.ndim == 1 else b.value
    out = av @ bv

    def backward(g):
        g2 = g
        if a.ndim == 1:
            g2 = np.expand_dims(g2, -2)
        if b.ndim == 1:
            g2 = np.expand_dims(g2, -1)
        ga = g2 @ np.swapaxes(bv, -1, -2)
        gb = np.swapaxes(av, -1, -2) @ g2
        if a.ndim == 1:
            ga = ga.sum(axis=tuple(range(ga.ndim - 2))) if ga.ndim > 2 else ga
            ga = ga.reshape(a.shape)
        if b.ndim == 1:
            gb = gb.sum(axis=tuple(range(gb.ndim - 2))) if gb.ndim > 2 else gb
            gb = gb.reshape(b.shape)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    if a.ndim == 1:
        out = out[..., 0, :]
    if b.ndim == 1:
        out = out[..., 0]
    return _make(out, (a, b), backward, "matmul")


def einsum(subscripts: str, a, b) -> Tensor:
    """Two-operand ``numpy.einsum`` with an explicit output (``'ij,jk->ik'``).

    Every index of an operand must appear in the output or in the other
    operand, and no operand may repeat an index.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    lhs, out_idx = subscripts.replace(" ", "").split("->")
    ia, ib = lhs.split(",")
    for own, other in ((ia, ib), (ib, ia)):
        if len(set(own)) != len(own) or any(c not in out_idx and c not in other for c in own):
            raise ValueError(f"unsupported einsum pattern {subscripts!r}")
    out = np.einsum(subscripts, a.value, b.value, optimize=True)

    def backward(g):
        ga = np.einsum(f"{out_idx},{ib}->{ia}", g, b.value, optimize=True) if a.requires_grad else None
        gb = np.einsum(f"{out_idx},{ia}->{ib}", g, a.value, optimize=True) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), backward, "einsum")


def conv2d_3x3_grouped(x, w, b=None, causal=True) -> Tensor:
    """Independent 3x3 convolutions per group.

    ``x``: ``[batch, G, Cin, H, W]``, ``w``: ``[G, Cout, Cin, 3, 3]``,
    ``b``: ``[G, Cout]``. The H axis is zero-padded symmetrically; the W
    axis (time) is padded by two leading zeros when ``causal`` so output
    column ``t`` only depends on input columns ``<= t``.
    """
    x, w = _as_tensor(x), _as_tensor(w)
    parents = [x, w] + ([_as_tensor(b)] if b is not None else [])
    Bn, G, Cin, H, W = x.shape
    if w.shape[0] != G or w.shape[2] != Cin or w.shape[3:] != (3, 3):
        raise ValueError(f"kernel shape {w.shape} incompatible with input {x.shape}")
    wpad = (2, 0) if causal else (1, 1)
    xp = np.pad(x.value, ((0, 0), (0, 0), (0, 0), (1, 1), wpad))
    Cout = w.shape[1]
    # the nine shifted windows stacked as columns, so each group is one matrix product
    cols = np.stack([xp[..., i : i + H, j : j + W] for i in range(3) for j in range(3)], axis=3)
    cols = cols.reshape(Bn, G, Cin * 9, H * W)
    wm = w.value.reshape(G, Cout, Cin * 9)
    out = (wm @ cols).reshape(Bn, G, Cout, H, W)
    if b is not None:
        out += parents[2].value[None, :, :, None, None]

    def backward(g):
        gm = g.reshape(Bn, G, Cout, H * W)
        gx = gw = None
        if x.requires_grad:
            gc = (wm.swapaxes(-1, -2) @ gm).reshape(Bn, G, Cin, 3, 3, H, W)
            gxp = np.zeros_like(xp)
            for i in range(3):
                for j in range(3):
                    gxp[..., i : i + H, j : j + W] += gc[:, :, :, i, j]
            gx = gxp[..., 1 : 1 + H, wpad[0] : wpad[0] + W]
        if w.requires_grad:
            gw = (gm @ cols.swapaxes(-1, -2)).sum(axis=0).reshape(w.shape)
        grads = [gx, gw]
        if b is not None:
            grads.append(g.sum(axis=(0, 3, 4)))
        return tuple(grads)

    return _make(out, parents, backward, "conv2d_3x3_grouped")


# recurrent unit

def init_gru_params(input_size: int, hidden: int, rng: np.random.Generator, prefix="") -> dict:
    """Uniform(-1/sqrt(H), 1/sqrt(H)) init; gates stacked as (reset, update, new)."""
    k = 1.0 / np.sqrt(hidden)
    shapes = {"W_ih": (input_size, 3 * hidden), "W_hh": (hidden, 3 * hidden), "b_ih": (3 * hidden,), "b_hh": (3 * hidden,)}
    return {prefix + name: Tensor(rng.uniform(-k, k, shape), requires_grad=True) for name, shape in shapes.items()}


def _gru_update(gi, h, W_hh, b_hh, H):
    gh = matmul(h, W_hh) + b_hh
    r = sigmoid(gi[..., :H] + gh[..., :H])
    z = sigmoid(gi[..., H : 2 * H] + gh[..., H : 2 * H])
    n = tanh(gi[..., 2 * H :] + r * gh[..., 2 * H :])
    return n + z * (h - n)


def gru_cell(x, h, params: dict, prefix="") -> Tensor:
    """One GRU step.

    ``r = sigma(x W_ir + b_ir + h W_hr + b_hr)``,
    ``z = sigma(x W_iz + b_iz + h W_hz + b_hz)``,
    ``n = tanh(x W_in + b_in + r * (h W_hn + b_hn))``,
    ``h' = (1 - z) * n + z * h``.
    """
    W_ih, W_hh = params[prefix + "W_ih"], params[prefix + "W_hh"]
    H = W_hh.shape[0]
    x, h = _as_tensor(x), _as_tensor(h)
    if x.shape[-1] != W_ih.shape[0] or h.shape[-1] != H:
        raise ValueError("GRU input or state dimension mismatch")
    gi = matmul(x, W_ih) + params[prefix + "b_ih"]
    return _gru_update(gi, h, W_hh, params[prefix + "b_hh"], H)


def gru_layer(xs, params: dict, h0=None, prefix="") -> Tensor:
    """Run a GRU over ``xs[batch, T, in]``; returns ``[batch, T, H]``.

    The input projection is computed for all frames at once.
    """
    xs = _as_tensor(xs)
    W_ih, W_hh = params[prefix + "W_ih"], params[prefix + "W_hh"]
    H = W_hh.shape[0]
    if xs.shape[-1] != W_ih.shape[0]:
        raise ValueError("GRU input dimension mismatch")
    gi_all = matmul(xs, W_ih) + params[prefix + "b_ih"]
    h = _as_tensor(h0) if h0 is not None else Tensor(np.zeros(xs.shape[:-2] + (H,)))
    outs = []
    for t in range(xs.shape[-2]):
        h = _gru_update(gi_all[..., t, :], h, W_hh, params[prefix + "b_hh"], H)
        outs.append(h)
    return stack(outs, axis=-2)


# optimisation

class Adam:
    """Adam with bias correction (Kingma & Ba)."""

    def __init__(self, params: dict, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.step_count = 0
        self.m = {k: np.zeros(p.shape) for k, p in params.items()}
        self.v = {k: np.zeros(p.shape) for k, p in params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        grads = {k: (p.grad if p.grad is not None else np.zeros(p.shape)) for k, p in self.params.items()}
        bad = [k for k, g in grads.items() if not np.all(np.isfinite(g))]
        if bad:
            raise NonFiniteError(f"non-finite gradient in {bad} at step {self.step_count + 1}")
        self.step_count += 1
        b1c = 1 - self.beta1**self.step_count
        b2c = 1 - self.beta2**self.step_count
        for k, p in self.params.items():
            g = grads[k]
            self.m[k] = self.beta1 * self.m[k] + (1 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1 - self.beta2) * g * g
            p.value = p.value - self.lr * (self.m[k] / b1c) / (np.sqrt(self.v[k] / b2c) + self.eps)

    def hyperparameters(self) -> dict:
        return {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps, "step": self.step_count}


class PlateauScheduler:
    """Multiply the learning rate by ``factor`` after ``patience`` epochs without improvement."""

    def __init__(self, optimizer: Adam, factor=0.3, patience=10, min_lr=0.0):
        self.optimizer = optimizer
        self.factor, self.patience, self.min_lr = factor, patience, min_lr
        self.best = np.inf
        self.bad_epochs = 0

    def step(self, val_loss: float) -> float:
        if val_loss < self.best:
            self.best = float(val_loss)
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs >= self.patience:
                self.optimizer.lr = max(self.optimizer.lr * self.factor, self.min_lr)
                self.bad_epochs = 0
        return self.optimizer.lr

    def state(self) -> dict:
        return {"factor": self.factor, "patience": self.patience, "best": self.best, "bad_epochs": self.bad_epochs}


def save_checkpoint(path, params: dict, optimizer: Adam | None = None, scheduler: PlateauScheduler | None = None,
                    extra: dict | None = None) -> None:
    """Write ``<path>.json`` (manifest) and ``<path>.bin`` (little-endian f64 payload).

    The payload holds every parameter, followed by the Adam first and
    second moments when an optimizer is given.
    """
    path = Path(path)
    entries, blobs, offset = [], [], 0
    groups = [("param", {k: p.value for k, p in params.items()})]
    if optimizer is not None:
        groups += [("adam_m", optimizer.m), ("adam_v", optimizer.v)]
    for kind, arrays in groups:
        for name, arr in arrays.items():
            arr = np.ascontiguousarray(arr, dtype="<f8")
            entries.append({"group": kind, "name": name, "shape": list(arr.shape), "offset": offset})
            blobs.append(arr.tobytes())
            offset += arr.size
    manifest = {
        "format": "gradkit-checkpoint-1",
        "tensors": entries,
        "optimizer": optimizer.hyperparameters() if optimizer is not None else None,
        "scheduler": scheduler.state() if scheduler is not None else None,
        "extra": extra or {},
    }
    path.with_suffix(".bin").write_bytes(b"".join(blobs))
    path.with_suffix(".json").write_text(json.dumps(manifest, indent=1))


def load_checkpoint(path) -> dict:
    """Inverse of :func:`save_checkpoint`.

    Returns ``{"params": {name: ndarray}, "adam_m": ..., "adam_v": ...,
    "optimizer": ..., "scheduler": ..., "extra": ...}``.
    """
    path = Path(path)
    manifest = json.loads(path.with_suffix(".json").read_text())
    if manifest.get("format") != "gradkit-checkpoint-1":
        raise ValueError(f"{path} is not a gradkit checkpoint")
    payload = np.frombuffer(path.with_suffix(".bin").read_bytes(), dtype="<f8")
    out = {"params": {}, "adam_m": {}, "adam_v": {}}
    for e in manifest["tensors"]:
        size = int(np.prod(e["shape"]))
        if e["offset"] + size > payload.size:
            raise ValueError("checkpoint payload truncated")
        out[e["group"] if e["group"] != "param" else "params"][e["name"]] = (
            payload[e["offset"] : e["offset"] + size].reshape(e["shape"]).copy()
        )
    out.update(optimizer=manifest["optimizer"], scheduler=manifest["scheduler"], extra=manifest["extra"])
    return out


def numerical_gradient(fn, x: np.ndarray, h=1e-6) -> np.ndarray:
    """Central finite differences of a scalar function of ``x`` (testing aid)."""
    x = np.array(x, dtype=float, order="C")
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = fn(x)
        flat[i] = old - h
        fm = fn(x)
        flat[i] = old
        gf[i] = (fp - fm) / (2 * h)
    return g
