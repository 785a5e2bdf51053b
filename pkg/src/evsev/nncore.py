"""Dense float64 tensors with a reverse-mode gradient tape.

Only what the smoke-severity network needs: 2-D cross-correlation (no kernel
flip), affine maps, three activations, pooling, gating and dropout. Tensors are
at most 4-D with N x C x H x W layout. Apart from bias addition and the
explicit ``gate`` op there is no broadcasting; mismatched shapes raise
``ShapeError``.

Gradients are recorded only while a :class:`GradTape` is active::

    with GradTape() as tape:
        loss = some_function(params)
    tape.backward(loss)
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "DegenerateLossError",
    "Tensor",
    "GradTape",
    "custom_op",
    "conv2d",
    "linear",
    "activation",
    "relu",
    "sigmoid",
    "softplus",
    "pool",
    "max_pool2d",
    "gate",
    "concat",
    "reshape",
    "add",
    "mul",
    "scale",
    "sum_all",
    "mean_all",
    "dropout",
    "backward_and_check",
]


class ShapeError(ValueError):
    pass


class DegenerateLossError(FloatingPointError):
    pass


_ids = itertools.count()
_active: list["GradTape"] = []


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "id", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim > 4:
            raise ShapeError(f"tensors have at most 4 axes, got shape {arr.shape}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.id = next(_ids)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" {self.name}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"


@dataclass
class TapeRecord:
    kind: str
    input_ids: tuple[int, ...]
    output_id: int
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class GradTape:
    records: list[TapeRecord] = field(default_factory=list)

    def __enter__(self) -> "GradTape":
        _active.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _active.remove(self)

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires it.

        Records are replayed in exact reverse recording order.
        """
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not np.isfinite(loss.data).all():
            raise DegenerateLossError(f"non-finite loss {loss.data.reshape(-1)[0]}")
        grads: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.data)}
        for rec in reversed(self.records):
            g_out = grads.pop(rec.output_id, None)
            if g_out is None:
                continue
            g_ins = rec.backward(g_out)
            for t, g in zip(rec.inputs, g_ins):
                if g is None or not t.requires_grad:
                    continue
                if t.id in grads:
                    grads[t.id] = grads[t.id] + g
                else:
                    grads[t.id] = g
        # whatever is left belongs to leaves (parameters / inputs)
        for rec in self.records:
            for t in rec.inputs:
                g = grads.pop(t.id, None)
                if g is None:
                    continue
                t.grad = g if t.grad is None else t.grad + g


def _recording(inputs: Sequence[Tensor]) -> bool:
    return bool(_active) and any(t.requires_grad for t in inputs)


def custom_op(kind: str, inputs: Sequence[Tensor], out: np.ndarray, backward) -> Tensor:
    """Wrap an already computed forward value and register its backward rule.

    ``backward(g_out)`` must return one gradient (or ``None``) per input.
    """
    inputs = tuple(inputs)
    result = Tensor(out, requires_grad=any(t.requires_grad for t in inputs))
    if _recording(inputs):
        _active[-1].records.append(
            TapeRecord(kind, tuple(t.id for t in inputs), result.id, inputs, result, backward)
        )
    return result


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------- convolution

def conv2d(x: Tensor, kernels: Tensor, bias: Tensor | None = None,
           padding: int = 0, stride: int = 1) -> Tensor:
    """Cross-correlation of ``x`` (C x H x W or N x C x H x W) with C_out x C_in x k x k kernels."""
    x, kernels = _as_tensor(x), _as_tensor(kernels)
    single = x.data.ndim == 3
    xd = x.data[None] if single else x.data
    if xd.ndim != 4 or kernels.data.ndim != 4:
        raise ShapeError(f"conv2d expects C x H x W input and 4-D kernels, got {x.shape} and {kernels.shape}")
    n, c_in, h, w = xd.shape
    c_out, kc, kh, kw = kernels.shape
    if kc != c_in:
        raise ShapeError(f"conv2d: input has {c_in} channels but kernels expect {kc}")
    if kh != kw or kh % 2 == 0:
        raise ShapeError(f"conv2d: kernel must be square with odd size, got {kh}x{kw}")
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.shape != (c_out,):
            raise ShapeError(f"conv2d: bias shape {bias.shape} does not match {c_out} output channels")
    if stride < 1 or padding < 0:
        raise ShapeError("conv2d: stride must be >= 1 and padding >= 0")
    k = kh
    hp, wp = h + 2 * padding, w + 2 * padding
    if (hp - k) % stride or (wp - k) % stride or hp < k or wp < k:
        raise ShapeError(f"conv2d: (H + 2*padding - k)/stride not integral for H,W={h},{w} k={k} "
                         f"padding={padding} stride={stride}")
    ho, wo = (hp - k) // stride + 1, (wp - k) // stride + 1

    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    # cols: N x C x Ho x Wo x k x k
    cols = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    cols2 = cols.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c_in * k * k)
    wmat = kernels.data.reshape(c_out, -1)
    out = cols2 @ wmat.T
    if bias is not None:
        out = out + bias.data
    out = out.reshape(n, ho, wo, c_out).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out[0] if single else out)

    inputs = (x, kernels) if bias is None else (x, kernels, bias)

    def backward(g):
        g4 = g[None] if single else g
        gmat = g4.transpose(0, 2, 3, 1).reshape(n * ho * wo, c_out)
        gw = (gmat.T @ cols2).reshape(kernels.shape) if kernels.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (gmat @ wmat).reshape(n, ho, wo, c_in, k, k)
            gxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                        gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
            gx = gx[0] if single else gx
        if bias is None:
            return gx, gw
        return gx, gw, gmat.sum(axis=0)

    return custom_op("conv2d", inputs, out, backward)


# --------------------------------------------------------------------- affine

def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``weight @ x + bias`` for a vector x, or row-wise for an N x n batch."""
    x, weight = _as_tensor(x), _as_tensor(weight)
    if weight.data.ndim != 2 or x.data.ndim not in (1, 2):
        raise ShapeError(f"linear expects a vector/batch and a matrix, got {x.shape} and {weight.shape}")
    m, nin = weight.shape
    if x.shape[-1] != nin:
        raise ShapeError(f"linear: input length {x.shape[-1]} does not match weight {weight.shape}")
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.shape != (m,):
            raise ShapeError(f"linear: bias shape {bias.shape} does not match output size {m}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def backward(g):
        gx = g @ weight.data if x.requires_grad else None
        gw = (np.outer(g, x.data) if x.data.ndim == 1 else g.T @ x.data) if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, (g if g.ndim == 1 else g.sum(axis=0))

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return custom_op("linear", inputs, out, backward)


# ---------------------------------------------------------------- activations

def _stable_softplus(z: np.ndarray) -> np.ndarray:
    return np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))


def _stable_sigmoid(z: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def activation(x: Tensor, kind: str) -> Tensor:
    x = _as_tensor(x)
    z = x.data
    if kind == "relu":
        out = np.maximum(z, 0.0)
        return custom_op("relu", (x,), out, lambda g: (g * (z > 0),))
    if kind == "sigmoid":
        out = _stable_sigmoid(z)
        return custom_op("sigmoid", (x,), out, lambda g: (g * out * (1.0 - out),))
    if kind == "softplus":
        out = _stable_softplus(z)
        return custom_op("softplus", (x,), out, lambda g: (g * _stable_sigmoid(z),))
    raise ValueError(f"unknown activation {kind!r}")


def relu(x):
    return activation(x, "relu")


def sigmoid(x):
    return activation(x, "sigmoid")


def softplus(x):
    return activation(x, "softplus")


# -------------------------------------------------------------------- pooling

def _route_max(arr: np.ndarray, axes: tuple[int, ...]) -> np.ndarray:
    """One-hot mask of the first maximum along ``axes`` (ties go to one entry)."""
    moved = np.moveaxis(arr, axes, tuple(range(arr.ndim - len(axes), arr.ndim)))
    flat = moved.reshape(moved.shape[:arr.ndim - len(axes)] + (-1,))
    idx = flat.argmax(axis=-1)
    mask = np.zeros_like(flat)
    np.put_along_axis(mask, idx[..., None], 1.0, axis=-1)
    mask = mask.reshape(moved.shape)
    return np.moveaxis(mask, tuple(range(arr.ndim - len(axes), arr.ndim)), axes)


def pool(x: Tensor, mode: str) -> Tensor:
    """Global (over H x W -> C) or channelwise (over C -> 1 x H x W) avg/max pooling."""
    x = _as_tensor(x)
    d = x.data
    if d.ndim not in (3, 4):
        raise ShapeError(f"pool expects C x H x W or N x C x H x W, got {x.shape}")
    spatial = (d.ndim - 2, d.ndim - 1)
    chan = d.ndim - 3
    if mode == "global_avg":
        out = d.mean(axis=spatial)
        hw = d.shape[-1] * d.shape[-2]
        return custom_op(mode, (x,), out,
                         lambda g: (np.broadcast_to(g[..., None, None] / hw, d.shape).copy(),))
    if mode == "global_max":
        out = d.max(axis=spatial)
        mask = _route_max(d, spatial)
        return custom_op(mode, (x,), out, lambda g: (mask * g[..., None, None],))
    if mode == "channelwise_avg":
        out = d.mean(axis=chan, keepdims=True)
        c = d.shape[chan]
        return custom_op(mode, (x,), out, lambda g: (np.broadcast_to(g / c, d.shape).copy(),))
    if mode == "channelwise_max":
        out = d.max(axis=chan, keepdims=True)
        mask = _route_max(d, (chan,))
        return custom_op(mode, (x,), out, lambda g: (mask * g,))
    raise ValueError(f"unknown pool mode {mode!r}")


def max_pool2d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping size x size max pooling; H and W must be divisible by size."""
    x = _as_tensor(x)
    d = x.data
    if d.ndim not in (3, 4) or d.shape[-1] % size or d.shape[-2] % size:
        raise ShapeError(f"max_pool2d: shape {x.shape} not divisible by {size}")
    h, w = d.shape[-2], d.shape[-1]
    blocks = d.reshape(d.shape[:-2] + (h // size, size, w // size, size))
    out = blocks.max(axis=(-3, -1))
    mask = _route_max(blocks, (blocks.ndim - 3, blocks.ndim - 1))

    def backward(g):
        return ((mask * g[..., :, None, :, None]).reshape(d.shape),)

    return custom_op("max_pool2d", (x,), out, backward)


# ------------------------------------------------------------ shape plumbing

def gate(x: Tensor, g: Tensor) -> Tensor:
    """Multiply ``x`` by a gate broadcast over spatial (C x 1 x 1) or channel (1 x H x W) axes."""
    x, g = _as_tensor(x), _as_tensor(g)
    if g.data.ndim != x.data.ndim:
        raise ShapeError(f"gate rank mismatch: {x.shape} vs {g.shape}")
    for a, b in zip(x.shape, g.shape):
        if b != a and b != 1:
            raise ShapeError(f"gate shape {g.shape} cannot broadcast over {x.shape}")
    out = x.data * g.data
    red = tuple(i for i, (a, b) in enumerate(zip(x.shape, g.shape)) if b == 1 and a != 1)

    def backward(gr):
        gx = gr * g.data if x.requires_grad else None
        gg = (gr * x.data).sum(axis=red, keepdims=True) if g.requires_grad else None
        return gx, gg

    return custom_op("gate", (x, g), out, backward)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return custom_op("concat", tensors, out, lambda g: tuple(np.split(g, splits, axis=axis)))


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    x = _as_tensor(x)
    out = x.data.reshape(shape)
    return custom_op("reshape", (x,), out, lambda g: (g.reshape(x.shape),))


# ----------------------------------------------------------------- arithmetic

def _same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes differ, {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same(a, b, "add")
    return custom_op("add", (a, b), a.data + b.data, lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same(a, b, "mul")
    return custom_op("mul", (a, b), a.data * b.data, lambda g: (g * b.data, g * a.data))


def scale(a: Tensor, c: float) -> Tensor:
    a = _as_tensor(a)
    return custom_op("scale", (a,), a.data * c, lambda g: (g * c,))


def sum_all(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    return custom_op("sum", (a,), np.array(a.data.sum()),
                     lambda g: (np.full(a.shape, float(g)),))


def mean_all(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    n = a.data.size
    return custom_op("mean", (a,), np.array(a.data.mean()),
                     lambda g: (np.full(a.shape, float(g) / n),))


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout; the identity unless ``training``."""
    x = _as_tensor(x)
    if not training or rate == 0.0:
        return x
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if rng is None:
        raise ValueError("training-mode dropout needs a seeded rng")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return custom_op("dropout", (x,), x.data * keep, lambda g: (g * keep,))


# ----------------------------------------------------------- gradient checks

def backward_and_check(loss_fn: Callable[[], Tensor], params: Sequence[Tensor],
                       epsilon: float = 1e-5, n_samples: int = 50,
                       seed: int = 0) -> float:
    """Max relative error between tape gradients and central finite differences.

    ``loss_fn`` must be deterministic and build its graph from ``params``.
    The error of one entry is ``|analytic - fd| / max(1, |analytic|, |fd|)``;
    ``n_samples`` entries are drawn uniformly over all parameter entries.
    """
    if not 1e-7 <= epsilon <= 1e-3:
        raise ValueError(f"epsilon must lie in [1e-7, 1e-3], got {epsilon}")
    params = list(params)
    for p in params:
        p.requires_grad = True
        p.zero_grad()
    with GradTape() as tape:
        loss = loss_fn()
    if not np.isfinite(loss.data).all():
        raise DegenerateLossError(f"loss is not finite: {loss.data}")
    tape.backward(loss)

    sizes = np.array([p.data.size for p in params])
    total = int(sizes.sum())
    rng = np.random.default_rng(seed)
    picks = rng.choice(total, size=min(n_samples, total), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    def value() -> float:
        v = float(loss_fn().data)
        if not math.isfinite(v):
            raise DegenerateLossError("loss became non-finite under perturbation")
        return v

    worst = 0.0
    for flat in picks:
        which = int(np.searchsorted(offsets, flat, side="right") - 1)
        p = params[which]
        idx = np.unravel_index(int(flat - offsets[which]), p.shape)
        analytic = 0.0 if p.grad is None else float(p.grad[idx])
        orig = p.data[idx]
        p.data[idx] = orig + epsilon
        up = value()
        p.data[idx] = orig - epsilon
        down = value()
        p.data[idx] = orig
        fd = (up - down) / (2 * epsilon)
        err = abs(analytic - fd) / max(1.0, abs(analytic), abs(fd))
        worst = max(worst, err)
    return worst
