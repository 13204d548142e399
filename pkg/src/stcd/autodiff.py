"""A minimal reverse-mode autodiff engine over numpy arrays.

Only the operations the detection and temporal networks need are provided:
convolution, a few activations, linear maps, pooling, concatenation,
bilinear warping and the training losses. Shapes are explicit; there is no
general broadcasting. Storage is float32 for training and inference and
float64 inside gradient checks; every op preserves its inputs' dtype.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from . import kernels


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    """An ndarray with an optional gradient and a link to the op that made it."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), _backward=None):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True).reshape(self.data.shape)
        else:
            self.grad += g

    def backward(self, grad=None):
        """Backpropagate from this tensor. A scalar tensor seeds with 1."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() without a seed needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = []
        seen = set()
        stack = [(self, False)]
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
        self._accumulate(grad)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # arithmetic on same-shape tensors or python scalars
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(other, -1.0)) if isinstance(other, Tensor) else add(self, -other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def sum(self):
        return total(self)

    def mean(self):
        return mean(self)


def _make(data, parents, backward) -> Tensor:
    req = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=req, _parents=parents if req else (), _backward=backward if req else None)


def _check_dims(name: str, got, want):
    if got != want:
        raise ShapeError(f"{name} mismatch: got {got}, expected {want}")


# ---------------------------------------------------------------------------
# elementwise arithmetic and reductions
# ---------------------------------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        if a.shape != b.shape:
            raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")

        def bw(g):
            if a.requires_grad:
                a._accumulate(g)
            if b.requires_grad:
                b._accumulate(g)

        return _make(a.data + b.data, (a, b), bw)

    def bw_scalar(g):
        a._accumulate(g)

    return _make(a.data + b, (a,), bw_scalar)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")

    def bw(g):
        if a.requires_grad:
            a._accumulate(g * b.data)
        if b.requires_grad:
            b._accumulate(g * a.data)

    return _make(a.data * b.data, (a, b), bw)


def scale(a: Tensor, c: float) -> Tensor:
    def bw(g):
        a._accumulate(g * c)

    return _make(a.data * c, (a,), bw)


def square(a: Tensor) -> Tensor:
    def bw(g):
        a._accumulate(2 * g * a.data)

    return _make(a.data * a.data, (a,), bw)


def total(a: Tensor) -> Tensor:
    def bw(g):
        a._accumulate(np.broadcast_to(g, a.shape))

    return _make(np.asarray(a.data.sum(), dtype=a.dtype), (a,), bw)


def mean(a: Tensor, axis=None) -> Tensor:
    """Mean over all elements, or over the given axes (which are dropped)."""
    if axis is None:
        n = a.data.size

        def bw(g):
            a._accumulate(np.broadcast_to(g / n, a.shape))

        return _make(np.asarray(a.data.mean(), dtype=a.dtype), (a,), bw)
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    n = int(np.prod([a.shape[i] for i in axes]))

    def bw_axes(g):
        a._accumulate(np.broadcast_to(np.expand_dims(g / n, axes), a.shape))

    return _make(a.data.mean(axis=axes).astype(a.dtype), (a,), bw_axes)


def reshape(a: Tensor, shape) -> Tensor:
    def bw(g):
        a._accumulate(g.reshape(a.shape))

    return _make(a.data.reshape(shape), (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    ref = tensors[0].shape
    for t in tensors[1:]:
        for d in range(len(ref)):
            if d != axis % len(ref) and t.shape[d] != ref[d]:
                raise ShapeError(f"concat: dimension {d} mismatch ({t.shape[d]} vs {ref[d]})")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                t._accumulate(np.take(g, np.arange(lo, hi), axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bw)


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def bw(g):
        x._accumulate(g * mask)

    return _make(np.where(mask, x.data, 0).astype(x.dtype), (x,), bw)


def leaky_relu(x: Tensor, alpha: float = 0.1) -> Tensor:
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"leaky_relu alpha must lie in (0, 1), got {alpha}")
    mask = x.data > 0
    slope = np.where(mask, 1.0, alpha).astype(x.dtype)

    def bw(g):
        x._accumulate(g * slope)

    return _make(x.data * slope, (x,), bw)


def _sigmoid_np(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid_np(x.data)

    def bw(g):
        x._accumulate(g * s * (1 - s))

    return _make(s, (x,), bw)


def activation(x: Tensor, kind: str, alpha: float = 0.1) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "leaky_relu":
        return leaky_relu(x, alpha)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation kind {kind!r}")


# ---------------------------------------------------------------------------
# convolution, linear, pooling
# ---------------------------------------------------------------------------


def conv_out_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x`` ([C,H,W] or [N,C,H,W]) with ``w`` ([Co,Ci,K,K]).

    Zero padding only. Returns [Co,H',W'] or [N,Co,H',W'] to match the input.
    """
    single = x.ndim == 3
    xd = x.data[None] if single else x.data
    if xd.ndim != 4:
        raise ShapeError(f"conv2d input must be rank 3 or 4, got rank {x.ndim}")
    if w.ndim != 4:
        raise ShapeError(f"conv2d weights must be rank 4, got rank {w.ndim}")
    co, ci, k, k2 = w.shape
    if k != k2 or k % 2 == 0:
        raise ShapeError(f"conv2d kernel must be square and odd, got {k}x{k2}")
    n, c, h, wd = xd.shape
    _check_dims("conv2d input channels", c, ci)
    if b is not None:
        _check_dims("conv2d bias length", b.shape, (co,))
    if stride < 1 or padding < 0:
        raise ValueError(f"conv2d needs stride >= 1 and padding >= 0, got {stride}, {padding}")
    ho = conv_out_size(h, k, stride, padding)
    wo = conv_out_size(wd, k, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d output height/width would be {ho}x{wo}")
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    cols = kernels.im2col(np.ascontiguousarray(xp), k, stride, ho, wo).reshape(n * ho * wo, ci * k * k)
    wmat = w.data.reshape(co, ci * k * k)
    out = cols @ wmat.T
    if b is not None:
        out += b.data
    out = out.reshape(n, ho, wo, co).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out[0] if single else out)

    def bw(g):
        g4 = g[None] if single else g
        g2 = np.ascontiguousarray(g4.transpose(0, 2, 3, 1)).reshape(n * ho * wo, co)
        if w.requires_grad:
            w._accumulate((g2.T @ cols).reshape(w.shape))
        if b is not None and b.requires_grad:
            b._accumulate(g2.sum(axis=0))
        if x.requires_grad:
            dcols = (g2 @ wmat).reshape(n, ho, wo, ci, k, k)
            dxp = kernels.col2im(dcols, xp.shape[2], xp.shape[3], stride)
            if padding:
                dxp = dxp[:, :, padding:-padding, padding:-padding]
            x._accumulate(dxp[0] if single else dxp)

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, bw)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Affine map of ``x`` ([N] or [B,N]) by ``w`` ([M,N]) plus ``b`` ([M])."""
    if w.ndim != 2:
        raise ShapeError(f"linear weights must be rank 2, got rank {w.ndim}")
    _check_dims("linear input features", x.shape[-1], w.shape[1])
    if b is not None:
        _check_dims("linear bias length", b.shape, (w.shape[0],))
    out = x.data @ w.data.T
    if b is not None:
        out = out + b.data

    def bw(g):
        if x.requires_grad:
            x._accumulate(g @ w.data)
        if w.requires_grad:
            w._accumulate(np.outer(g, x.data) if x.ndim == 1 else g.T @ x.data)
        if b is not None and b.requires_grad:
            b._accumulate(g if g.ndim == 1 else g.sum(axis=0))

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, bw)


def global_avg_pool(x: Tensor) -> Tensor:
    """Per-channel spatial mean: [C,H,W] -> [C], [N,C,H,W] -> [N,C]."""
    if x.ndim not in (3, 4):
        raise ShapeError(f"global_avg_pool input must be rank 3 or 4, got rank {x.ndim}")
    h, w = x.shape[-2:]
    if h < 1 or w < 1:
        raise ShapeError("global_avg_pool needs H, W >= 1")
    return mean(x, axis=(-2 % x.ndim, -1 % x.ndim))


def bilinear_warp(feat: Tensor, flow: Tensor) -> Tensor:
    """Resample ``feat`` at (y + flow_y, x + flow_x) with border clamping.

    ``flow`` channel 0 is the x displacement and channel 1 the y displacement,
    both in cells of ``feat``. Accepts [C,H,W]+[2,H,W] or batched inputs.
    """
    single = feat.ndim == 3
    fd = feat.data[None] if single else feat.data
    fl = flow.data[None] if single else flow.data
    if fl.shape[1] != 2:
        raise ShapeError(f"bilinear_warp flow must have 2 channels, got {fl.shape[1]}")
    _check_dims("bilinear_warp spatial size", fl.shape[2:], fd.shape[2:])
    _check_dims("bilinear_warp batch", fl.shape[0], fd.shape[0])
    fd = np.ascontiguousarray(fd)
    fl = np.ascontiguousarray(fl.astype(fd.dtype, copy=False))
    out = kernels.bilinear_fwd(fd, fl)

    def bw(g):
        g4 = np.ascontiguousarray(g[None] if single else g)
        gf, gflow = kernels.bilinear_bwd(fd, fl, g4)
        if feat.requires_grad:
            feat._accumulate(gf[0] if single else gf)
        if flow.requires_grad:
            flow._accumulate(gflow[0] if single else gflow)

    return _make(out[0] if single else out, (feat, flow), bw)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def _weighted_mean(elem, dl, x: Tensor, weights):
    if weights is None:
        n = elem.size
        value = elem.mean()

        def bw(g):
            x._accumulate(g * dl / n)

    else:
        wsum = float(weights.sum())
        if wsum <= 0:
            raise ValueError("loss weights must have a positive sum")
        value = (elem * weights).sum() / wsum

        def bw(g):
            x._accumulate(g * dl * weights / wsum)

    return _make(np.asarray(value, dtype=x.dtype), (x,), bw)


def focal_loss(logits: Tensor, targets, alpha: float = 0.25, gamma: float = 2.0, weights=None) -> Tensor:
    """Mean of -alpha_t (1 - p_t)^gamma log p_t with p = sigmoid(logits).

    ``weights`` (same shape, non-negative) turns the mean into a weighted mean;
    zero weights drop elements such as ignored anchors.
    """
    t = np.asarray(targets)
    if t.shape != logits.shape:
        raise ShapeError(f"focal_loss: targets shape {t.shape} != logits shape {logits.shape}")
    if not np.all((t == 0) | (t == 1)):
        raise ValueError("focal_loss targets must be binary (0 or 1)")
    z = logits.data
    pos = t == 1
    s = np.where(pos, 1.0, -1.0).astype(z.dtype)
    zt = s * z
    # log p_t = -softplus(-zt), computed stably
    log_pt = -(np.maximum(-zt, 0) + np.log1p(np.exp(-np.abs(zt))))
    pt = np.exp(log_pt)
    alpha_t = np.where(pos, alpha, 1 - alpha).astype(z.dtype)
    one_m = 1 - pt
    elem = -alpha_t * one_m**gamma * log_pt
    dl = s * alpha_t * (gamma * pt * one_m**gamma * log_pt - one_m ** (gamma + 1))
    w = None if weights is None else np.asarray(weights, dtype=z.dtype)
    return _weighted_mean(elem, dl, logits, w)


def smooth_l1(pred: Tensor, target, beta: float = 1.0, weights=None) -> Tensor:
    """Mean Huber-style loss: 0.5 d^2 / beta inside |d| < beta, |d| - beta/2 outside."""
    if beta <= 0:
        raise ValueError(f"smooth_l1 beta must be positive, got {beta}")
    t = np.asarray(target, dtype=pred.dtype)
    if t.shape != pred.shape:
        raise ShapeError(f"smooth_l1: target shape {t.shape} != pred shape {pred.shape}")
    d = pred.data - t
    ad = np.abs(d)
    inner = ad < beta
    elem = np.where(inner, 0.5 * d * d / beta, ad - 0.5 * beta)
    dl = np.where(inner, d / beta, np.sign(d))
    w = None if weights is None else np.asarray(weights, dtype=pred.dtype)
    return _weighted_mean(elem, dl, pred, w)


# ---------------------------------------------------------------------------
# parameters, Adam, randomness
# ---------------------------------------------------------------------------


@dataclass
class ParamGroup:
    """A trainable tensor plus its Adam moment buffers."""

    name: str
    tensor: Tensor
    adam_m: np.ndarray = None
    adam_v: np.ndarray = None
    step_count: int = 0

    def __post_init__(self):
        if self.adam_m is None:
            self.adam_m = np.zeros_like(self.tensor.data)
        if self.adam_v is None:
            self.adam_v = np.zeros_like(self.tensor.data)

    @property
    def gradient(self):
        g = self.tensor.grad
        return np.zeros_like(self.tensor.data) if g is None else g


def adam_step(group: ParamGroup, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> ParamGroup:
    """One bias-corrected Adam update, in place. ``lr == 0`` leaves the tensor untouched."""
    if lr < 0:
        raise ValueError(f"learning rate must be non-negative, got {lr}")
    g = group.gradient
    group.adam_m = beta1 * group.adam_m + (1 - beta1) * g
    group.adam_v = beta2 * group.adam_v + (1 - beta2) * g * g
    group.step_count += 1
    if lr > 0:
        t = group.step_count
        mhat = group.adam_m / (1 - beta1**t)
        vhat = group.adam_v / (1 - beta2**t)
        group.tensor.data = (group.tensor.data - lr * mhat / (np.sqrt(vhat) + eps)).astype(group.tensor.dtype)
    return group


def derive_seed(seed: int, purpose: str) -> int:
    """Sub-seed for ``purpose``: first 8 bytes (little-endian) of sha256("seed:purpose")."""
    digest = hashlib.sha256(f"{int(seed)}:{purpose}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


@dataclass
class RngStream:
    """Seeded random stream; numpy's PCG64 bit generator, platform independent."""

    seed: int
    algorithm: str = field(default="PCG64", init=False)

    def __post_init__(self):
        self.seed = int(self.seed) & 0xFFFFFFFFFFFFFFFF
        self.gen = np.random.Generator(np.random.PCG64(self.seed))

    def child(self, purpose: str) -> "RngStream":
        return RngStream(derive_seed(self.seed, purpose))


def he_normal(rng: RngStream, shape, fan_in: int, dtype=np.float32) -> np.ndarray:
    return (rng.gen.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


# ---------------------------------------------------------------------------
# gradient verification
# ---------------------------------------------------------------------------


def finite_diff_check(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    h: float = 1e-5,
    floor: float = 1e-2,
    max_elems: int | None = None,
    seed: int = 0,
    grads: Iterable[np.ndarray] | None = None,
) -> float:
    """Largest relative gap between analytic and central-difference gradients.

    The error per element is ``|analytic - numeric| / max(|numeric|, floor)``,
    so tiny gradients are judged on absolute terms (``floor * rtol`` acts as
    atol). ``max_elems`` checks a seeded random subset of each input.
    ``grads`` overrides the analytic gradients, which is how the checker is
    itself tested against injected faults.
    """
    if h <= 0:
        raise ValueError(f"step h must be positive, got {h}")
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    out = fn(*inputs)
    if out.data.size != 1:
        raise ShapeError(f"finite_diff_check needs a scalar-valued function, got shape {out.shape}")
    out.backward()
    analytic = list(grads) if grads is not None else [
        np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs
    ]
    rng = np.random.default_rng(seed)
    worst = 0.0
    for t, a in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_elems is not None and flat.size > max_elems:
            idx = np.sort(rng.choice(flat.size, size=max_elems, replace=False))
        af = a.reshape(-1)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            fp = float(fn(*inputs).data)
            flat[i] = orig - h
            fm = float(fn(*inputs).data)
            flat[i] = orig
            num = (fp - fm) / (2 * h)
            err = abs(af[i] - num) / max(abs(num), floor)
            worst = max(worst, err)
    return worst
