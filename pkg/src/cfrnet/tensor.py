"""Minimal reverse-mode autograd over dense NCHW numpy arrays.

Only the operations the two-stream detector needs are provided. Every
operation is a :class:`Function` subclass registered in ``OPS`` so the
gradient-check suite can enumerate them.
"""
from __future__ import annotations

import contextlib
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import ContractError, NonFiniteError


_GRAD_ENABLED = True
_ANOMALY = False


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@contextlib.contextmanager
def detect_anomaly():
    """Check every op output for NaN/inf and raise naming the op."""
    global _ANOMALY
    prev, _ANOMALY = _ANOMALY, True
    try:
        yield
    finally:
        _ANOMALY = prev


class Tensor:
    """Dense array of rank 1-4 with an optional gradient buffer."""

    def __init__(self, data, requires_grad: bool = False, dtype=None, _ctx: Optional["Function"] = None):
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and arr.dtype.kind != "f":
            arr = arr.astype(np.float32)
        if not 1 <= arr.ndim <= 4:
            raise ContractError(f"tensor rank must be 1-4, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._ctx = _ctx

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __getitem__(self, key) -> "Tensor":
        return Index.apply(self, key=key)

    def backward(self, grad: Optional[np.ndarray] = None):
        """Accumulate d(self)/d(leaf) into ``.grad`` of every leaf requiring grad."""
        if grad is None:
            if self.data.size != 1:
                raise ContractError("backward() without a seed gradient needs a single-element tensor")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.dtype)
        if grad.shape != self.shape:
            raise ContractError(f"seed gradient shape {grad.shape} != tensor shape {self.shape}")

        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            if node._ctx is not None:
                for p in node._ctx.parents:
                    if p.requires_grad and id(p) not in seen:
                        stack.append((p, False))

        grads = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._ctx is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._ctx.backward(g)
            for p, pg in zip(node._ctx.parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                if _ANOMALY and not np.all(np.isfinite(pg)):
                    raise NonFiniteError(type(node._ctx).__name__, "in backward")
                key = id(p)
                grads[key] = pg if key not in grads else grads[key] + pg


class Parameter(Tensor):
    """Trainable tensor with a stable name and the descriptor used to initialise it."""

    def __init__(self, name: str, data, init: str = "given"):
        super().__init__(data, requires_grad=True)
        self.name = name
        self.init = init

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape}, init={self.init!r})"


def he_normal(name: str, shape: Sequence[int], rng: np.random.Generator, dtype=np.float32) -> Parameter:
    fan_in = int(np.prod(shape[1:]))
    data = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
    return Parameter(name, data.astype(dtype), init=f"he_normal(fan_in={fan_in})")


def constant(name: str, shape: Sequence[int], value: float, dtype=np.float32) -> Parameter:
    return Parameter(name, np.full(shape, value, dtype=dtype), init=f"constant({value})")


class Function:
    """One differentiable operation. Subclasses implement forward/backward on arrays."""

    def __init__(self, *parents: Tensor):
        self.parents = parents

    def forward(self, *arrays: np.ndarray, **kwargs) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> tuple:
        raise NotImplementedError

    @classmethod
    def apply(cls, *tensors: Tensor, **kwargs) -> Tensor:
        fn = cls(*tensors)
        out = fn.forward(*(t.data for t in tensors), **kwargs)
        if _ANOMALY and not np.all(np.isfinite(out)):
            raise NonFiniteError(cls.__name__)
        track = _GRAD_ENABLED and any(t.requires_grad for t in tensors)
        return Tensor(out, requires_grad=track, _ctx=fn if track else None)


OPS: dict[str, type[Function]] = {}


def register(cls):
    OPS[cls.__name__] = cls
    return cls


def _require(cond: bool, msg: str):
    if not cond:
        raise ContractError(msg)


# ---------------------------------------------------------------------------
# convolution


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


@register
class Conv2d(Function):
    """Cross-correlation as one GEMM over channel-major im2col columns."""

    def forward(self, x, w, b=None, stride=1, padding=0):
        _require(x.ndim == 4 and w.ndim == 4, f"conv2d expects NCHW input and OIHW weight, got {x.shape}, {w.shape}")
        n, c, h, wd = x.shape
        o, ci, kh, kw = w.shape
        _require(c == ci, f"conv2d channel mismatch: input has {c}, weight expects {ci}")
        _require(kh % 2 == 1 and kw % 2 == 1, f"conv2d kernel must be odd, got {kh}x{kw}")
        _require(stride >= 1 and padding >= 0, "conv2d needs stride >= 1 and padding >= 0")
        _require(h + 2 * padding >= kh and wd + 2 * padding >= kw, "conv2d kernel larger than padded input")
        if b is not None:
            _require(b.shape == (o,), f"conv2d bias must have shape ({o},), got {b.shape}")
        ho = conv_output_size(h, kh, stride, padding)
        wo = conv_output_size(wd, kw, stride, padding)
        # (C, N, H, W) makes each kernel-offset slice a block copy
        xc = x.transpose(1, 0, 2, 3)
        if padding:
            xp = np.zeros((c, n, h + 2 * padding, wd + 2 * padding), dtype=x.dtype)
            xp[:, :, padding:padding + h, padding:padding + wd] = xc
        else:
            xp = xc
        cols = np.empty((c, kh, kw, n, ho, wo), dtype=x.dtype)
        for i in range(kh):
            for j in range(kw):
                cols[:, i, j] = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
        cols = cols.reshape(c * kh * kw, n * ho * wo)
        wmat = w.reshape(o, -1)
        out = wmat @ cols
        if b is not None:
            out += b[:, None]
        self.cols, self.wmat = cols, wmat
        self.meta = (x.shape, w.shape, stride, padding, ho, wo)
        return np.ascontiguousarray(out.reshape(o, n, ho, wo).transpose(1, 0, 2, 3))

    def backward(self, grad):
        (n, c, h, wd), wshape, stride, padding, ho, wo = self.meta
        o, _, kh, kw = wshape
        go = np.ascontiguousarray(grad.transpose(1, 0, 2, 3)).reshape(o, -1)
        dw = (go @ self.cols.T).reshape(wshape)
        db = go.sum(axis=1)
        dx = None
        if self.parents[0].requires_grad:
            dcols = (self.wmat.T @ go).reshape(c, kh, kw, n, ho, wo)
            dxp = np.zeros((c, n, h + 2 * padding, wd + 2 * padding), dtype=grad.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, i, j]
            dx = np.ascontiguousarray(dxp[:, :, padding:padding + h, padding:padding + wd].transpose(1, 0, 2, 3))
        if len(self.parents) == 3:
            return dx, dw, db
        return dx, dw


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    args = (x, weight) if bias is None else (x, weight, bias)
    return Conv2d.apply(*args, stride=stride, padding=padding)


# ---------------------------------------------------------------------------
# batch normalisation


class BatchNormStats:
    """Running mean/variance buffers for one batch-norm site."""

    def __init__(self, channels: int, dtype=np.float32):
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)


@register
class BatchNorm2d(Function):
    def forward(self, x, gamma, beta, stats: BatchNormStats = None, training=True, momentum=0.1, eps=1e-5):
        _require(x.ndim == 4, f"batchnorm2d expects NCHW input, got {x.shape}")
        _require(eps > 0, "batchnorm2d eps must be > 0")
        n, c, h, w = x.shape
        _require(gamma.shape == (c,) and beta.shape == (c,), "batchnorm2d affine params must have shape (C,)")
        if training:
            m = n * h * w
            _require(m >= 2, "batchnorm2d in train mode needs N*H*W >= 2")
            mean = x.mean(axis=(0, 2, 3))
            var = x.var(axis=(0, 2, 3))
            if stats is not None:
                stats.running_mean[...] = (1 - momentum) * stats.running_mean + momentum * mean
                stats.running_var[...] = (1 - momentum) * stats.running_var + momentum * var * m / (m - 1)
        else:
            _require(stats is not None, "batchnorm2d eval mode needs running statistics")
            mean = stats.running_mean.astype(x.dtype)
            var = stats.running_var.astype(x.dtype)
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
        self.xhat, self.inv_std, self.gamma, self.training = xhat, inv_std, gamma, training
        return xhat * gamma[None, :, None, None] + beta[None, :, None, None]

    def backward(self, grad):
        xhat, inv_std = self.xhat, self.inv_std
        dgamma = (grad * xhat).sum(axis=(0, 2, 3))
        dbeta = grad.sum(axis=(0, 2, 3))
        dxhat = grad * self.gamma[None, :, None, None]
        if self.training:
            m = grad.shape[0] * grad.shape[2] * grad.shape[3]
            s1 = dxhat.sum(axis=(0, 2, 3))[None, :, None, None]
            s2 = (dxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
            dx = (inv_std[None, :, None, None] / m) * (m * dxhat - s1 - xhat * s2)
        else:
            dx = dxhat * inv_std[None, :, None, None]
        return dx, dgamma, dbeta


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, stats: Optional[BatchNormStats], training: bool,
                momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    return BatchNorm2d.apply(x, gamma, beta, stats=stats, training=training, momentum=momentum, eps=eps)


# ---------------------------------------------------------------------------
# elementwise and structural ops


@register
class ReLU(Function):
    # subgradient at exactly 0 is 0
    def forward(self, x):
        self.mask = x > 0
        return np.where(self.mask, x, 0).astype(x.dtype, copy=False)

    def backward(self, grad):
        return (grad * self.mask,)


def relu(x: Tensor) -> Tensor:
    return ReLU.apply(x)


@register
class Add(Function):
    def forward(self, a, b):
        _require(a.shape == b.shape, f"add needs identical shapes, got {a.shape} and {b.shape}")
        return a + b

    def backward(self, grad):
        return grad, grad


def add(a: Tensor, b: Tensor) -> Tensor:
    return Add.apply(a, b)


@register
class MulScalar(Function):
    def forward(self, x, scalar=1.0):
        self.scalar = scalar
        return x * np.asarray(scalar, dtype=x.dtype)

    def backward(self, grad):
        return (grad * np.asarray(self.scalar, dtype=grad.dtype),)


def mul_scalar(x: Tensor, scalar: float) -> Tensor:
    return MulScalar.apply(x, scalar=scalar)


@register
class Maximum(Function):
    # ties route the gradient to the first argument
    def forward(self, a, b):
        _require(a.shape == b.shape, f"maximum needs identical shapes, got {a.shape} and {b.shape}")
        self.first = a >= b
        return np.where(self.first, a, b)

    def backward(self, grad):
        return grad * self.first, grad * ~self.first


def maximum(a: Tensor, b: Tensor) -> Tensor:
    return Maximum.apply(a, b)


@register
class MeanOfList(Function):
    def forward(self, *xs):
        _require(len(xs) > 0, "mean_of_list needs at least one tensor")
        shape = xs[0].shape
        _require(all(x.shape == shape for x in xs), "mean_of_list needs identical shapes")
        self.k = len(xs)
        total = np.zeros(shape, dtype=np.result_type(*xs))
        for x in xs:
            total += x
        return total / self.k

    def backward(self, grad):
        g = grad / self.k
        return tuple(g for _ in range(self.k))


def mean_of_list(xs: Sequence[Tensor]) -> Tensor:
    if len(xs) == 0:
        raise ContractError("mean_of_list needs at least one tensor")
    return MeanOfList.apply(*xs)


@register
class ConcatChannels(Function):
    def forward(self, a, b):
        _require(a.ndim == 4 and b.ndim == 4, "concat_channels expects NCHW tensors")
        _require(a.shape[0] == b.shape[0] and a.shape[2:] == b.shape[2:],
                 f"concat_channels batch/spatial mismatch: {a.shape} vs {b.shape}")
        self.ca = a.shape[1]
        return np.concatenate([a, b], axis=1)

    def backward(self, grad):
        return grad[:, :self.ca], grad[:, self.ca:]


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    return ConcatChannels.apply(a, b)


@register
class Concat(Function):
    def forward(self, *xs, axis=0):
        self.axis = axis
        self.bounds = np.cumsum([0] + [x.shape[axis] for x in xs])
        return np.concatenate(xs, axis=axis)

    def backward(self, grad):
        out = []
        for lo, hi in zip(self.bounds[:-1], self.bounds[1:]):
            sl = [slice(None)] * grad.ndim
            sl[self.axis] = slice(lo, hi)
            out.append(grad[tuple(sl)])
        return tuple(out)


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    return Concat.apply(*xs, axis=axis)


@register
class Reshape(Function):
    def forward(self, x, shape=None):
        self.in_shape = x.shape
        return x.reshape(shape)

    def backward(self, grad):
        return (grad.reshape(self.in_shape),)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    return Reshape.apply(x, shape=tuple(shape))


@register
class Permute(Function):
    def forward(self, x, axes=None):
        self.axes = axes
        return np.ascontiguousarray(x.transpose(axes))

    def backward(self, grad):
        return (grad.transpose(np.argsort(self.axes)),)


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    return Permute.apply(x, axes=tuple(axes))


@register
class Index(Function):
    def forward(self, x, key=None):
        self.key, self.in_shape = key, x.shape
        out = x[key]
        return np.ascontiguousarray(out)

    def backward(self, grad):
        g = np.zeros(self.in_shape, dtype=grad.dtype)
        key = self.key if isinstance(self.key, tuple) else (self.key,)
        if all(isinstance(k, (slice, int)) or k is None or k is Ellipsis for k in key):
            g[self.key] = grad
        else:
            np.add.at(g, self.key, grad)
        return (g,)


# ---------------------------------------------------------------------------
# losses; all return shape (1,) with mean reduction


@register
class SigmoidBCE(Function):
    def forward(self, logits, targets):
        _require(logits.shape == targets.shape, f"sigmoid_bce shape mismatch {logits.shape} vs {targets.shape}")
        t = targets.astype(logits.dtype)
        self.t = t
        # max(x,0) - x*t + log(1+exp(-|x|)) never overflows
        loss = np.maximum(logits, 0) - logits * t + np.log1p(np.exp(-np.abs(logits)))
        self.sig = _sigmoid(logits)
        self.n = logits.size
        return np.array([loss.mean()], dtype=logits.dtype)

    def backward(self, grad):
        return (grad[0] * (self.sig - self.t) / self.n, None)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)


def sigmoid_bce(logits: Tensor, targets) -> Tensor:
    t = targets if isinstance(targets, Tensor) else Tensor(np.asarray(targets, dtype=logits.dtype))
    return SigmoidBCE.apply(logits, t)


@register
class SoftmaxCE(Function):
    def forward(self, logits, labels):
        _require(logits.ndim == 2, f"softmax_ce expects (M, K) logits, got {logits.shape}")
        m, k = logits.shape
        lab = labels.astype(np.int64).reshape(-1)
        _require(lab.shape == (m,), "softmax_ce needs one label per row")
        _require(m > 0, "softmax_ce needs at least one row")
        _require(np.all((lab >= 0) & (lab < k)), "softmax_ce labels must be valid class indices")
        shifted = logits - logits.max(axis=1, keepdims=True)
        logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        logp = shifted - logz
        self.p = np.exp(logp)
        self.lab = lab
        return np.array([-logp[np.arange(m), lab].mean()], dtype=logits.dtype)

    def backward(self, grad):
        g = self.p.copy()
        g[np.arange(len(self.lab)), self.lab] -= 1
        return (grad[0] * g / len(self.lab), None)


def softmax_ce(logits: Tensor, labels) -> Tensor:
    lab = labels if isinstance(labels, Tensor) else Tensor(np.asarray(labels, dtype=np.float64))
    return SoftmaxCE.apply(logits, lab)


@register
class SmoothL1(Function):
    def forward(self, pred, target, beta=1.0):
        _require(pred.shape == target.shape, f"smooth_l1 shape mismatch {pred.shape} vs {target.shape}")
        d = pred - target.astype(pred.dtype)
        ad = np.abs(d)
        self.d, self.beta, self.n = d, beta, d.size
        loss = np.where(ad < beta, 0.5 * d * d / beta, ad - 0.5 * beta)
        return np.array([loss.mean()], dtype=pred.dtype)

    def backward(self, grad):
        d = self.d
        g = np.where(np.abs(d) < self.beta, d / self.beta, np.sign(d))
        return (grad[0] * g / self.n, None)


def smooth_l1(pred: Tensor, target) -> Tensor:
    t = target if isinstance(target, Tensor) else Tensor(np.asarray(target, dtype=pred.dtype))
    return SmoothL1.apply(pred, t)


def zeros_scalar(dtype=np.float32) -> Tensor:
    return Tensor(np.zeros(1, dtype=dtype))


def sum_scalars(terms: Iterable[Tensor]) -> Tensor:
    terms = list(terms)
    if not terms:
        return zeros_scalar()
    total = terms[0]
    for t in terms[1:]:
        total = add(total, t)
    return total
