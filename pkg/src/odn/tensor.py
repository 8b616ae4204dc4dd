"""Dense float32 tensors with reverse-mode differentiation.

Every numeric operation the residual networks need lives here: convolution,
batch normalization, ReLU, linear layers, global average pooling, residual
addition, and the cross-entropy loss, each with a hand-written backward pass.
Gradients accumulate until explicitly cleared, and a plain SGD-with-momentum
step operates directly on `Parameter` objects.

Arrays default to float32. Operations preserve the incoming dtype, so test
oracles can re-run the same forward graph in float64 when extra precision is
needed for finite-difference checks.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for an operation."""

    def __init__(self, op: str, *shapes: tuple) -> None:
        self.op = op
        self.shapes = shapes
        super().__init__(f"{op}: incompatible shapes {' vs '.join(str(s) for s in shapes)}")


class Tensor:
    """An N-dimensional float array that records the ops applied to it.

    Building a forward expression out of the module-level functions produces a
    DAG of tensors; calling :meth:`backward` on a scalar result walks that DAG
    in reverse topological order and accumulates gradients into every tensor
    created with ``requires_grad=True`` (and every intermediate that depends
    on one).
    """

    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents")

    def __init__(self, data, requires_grad: bool = False, dtype=np.float32):
        arr = np.asarray(data)
        if dtype is not None and arr.dtype != dtype:
            arr = arr.astype(dtype)
        self.data: np.ndarray = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._backward: Optional[Callable[[np.ndarray], None]] = None
        self._parents: tuple = ()

    # --- construction helper used by ops: wraps a raw result without casting
    @classmethod
    def _result(cls, data: np.ndarray, parents: tuple, backward) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.requires_grad = any(p.requires_grad for p in parents)
        out._parents = parents if out.requires_grad else ()
        out._backward = backward if out.requires_grad else None
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Reverse-mode pass from a scalar. Grads accumulate across calls."""
        if self.data.size != 1:
            raise ShapeError("backward", self.shape)
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        # Seed and propagate.  `grads` holds the local upstream for this call
        # so repeated backward() calls add (not overwrite) into `.grad`.
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            node._accumulate(g)
            if node._backward is not None:
                for parent, pg in node._backward(g):
                    if not parent.requires_grad:
                        continue
                    if id(parent) in grads:
                        grads[id(parent)] += pg
                    else:
                        grads[id(parent)] = pg

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


@dataclass
class OptimizerConfig:
    """SGD hyperparameters: lr > 0, momentum in [0, 1), weight_decay >= 0."""

    learning_rate: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4

    def __post_init__(self) -> None:
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be >= 0, got {self.weight_decay}")


class Parameter:
    """A named trainable tensor plus its (lazily created) momentum buffer."""

    __slots__ = ("name", "value", "momentum_buffer")

    def __init__(self, name: str, data) -> None:
        self.name = name
        self.value = Tensor(data, requires_grad=True)
        self.momentum_buffer: Optional[np.ndarray] = None

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self) -> None:
        self.value.zero_grad()

    def reset_momentum(self) -> None:
        self.momentum_buffer = None

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.value.shape})"


class MissingGradError(RuntimeError):
    """A parameter reached sgd_step without a populated gradient."""

    def __init__(self, name: str) -> None:
        self.name = name
        super().__init__(f"parameter {name!r} has no gradient; run backward() first")


def sgd_step(params: Iterable[Parameter], config: OptimizerConfig) -> None:
    """g <- grad + wd*value; buf <- momentum*buf + g; value <- value - lr*buf."""
    for p in params:
        grad = p.value.grad
        if grad is None:
            raise MissingGradError(p.name)
        g = grad
        if config.weight_decay:
            g = g + config.weight_decay * p.value.data
        if config.momentum:
            if p.momentum_buffer is None:
                p.momentum_buffer = np.zeros_like(p.value.data)
            p.momentum_buffer *= config.momentum
            p.momentum_buffer += g
            g = p.momentum_buffer
        p.value.data -= config.learning_rate * g


def zero_grads(params: Iterable[Parameter]) -> None:
    for p in params:
        p.zero_grad()


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# elementwise / reduction primitives
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError("add", a.shape, b.shape)

    def backward(g):
        return ((a, g), (b, g))

    return Tensor._result(a.data + b.data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError("mul", a.shape, b.shape)

    def backward(g):
        return ((a, g * b.data), (b, g * a.data))

    return Tensor._result(a.data * b.data, (a, b), backward)


def relu(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    out_data = np.maximum(x.data, 0)

    def backward(g):
        return ((x, g * (x.data > 0)),)

    return Tensor._result(out_data, (x,), backward)


def tsum(x: Tensor) -> Tensor:
    """Sum of all elements, as a scalar tensor."""
    x = _as_tensor(x)

    def backward(g):
        return ((x, np.broadcast_to(g, x.shape).copy()),)

    return Tensor._result(np.asarray(x.data.sum(), dtype=x.data.dtype), (x,), backward)


def global_avg_pool(x: Tensor) -> Tensor:
    """NCHW -> N x C mean over the spatial plane."""
    x = _as_tensor(x)
    if x.ndim != 4:
        raise ShapeError("global_avg_pool", x.shape)
    n, c, h, w = x.shape
    out_data = x.data.mean(axis=(2, 3))

    def backward(g):
        gx = np.broadcast_to(g[:, :, None, None] / np.asarray(h * w, dtype=g.dtype), x.shape)
        return ((x, gx.copy()),)

    return Tensor._result(out_data, (x,), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """x: N x F, weight: C x F, bias: C  ->  N x C."""
    x, weight, bias = _as_tensor(x), _as_tensor(weight), _as_tensor(bias)
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError("linear", x.shape, weight.shape)
    if bias.shape != (weight.shape[0],):
        raise ShapeError("linear.bias", bias.shape, (weight.shape[0],))
    out_data = x.data @ weight.data.T + bias.data

    def backward(g):
        return (
            (x, g @ weight.data),
            (weight, g.T @ x.data),
            (bias, g.sum(axis=0)),
        )

    return Tensor._result(out_data, (x, weight, bias), backward)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def _im2col(x: np.ndarray, k: int, stride: int, pad: int):
    n, c, h, w = x.shape
    hp, wp = h + 2 * pad, w + 2 * pad
    ho = (hp - k) // stride + 1
    wo = (wp - k) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    cols = np.empty((n, c, k, k, ho, wo), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    return cols, ho, wo


def _col2im(dcols: np.ndarray, x_shape, k: int, stride: int, pad: int) -> np.ndarray:
    n, c, h, w = x_shape
    hp, wp = h + 2 * pad, w + 2 * pad
    ho, wo = dcols.shape[4], dcols.shape[5]
    dxp = np.zeros((n, c, hp, wp), dtype=dcols.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[:, :, i, j]
    if pad:
        return dxp[:, :, pad:-pad, pad:-pad]
    return dxp


def conv2d(x: Tensor, weight: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation, no bias.  x: NCHW, weight: OIKK (square kernel)."""
    x, weight = _as_tensor(x), _as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError("conv2d", x.shape, weight.shape)
    n, c, h, w = x.shape
    o, ci, kh, kw = weight.shape
    if ci != c or kh != kw:
        raise ShapeError("conv2d", x.shape, weight.shape)
    k = kh
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError("conv2d.output", x.shape, weight.shape)

    cols, ho, wo = _im2col(x.data, k, stride, padding)
    # (N,C,K,K,Ho,Wo) x (O,C,K,K) contracted over C,K,K -> (N,Ho,Wo,O)
    out_data = np.tensordot(cols, weight.data, axes=([1, 2, 3], [1, 2, 3]))
    out_data = np.ascontiguousarray(out_data.transpose(0, 3, 1, 2))

    def backward(g):
        # g: (N,O,Ho,Wo)
        dw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 4, 5]))
        dcols = np.tensordot(g, weight.data, axes=([1], [0]))  # (N,Ho,Wo,C,K,K)
        dcols = dcols.transpose(0, 3, 4, 5, 1, 2)
        dx = _col2im(np.ascontiguousarray(dcols), x.shape, k, stride, padding)
        return ((x, dx), (weight, dw))

    return Tensor._result(out_data, (x, weight), backward)


# ---------------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------------

class UninitializedBuffersError(RuntimeError):
    """Eval-mode batch norm was called before running stats existed."""


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: Optional[np.ndarray],
    running_var: Optional[np.ndarray],
    training: bool,
    momentum: float = 0.1,
    epsilon: float = 1e-5,
) -> Tensor:
    """Per-channel batch norm over NCHW input.

    Train mode normalizes with batch statistics and updates the running
    buffers in place (``running = (1-momentum)*running + momentum*batch``,
    biased variance).  Eval mode normalizes with the running buffers.
    """
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    if x.ndim != 4:
        raise ShapeError("batch_norm", x.shape)
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError("batch_norm.affine", x.shape, gamma.shape, beta.shape)
    if epsilon <= 0:
        raise ValueError(f"epsilon must be > 0, got {epsilon}")

    gview = gamma.data[None, :, None, None]
    bview = beta.data[None, :, None, None]

    if training:
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        if running_mean is not None:
            running_mean *= 1.0 - momentum
            running_mean += momentum * mean
        if running_var is not None:
            running_var *= 1.0 - momentum
            running_var += momentum * var
        inv_std = 1.0 / np.sqrt(var + epsilon)
        xhat = (x.data - mean[None, :, None, None]) * inv_std[None, :, None, None]
        out_data = gview * xhat + bview

        m = x.data.size // c  # reduction size per channel

        def backward(g):
            dbeta = g.sum(axis=(0, 2, 3))
            dgamma = (g * xhat).sum(axis=(0, 2, 3))
            dxhat = g * gview
            s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
            s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            dx = (inv_std[None, :, None, None] / m) * (m * dxhat - s1 - xhat * s2)
            return ((x, dx), (gamma, dgamma), (beta, dbeta))

        return Tensor._result(out_data, (x, gamma, beta), backward)

    if running_mean is None or running_var is None:
        raise UninitializedBuffersError("batch_norm eval mode requires initialized running stats")
    inv_std = 1.0 / np.sqrt(running_var + epsilon)
    xhat = (x.data - running_mean[None, :, None, None]) * inv_std[None, :, None, None]
    out_data = gview * xhat + bview

    def backward_eval(g):
        dbeta = g.sum(axis=(0, 2, 3))
        dgamma = (g * xhat).sum(axis=(0, 2, 3))
        dx = g * gview * inv_std[None, :, None, None]
        return ((x, dx), (gamma, dgamma), (beta, dbeta))

    return Tensor._result(out_data, (x, gamma, beta), backward_eval)


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def cross_entropy(logits: Tensor, labels: Sequence[int]) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label]."""
    logits = _as_tensor(logits)
    if logits.ndim != 2:
        raise ShapeError("cross_entropy", logits.shape)
    n, c = logits.shape
    y = np.asarray(labels)
    if y.shape != (n,):
        raise ShapeError("cross_entropy.labels", logits.shape, y.shape)
    if y.size and (y.min() < 0 or y.max() >= c):
        raise ValueError(f"label out of range [0, {c}): {y[(y < 0) | (y >= c)][0]}")
    y = y.astype(np.int64)

    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    shifted = z - zmax
    logsumexp = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - logsumexp
    losses = -log_probs[np.arange(n), y]
    out_data = np.asarray(losses.mean(), dtype=z.dtype)

    def backward(g):
        softmax = np.exp(log_probs)
        grad = softmax.copy()
        grad[np.arange(n), y] -= 1.0
        grad *= g / np.asarray(n, dtype=grad.dtype)
        return ((logits, grad),)

    return Tensor._result(out_data, (logits,), backward)
