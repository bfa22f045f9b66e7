"""
Minimal reverse-mode differentiation over numpy arrays.

Nodes keep a closure mapping the upstream gradient onto one gradient per parent. Closed-form losses
whose gradient is already known (see `evidential`) enter the graph through `loss_node`.

Feature maps are channels-last: `(batch, time, freq, channels)`.
"""

from __future__ import annotations

import typing as t

import numpy as np
import numpy.typing as npt
from numpy.lib.stride_tricks import sliding_window_view

from evi_melody.exceptions import GraphStateError, NumericError

FloatArray = npt.NDArray[np.float64]
BackwardFn = t.Callable[[FloatArray], t.Sequence[FloatArray | None]]


class Tensor:
    """
    Array value with optional gradient tracking.

    Leaves carry a version counter that `assign` bumps; a graph built before a leaf was reassigned
    refuses to backpropagate.
    """

    __slots__ = (
        "data",
        "grad",
        "requires_grad",
        "name",
        "_parents",
        "_parent_versions",
        "_backward",
        "_op",
        "_version",
        "_consumed",
    )

    def __init__(
        self,
        data: npt.ArrayLike,
        requires_grad: bool = False,
        name: str = "",
        parents: tuple[Tensor, ...] = (),
        backward: BackwardFn | None = None,
        op: str = "leaf",
    ) -> None:
        self.data: FloatArray = np.asarray(data, dtype=np.float64)
        self.grad: FloatArray | None = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self.name = name
        self._parents = parents
        self._parent_versions = tuple(p._version for p in parents)
        self._backward = backward
        self._op = op
        self._version = 0
        self._consumed = False

    def __repr__(self) -> str:  # pragma: no cover
        label = self.name or self._op
        return f"Tensor({label}, shape={self.shape}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> tuple[int, ...]:  # noqa: D102
        return self.data.shape

    def assign(self, values: npt.ArrayLike) -> None:
        """Replace the leaf's values in place, invalidating graphs that depend on it."""
        self.data = np.asarray(values, dtype=np.float64)
        self._version += 1

    def __add__(self, other: Tensor | float) -> Tensor:
        return add(self, _as_tensor(other))

    def __mul__(self, other: Tensor | float) -> Tensor:
        return mul(self, _as_tensor(other))

    __radd__ = __add__
    __rmul__ = __mul__


def _as_tensor(value: Tensor | npt.ArrayLike) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _node(data: FloatArray, parents: tuple[Tensor, ...], backward: BackwardFn, op: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        bad = int(np.count_nonzero(~np.isfinite(data)))
        raise NumericError(f"'{op}' produced {bad} non-finite value(s), output shape {data.shape}")

    return Tensor(data, parents=parents, backward=backward, op=op)


def _unbroadcast(grad: FloatArray, shape: tuple[int, ...]) -> FloatArray:
    """Sum `grad` back down to `shape` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def backward(loss: Tensor) -> dict[Tensor, FloatArray]:
    """
    Backpropagate from a scalar `loss`, returning the gradient of every leaf that requires one.

    Leaf `.grad` attributes are overwritten with the returned gradients. Each graph may only be
    backpropagated once, and not after any of its leaves has been reassigned.
    """
    if loss.data.size != 1:
        raise GraphStateError(f"Backward requires a scalar loss, received shape {loss.shape}")
    if loss._consumed:
        raise GraphStateError("This graph has already been backpropagated.")

    # Iterative post-order DFS; parents land before children in `order`
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        stack.extend((parent, False) for parent in node._parents)

    grads: dict[int, FloatArray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[Tensor, FloatArray] = {}
    for node in reversed(order):
        grad = grads.pop(id(node), None)
        if grad is None:
            continue

        if node._backward is None:
            if not np.all(np.isfinite(grad)):
                raise NumericError(f"Non-finite gradient for leaf '{node.name or node._op}'")
            node.grad = grad
            leaves[node] = grad
            continue

        for parent, version in zip(node._parents, node._parent_versions):
            if parent._version != version:
                raise GraphStateError(
                    f"Leaf '{parent.name or parent._op}' was modified after the graph was built."
                )

        for parent, parent_grad in zip(node._parents, node._backward(grad)):
            if parent_grad is None or not parent.requires_grad:
                continue
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + parent_grad
            else:
                grads[id(parent)] = parent_grad

    loss._consumed = True
    return leaves


def add(a: Tensor, b: Tensor) -> Tensor:  # noqa: D103
    def _backward(g: FloatArray) -> tuple[FloatArray, FloatArray]:
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(a.data + b.data, (a, b), _backward, "add")


def mul(a: Tensor, b: Tensor) -> Tensor:  # noqa: D103
    def _backward(g: FloatArray) -> tuple[FloatArray, FloatArray]:
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node(a.data * b.data, (a, b), _backward, "mul")


def matmul(x: Tensor, w: Tensor) -> Tensor:
    """Contract the last axis of `x` with a 2D weight `(in, out)`."""
    n_in, n_out = w.shape

    def _backward(g: FloatArray) -> tuple[FloatArray, FloatArray]:
        grad_w = x.data.reshape(-1, n_in).T @ g.reshape(-1, n_out)
        return g @ w.data.T, grad_w

    return _node(x.data @ w.data, (x, w), _backward, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:  # noqa: D103
    return add(matmul(x, w), b)


def conv3x3(x: Tensor, w: Tensor) -> Tensor:
    """
    Same-padded 3x3 convolution over the (time, freq) axes via im2col.

    `w` is `(channels_in * 9, channels_out)` with rows ordered channel-major then kernel row/col.
    """
    n, n_time, n_freq, n_chan = x.shape
    padded = np.pad(x.data, ((0, 0), (1, 1), (1, 1), (0, 0)))
    cols = sliding_window_view(padded, (3, 3), axis=(1, 2)).reshape(n, n_time, n_freq, n_chan * 9)

    def _backward(g: FloatArray) -> tuple[FloatArray, FloatArray]:
        grad_w = cols.reshape(-1, n_chan * 9).T @ g.reshape(-1, g.shape[-1])
        grad_cols = (g @ w.data.T).reshape(n, n_time, n_freq, n_chan, 3, 3)
        grad_padded = np.zeros_like(padded)
        for i in range(3):
            for j in range(3):
                grad_padded[:, i : i + n_time, j : j + n_freq, :] += grad_cols[..., i, j]
        return grad_padded[:, 1:-1, 1:-1, :], grad_w

    return _node(cols @ w.data, (x, w), _backward, "conv3x3")


def leaky_relu(x: Tensor, slope: float) -> Tensor:  # noqa: D103
    scale = np.where(x.data > 0, 1.0, slope)

    def _backward(g: FloatArray) -> tuple[FloatArray]:
        return (g * scale,)

    return _node(x.data * scale, (x,), _backward, "leaky_relu")


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: FloatArray,
    running_var: FloatArray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """
    Per-channel batch normalization over every non-channel axis.

    In training mode batch statistics are used & the running buffers are updated in place;
    otherwise the running buffers normalize.
    """
    axes = tuple(range(x.data.ndim - 1))
    if training:
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        count = x.data.size // x.shape[-1]
        unbiased = var * count / max(count - 1, 1)
        running_mean *= 1 - momentum
        running_mean += momentum * mean
        running_var *= 1 - momentum
        running_var += momentum * unbiased
    else:
        mean, var = running_mean, running_var

    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = (x.data - mean) * inv_std
    out = gamma.data * x_hat + beta.data

    def _backward(g: FloatArray) -> tuple[FloatArray, FloatArray, FloatArray]:
        grad_gamma = np.sum(g * x_hat, axis=axes)
        grad_beta = np.sum(g, axis=axes)
        grad_x_hat = g * gamma.data
        if not training:
            return grad_x_hat * inv_std, grad_gamma, grad_beta

        grad_x = inv_std * (
            grad_x_hat
            - grad_x_hat.mean(axis=axes)
            - x_hat * np.mean(grad_x_hat * x_hat, axis=axes)
        )
        return grad_x, grad_gamma, grad_beta

    return _node(out, (x, gamma, beta), _backward, "batch_norm")


def max_pool_freq(x: Tensor, factor: int) -> Tensor:
    """Non-overlapping max-pool along the frequency axis only; a ragged tail is dropped."""
    if factor == 1:
        return x

    n, n_time, n_freq, n_chan = x.shape
    n_out = n_freq // factor
    windows = x.data[:, :, : n_out * factor, :].reshape(n, n_time, n_out, factor, n_chan)
    winners = windows.argmax(axis=3)[:, :, :, np.newaxis, :]
    out = np.take_along_axis(windows, winners, axis=3)[:, :, :, 0, :]

    def _backward(g: FloatArray) -> tuple[FloatArray]:
        grad_windows = np.zeros_like(windows)
        np.put_along_axis(grad_windows, winners, g[:, :, :, np.newaxis, :], axis=3)
        grad_x = np.zeros_like(x.data)
        grad_x[:, :, : n_out * factor, :] = grad_windows.reshape(n, n_time, n_out * factor, n_chan)
        return (grad_x,)

    return _node(out, (x,), _backward, "max_pool_freq")


def mean_axis(x: Tensor, axis: int) -> Tensor:  # noqa: D103
    size = x.shape[axis]

    def _backward(g: FloatArray) -> tuple[FloatArray]:
        return (np.broadcast_to(np.expand_dims(g, axis) / size, x.shape).copy(),)

    return _node(x.data.mean(axis=axis), (x,), _backward, "mean")


def merge_last(x: Tensor, n_axes: int = 2) -> Tensor:
    """Flatten the trailing `n_axes` axes into one."""
    new_shape = (*x.shape[:-n_axes], int(np.prod(x.shape[-n_axes:])))

    def _backward(g: FloatArray) -> tuple[FloatArray]:
        return (g.reshape(x.shape),)

    return _node(x.data.reshape(new_shape), (x,), _backward, "merge_last")


def squeeze_last(x: Tensor) -> Tensor:  # noqa: D103
    def _backward(g: FloatArray) -> tuple[FloatArray]:
        return (g[..., np.newaxis],)

    return _node(x.data[..., 0], (x,), _backward, "squeeze_last")


def dropout(x: Tensor, rate: float, rng: np.random.Generator, training: bool) -> Tensor:
    """Inverted dropout; the identity outside of training or at a zero rate."""
    if not training or rate == 0:
        return x

    mask = (rng.random(x.shape) >= rate) / (1 - rate)
    return mul(x, Tensor(mask))


def loss_node(value: float, inputs: t.Sequence[Tensor], grads: t.Sequence[FloatArray]) -> Tensor:
    """Scalar node for a closed-form loss whose gradients w.r.t. `inputs` are already known."""
    for tensor, grad in zip(inputs, grads):
        if grad.shape != tensor.shape:
            raise GraphStateError(f"Gradient shape {grad.shape} != input shape {tensor.shape}")

    def _backward(g: FloatArray) -> list[FloatArray]:
        return [g * grad for grad in grads]

    return _node(np.asarray(value, dtype=np.float64), tuple(inputs), _backward, "loss")
