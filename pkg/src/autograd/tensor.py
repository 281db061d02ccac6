"""
Tensor - Dense 4-D values, trainable parameters and reverse-mode propagation

Every feature map flowing through the network is a `Tensor` in
batch-channel-height-width layout. Tensors are immutable once built; a tensor
produced by a kernel also carries the record its adjoint needs (parents plus
an adjoint closure). `backward()` walks those records in reverse topological
order, accumulates parameter gradients into `Param.grad` and releases the
records it consumed.

Usage:
    x = Tensor(np.zeros((1, 3, 16, 16)))
    y = kernels.relu(kernels.conv2d(x, weight, bias))
    (dx,) = backward(y, np.ones(y.shape), wrt=[x])
"""

import logging
from collections.abc import Callable, Iterable, Sequence
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger("smokeseg.autograd")

TRAIN_DTYPE = np.float32
CHECK_DTYPE = np.float64

Adjoint = Callable[[np.ndarray], Sequence[np.ndarray | None]]


class ShapeError(ValueError):
    """Raised when a kernel receives tensors whose shapes violate its contract."""


class BackwardError(RuntimeError):
    """Raised when backward is requested for a value with no recorded forward."""


class Tensor:
    """
    Immutable dense (n, c, h, w) array.

    Leaves (network inputs) have no adjoint. Kernel outputs keep their parents
    and adjoint until a backward pass consumes them.
    """

    __slots__ = ("adjoint", "data", "op", "parents")

    def __init__(
        self,
        data: np.ndarray,
        *,
        op: str = "input",
        parents: tuple["Tensor", ...] = (),
        adjoint: Adjoint | None = None,
    ):
        arr = np.asarray(data)
        if arr.ndim != 4:
            raise ShapeError(f"{op}: tensors are 4-D (n, c, h, w), got shape {arr.shape}")
        if min(arr.shape) < 1:
            raise ShapeError(f"{op}: every shape component must be >= 1, got {arr.shape}")
        if arr.dtype not in (TRAIN_DTYPE, CHECK_DTYPE):
            arr = arr.astype(TRAIN_DTYPE)
        arr = arr.view()
        arr.flags.writeable = False

        self.data = arr
        self.op = op
        self.parents = parents
        self.adjoint = adjoint

    @property
    def shape(self) -> tuple[int, int, int, int]:
        n, c, h, w = self.data.shape
        return n, c, h, w

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def has_record(self) -> bool:
        """Whether a forward record is available for the adjoint."""
        return self.adjoint is not None

    def numpy(self) -> np.ndarray:
        """Return a writable copy of the values."""
        return np.array(self.data)

    def __repr__(self) -> str:
        return f"Tensor(op={self.op!r}, shape={self.shape}, dtype={self.dtype})"


@dataclass(eq=False)
class Param:
    """
    A named trainable array with its gradient and momentum buffers.

    Convolution weights are stored (k, k, cin, cout); biases are (cout,).
    `grad` stays None until a backward pass populates it.
    """

    name: str
    value: np.ndarray
    grad: np.ndarray | None = None
    momentum: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        self.momentum = np.zeros_like(self.value)

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.value.shape)

    @property
    def is_weight(self) -> bool:
        """Weights (rank > 1) take weight decay; biases do not."""
        return self.value.ndim > 1

    @property
    def size(self) -> int:
        return int(self.value.size)

    def accumulate(self, gradient: np.ndarray) -> None:
        if gradient.shape != self.value.shape:
            raise ShapeError(f"{self.name}: gradient shape {gradient.shape} != value shape {self.value.shape}")
        if self.grad is None:
            self.grad = gradient.astype(self.value.dtype, copy=True)
        else:
            self.grad += gradient

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.value)

    def astype(self, dtype: type[np.floating]) -> None:
        """Convert value and buffers in place to another precision."""
        self.value = self.value.astype(dtype)
        self.momentum = self.momentum.astype(dtype)
        if self.grad is not None:
            self.grad = self.grad.astype(dtype)


def _topological_order(roots: Iterable[Tensor]) -> list[Tensor]:
    """Parents before children; iterative so deep graphs do not hit the recursion limit."""
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False) for root in roots]

    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        stack.extend((parent, False) for parent in node.parents if id(parent) not in visited)

    return order


def backward_many(
    seeds: Sequence[tuple[Tensor, np.ndarray]],
    wrt: Sequence[Tensor] = (),
) -> list[np.ndarray]:
    """
    Propagate several upstream gradients through one recorded graph.

    Args:
        seeds: (output, upstream gradient) pairs; upstream shapes equal output shapes
        wrt: leaf tensors whose gradients should be returned

    Returns:
        One gradient per `wrt` entry (zeros when the leaf is unreachable)

    Raises:
        BackwardError: If a seed has no recorded forward (leaf or already consumed)
        ShapeError: If an upstream gradient does not match its output
    """
    grads: dict[int, np.ndarray] = {}
    for output, upstream in seeds:
        if not output.has_record:
            raise BackwardError(
                f"backward called on {output!r} without a recorded forward (leaf, or record already consumed)"
            )
        if upstream.shape != output.shape:
            raise ShapeError(f"{output.op}: upstream gradient shape {upstream.shape} != output shape {output.shape}")
        upstream = upstream.astype(output.dtype, copy=False)
        key = id(output)
        grads[key] = grads[key] + upstream if key in grads else upstream

    keep = {id(t) for t in wrt}
    order = _topological_order(output for output, _ in seeds)

    for node in reversed(order):
        if node.adjoint is None:
            continue
        upstream = grads.get(id(node)) if id(node) in keep else grads.pop(id(node), None)
        if upstream is None:
            continue
        for parent, parent_grad in zip(node.parents, node.adjoint(upstream), strict=True):
            if parent_grad is None:
                continue
            key = id(parent)
            grads[key] = grads[key] + parent_grad if key in grads else parent_grad

    result = [grads.get(id(t), np.zeros_like(t.data)) for t in wrt]

    # Records are single-use: free them so activations can be collected.
    for node in order:
        node.adjoint = None
        node.parents = ()

    logger.debug(f"backward released {len(order)} records")
    return result


def backward(output: Tensor, upstream: np.ndarray, wrt: Sequence[Tensor] = ()) -> list[np.ndarray]:
    """Propagate `upstream` from a single output. See `backward_many`."""
    return backward_many([(output, upstream)], wrt)
