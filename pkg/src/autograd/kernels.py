"""
Kernels - The fixed set of differentiable image operations

Each kernel computes its forward value in the input's precision and returns a
`Tensor` whose adjoint closure holds exactly what the backward pass needs:
im2col columns for convolutions, argmax indices for pooling, the split point
for channel concatenation, the clamped output for the sigmoid.

Kernels:
- conv2d: 3x3 (zero padding 1) or 1x1 cross-correlation, stride 1
- conv_transpose2d: 2x2 stride-2 scatter
- maxpool2x2 / upsample_nearest2x
- relu / sigmoid
- concat_channels / add
"""

import logging
from collections.abc import Iterator
from contextlib import contextmanager

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from src.autograd.tensor import Param, ShapeError, Tensor

logger = logging.getLogger("smokeseg.autograd")

SIGMOID_INPUT_CLAMP = 30.0
SIGMOID_OUTPUT_EPS = 1e-7

KERNEL_NAMES = (
    "conv2d",
    "conv_transpose2d",
    "maxpool2x2",
    "upsample_nearest2x",
    "relu",
    "sigmoid",
    "concat_channels",
    "add",
)

# Kernels whose input adjoint is sign-flipped; used only by the gradient-check mutation test.
_faulty_adjoints: set[str] = set()


@contextmanager
def inject_adjoint_fault(kernel: str) -> Iterator[None]:
    """Flip the sign of one kernel's input adjoint while the context is active."""
    if kernel not in KERNEL_NAMES:
        raise ValueError(f"Unknown kernel {kernel!r}; expected one of {', '.join(KERNEL_NAMES)}")
    _faulty_adjoints.add(kernel)
    logger.warning(f"Adjoint fault injected into {kernel}")
    try:
        yield
    finally:
        _faulty_adjoints.discard(kernel)


def _sign(kernel: str) -> float:
    return -1.0 if kernel in _faulty_adjoints else 1.0


# =============================================================================
# CONVOLUTIONS
# =============================================================================


def _im2col(x: np.ndarray, k: int, pad: int) -> np.ndarray:
    """(n, c, h, w) -> (n*h*w, c*k*k) columns for a same-size stride-1 window scan."""
    n, c, h, w = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    windows = sliding_window_view(x, (k, k), axis=(2, 3))  # (n, c, h, w, k, k)
    return windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * w, c * k * k)


def _col2im(cols: np.ndarray, shape: tuple[int, int, int, int], k: int, pad: int) -> np.ndarray:
    """Adjoint of `_im2col`: scatter-add columns back onto the (unpadded) input grid."""
    n, c, h, w = shape
    patches = cols.reshape(n, h, w, c, k, k).transpose(0, 3, 1, 2, 4, 5)
    out = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            out[:, :, i : i + h, j : j + w] += patches[..., i, j]
    if pad:
        out = out[:, :, pad:-pad, pad:-pad]
    return out


def conv2d(x: Tensor, weight: Param, bias: Param) -> Tensor:
    """
    Same-size 2-D cross-correlation plus bias.

    Args:
        x: input (n, cin, h, w)
        weight: Param of shape (k, k, cin, cout), k in {1, 3}
        bias: Param of shape (cout,)

    Returns:
        Tensor (n, cout, h, w)

    Raises:
        ShapeError: naming the layer and both shapes on any mismatch
    """
    k, k2, cin, cout = weight.shape
    if k != k2 or k not in (1, 3):
        raise ShapeError(f"{weight.name}: conv2d supports 1x1 and 3x3 kernels, got weight shape {weight.shape}")
    if x.shape[1] != cin:
        raise ShapeError(f"{weight.name}: input shape {x.shape} does not match weight shape {weight.shape}")
    if bias.shape != (cout,):
        raise ShapeError(f"{bias.name}: bias shape {bias.shape} does not match weight shape {weight.shape}")

    n, _, h, w = x.shape
    pad = k // 2
    dtype = x.dtype
    w_mat = weight.value.astype(dtype, copy=False).transpose(2, 0, 1, 3).reshape(cin * k * k, cout)
    cols = _im2col(x.data, k, pad)
    out = cols @ w_mat + bias.value.astype(dtype, copy=False)
    y = out.reshape(n, h, w, cout).transpose(0, 3, 1, 2)

    def adjoint(g: np.ndarray) -> tuple[np.ndarray]:
        g_mat = g.transpose(0, 2, 3, 1).reshape(n * h * w, cout)
        d_w = (cols.T @ g_mat).reshape(cin, k, k, cout).transpose(1, 2, 0, 3)
        weight.accumulate(d_w)
        bias.accumulate(g_mat.sum(axis=0))
        d_x = _col2im(g_mat @ w_mat.T, x.shape, k, pad)
        return (_sign("conv2d") * d_x,)

    return Tensor(np.ascontiguousarray(y), op=f"conv2d[{weight.name}]", parents=(x,), adjoint=adjoint)


def conv_transpose2d(x: Tensor, weight: Param, bias: Param) -> Tensor:
    """
    2x2 stride-2 transposed convolution without padding.

    Each input site scatters its weighted 2x2 patch, so (n, cin, h, w) maps to
    (n, cout, 2h, 2w).
    """
    k, k2, cin, cout = weight.shape
    if (k, k2) != (2, 2):
        raise ShapeError(f"{weight.name}: conv_transpose2d expects a 2x2 kernel, got weight shape {weight.shape}")
    if x.shape[1] != cin:
        raise ShapeError(f"{weight.name}: input shape {x.shape} does not match weight shape {weight.shape}")
    if bias.shape != (cout,):
        raise ShapeError(f"{bias.name}: bias shape {bias.shape} does not match weight shape {weight.shape}")

    n, _, h, w = x.shape
    dtype = x.dtype
    kernel = weight.value.astype(dtype, copy=False)
    scattered = np.einsum("ncab,ijco->noaibj", x.data, kernel)
    y = scattered.reshape(n, cout, 2 * h, 2 * w) + bias.value.astype(dtype, copy=False)[None, :, None, None]

    def adjoint(g: np.ndarray) -> tuple[np.ndarray]:
        g_blocks = g.reshape(n, cout, h, 2, w, 2)
        weight.accumulate(np.einsum("ncab,noaibj->ijco", x.data, g_blocks))
        bias.accumulate(g.sum(axis=(0, 2, 3)))
        d_x = np.einsum("noaibj,ijco->ncab", g_blocks, kernel)
        return (_sign("conv_transpose2d") * d_x,)

    return Tensor(y, op=f"conv_transpose2d[{weight.name}]", parents=(x,), adjoint=adjoint)


# =============================================================================
# RESAMPLING
# =============================================================================


def maxpool2x2(x: Tensor) -> tuple[Tensor, np.ndarray]:
    """
    2x2 max-pooling with stride 2.

    Returns:
        (pooled tensor, argmax indices in 0..3 per output site, row-major in the window)

    Raises:
        ShapeError: If h or w is odd
    """
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2x2: spatial dims must be even, got input shape {x.shape}")

    windows = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    indices = windows.argmax(axis=-1)
    pooled = np.take_along_axis(windows, indices[..., None], axis=-1)[..., 0]

    def adjoint(g: np.ndarray) -> tuple[np.ndarray]:
        routed = np.zeros((n, c, h // 2, w // 2, 4), dtype=g.dtype)
        np.put_along_axis(routed, indices[..., None], g[..., None], axis=-1)
        d_x = routed.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (_sign("maxpool2x2") * d_x,)

    return Tensor(pooled, op="maxpool2x2", parents=(x,), adjoint=adjoint), indices


def upsample_nearest2x(x: Tensor) -> Tensor:
    """Replicate every pixel into a 2x2 block: (n, c, h, w) -> (n, c, 2h, 2w)."""
    n, c, h, w = x.shape
    y = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def adjoint(g: np.ndarray) -> tuple[np.ndarray]:
        d_x = g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5))
        return (_sign("upsample_nearest2x") * d_x,)

    return Tensor(y, op="upsample_nearest2x", parents=(x,), adjoint=adjoint)


# =============================================================================
# ACTIVATIONS
# =============================================================================


def relu(x: Tensor) -> Tensor:
    """Elementwise max(0, x)."""
    active = x.data > 0
    y = np.where(active, x.data, 0).astype(x.dtype, copy=False)

    def adjoint(g: np.ndarray) -> tuple[np.ndarray]:
        return (_sign("relu") * np.where(active, g, 0).astype(g.dtype, copy=False),)

    return Tensor(y, op="relu", parents=(x,), adjoint=adjoint)


def sigmoid(x: Tensor) -> Tensor:
    """
    Logistic function with input clamped to [-30, 30] and output to [1e-7, 1 - 1e-7].

    The adjoint is s(1 - s) evaluated at the clamped output, so saturated
    pixels still pass a (tiny) gradient instead of an exact zero.
    """
    z = np.clip(x.data, -SIGMOID_INPUT_CLAMP, SIGMOID_INPUT_CLAMP)
    s = 1.0 / (1.0 + np.exp(-z))
    s = np.clip(s, SIGMOID_OUTPUT_EPS, 1.0 - SIGMOID_OUTPUT_EPS).astype(x.dtype, copy=False)

    def adjoint(g: np.ndarray) -> tuple[np.ndarray]:
        return (_sign("sigmoid") * g * s * (1.0 - s),)

    return Tensor(s, op="sigmoid", parents=(x,), adjoint=adjoint)


# =============================================================================
# MERGING
# =============================================================================


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Stack `a`'s channels then `b`'s. Decoder trunk goes in `a`, skip features in `b`."""
    if (a.shape[0], a.shape[2], a.shape[3]) != (b.shape[0], b.shape[2], b.shape[3]):
        raise ShapeError(f"concat_channels: shapes {a.shape} and {b.shape} disagree on batch or spatial size")
    split = a.shape[1]
    y = np.concatenate([a.data, b.data.astype(a.dtype, copy=False)], axis=1)

    def adjoint(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        sign = _sign("concat_channels")
        return sign * g[:, :split], sign * g[:, split:]

    return Tensor(y, op="concat_channels", parents=(a, b), adjoint=adjoint)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum of two same-shape tensors."""
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
    y = a.data + b.data.astype(a.dtype, copy=False)

    def adjoint(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        sign = _sign("add")
        return sign * g, sign * g

    return Tensor(y, op="add", parents=(a, b), adjoint=adjoint)
