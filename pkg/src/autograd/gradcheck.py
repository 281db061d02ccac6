"""
Gradient Check - Central finite differences against the analytic adjoints

The scalar under test is the projection L = sum(r * f(inputs)) with a fixed
random r, so any tensor-valued computation can be checked. The harness runs in
64-bit precision only: step 1e-5 with a 1e-4 tolerance is meaningless in
32-bit arithmetic.

Relative error is measured per checked entry:

    |analytic - numeric| / max(|analytic|, |numeric|, 1e-8)

`per_tensor` keeps the worst entry of each input and parameter, and the
reported figure is the maximum over all of them.

Checks over whole networks pass `skip_kinks=True`: every entry is estimated
again at half the step and dropped unless both estimates agree to a tenth of
the tolerance. That removes perturbations that flip a ReLU or max-pool switch
and entries whose gradient is too small to resolve above rounding noise. The
filter looks only at the numeric side, so a wrong adjoint on a kept entry is
still reported.
"""

import logging
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field

import numpy as np

from src.autograd import kernels
from src.autograd.tensor import CHECK_DTYPE, Param, Tensor, backward

logger = logging.getLogger("smokeseg.autograd")

DEFAULT_STEP = 1e-5
DEFAULT_TOLERANCE = 1e-4
_DENOMINATOR_FLOOR = 1e-8
_AGREEMENT = 0.1


class GradCheckError(RuntimeError):
    """Raised for non-finite intermediates or a computation not in 64-bit mode."""


@dataclass
class GradCheckResult:
    """Outcome of one gradient check."""

    target: str
    max_relative_error: float
    per_tensor: dict[str, float] = field(default_factory=dict)
    checked_entries: int = 0
    skipped_entries: int = 0

    def passed(self, tolerance: float = DEFAULT_TOLERANCE) -> bool:
        return self.max_relative_error <= tolerance


Computation = Callable[[Sequence[Tensor]], Tensor]


def _entries(size: int, limit: int | None, rng: np.random.Generator) -> np.ndarray:
    if limit is None or size <= limit:
        return np.arange(size)
    return np.sort(rng.choice(size, size=limit, replace=False))


def relative_errors(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    """Entrywise |a - n| / max(|a|, |n|, 1e-8)."""
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), _DENOMINATOR_FLOOR)
    return np.abs(analytic - numeric) / scale


def grad_check(
    f: Computation,
    inputs: Sequence[np.ndarray],
    params: Sequence[Param] = (),
    *,
    target: str = "computation",
    step: float = DEFAULT_STEP,
    seed: int = 0,
    max_entries_per_tensor: int | None = None,
    skip_kinks: bool = False,
) -> GradCheckResult:
    """
    Compare analytic gradients of `f` with central differences.

    Args:
        f: builds the output Tensor from input leaves (and closes over `params`)
        inputs: input arrays; converted to 64-bit leaves
        params: parameters used by `f`; must already be 64-bit
        target: label used in the result and logs
        step: finite-difference step
        seed: seeds the projection vector and entry sampling
        max_entries_per_tensor: check at most this many entries of each tensor (None = all)
        skip_kinks: re-estimate each entry at half the step and drop entries whose two
            estimates disagree (a ReLU or max-pool switch, or rounding noise)

    Returns:
        GradCheckResult with the maximum relative error over all checked tensors

    Raises:
        GradCheckError: On non-64-bit params or non-finite intermediates
    """
    for param in params:
        if param.value.dtype != CHECK_DTYPE:
            raise GradCheckError(f"{target}: parameter {param.name} is {param.value.dtype}; gradcheck needs float64")

    rng = np.random.default_rng(seed)
    arrays = [np.array(a, dtype=CHECK_DTYPE) for a in inputs]

    def evaluate(current: Sequence[np.ndarray]) -> tuple[Tensor, list[Tensor]]:
        leaves = [Tensor(a) for a in current]
        out = f(leaves)
        if not np.all(np.isfinite(out.data)):
            raise GradCheckError(f"{target}: non-finite output during gradient check")
        return out, leaves

    out, leaves = evaluate(arrays)
    projection = rng.standard_normal(out.shape)

    for param in params:
        param.grad = None
    input_grads = backward(out, projection, wrt=leaves)
    param_grads = [p.grad if p.grad is not None else np.zeros_like(p.value) for p in params]

    def loss(current: Sequence[np.ndarray]) -> float:
        value, _ = evaluate(current)
        total = float(np.sum(projection * value.data))
        if not np.isfinite(total):
            raise GradCheckError(f"{target}: non-finite projected loss during gradient check")
        return total

    result = GradCheckResult(target=target, max_relative_error=0.0)

    def central(flat: np.ndarray, entry: int, h: float) -> float:
        original = flat[entry]
        flat[entry] = original + h
        plus = loss(arrays)
        flat[entry] = original - h
        minus = loss(arrays)
        flat[entry] = original
        return (plus - minus) / (2 * h)

    def compare(label: str, flat: np.ndarray, analytic: np.ndarray) -> None:
        picked = _entries(flat.size, max_entries_per_tensor, rng)
        kept: list[int] = []
        numeric: list[float] = []
        for entry in picked:
            estimate = central(flat, int(entry), step)
            if skip_kinks:
                half = central(flat, int(entry), step / 2)
                if abs(estimate - half) > _AGREEMENT * DEFAULT_TOLERANCE * max(abs(estimate), abs(half)):
                    result.skipped_entries += 1
                    continue
            kept.append(int(entry))
            numeric.append(estimate)
        if kept:
            errors = relative_errors(analytic.reshape(-1)[kept], np.array(numeric))
            result.per_tensor[label] = float(np.max(errors))
        result.checked_entries += len(kept)

    for index, (array, analytic) in enumerate(zip(arrays, input_grads, strict=True)):
        compare(f"input[{index}]", array.reshape(-1), analytic)

    for param, analytic in zip(params, param_grads, strict=True):
        compare(param.name, param.value.reshape(-1), analytic)

    for param in params:
        param.grad = None

    result.max_relative_error = max(result.per_tensor.values(), default=0.0)
    if result.skipped_entries:
        logger.warning(f"gradcheck {target}: skipped {result.skipped_entries} unstable entries")
    logger.info(
        f"gradcheck {target}: max relative error {result.max_relative_error:.3e} "
        f"over {result.checked_entries} entries"
    )
    return result


# =============================================================================
# PER-KERNEL CASES
# =============================================================================


def _param(name: str, rng: np.random.Generator, *shape: int) -> Param:
    return Param(name, rng.standard_normal(shape).astype(CHECK_DTYPE))


def _away_from_zero(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    """Values with |x| >= 0.1 so finite differences never straddle a ReLU kink."""
    raw = rng.standard_normal(shape)
    return np.sign(raw) * (0.1 + np.abs(raw))


def kernel_case(name: str, seed: int = 0) -> tuple[Computation, list[np.ndarray], list[Param]]:
    """
    Build a small random gradient-check case exercising one kernel.

    Returns:
        (computation, input arrays, params)
    """
    rng = np.random.default_rng(seed)

    if name == "conv2d":
        weight, bias = _param("w3", rng, 3, 3, 3, 4), _param("b3", rng, 4)
        weight1, bias1 = _param("w1", rng, 1, 1, 4, 2), _param("b1", rng, 2)
        return (
            lambda xs: kernels.conv2d(kernels.conv2d(xs[0], weight, bias), weight1, bias1),
            [rng.standard_normal((2, 3, 5, 5))],
            [weight, bias, weight1, bias1],
        )
    if name == "conv_transpose2d":
        weight, bias = _param("wt", rng, 2, 2, 2, 3), _param("bt", rng, 3)
        return (
            lambda xs: kernels.conv_transpose2d(xs[0], weight, bias),
            [rng.standard_normal((1, 2, 3, 3))],
            [weight, bias],
        )
    if name == "maxpool2x2":
        return lambda xs: kernels.maxpool2x2(xs[0])[0], [rng.standard_normal((2, 2, 6, 6))], []
    if name == "upsample_nearest2x":
        return lambda xs: kernels.upsample_nearest2x(xs[0]), [rng.standard_normal((2, 2, 3, 4))], []
    if name == "relu":
        return lambda xs: kernels.relu(xs[0]), [_away_from_zero(rng, (2, 3, 4, 4))], []
    if name == "sigmoid":
        return lambda xs: kernels.sigmoid(xs[0]), [rng.standard_normal((2, 3, 4, 4)) * 3], []
    if name == "concat_channels":
        return (
            lambda xs: kernels.concat_channels(xs[0], xs[1]),
            [rng.standard_normal((2, 3, 4, 4)), rng.standard_normal((2, 2, 4, 4))],
            [],
        )
    if name == "add":
        return (
            lambda xs: kernels.add(xs[0], xs[1]),
            [rng.standard_normal((2, 3, 4, 4)), rng.standard_normal((2, 3, 4, 4))],
            [],
        )
    raise ValueError(f"Unknown kernel {name!r}; expected one of {', '.join(kernels.KERNEL_NAMES)}")


def check_kernels(seed: int = 0, step: float = DEFAULT_STEP) -> list[GradCheckResult]:
    """Run the gradient check for every kernel in `kernels.KERNEL_NAMES`."""
    results = []
    for name in kernels.KERNEL_NAMES:
        f, inputs, params = kernel_case(name, seed)
        results.append(grad_check(f, inputs, params, target=name, step=step, seed=seed))
    return results
