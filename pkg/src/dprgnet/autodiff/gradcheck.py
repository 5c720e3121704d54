"""Central finite-difference verification of analytic gradients."""

import numpy as np

from ..errors import ContractError, DeterminismError
from .tensor import backpropagate, no_grad


def _scalar(value):
    data = np.asarray(getattr(value, "data", value), dtype=np.float64)
    if data.size != 1:
        raise ContractError(f"finite_difference_check: f must return a scalar, got shape {data.shape}")
    return float(data.reshape(-1)[0])


def finite_difference_check(f, x, step=1e-5, indices=None):
    """Largest relative disagreement between backprop and central differences.

    For every checked element the error is
    ``|analytic - central| / max(|analytic|, |central|, 1e-8)``.

    Args:
        f: callable mapping ``x`` (a :class:`Tensor`) to a scalar tensor. It may
            close over other tensors; only ``x`` is perturbed.
        x: tensor with ``requires_grad`` set.
        step: perturbation size, in ``(0, 1e-2]``.
        indices: optional iterable of flat element indices to check; all
            elements by default.

    Raises:
        DeterminismError: two evaluations of ``f`` at the same point differ.
    """
    if not 0.0 < step <= 1e-2:
        raise ContractError(f"finite_difference_check: step must be in (0, 1e-2], got {step}")
    if not x.requires_grad:
        raise ContractError("finite_difference_check: x must require grad")

    saved_grad = x.grad
    x.grad = None
    y = f(x)
    first = _scalar(y)
    backpropagate(y)
    analytic = np.zeros(x.shape) if x.grad is None else np.array(x.grad)
    x.grad = saved_grad

    with no_grad():
        second = _scalar(f(x))
        if first != second:
            raise DeterminismError(f"f is not deterministic: {first!r} != {second!r}")
        flat = x.data.reshape(-1)
        if indices is None:
            indices = range(flat.size)
        worst = 0.0
        for i in indices:
            original = flat[i]
            flat[i] = original + step
            up_arg = flat[i]
            up = _scalar(f(x))
            flat[i] = original - step
            down_arg = flat[i]
            down = _scalar(f(x))
            flat[i] = original
            central = (up - down) / (up_arg - down_arg)
            a = analytic.reshape(-1)[i]
            err = abs(a - central) / max(abs(a), abs(central), 1e-8)
            worst = max(worst, err)
    return worst
