"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, no_grad

# Below this magnitude gradient coordinates are compared in absolute terms.
REL_ERROR_FLOOR = 1e-4


def grad_check(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], h: float = 1e-5,
               seed: int = 0, max_coords: int = 10_000) -> float:
    """Max relative error between backprop and central differences.

    ``fn`` maps Tensors to a Tensor. The scalar checked is ``sum(fn(...) * R)``
    for a fixed random ``R``. Everything runs in float64. When the inputs hold
    more than ``max_coords`` coordinates in total, a random subset is checked.
    """
    rng = np.random.default_rng(seed)
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    out = fn(*tensors)
    proj = rng.standard_normal(out.shape)
    out.backward(proj)
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]

    coords = [(i, j) for i, a in enumerate(arrays) for j in range(a.size)]
    if len(coords) > max_coords:
        pick = rng.choice(len(coords), size=max_coords, replace=False)
        coords = [coords[k] for k in np.sort(pick)]

    def value() -> float:
        with no_grad():
            return float(np.sum(fn(*[Tensor(a) for a in arrays]).data * proj))

    worst = 0.0
    for i, j in coords:
        flat = arrays[i].reshape(-1)
        orig = flat[j]
        flat[j] = orig + h
        f_plus = value()
        flat[j] = orig - h
        f_minus = value()
        flat[j] = orig
        num = (f_plus - f_minus) / (2 * h)
        ana = analytic[i].reshape(-1)[j]
        err = abs(ana - num) / max(abs(ana), abs(num), REL_ERROR_FLOOR)
        worst = max(worst, err)
    return worst
