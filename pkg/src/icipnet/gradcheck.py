"""Central finite-difference verification of tape gradients."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .autodiff import Tensor, backward
from .rng import Rng


class GradcheckError(ArithmeticError):
    pass


def _relative(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)


def gradcheck(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    step: float = 1e-5,
    max_entries: int | None = None,
    rng: Rng | None = None,
) -> float:
    """Max relative error between tape and central-difference gradients.

    ``f`` is re-evaluated with each parameter entry nudged by ``+-step``.
    With ``max_entries`` set, at most that many entries per parameter are
    probed (chosen by ``rng``, default seed 0); otherwise all of them.
    """
    for p in params:
        p.grad = None
    out = f()
    if out.size != 1:
        raise GradcheckError(f"function must return a scalar, got shape {out.shape}")
    backward(out)
    rng = rng or Rng(0)
    worst = 0.0
    for k, p in enumerate(params):
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        flat = p.data.reshape(-1)  # view: perturbations land in p.data
        entries = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            entries = np.sort(rng.permutation(flat.size)[:max_entries])
        for j in entries:
            orig = flat[j]
            flat[j] = orig + step
            plus = f().item()
            flat[j] = orig - step
            minus = f().item()
            flat[j] = orig
            numeric = (plus - minus) / (2 * step)
            a = analytic.reshape(-1)[j]
            if not (np.isfinite(a) and np.isfinite(numeric)):
                raise GradcheckError(f"non-finite gradient at param {k} entry {int(j)}")
            worst = max(worst, _relative(float(a), numeric))
    for p in params:
        p.grad = None
    return worst
