from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward, no_grad


def _scalar(value) -> float:
    x = value.item() if isinstance(value, Tensor) else float(value)
    if not np.isfinite(x):
        raise FloatingPointError(f"objective is not finite: {x}")
    return x


def finite_diff_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    epsilon: float = 1e-6,
    *,
    max_entries: int | None = None,
    seed: int = 0,
) -> float:
    """Compare reverse-mode gradients of ``f`` against central differences.

    ``f`` rebuilds the scalar objective from ``params`` on every call.
    Returns ``max |g_a - g_n| / max(1e-8, |g_a| + |g_n|)`` over all checked
    entries.  With ``max_entries`` only a seeded random subset of each
    parameter's entries is perturbed.
    """
    if not 1e-7 <= epsilon <= 1e-3:
        raise ValueError(f"epsilon must lie in [1e-7, 1e-3], got {epsilon}")
    for p in params:
        p.grad = None
    loss = f()
    _scalar(loss)
    backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    rng = np.random.default_rng(seed)
    worst = 0.0
    with no_grad():
        for p, ga in zip(params, analytic):
            flat = p.data.reshape(-1)
            idx = np.arange(flat.size)
            if max_entries is not None and flat.size > max_entries:
                idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
            ga_flat = ga.reshape(-1)
            for i in idx:
                orig = flat[i]
                flat[i] = orig + epsilon
                fp = _scalar(f())
                flat[i] = orig - epsilon
                fm = _scalar(f())
                flat[i] = orig
                gn = (fp - fm) / (2.0 * epsilon)
                err = abs(ga_flat[i] - gn) / max(1e-8, abs(ga_flat[i]) + abs(gn))
                worst = max(worst, err)
    return worst
