"""Central finite-difference checks of the autodiff gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T


@dataclass
class GradCheckResult:
    checked: int = 0
    worst_abs: float = 0.0
    worst_rel: float = 0.0
    failures: list[tuple[str, tuple, float, float]] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.checked > 0 and not self.failures


def check_gradients(loss_fn: Callable[[], T.Tensor], params: Sequence[T.Parameter], samples: int = 8,
                    eps: float = 1e-6, rtol: float = 1e-3, atol: float = 1e-5, seed=0) -> GradCheckResult:
    """Compare analytic gradients of ``loss_fn()`` against central differences.

    ``loss_fn`` must rebuild the graph from the current parameter values.
    Up to ``samples`` entries per parameter are perturbed; an entry passes when
    ``|analytic - numeric| <= max(atol, rtol * max(|analytic|, |numeric|))``.
    Run in float64 for a trustworthy comparison.
    """
    rng = np.random.default_rng(seed)
    for p in params:
        p.zero_grad()
    T.backward(loss_fn())
    analytic = [p.grad.copy() for p in params]
    result = GradCheckResult()
    with T.no_grad():
        for p, grad in zip(params, analytic):
            flat = p.data.reshape(-1)
            picks = rng.choice(flat.size, size=min(samples, flat.size), replace=False)
            for i in picks:
                orig = flat[i]
                flat[i] = orig + eps
                up = float(loss_fn().data)
                flat[i] = orig - eps
                down = float(loss_fn().data)
                flat[i] = orig
                numeric = (up - down) / (2 * eps)
                a = float(grad.reshape(-1)[i])
                err = abs(a - numeric)
                scale = max(abs(a), abs(numeric))
                result.checked += 1
                result.worst_abs = max(result.worst_abs, err)
                if scale > 0:
                    result.worst_rel = max(result.worst_rel, err / scale)
                if err > max(atol, rtol * scale):
                    idx = np.unravel_index(i, p.data.shape)
                    result.failures.append((p.name or str(p.shape), tuple(int(j) for j in idx), a, numeric))
    return result
