"""Linear mixing model baseline.

Endmembers are estimated by least squares from labelled training pixels and
abundances are inverted per pixel with fully constrained least squares
(non-negative, sum-to-one).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import linalg

log = logging.getLogger(__name__)

# relative singular-value threshold below which a system is treated as rank deficient
RANK_TOL = 1e-6


class RankError(np.linalg.LinAlgError):
    """Training abundances too collinear to identify every endmember."""


class ConvergenceError(RuntimeError):
    pass


def _collinear_members(matrix: np.ndarray) -> list[int]:
    _, s, vt = np.linalg.svd(matrix, full_matrices=False)
    v = vt[-1]
    return [int(i) for i in np.flatnonzero(np.abs(v) > 1e-3 * np.abs(v).max())]


def estimate_endmembers(X, A) -> np.ndarray:
    """Least-squares endmember spectra ``E`` (c x bands) with ``A @ E ~ X``.

    Solved through the normal equations with a Cholesky factorisation.
    """
    X = np.asarray(X, dtype=np.float64)
    A = np.asarray(A, dtype=np.float64)
    if X.ndim != 2 or A.ndim != 2 or X.shape[0] != A.shape[0]:
        raise ValueError(f"spectra {X.shape} and abundances {A.shape} do not pair up")
    n, c = A.shape
    if n < c:
        raise RankError(f"{n} training pixels cannot identify {c} endmembers")
    s = np.linalg.svd(A, compute_uv=False)
    if s[-1] <= RANK_TOL * s[0]:
        members = _collinear_members(A)
        raise RankError(f"training abundances are collinear in endmembers {members}")
    gram = A.T @ A
    E = linalg.cho_solve(linalg.cho_factor(gram), A.T @ X)
    se = np.linalg.svd(E, compute_uv=False)
    if se[-1] <= RANK_TOL * se[0]:
        log.warning("estimated endmember matrix is numerically rank deficient (%.3g)", se[-1] / se[0])
    return E


def _objective(G, h, xx, a) -> float:
    return float(a @ G @ a - 2.0 * h @ a + xx)


def _sum_to_one_ls(G, h, free) -> np.ndarray:
    """Minimise a'Ga - 2h'a over the free coordinates subject to sum(a) == 1."""
    k = len(free)
    kkt = np.zeros((k + 1, k + 1))
    kkt[:k, :k] = 2.0 * G[np.ix_(free, free)]
    kkt[:k, k] = 1.0
    kkt[k, :k] = 1.0
    rhs = np.append(2.0 * h[free], 1.0)
    sol = np.linalg.lstsq(kkt, rhs, rcond=None)[0] if k > 1 else np.linalg.solve(kkt, rhs)
    return sol[:k]


def fcls(x, E, tol: float = 1e-9, max_iter: int | None = None, trace: list | None = None) -> np.ndarray:
    """Fully constrained least squares abundances of spectrum ``x``.

    Minimises ``||E.T @ a - x||^2`` subject to ``a >= 0`` and ``sum(a) == 1``
    with a primal active-set method started from the best single endmember.
    Every iterate is feasible, so the objective never increases. If ``trace``
    is a list, objective values are appended to it per iteration.
    """
    E = np.asarray(E, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    c = E.shape[0]
    if E.ndim != 2 or x.shape != (E.shape[1],):
        raise ValueError(f"spectrum {x.shape} does not match endmembers {E.shape}")
    if c == 1:
        return np.ones(1)
    if max_iter is None:
        max_iter = 10 * c
    G = E @ E.T
    h = E @ x
    xx = float(x @ x)

    start = int(np.argmin(((E - x) ** 2).sum(axis=1)))
    a = np.zeros(c)
    a[start] = 1.0
    active = np.ones(c, dtype=bool)  # coordinates pinned at zero
    active[start] = False
    if trace is not None:
        trace.append(_objective(G, h, xx, a))

    for _ in range(max_iter):
        free = np.flatnonzero(~active)
        s = _sum_to_one_ls(G, h, free)
        if np.all(s >= -tol):
            a[:] = 0.0
            a[free] = np.maximum(s, 0.0)
            grad = 2.0 * (G @ a - h)
            mu = -float(np.mean(grad[free]))
            lagrange = grad + mu
            candidates = np.flatnonzero(active)
            if candidates.size == 0 or lagrange[candidates].min() >= -tol * max(1.0, abs(mu)):
                if trace is not None:
                    trace.append(_objective(G, h, xx, a))
                break
            active[candidates[np.argmin(lagrange[candidates])]] = False
        else:
            current = a[free]
            blocking = s < current
            ratios = np.where(blocking & (s < 0), current / np.where(blocking, current - s, 1.0), np.inf)
            j = int(np.argmin(ratios))
            step = float(ratios[j])
            a[free] = current + step * (s - current)
            a[free[j]] = 0.0
            active[free[j]] = True
            # a step can land other coordinates exactly on zero too
            for i in free:
                if a[i] <= 0.0:
                    a[i] = 0.0
                    active[i] = True
        if trace is not None:
            trace.append(_objective(G, h, xx, a))
    else:
        raise ConvergenceError(f"FCLS active set did not converge in {max_iter} iterations")

    a = np.maximum(a, 0.0)
    return a / a.sum()


def sum_to_one_ls(x, E) -> np.ndarray:
    """Closed-form least squares with only the sum-to-one constraint."""
    E = np.asarray(E, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    return _sum_to_one_ls(E @ E.T, E @ x, np.arange(E.shape[0]))


def fcls_batch(X, E, **kwargs) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    return np.stack([fcls(x, E, **kwargs) for x in X]) if len(X) else np.zeros((0, len(E)))


@dataclass
class LinearMixingModel:
    """Supervised LMM: endmembers from training pixels, FCLS for inference.

    Pass ``endmembers`` to skip estimation and use known spectra instead.
    """

    endmembers: np.ndarray | None = None

    def fit(self, X, A) -> "LinearMixingModel":
        if self.endmembers is None:
            self.endmembers = estimate_endmembers(X, A)
        return self

    def predict(self, X) -> np.ndarray:
        if self.endmembers is None:
            raise RuntimeError("model is not fitted")
        return fcls_batch(X, self.endmembers)

    def save(self, path) -> None:
        np.savez(path, endmembers=np.asarray(self.endmembers), kind=np.array("LMM"))

    @classmethod
    def load(cls, path) -> "LinearMixingModel":
        with np.load(path) as z:
            return cls(endmembers=z["endmembers"])
