"""Random-walk refinement of probe-to-gallery affinities.

A gallery similarity graph ``W`` (row-stochastic, zero diagonal) diffuses the
initial affinities ``y0``::

    y(t+1) = lam * W @ y(t) + (1 - lam) * y0

whose fixed point is ``(1 - lam) * inv(I - lam * W) @ y0``. The closed form is
evaluated with one LU factorisation of ``I - lam * W`` per transition matrix.
"""

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.linalg import lu_factor, lu_solve

from ._validation import (
    check_lambda,
    check_permutation,
    check_positive_int,
    check_square,
    check_vector,
)
from .head import GroupedAffinities

RESIDUAL_TOL = 1e-8


class SolverError(RuntimeError):
    """Raised when the closed-form solve leaves a residual above tolerance."""


@dataclass(frozen=True)
class RWConfig:
    """Random walk settings.

    ``iterations=None`` selects the closed form; an integer runs that many
    steps of the recursion instead.
    """

    lam: float = 0.95
    iterations: Optional[int] = None
    tolerance: float = 1e-10

    def __post_init__(self):
        object.__setattr__(self, "lam", check_lambda(self.lam))
        if self.iterations is not None:
            check_positive_int(self.iterations, "iterations", minimum=0)
        if not self.tolerance > 0:
            raise ValueError("tolerance must be positive")


@dataclass
class RefinedAffinities:
    """``y_inf[j, k]`` is the walk on group ``j``'s graph started from group ``k``'s affinities."""

    y_inf: np.ndarray
    averaged: np.ndarray

    @property
    def K(self):
        return self.y_inf.shape[0]


def normalize(S):
    """Row softmax over off-diagonal entries; the diagonal of the result is 0."""
    S = check_square(S, "S")
    n = S.shape[0]
    off = ~np.eye(n, dtype=bool)
    masked = np.where(off, S, -np.inf)
    row_max = masked.max(axis=1, keepdims=True)
    E = np.exp(masked - row_max)
    return E / E.sum(axis=1, keepdims=True)


def rw_iterative(W, y0, lam, t):
    """Run ``t`` steps of the damped random walk starting from ``y0``."""
    lam = check_lambda(lam)
    W = check_square(W, "W")
    y0 = check_vector(y0, "y0", W.shape[0])
    t = check_positive_int(t, "t", minimum=0)
    y = y0.copy()
    base = (1.0 - lam) * y0
    for _ in range(t):
        y = lam * (W @ y) + base
    return y


def iterations_for(lam, tol=1e-10):
    """Steps after which ``lam ** t`` drops below ``tol``."""
    lam = check_lambda(lam)
    if lam == 0.0:
        return 1
    return math.ceil(math.log(tol) / math.log(lam))


class WalkOperator:
    """Factorised ``I - lam * W`` reused for forward and transposed solves."""

    def __init__(self, W, lam):
        self.lam = check_lambda(lam)
        self.W = check_square(W, "W")
        self.n = self.W.shape[0]
        self.A = np.eye(self.n) - self.lam * self.W
        self.lu = lu_factor(self.A, check_finite=False)

    def solve(self, rhs, trans=0):
        x = lu_solve(self.lu, rhs, trans=trans, check_finite=False)
        A = self.A.T if trans else self.A
        resid = np.max(np.abs(A @ x - rhs)) if x.size else 0.0
        if not resid <= RESIDUAL_TOL:
            raise SolverError(f"linear solve residual {resid:.3e} exceeds {RESIDUAL_TOL:g}")
        return x

    def apply(self, y0):
        """``(1 - lam) * inv(I - lam W) @ y0``; ``y0`` may be (n,) or (n, r)."""
        return self.solve((1.0 - self.lam) * np.asarray(y0, dtype=np.float64))

    def apply_transpose(self, g):
        """``(1 - lam) * inv(I - lam W).T @ g``."""
        return self.solve((1.0 - self.lam) * np.asarray(g, dtype=np.float64), trans=1)


def rw_closed_form(W, y0, lam):
    """Fixed point of the damped random walk, via a dense LU solve."""
    W = check_square(W, "W")
    y0 = check_vector(y0, "y0", W.shape[0])
    return WalkOperator(W, lam).apply(y0)


def group_shuffle(ga, cfg=None, return_operators=False):
    """Refine every (graph ``j``, affinities ``k``) pairing of the ``K`` groups.

    Output ``y_inf[j, k]`` uses ``W_j = normalize(S_j)`` and ``y0_k``; ``averaged``
    is the mean over all ``K**2`` pairings, summed ``j``-major.
    """
    cfg = RWConfig() if cfg is None else cfg
    K, n = ga.K, ga.n
    y_inf = np.empty((K, K, n))
    ops = []
    for j in range(K):
        W = normalize(ga.S[j])
        if cfg.iterations is None:
            op = WalkOperator(W, cfg.lam)
            y_inf[j] = op.apply(ga.y0.T).T
            ops.append(op)
        else:
            for k in range(K):
                y_inf[j, k] = rw_iterative(W, ga.y0[k], cfg.lam, cfg.iterations)
            ops.append(W)
    total = np.zeros(n)
    for j in range(K):
        for k in range(K):
            total += y_inf[j, k]
    refined = RefinedAffinities(y_inf, total / (K * K))
    if return_operators:
        return refined, ops
    return refined


def permute_gallery(ga, perm):
    """Reorder the gallery: ``y0[:, perm]`` and ``S[:, perm][:, :, perm]``."""
    perm = check_permutation(perm, ga.n)
    return GroupedAffinities(ga.y0[:, perm], ga.S[:, perm][:, :, perm])
