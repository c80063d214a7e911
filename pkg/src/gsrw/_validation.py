"""Input validation helpers shared by the numerical modules."""

import numbers

import numpy as np


def check_lambda(lam):
    """Return ``lam`` as a float after checking it lies in ``[0, 1)``.

    ``lam == 1`` is rejected: ``I - W`` is singular for any row-stochastic ``W``.
    """
    if isinstance(lam, bool) or not isinstance(lam, numbers.Real):
        raise TypeError(f"lambda must be a real number, got {type(lam).__name__}")
    lam = float(lam)
    if not np.isfinite(lam) or not 0.0 <= lam < 1.0:
        raise ValueError(f"lambda must lie in [0, 1), got {lam!r}")
    return lam


def check_positive_int(value, name, minimum=1):
    if isinstance(value, bool) or not isinstance(value, numbers.Integral):
        raise TypeError(f"{name} must be an integer, got {type(value).__name__}")
    if value < minimum:
        raise ValueError(f"{name} must be >= {minimum}, got {value}")
    return int(value)


def check_vector(v, name="vector", n=None):
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1:
        raise ValueError(f"{name} must be one-dimensional, got shape {v.shape}")
    if n is not None and v.shape[0] != n:
        raise ValueError(f"{name} must have length {n}, got {v.shape[0]}")
    if not np.all(np.isfinite(v)):
        raise ValueError(f"{name} contains non-finite values")
    return v


def check_square(S, name="matrix", min_size=2):
    S = np.asarray(S, dtype=np.float64)
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise ValueError(f"{name} must be square, got shape {S.shape}")
    if S.shape[0] < min_size:
        raise ValueError(f"{name} must be at least {min_size}x{min_size}, got {S.shape}")
    if not np.all(np.isfinite(S)):
        raise ValueError(f"{name} contains non-finite values")
    return S


def check_groups(d, K):
    """Check that ``d`` feature dimensions split evenly into ``K`` groups."""
    K = check_positive_int(K, "K")
    d = check_positive_int(d, "d")
    if d % K:
        raise ValueError(f"feature dimension {d} is not divisible by K={K}")
    return d // K


def check_permutation(perm, n):
    perm = np.asarray(perm)
    if perm.shape != (n,) or not np.issubdtype(perm.dtype, np.integer):
        raise ValueError(f"permutation must be an integer array of length {n}")
    if not np.array_equal(np.sort(perm), np.arange(n)):
        raise ValueError("not a valid permutation")
    return perm.astype(np.intp)
