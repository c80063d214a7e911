"""Hand-derived backward passes for the affinity head and the random-walk layer.

With ``A = I - lam W`` and ``y_inf = (1 - lam) A^{-1} y0``, differentiating
``A^{-1}`` gives ``d y_inf = lam A^{-1} dW y_inf``, so for an upstream gradient
``g = dL/dy_inf``::

    dL/dy0 = (1 - lam) A^{-T} g
    dL/dW  = lam (A^{-T} g) y_inf^T        (diagonal dropped; W_ii is pinned at 0)

Both use the transposed solve of the forward factorisation.
"""

from dataclasses import dataclass

import numpy as np

from ._validation import check_square, check_vector
from .head import HeadParams, _check_features, sigmoid
from .random_walk import WalkOperator


@dataclass
class RWBackwardState:
    """Forward quantities needed to back-propagate through one walk."""

    op: WalkOperator
    y0: np.ndarray
    y_inf: np.ndarray

    @classmethod
    def forward(cls, W, y0, lam):
        op = WalkOperator(W, lam)
        y0 = check_vector(y0, "y0", op.n)
        return cls(op, y0, op.apply(y0))

    @property
    def lam(self):
        return self.op.lam

    def check(self, tol=1e-10):
        if not np.allclose(self.op.apply(self.y0), self.y_inf, rtol=0, atol=tol):
            raise ValueError("inconsistent backward state: y_inf does not match y0")


def rw_backward(state, d_yinf):
    """Gradients of the loss w.r.t. ``y0`` and ``W`` given ``dL/dy_inf``."""
    state.check()
    d_yinf = check_vector(d_yinf, "d_yinf", state.op.n)
    u = state.op.solve(d_yinf, trans=1)
    d_y0 = (1.0 - state.lam) * u
    d_W = state.lam * np.outer(u, state.y_inf)
    np.fill_diagonal(d_W, 0.0)
    return d_y0, d_W


def softmax_backward(S, W, d_W):
    """Chain ``dL/dW`` through the off-diagonal row softmax to ``dL/dS``."""
    S = check_square(S, "S")
    W = np.asarray(W, dtype=np.float64)
    d_W = np.asarray(d_W, dtype=np.float64)
    if W.shape != S.shape or d_W.shape != S.shape:
        raise ValueError("S, W and d_W must share one square shape")
    # W_ii == 0, so the row dot product already excludes the diagonal
    inner = np.sum(d_W * W, axis=1, keepdims=True)
    d_S = W * (d_W - inner)
    np.fill_diagonal(d_S, 0.0)
    return d_S


@dataclass
class HeadGrads:
    """Gradients w.r.t. head inputs and every :class:`HeadParams` field."""

    probe: np.ndarray
    gallery: np.ndarray
    params: HeadParams

    def param_vector(self):
        return self.params.to_vector()


def _zero_params_like(params):
    # bypass validation: a gradient of norm_scale may be zero or negative
    grad = object.__new__(HeadParams)
    for f in HeadParams._fields:
        setattr(grad, f, np.zeros_like(getattr(params, f)))
    return grad


def head_backward(probe, gallery, params, d_y0, d_S):
    """Back-propagate ``dL/dy0`` (K, n) and ``dL/dS`` (K, n, n) through the head.

    ``probe`` and ``gallery`` are the raw feature arrays. Either gradient may
    be ``None`` to skip that branch.
    """
    probe, gallery = _check_features(probe, gallery, params)
    n = gallery.shape[0]
    K = params.K
    grads = HeadGrads(np.zeros_like(probe), np.zeros_like(gallery), _zero_params_like(params))
    if d_y0 is not None:
        d_y0 = np.asarray(d_y0, dtype=np.float64)
        if d_y0.shape != (K, n):
            raise ValueError(f"d_y0 must have shape {(K, n)}, got {d_y0.shape}")
        _p2g_backward(probe, gallery, params, d_y0, grads)
    if d_S is not None:
        d_S = np.asarray(d_S, dtype=np.float64)
        if d_S.shape != (K, n, n):
            raise ValueError(f"d_S must have shape {(K, n, n)}, got {d_S.shape}")
        _g2g_backward(gallery, params, d_S, grads)
    return grads


def _p2g_backward(probe, gallery, params, d_y0, grads):
    diff = probe - gallery
    gp = grads.params
    for k in range(params.K):
        sl = params.group_slice(k)
        w = params.group_weights[k]
        scale = params.norm_scale[sl]
        sq = diff[:, sl] ** 2
        y = sigmoid((sq * scale + params.norm_shift[sl]) @ w + params.group_biases[k])
        g = d_y0[k] * y * (1.0 - y)
        g_sq = g @ sq
        g_sum = g.sum()
        gp.group_weights[k] += scale * g_sq + params.norm_shift[sl] * g_sum
        gp.group_biases[k] += g_sum
        gp.norm_scale[sl] += w * g_sq
        gp.norm_shift[sl] += w * g_sum
        g_diff = 2.0 * (w * scale) * (g[:, None] * diff[:, sl])
        grads.probe[sl] += g_diff.sum(axis=0)
        grads.gallery[:, sl] -= g_diff


def _g2g_backward(gallery, params, d_S, grads):
    gp = grads.params
    sq_norm = gallery**2
    for k in range(params.K):
        sl = params.group_slice(k)
        w = params.group_weights[k]
        scale = params.norm_scale[sl]
        G = gallery[:, sl]
        g = d_S[k]
        H = g + g.T
        # sum_ij g_ij (G_i - G_j)^2, per dimension
        g_sq = g.sum(axis=1) @ sq_norm[:, sl] + g.sum(axis=0) @ sq_norm[:, sl]
        g_sq -= 2.0 * np.einsum("im,ij,jm->m", G, g, G)
        g_sum = g.sum()
        gp.group_weights[k] += scale * g_sq + params.norm_shift[sl] * g_sum
        gp.group_biases[k] += g_sum
        gp.norm_scale[sl] += w * g_sq
        gp.norm_shift[sl] += w * g_sum
        grads.gallery[:, sl] += 2.0 * (w * scale) * (H.sum(axis=1)[:, None] * G - H @ G)


def baseline_backward(i, value, n):
    """Gradient w.r.t. ``y0`` when a loss on pair ``i`` (0-based) skips the walk."""
    if not 0 <= i < n:
        raise IndexError(f"index {i} out of range for gallery of size {n}")
    d_y0 = np.zeros(n)
    d_y0[i] = value
    return d_y0


def finite_diff_oracle(f, x, step=1e-6):
    """Central-difference gradient of scalar ``f`` at ``x``."""
    x = np.array(x, dtype=np.float64)
    grad = np.empty_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f(x)
        flat[i] = orig - step
        fm = f(x)
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"non-finite function value at coordinate {i}")
        gflat[i] = (fp - fm) / (2.0 * step)
    return grad


def max_relative_error(analytic, numeric, floor=1e-8):
    """Largest elementwise relative error, ignoring differences below ``floor``."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    b = np.asarray(numeric, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError("shape mismatch")
    diff = np.abs(a - b)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    rel = np.where(diff <= floor, 0.0, diff / denom)
    return float(rel.max()) if rel.size else 0.0
