"""Randomised finite-difference checks of every hand-written gradient."""

import itertools
from dataclasses import dataclass

import numpy as np

from .gradients import (
    RWBackwardState,
    finite_diff_oracle,
    head_backward,
    max_relative_error,
    rw_backward,
    softmax_backward,
)
from .head import HeadParams, g2g_logits, p2g_affinities
from .random_walk import normalize
from .synthio import EmbeddingRecord
from .trainer import MODES, TrainConfig, batch_objective, loss_xent, sample_batch

DEFAULT_SIZES = (3, 6, 10)
DEFAULT_GROUPS = (1, 2, 4)
DEFAULT_LAMBDAS = (0.0, 0.5, 0.95)
DEFAULT_SEEDS = (0, 1)
FAULTS = ("sign-flip",)


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    tol: float
    max_abs_error: float = 0.0

    @property
    def passed(self):
        return self.max_rel_error < self.tol

    def line(self):
        status = "PASS" if self.passed else "FAIL"
        return (
            f"{status} {self.name:<48s} max_rel_err={self.max_rel_error:.3e} "
            f"max_abs_err={self.max_abs_error:.3e} (tol {self.tol:g})"
        )


def _errors(pairs):
    rel = max(max_relative_error(a, b) for a, b in pairs)
    abs_ = max(float(np.max(np.abs(np.ravel(a) - np.ravel(b)), initial=0.0)) for a, b in pairs)
    return rel, abs_


def _random_params(rng, d, K):
    params = HeadParams.initialize(d, K, random_state=rng)
    params.norm_scale[:] = rng.uniform(0.5, 1.5, d)
    params.norm_shift[:] = rng.normal(0, 0.3, d)
    params.group_biases[:] = rng.normal(0, 0.5, K)
    return params


def check_rw_backward(n, lam, seed, fault=None, step=1e-6):
    rng = np.random.default_rng(seed)
    W = normalize(rng.normal(size=(n, n)))
    y0 = rng.uniform(0.05, 0.95, n)
    target = rng.uniform(0, 1, n)
    state = RWBackwardState.forward(W, y0, lam)
    d_y0, d_W = rw_backward(state, 2.0 * (state.y_inf - target))
    if fault == "sign-flip":
        d_W = -d_W

    def loss(y0_, W_):
        y = RWBackwardState.forward(W_, y0_, lam).y_inf
        return float(np.sum((y - target) ** 2))

    num_y0 = finite_diff_oracle(lambda v: loss(v, W), y0, step)
    off = ~np.eye(n, dtype=bool)

    def loss_w(vals):
        W_ = W.copy()
        W_[off] = vals  # diagonal pinned at 0, rows not renormalised
        return loss(y0, W_)

    num_W = finite_diff_oracle(loss_w, W[off], step)
    return _errors([(d_y0, num_y0), (d_W[off], num_W)])


def check_softmax_backward(n, seed, step=1e-6):
    rng = np.random.default_rng(seed)
    S = rng.normal(size=(n, n))
    d_W = rng.normal(size=(n, n))
    np.fill_diagonal(d_W, 0.0)
    d_S = softmax_backward(S, normalize(S), d_W)
    num = finite_diff_oracle(lambda s: float(np.sum(d_W * normalize(s))), S, step)
    return _errors([(d_S, num)])


def check_head_backward(n, K, seed, step=1e-6, m=None):
    rng = np.random.default_rng(seed)
    m = m or max(1, 8 // K)
    d = K * m
    params = _random_params(rng, d, K)
    probe = rng.normal(size=d)
    gallery = rng.normal(size=(n, d))
    A = rng.normal(size=(K, n))
    B = rng.normal(size=(K, n, n))

    def loss(p, G, prm):
        return float(np.sum(A * p2g_affinities(p, G, prm)) + np.sum(B * g2g_logits(G, prm)))

    grads = head_backward(probe, gallery, params, A, B)
    num_p = finite_diff_oracle(lambda v: loss(v, gallery, params), probe, step)
    num_g = finite_diff_oracle(lambda v: loss(probe, v, params), gallery, step)
    num_prm = finite_diff_oracle(
        lambda v: loss(probe, gallery, HeadParams.from_vector(v, d, K)), params.to_vector(), step
    )
    return _errors([(grads.probe, num_p), (grads.gallery, num_g), (grads.param_vector(), num_prm)])


def check_loss_xent(n, seed, step=1e-6):
    rng = np.random.default_rng(seed)
    y = rng.uniform(0.05, 0.95, n)
    labels = (rng.uniform(size=n) < 0.3).astype(float)
    _, grad = loss_xent(y, labels)
    num = finite_diff_oracle(lambda v: loss_xent(v, labels)[0], y, step)
    return _errors([(grad, num)])


def check_batch_objective(K, lam, mode, seed, step=1e-6, d=8, P=2, Q=3):
    rng = np.random.default_rng(seed)
    records = [EmbeddingRecord(f"id{p}", rng.normal(size=d) + 2.0 * p) for p in range(P) for _ in range(Q)]
    cfg = TrainConfig(persons_per_batch=P, images_per_person=Q, lam=lam, K=K, mode=mode)
    batch = sample_batch(records, cfg, rng)
    params = _random_params(rng, d, K)
    _, grad = batch_objective(batch, params, cfg)
    num = finite_diff_oracle(
        lambda v: batch_objective(batch, HeadParams.from_vector(v, d, K), cfg)[0],
        params.to_vector(),
        step,
    )
    return _errors([(grad.to_vector(), num)])


def run_gradcheck(
    sizes=DEFAULT_SIZES,
    groups=DEFAULT_GROUPS,
    lambdas=DEFAULT_LAMBDAS,
    seeds=DEFAULT_SEEDS,
    tol=1e-5,
    fault=None,
    include_pipeline=True,
):
    """Run the full grid; returns a list of :class:`CheckResult`."""
    if fault is not None and fault not in FAULTS:
        raise ValueError(f"unknown fault {fault!r}")
    results = []
    for n, seed in itertools.product(sizes, seeds):
        for lam in lambdas:
            rel, abs_ = check_rw_backward(n, lam, seed, fault=fault)
            results.append(CheckResult(f"rw_backward n={n} lam={lam} seed={seed}", rel, tol, abs_))
        rel, abs_ = check_softmax_backward(n, seed)
        results.append(CheckResult(f"softmax_backward n={n} seed={seed}", rel, tol, abs_))
        rel, abs_ = check_loss_xent(n, seed)
        results.append(CheckResult(f"loss_xent n={n} seed={seed}", rel, tol, abs_))
        for K in groups:
            rel, abs_ = check_head_backward(n, K, seed)
            results.append(CheckResult(f"head_backward n={n} K={K} seed={seed}", rel, tol, abs_))
    if include_pipeline:
        for K, lam, mode, seed in itertools.product(groups, lambdas, MODES, seeds[:1]):
            if mode == "baseline" and lam != lambdas[0]:
                continue  # the walk is bypassed; lambda is irrelevant
            rel, abs_ = check_batch_objective(K, lam, mode, seed)
            results.append(CheckResult(f"train objective mode={mode} K={K} lam={lam}", rel, tol, abs_))
    return results
