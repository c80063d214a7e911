"""End-to-end SGD training of the affinity head through the random-walk layer.

Each batch holds ``P`` identities with ``Q`` images each: one image per
identity is the probe, the remaining ``P * (Q - 1)`` images form a gallery
shared by every probe.

Training modes:

``gsrw``
    cross-entropy on all ``K**2`` shuffled refinements ``y_inf[j, k]``,
    averaged over the pairings.
``rw_only``
    same, restricted to the ``K`` unshuffled pairings ``j == k``.
``baseline``
    no walk; cross-entropy directly on every P2G affinity and on the sigmoid
    of every G2G logit, each pair weighted ``1 / (n K)``.
"""

import csv
import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from ._validation import check_lambda, check_positive_int
from .gradients import _zero_params_like, head_backward
from .head import HeadParams, g2g_logits, p2g_affinities, sigmoid
from .random_walk import WalkOperator, normalize
from .synthio import records_to_arrays

logger = logging.getLogger(__name__)

MODES = ("gsrw", "rw_only", "baseline")
CLAMP_EPS = 1e-12
MIN_NORM_SCALE = 1e-6

clamp_events = 0


@dataclass(frozen=True)
class TrainConfig:
    persons_per_batch: int = 64
    images_per_person: int = 4
    lam: float = 0.95
    K: int = 4
    lr_initial: float = 1e-4
    lr_decay_epoch: int = 50
    lr_final: float = 1e-5
    epochs: int = 100
    mode: str = "gsrw"
    seed: int = 0
    steps_per_epoch: Optional[int] = None

    def __post_init__(self):
        check_positive_int(self.persons_per_batch, "persons_per_batch")
        check_positive_int(self.images_per_person, "images_per_person", minimum=2)
        object.__setattr__(self, "lam", check_lambda(self.lam))
        check_positive_int(self.K, "K")
        for name in ("lr_initial", "lr_final"):
            if not getattr(self, name) >= 0:
                raise ValueError(f"{name} must be nonnegative")
        check_positive_int(self.lr_decay_epoch, "lr_decay_epoch", minimum=0)
        check_positive_int(self.epochs, "epochs", minimum=0)
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.steps_per_epoch is not None:
            check_positive_int(self.steps_per_epoch, "steps_per_epoch")

    @property
    def gallery_size(self):
        return self.persons_per_batch * (self.images_per_person - 1)

    def lr_at(self, epoch):
        return self.lr_initial if epoch < self.lr_decay_epoch else self.lr_final

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    @classmethod
    def from_file(cls, path, **overrides):
        """Read ``key=value`` lines; ``#`` starts a comment."""
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"no such config file: {path}")
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        values = {}
        for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
            values[key] = _coerce(value, types[key], f"{path}:{lineno}")
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)

    def to_text(self):
        lines = []
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if value is not None:
                lines.append(f"{f.name}={value}")
        return "\n".join(lines) + "\n"


def _coerce(value, typ, where):
    try:
        if typ in ("int", "Optional[int]", int, Optional[int]):
            return None if value.lower() == "none" else int(value)
        if typ in ("float", float):
            return float(value)
        return value
    except ValueError:
        raise ValueError(f"{where}: cannot parse {value!r}") from None


def baseline_pair_counts(persons_per_batch, images_per_person):
    """Number of supervised ``(P2G, G2G)`` pairs per batch in baseline mode."""
    n = persons_per_batch * (images_per_person - 1)
    return persons_per_batch * n, n * n


@dataclass
class Batch:
    probes: list
    gallery: list
    labels: np.ndarray
    probe_features: np.ndarray = field(repr=False)
    gallery_features: np.ndarray = field(repr=False)
    gallery_identity: np.ndarray = field(repr=False)

    @property
    def P(self):
        return len(self.probes)

    @property
    def n(self):
        return len(self.gallery)


def _group_by_identity(records):
    groups = {}
    for idx, rec in enumerate(records):
        groups.setdefault(rec.id, []).append(idx)
    return groups


def sample_batch(records, cfg, rng):
    """Sample ``P`` identities, ``Q`` images each; the first drawn image is the probe."""
    P, Q = cfg.persons_per_batch, cfg.images_per_person
    groups = _group_by_identity(records)
    eligible = [ident for ident, idx in groups.items() if len(idx) >= Q]
    if len(eligible) < P:
        raise ValueError(
            f"need {P} identities with >= {Q} images each, only {len(eligible)} available"
        )
    chosen = rng.choice(len(eligible), size=P, replace=False)
    probes, gallery, gallery_ident = [], [], []
    for slot, e in enumerate(chosen):
        picks = rng.choice(groups[eligible[e]], size=Q, replace=False)
        probes.append(records[picks[0]])
        for i in picks[1:]:
            gallery.append(records[i])
            gallery_ident.append(slot)
    gallery_ident = np.array(gallery_ident)
    labels = gallery_ident[None, :] == np.arange(P)[:, None]
    return Batch(
        probes=probes,
        gallery=gallery,
        labels=labels,
        probe_features=np.stack([r.feature for r in probes]),
        gallery_features=np.stack([r.feature for r in gallery]),
        gallery_identity=gallery_ident,
    )


def _xent(y, labels):
    """Row-wise mean binary cross-entropy and its gradient along the last axis."""
    global clamp_events
    y = np.asarray(y, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    clipped = np.clip(y, CLAMP_EPS, 1.0 - CLAMP_EPS)
    hits = int(np.count_nonzero(clipped != y))
    if hits:
        clamp_events += hits
        logger.debug("clamped %d affinities to [%g, 1 - %g]", hits, CLAMP_EPS, CLAMP_EPS)
    n = y.shape[-1]
    loss = -np.mean(labels * np.log(clipped) + (1 - labels) * np.log1p(-clipped), axis=-1)
    grad = -(labels / clipped - (1 - labels) / (1 - clipped)) / n
    return loss, grad


def loss_xent(y, labels):
    """Mean binary cross-entropy of affinities ``y`` against 0/1 ``labels``."""
    y = np.asarray(y, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if y.ndim != 1 or labels.shape != y.shape:
        raise ValueError("y and labels must be vectors of equal length")
    loss, grad = _xent(y, labels)
    return float(loss), grad


def _accumulate(total, grads):
    for f in HeadParams._fields:
        getattr(total, f).__iadd__(getattr(grads.params, f))


def batch_objective(batch, params, cfg):
    """Summed-over-probes loss of one batch and its gradient w.r.t. ``params``.

    Returns ``(objective, grad)`` where ``grad`` is a :class:`HeadParams`-shaped
    container (not validated; entries may be negative or zero).
    """
    if params.K != cfg.K:
        raise ValueError(f"params have K={params.K}, config has K={cfg.K}")
    G = batch.gallery_features
    P, n, K = batch.P, batch.n, params.K
    total = _zero_params_like(params)
    S = g2g_logits(G, params)
    Y0 = np.stack([p2g_affinities(p, G, params) for p in batch.probe_features])
    labels = batch.labels.astype(np.float64)

    if cfg.mode == "baseline":
        weight = 1.0 / K
        losses, d_Y0 = _xent(Y0, labels[:, None, :])
        objective = weight * losses.sum()
        d_Y0 *= weight
        same = (batch.gallery_identity[:, None] == batch.gallery_identity[None, :]).astype(float)
        g2g_loss = np.logaddexp(0.0, S) - same * S
        objective += weight * g2g_loss.sum() / n
        d_S = weight * (sigmoid(S) - same) / n
    else:
        if cfg.mode == "gsrw":
            pairs = [(j, k) for j in range(K) for k in range(K)]
        else:
            pairs = [(k, k) for k in range(K)]
        weight = 1.0 / len(pairs)
        lam = cfg.lam
        objective = 0.0
        d_Y0 = np.zeros_like(Y0)
        d_S = np.zeros((K, n, n))
        for j in sorted({j for j, _ in pairs}):
            ks = [k for jj, k in pairs if jj == j]
            W = normalize(S[j])
            op = WalkOperator(W, lam)
            Y0j = Y0[:, ks, :].reshape(-1, n)
            Yinf = op.apply(Y0j.T).T
            losses, dY = _xent(Yinf, np.repeat(labels, len(ks), axis=0))
            objective += weight * losses.sum()
            U = op.solve(weight * dY.T, trans=1)
            d_Y0[:, ks, :] += ((1.0 - lam) * U.T).reshape(P, len(ks), n)
            d_W = lam * (U @ Yinf)
            np.fill_diagonal(d_W, 0.0)
            inner = np.sum(d_W * W, axis=1, keepdims=True)
            d_S[j] = W * (d_W - inner)
            np.fill_diagonal(d_S[j], 0.0)

    for p in range(P):
        _accumulate(total, head_backward(batch.probe_features[p], G, params, d_Y0[p], None))
    _accumulate(total, head_backward(batch.probe_features[0], G, params, None, d_S))
    return float(objective), total


def sgd_update(params, grad, lr):
    vec = params.to_vector() - lr * grad.to_vector()
    new = HeadParams.from_vector(_project(vec, params.d), params.d, params.K)
    return new


def _project(vec, d):
    # keep norm_scale strictly positive
    vec = vec.copy()
    vec[:d] = np.maximum(vec[:d], MIN_NORM_SCALE)
    return vec


def train_step(batch, params, cfg, lr=None):
    """One plain SGD step; returns ``(new_params, metrics)``."""
    lr = cfg.lr_initial if lr is None else lr
    objective, grad = batch_objective(batch, params, cfg)
    if lr == 0:
        new = params.copy()
    else:
        new = sgd_update(params, grad, lr)
    return new, {"loss": objective / batch.P, "lr": lr}


def steps_per_epoch(records, cfg):
    if cfg.steps_per_epoch is not None:
        return cfg.steps_per_epoch
    groups = _group_by_identity(records)
    eligible = sum(len(v) >= cfg.images_per_person for v in groups.values())
    return max(1, eligible // cfg.persons_per_batch)


def train(records, cfg, params=None, callback=None):
    """Train for ``cfg.epochs`` epochs; returns ``(params, history)``.

    ``history`` holds one ``{"epoch", "mean_loss", "lr"}`` dict per epoch.
    Parameters are initialised from ``cfg.seed`` unless given.
    """
    records = list(records)
    _, d = records_to_arrays(records)[0].shape
    param_seed, batch_seed = np.random.SeedSequence(cfg.seed).spawn(2)
    if params is None:
        params = HeadParams.initialize(d, cfg.K, random_state=np.random.default_rng(param_seed))
    elif params.d != d or params.K != cfg.K:
        raise ValueError("initial params do not match data dimension or K")
    rng = np.random.default_rng(batch_seed)
    steps = steps_per_epoch(records, cfg)
    history = []
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        losses = []
        for _ in range(steps):
            batch = sample_batch(records, cfg, rng)
            params, metrics = train_step(batch, params, cfg, lr)
            losses.append(metrics["loss"])
        history.append({"epoch": epoch, "mean_loss": float(np.mean(losses)), "lr": lr})
        if callback is not None:
            callback(history[-1], params)
    return params, history


def write_history(history, path):
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "mean_loss", "lr"])
        for row in history:
            writer.writerow([row["epoch"], repr(row["mean_loss"]), repr(row["lr"])])
