"""Grouped pairwise affinity head.

For a pair of feature vectors ``a, b`` the head computes, for every group ``k``
of contiguous dimensions::

    u      = norm_scale_k * (a_k - b_k) ** 2 + norm_shift_k
    logit  = w_k . u + bias_k
    score  = sigmoid(logit)

Probe-to-gallery affinities use ``score``; gallery-to-gallery entries are kept
as raw ``logit`` values so the random walk can feed them to a softmax.
"""

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._validation import check_groups, check_positive_int

PARAMS_MAGIC = b"GSRWP"
PARAMS_VERSION = 1

# Rows of the gallery processed at once when building G2G logits.
_BLOCK = 256


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@dataclass(eq=False)
class HeadParams:
    """Learnable parameters of the grouped affinity head.

    ``group_weights`` has shape ``(K, d // K)``; the normalisation vectors have
    length ``d`` and are sliced per group.
    """

    norm_scale: np.ndarray
    norm_shift: np.ndarray
    group_weights: np.ndarray
    group_biases: np.ndarray

    def __post_init__(self):
        self.norm_scale = np.array(self.norm_scale, dtype=np.float64)
        self.norm_shift = np.array(self.norm_shift, dtype=np.float64)
        self.group_weights = np.atleast_2d(np.array(self.group_weights, dtype=np.float64))
        self.group_biases = np.atleast_1d(np.array(self.group_biases, dtype=np.float64))
        K, m = self.group_weights.shape
        d = self.norm_scale.shape[0]
        if self.norm_scale.shape != (d,) or self.norm_shift.shape != (d,):
            raise ValueError("norm_scale and norm_shift must be vectors of equal length")
        if check_groups(d, K) != m:
            raise ValueError(f"group_weights shape {(K, m)} inconsistent with d={d}")
        if self.group_biases.shape != (K,):
            raise ValueError(f"group_biases must have length {K}")
        if not np.all(self.norm_scale > 0):
            raise ValueError("norm_scale must be strictly positive")
        for name in self._fields:
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"{name} contains non-finite values")

    _fields = ("norm_scale", "norm_shift", "group_weights", "group_biases")

    @property
    def K(self):
        return self.group_weights.shape[0]

    @property
    def d(self):
        return self.norm_scale.shape[0]

    @property
    def group_size(self):
        return self.group_weights.shape[1]

    @classmethod
    def initialize(cls, d, K, random_state=None):
        """Small-init parameters: uniform weights in ``+-1/sqrt(d/K)``, unit scale, zero shift and bias."""
        m = check_groups(d, K)
        rng = np.random.default_rng(random_state)
        bound = 1.0 / np.sqrt(m)
        return cls(
            norm_scale=np.ones(d),
            norm_shift=np.zeros(d),
            group_weights=rng.uniform(-bound, bound, size=(K, m)),
            group_biases=np.zeros(K),
        )

    def group_slice(self, k):
        m = self.group_size
        return slice(k * m, (k + 1) * m)

    def copy(self):
        return HeadParams(*(getattr(self, f).copy() for f in self._fields))

    def to_vector(self):
        return np.concatenate([getattr(self, f).ravel() for f in self._fields])

    @classmethod
    def from_vector(cls, vec, d, K):
        m = check_groups(d, K)
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (2 * d + K * m + K,):
            raise ValueError("parameter vector has the wrong length")
        return cls(vec[:d], vec[d : 2 * d], vec[2 * d : 2 * d + K * m].reshape(K, m), vec[-K:])

    def __eq__(self, other):
        if not isinstance(other, HeadParams):
            return NotImplemented
        return all(np.array_equal(getattr(self, f), getattr(other, f)) for f in self._fields)

    __hash__ = None


@dataclass
class GroupedAffinities:
    """Per-group P2G affinities ``y0`` (K, n) and raw G2G logits ``S`` (K, n, n)."""

    y0: np.ndarray
    S: np.ndarray

    def __post_init__(self):
        self.y0 = np.atleast_2d(np.asarray(self.y0, dtype=np.float64))
        self.S = np.asarray(self.S, dtype=np.float64)
        if self.S.ndim == 2:
            self.S = self.S[None]
        K, n = self.y0.shape
        if self.S.shape != (K, n, n):
            raise ValueError(f"S must have shape {(K, n, n)}, got {self.S.shape}")
        if n < 2:
            raise ValueError("gallery must contain at least 2 items")

    @property
    def K(self):
        return self.y0.shape[0]

    @property
    def n(self):
        return self.y0.shape[1]


def split_groups(v, K):
    """Split ``v`` into ``K`` contiguous equal-length sub-vectors."""
    v = np.asarray(v, dtype=np.float64)
    check_groups(v.shape[-1], K)
    return np.split(v, K, axis=-1)


def pair_score(a, b, params, k):
    """Return ``(logit, affinity)`` of group ``k`` for sub-vectors ``a`` and ``b``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != (params.group_size,) or b.shape != a.shape:
        raise ValueError(f"group vectors must have length {params.group_size}")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise ValueError("non-finite feature values")
    logit = float(_group_logits((a - b) ** 2, params, k))
    return logit, float(sigmoid(logit))


def _group_logits(sq, params, k):
    """Logits for squared differences ``sq`` (..., m) of group ``k``."""
    sl = params.group_slice(k)
    u = sq * params.norm_scale[sl] + params.norm_shift[sl]
    return u @ params.group_weights[k] + params.group_biases[k]


def _check_features(probe, gallery, params):
    probe = np.asarray(probe, dtype=np.float64)
    gallery = np.asarray(gallery, dtype=np.float64)
    if probe.shape != (params.d,):
        raise ValueError(f"probe has shape {probe.shape}, params expect d={params.d}")
    if gallery.ndim != 2 or gallery.shape[1] != params.d:
        raise ValueError(f"gallery has shape {gallery.shape}, params expect d={params.d}")
    if not (np.all(np.isfinite(probe)) and np.all(np.isfinite(gallery))):
        raise ValueError("non-finite feature values")
    return probe, gallery


def p2g_affinities(probe, gallery, params):
    """Initial probe-to-gallery affinities, shape ``(K, n)``."""
    probe, gallery = _check_features(probe, gallery, params)
    sq = (gallery - probe) ** 2
    return np.stack(
        [sigmoid(_group_logits(sq[:, params.group_slice(k)], params, k)) for k in range(params.K)]
    )


def g2g_logits(gallery, params):
    """Raw gallery-to-gallery logits, shape ``(K, n, n)``, exactly symmetric."""
    gallery = np.asarray(gallery, dtype=np.float64)
    if gallery.ndim != 2 or gallery.shape[1] != params.d:
        raise ValueError(f"gallery has shape {gallery.shape}, params expect d={params.d}")
    n = gallery.shape[0]
    S = np.empty((params.K, n, n))
    for start in range(0, n, _BLOCK):
        stop = min(start + _BLOCK, n)
        sq = (gallery[start:stop, None, :] - gallery[None, :, :]) ** 2
        for k in range(params.K):
            S[k, start:stop] = _group_logits(sq[..., params.group_slice(k)], params, k)
    # BLAS reductions need not be bitwise symmetric; mirror the upper triangle.
    iu = np.triu_indices(n, 1)
    for k in range(params.K):
        S[k][(iu[1], iu[0])] = S[k][iu]
    return S


def compute_affinities(eset, params):
    """Grouped P2G affinities and G2G logits for an :class:`EmbeddingSet`."""
    if eset.d != params.d:
        raise ValueError(f"embedding dimension {eset.d} does not match params d={params.d}")
    return compute_affinities_arrays(eset.probe_feature, eset.gallery_features, params)


def compute_affinities_arrays(probe, gallery, params):
    probe, gallery = _check_features(probe, gallery, params)
    return GroupedAffinities(p2g_affinities(probe, gallery, params), g2g_logits(gallery, params))


def save_params(params, path):
    header = PARAMS_MAGIC + struct.pack("<BII", PARAMS_VERSION, params.K, params.d)
    body = params.to_vector().astype("<f8").tobytes()
    Path(path).write_bytes(header + body)


def load_params(path):
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such parameter file: {path}")
    buf = path.read_bytes()
    if buf[:5] != PARAMS_MAGIC:
        raise ValueError(f"{path}: bad magic bytes, not a GSRW parameter file")
    try:
        version, K, d = struct.unpack_from("<BII", buf, 5)
    except struct.error:
        raise ValueError(f"{path}: truncated header") from None
    if version != PARAMS_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    check_positive_int(K, "K")
    m = check_groups(d, K)
    count = 2 * d + K * m + K
    offset = 5 + struct.calcsize("<BII")
    if len(buf) != offset + 8 * count:
        raise ValueError(f"{path}: expected {count} parameters")
    vec = np.frombuffer(buf, dtype="<f8", count=count, offset=offset).astype(np.float64)
    return HeadParams.from_vector(vec, d, K)
