"""Retrieval metrics and the test-time re-ranking pipeline."""

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from ._validation import check_positive_int
from .head import GroupedAffinities, compute_affinities_arrays, p2g_affinities
from .random_walk import RWConfig, group_shuffle
from .synthio import EmbeddingSet

DEFAULT_TOPN = 75
DEFAULT_MAX_RANK = 20


@dataclass
class RankingResult:
    """``scores`` and ``relevant`` are indexed by original gallery position."""

    order: np.ndarray
    scores: np.ndarray
    relevant: Optional[np.ndarray] = None

    def ranks_of_relevant(self):
        """1-based ranks at which relevant items appear, ascending."""
        if self.relevant is None:
            raise ValueError("ranking has no relevance labels")
        return np.flatnonzero(self.relevant[self.order]) + 1


def _relevance(relevant, n):
    if relevant is None:
        return None
    relevant = np.asarray(relevant, dtype=bool)
    if relevant.shape != (n,):
        raise ValueError(f"relevance vector has length {relevant.shape}, expected {n}")
    return relevant


def rank(scores, relevant=None):
    """Sort descending by score, ties by ascending index."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 1:
        raise ValueError("scores must be a vector")
    n = scores.shape[0]
    relevant = _relevance(relevant, n)
    order = np.lexsort((np.arange(n), -scores))
    return RankingResult(order, scores, relevant)


def average_precision(result):
    """Mean over relevant items of precision at their rank; ``nan`` if none is relevant."""
    hits = result.ranks_of_relevant()
    if hits.size == 0:
        return float("nan")
    return float(np.mean(np.arange(1, hits.size + 1) / hits))


def cmc_curve(results, max_rank=DEFAULT_MAX_RANK):
    """Fraction of queries whose first relevant item is at rank <= r, for r = 1..max_rank."""
    results = list(results)
    if not results:
        raise ValueError("cmc_curve needs at least one ranking")
    max_rank = check_positive_int(max_rank, "max_rank")
    counts = np.zeros(max_rank)
    for res in results:
        hits = res.ranks_of_relevant()
        if hits.size and hits[0] <= max_rank:
            counts[hits[0] - 1] += 1
    return np.cumsum(counts) / len(results)


def rerank_details(probe, gallery, params, cfg=None, topn=DEFAULT_TOPN, relevant=None):
    """Return ``(initial, refined)`` rankings of one probe against a gallery.

    Initial scores average the ``K`` group affinities. The ``min(topn, n)``
    best gallery items are refined with the group-shuffled random walk and
    placed ahead of the remaining items, which keep their initial scores.
    """
    cfg = RWConfig() if cfg is None else cfg
    topn = check_positive_int(topn, "topn", minimum=2)
    gallery = np.asarray(gallery, dtype=np.float64)
    n = gallery.shape[0] if gallery.ndim == 2 else 0
    if n < 2:
        raise ValueError(f"gallery needs at least 2 items, got {n}")
    relevant = _relevance(relevant, n)
    ga = compute_affinities_arrays(probe, gallery, params)
    initial = rank(ga.y0.mean(axis=0), relevant)
    subset = np.sort(initial.order[: min(topn, n)])
    sub_ga = GroupedAffinities(ga.y0[:, subset], ga.S[:, subset][:, :, subset])
    refined_sub = group_shuffle(sub_ga, cfg).averaged
    final = initial.scores.copy()
    final[subset] = refined_sub
    in_subset = np.zeros(n, dtype=bool)
    in_subset[subset] = True
    order = np.lexsort((np.arange(n), -final, ~in_subset))
    return initial, RankingResult(order, final, relevant)


def rerank_pipeline(probe, gallery, params, cfg=None, topn=DEFAULT_TOPN, relevant=None):
    return rerank_details(probe, gallery, params, cfg, topn, relevant)[1]


@dataclass
class EvalReport:
    mAP: float
    cmc: np.ndarray
    num_queries: int
    skipped: int = 0
    per_query_ap: list = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "map": self.mAP,
            "cmc": [float(c) for c in self.cmc],
            "num_queries": self.num_queries,
            "skipped": self.skipped,
            "config": dict(self.config),
        }

    def to_json(self, **kwargs):
        return json.dumps(self.to_dict(), **kwargs)

    def write_per_query_csv(self, path):
        with Path(path).open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["query", "probe_id", "ap"])
            for i, (pid, ap) in enumerate(self.per_query_ap):
                writer.writerow([i, pid, repr(ap)])


def _query_arrays(eset):
    """Gallery features and relevance for one query, with same-camera matches removed."""
    probe = eset.probe
    keep = []
    relevant = []
    for rec in eset.gallery:
        same_id = rec.id == probe.id
        if same_id and probe.cam is not None and rec.cam is not None and rec.cam == probe.cam:
            continue
        keep.append(rec.feature)
        relevant.append(same_id)
    return np.stack(keep) if keep else np.empty((0, probe.d)), np.array(relevant, dtype=bool)


def evaluate(queries, params, cfg=None, topn=DEFAULT_TOPN, use_rw=True, max_rank=DEFAULT_MAX_RANK):
    """mAP and CMC over queries; queries without a relevant gallery item are skipped."""
    queries = list(queries)
    if not queries:
        raise ValueError("no queries to evaluate")
    cfg = RWConfig() if cfg is None else cfg
    results, aps = [], []
    skipped = 0
    for eset in queries:
        gallery, relevant = _query_arrays(eset)
        if not relevant.any() or gallery.shape[0] < 2:
            skipped += 1
            continue
        if use_rw:
            res = rerank_pipeline(eset.probe_feature, gallery, params, cfg, topn, relevant)
        else:
            res = rank(p2g_affinities(eset.probe_feature, gallery, params).mean(axis=0), relevant)
        results.append(res)
        aps.append((eset.probe.id, average_precision(res)))
    if not results:
        raise ValueError("every query was skipped: no relevant gallery items")
    config = {"lambda": cfg.lam, "topn": topn, "use_rw": use_rw, "K": params.K}
    return EvalReport(
        mAP=float(np.mean([ap for _, ap in aps])),
        cmc=cmc_curve(results, max_rank),
        num_queries=len(results),
        skipped=skipped,
        per_query_ap=aps,
        config=config,
    )


def leave_one_out_queries(records):
    """One query per record: that record as probe, all others as gallery."""
    records = list(records)
    return [
        EmbeddingSet(rec, tuple(records[:i] + records[i + 1 :])) for i, rec in enumerate(records)
    ]
