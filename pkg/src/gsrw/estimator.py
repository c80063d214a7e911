"""scikit-learn compatible wrapper around the grouped random-walk re-ranker."""

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .head import compute_affinities_arrays, p2g_affinities
from .rank_eval import evaluate, leave_one_out_queries, rank, rerank_pipeline
from .random_walk import RWConfig, group_shuffle
from .synthio import EmbeddingRecord
from .trainer import TrainConfig, train


class GSRWRanker(BaseEstimator):
    """Learn a grouped pairwise affinity head and re-rank galleries by random walk.

    Parameters
    ----------
    n_groups : int, default=4
        Number of contiguous feature groups; must divide the feature dimension.
    lam : float, default=0.95
        Random walk weight in ``[0, 1)``.
    topn : int, default=75
        Gallery items refined per probe at ranking time.
    mode : {"gsrw", "rw_only", "baseline"}, default="gsrw"
        Training supervision scheme.
    persons_per_batch, images_per_person : int
        Batch composition (identities, images per identity).
    lr, lr_final : float
        SGD step size before and after ``lr_decay_epoch``.
    lr_decay_epoch, epochs : int
        Learning-rate switch point and total epochs.
    steps_per_epoch : int or None
        Batches per epoch; ``None`` uses ``n_identities // persons_per_batch``.
    use_rw : bool, default=True
        Whether :meth:`decision_function` and :meth:`score` refine with the walk.
    random_state : int, default=0
        Seed for initialisation and batch sampling.

    Attributes
    ----------
    params_ : HeadParams
        Trained head parameters.
    history_ : list of dict
        Per-epoch mean training loss and learning rate.
    """

    def __init__(
        self,
        n_groups=4,
        lam=0.95,
        topn=75,
        mode="gsrw",
        persons_per_batch=64,
        images_per_person=4,
        lr=1e-4,
        lr_final=1e-5,
        lr_decay_epoch=50,
        epochs=100,
        steps_per_epoch=None,
        use_rw=True,
        random_state=0,
    ):
        self.n_groups = n_groups
        self.lam = lam
        self.topn = topn
        self.mode = mode
        self.persons_per_batch = persons_per_batch
        self.images_per_person = images_per_person
        self.lr = lr
        self.lr_final = lr_final
        self.lr_decay_epoch = lr_decay_epoch
        self.epochs = epochs
        self.steps_per_epoch = steps_per_epoch
        self.use_rw = use_rw
        self.random_state = random_state

    def _train_config(self):
        return TrainConfig(
            persons_per_batch=self.persons_per_batch,
            images_per_person=self.images_per_person,
            lam=self.lam,
            K=self.n_groups,
            lr_initial=self.lr,
            lr_decay_epoch=self.lr_decay_epoch,
            lr_final=self.lr_final,
            epochs=self.epochs,
            mode=self.mode,
            seed=self.random_state,
            steps_per_epoch=self.steps_per_epoch,
        )

    def _rw_config(self):
        return RWConfig(lam=self.lam)

    def fit(self, X, y):
        """Train the affinity head on features ``X`` with identity labels ``y``."""
        X, y = check_X_y(X, y, dtype=np.float64, y_numeric=False)
        cfg = self._train_config()
        if X.shape[1] % cfg.K:
            raise ValueError(f"n_features={X.shape[1]} is not divisible by n_groups={cfg.K}")
        records = [EmbeddingRecord(str(label), x) for x, label in zip(X, y)]
        self.params_, self.history_ = train(records, cfg)
        self.n_features_in_ = X.shape[1]
        return self

    def _check_pair(self, probe, gallery):
        check_is_fitted(self, "params_")
        probe = check_array(np.atleast_2d(probe), dtype=np.float64)
        gallery = check_array(gallery, dtype=np.float64, ensure_min_samples=2)
        for arr in (probe, gallery):
            if arr.shape[1] != self.n_features_in_:
                raise ValueError(
                    f"X has {arr.shape[1]} features, {type(self).__name__} expects {self.n_features_in_}"
                )
        return probe, gallery

    def affinities(self, probe, gallery):
        """Initial grouped affinities ``(y0, S)`` for a single probe vector."""
        probe, gallery = self._check_pair(probe, gallery)
        return compute_affinities_arrays(probe[0], gallery, self.params_)

    def decision_function(self, probes, gallery):
        """Score matrix of shape ``(n_probes, n_gallery)``; higher means more similar.

        With ``use_rw`` the whole gallery is refined (no top-N cut); ranking
        with a cut goes through :meth:`rank`.
        """
        probes, gallery = self._check_pair(probes, gallery)
        out = np.empty((probes.shape[0], gallery.shape[0]))
        for i, p in enumerate(probes):
            if self.use_rw:
                ga = compute_affinities_arrays(p, gallery, self.params_)
                out[i] = group_shuffle(ga, self._rw_config()).averaged
            else:
                out[i] = p2g_affinities(p, gallery, self.params_).mean(axis=0)
        return out

    def rank(self, probe, gallery, relevant=None):
        """Rank ``gallery`` for one probe, re-ranking the top ``topn`` when ``use_rw``."""
        probe, gallery = self._check_pair(probe, gallery)
        if self.use_rw:
            return rerank_pipeline(
                probe[0], gallery, self.params_, self._rw_config(), self.topn, relevant
            )
        return rank(p2g_affinities(probe[0], gallery, self.params_).mean(axis=0), relevant)

    def score(self, X, y):
        """Leave-one-out mAP: each sample queries all the others."""
        check_is_fitted(self, "params_")
        X, y = check_X_y(X, y, dtype=np.float64, y_numeric=False)
        records = [EmbeddingRecord(str(label), x) for x, label in zip(X, y)]
        report = evaluate(
            leave_one_out_queries(records),
            self.params_,
            self._rw_config(),
            self.topn,
            use_rw=self.use_rw,
        )
        return report.mAP
