"""Scikit-learn style wrapper around the training loop.

Samples are whole videos: ``X`` is a list of (T_i, D) arrays and ``y`` a list
of action sets (iterables of class ids). ``predict`` returns one label array
per video.
"""

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from . import metrics
from .data import VideoRecord
from .losses import LossWeights
from .network import ModelConfig, pools_for_count
from .training import RunConfig, predict_labels, train


def check_sequences(X, n_features=None):
    """Validate a list of (T, D) feature arrays; returns float arrays."""
    if isinstance(X, np.ndarray) and X.ndim == 2:
        raise ValueError("X must be a list of (T, D) arrays, one per video, not a single 2-D array")
    seqs = [check_array(x, dtype=[np.float32, np.float64], ensure_min_samples=1) for x in X]
    if not seqs:
        raise ValueError("X contains no sequences")
    dims = {x.shape[1] for x in seqs}
    if len(dims) != 1:
        raise ValueError(f"sequences disagree on the feature dimension: {sorted(dims)}")
    if n_features is not None and seqs[0].shape[1] != n_features:
        raise ValueError(f"X has {seqs[0].shape[1]} features, the model was fit with {n_features}")
    return seqs


def check_action_sets(y, n_sequences):
    """Validate one non-empty set of non-negative integer ids per sequence."""
    sets = []
    for s in y:
        ids = np.asarray(list(s))
        if ids.size == 0:
            raise ValueError("every action set must be non-empty")
        if not np.issubdtype(ids.dtype, np.integer) or ids.min() < 0:
            raise ValueError(f"action sets must hold non-negative integer ids, got {ids.tolist()}")
        sets.append(tuple(sorted(set(ids.tolist()))))
    if len(sets) != n_sequences:
        raise ValueError(f"got {len(sets)} action sets for {n_sequences} sequences")
    return sets


class SCTSegmenter(BaseEstimator):
    """Temporal action segmentation learned from per-video action sets.

    Parameters
    ----------
    n_classes : int or None
        Number of classes including background (id 0). Inferred from the
        largest id seen in ``y`` when None.
    hidden : int
        Channels of every temporal convolution block.
    n_pools : int
        Max-pool layers in the embedding network (0..6).
    grad_clip : float
        Largest joint gradient norm per step; 0 disables clipping.
    lambda_* : float
        Loss weights; 0 disables a term.
    """

    def __init__(self, n_classes=None, hidden=128, n_pools=3, dropout=0.25, J=100, delta=1.0,
                 epochs=50, lr=0.01, weight_decay=0.005, momentum=0.0, lr_schedule="constant", grad_clip=0.0,
                 lambda_set=1.0, lambda_region=1.0, lambda_inverse_sparsity=1.0,
                 lambda_consistency=1.0, lambda_sct=1.0, lambda_length=1.0, lambda_jsd=0.0,
                 length_mode="straight_through", random_state=0):
        self.n_classes = n_classes
        self.hidden = hidden
        self.n_pools = n_pools
        self.dropout = dropout
        self.J = J
        self.delta = delta
        self.epochs = epochs
        self.lr = lr
        self.weight_decay = weight_decay
        self.momentum = momentum
        self.lr_schedule = lr_schedule
        self.grad_clip = grad_clip
        self.lambda_set = lambda_set
        self.lambda_region = lambda_region
        self.lambda_inverse_sparsity = lambda_inverse_sparsity
        self.lambda_consistency = lambda_consistency
        self.lambda_sct = lambda_sct
        self.lambda_length = lambda_length
        self.lambda_jsd = lambda_jsd
        self.length_mode = length_mode
        self.random_state = random_state

    def _run_config(self, D, C):
        model = ModelConfig(D=D, C=C, hidden=self.hidden, embed_pools=pools_for_count(self.n_pools),
                            dropout=self.dropout, J=self.J, delta=self.delta)
        weights = LossWeights(set=self.lambda_set, region=self.lambda_region,
                              inverse_sparsity=self.lambda_inverse_sparsity,
                              consistency=self.lambda_consistency, sct=self.lambda_sct,
                              length=self.lambda_length, jsd=self.lambda_jsd)
        return RunConfig(model=model, weights=weights, lr=self.lr, weight_decay=self.weight_decay,
                         momentum=self.momentum, lr_schedule=self.lr_schedule, grad_clip=self.grad_clip,
                         epochs=self.epochs, seed=int(self.random_state or 0), length_mode=self.length_mode)

    def fit(self, X, y):
        seqs = check_sequences(X)
        sets = check_action_sets(y, len(seqs))
        C = self.n_classes if self.n_classes is not None else max(max(s) for s in sets) + 1
        C = max(int(C), 2)
        if max(max(s) for s in sets) >= C:
            raise ValueError(f"action ids exceed n_classes={C}")
        config = self._run_config(seqs[0].shape[1], C)
        videos = [VideoRecord(f"v{i}", x, s) for i, (x, s) in enumerate(zip(seqs, sets))]
        self.params_, self.log_ = train(config, videos)
        self.n_features_in_ = seqs[0].shape[1]
        self.classes_ = np.arange(C)
        return self

    def predict_proba(self, X):
        """Frame posteriors Y (T_i, C) for every sequence."""
        check_is_fitted(self, "params_")
        return [predict_labels(self.params_, x)[1].Y.data for x in check_sequences(X, self.n_features_in_)]

    def predict(self, X):
        return [np.argmax(p, axis=1) for p in self.predict_proba(X)]

    def score(self, X, y):
        """Corpus MoF against frame labels ``y`` (one label array per sequence)."""
        return metrics.corpus_mof(self.predict(X), [np.asarray(g) for g in y])
