"""Set-level training objectives.

All functions take autodiff tensors and return scalar tensors. ``action_set``
is any iterable of class ids; it is deduplicated and sorted, which fixes the
column order of A^S and of the SCT masks.
"""

import logging
import math
import warnings
from dataclasses import dataclass, fields

import numpy as np

from . import autodiff as ad

logger = logging.getLogger(__name__)

EPS = 1e-7

TERMS = ("set", "region", "inverse_sparsity", "consistency", "sct", "length", "jsd")


def _set_index(action_set, C=None):
    idx = np.array(sorted({int(a) for a in action_set}), dtype=np.intp)
    if idx.size == 0:
        raise ValueError("action set must not be empty")
    if C is not None and (idx.min() < 0 or idx.max() >= C):
        raise ValueError(f"action ids {idx.tolist()} outside 0..{C - 1}")
    return idx


def _log_clamped(p):
    # only the lower clamp is needed for finiteness; log(1) stays exactly 0
    return ad.log(ad.clamp(p, EPS, 1.0))


def set_loss(A, action_set):
    """Multi-label BCE on the per-class max over regions."""
    C = A.shape[1]
    idx = _set_index(action_set, C)
    present = np.zeros(C, dtype=A.dtype)
    present[idx] = 1.0
    a_mc = ad.max(A, axis=0)
    pos = ad.mul(_log_clamped(a_mc), present)
    neg = ad.mul(_log_clamped(ad.sub(1.0, a_mc)), 1.0 - present)
    return ad.mul(ad.sum(ad.add(pos, neg)), -1.0 / C)


def region_loss(A, action_set):
    """Cross-entropy pushing each region towards a single action of the set."""
    idx = _set_index(action_set, A.shape[1])
    a_mk = ad.max(ad.take(A, idx, axis=1), axis=1)
    return ad.neg(ad.mean(_log_clamped(a_mk)))


def inverse_sparsity(A, action_set):
    """1 minus the mean region mass of each set action, averaged over the set."""
    idx = _set_index(action_set, A.shape[1])
    if len(idx) == A.shape[1]:
        logger.info("action set covers every class; inverse sparsity is constant")
    col_mass = ad.mean(ad.take(A, idx, axis=1), axis=0)
    return ad.mean(ad.sub(1.0, col_mass))


def temporal_consistency(A, action_set):
    """Mean absolute change between neighbouring regions over set columns."""
    idx = _set_index(action_set, A.shape[1])
    K = A.shape[0]
    if K < 2:
        # through warnings so that a training run reports it once, not every step
        warnings.warn("temporal consistency needs at least two regions; returning 0", RuntimeWarning,
                      stacklevel=2)
        return ad.Tensor(np.zeros((), dtype=A.dtype))
    AS = ad.take(A, idx, axis=1)
    diff = ad.abs(ad.sub(ad.take(AS, np.arange(1, K), axis=0), ad.take(AS, np.arange(K - 1), axis=0)))
    # sum over k=2..K divided by K, then averaged over the M set columns
    return ad.mul(ad.mean(ad.sum(diff, axis=0)), 1.0 / K)


def mask_matrix(Y, action_set):
    """W (T, M): the columns of Y for the set actions in ascending id order."""
    return ad.take(Y, _set_index(action_set, Y.shape[1]), axis=1)


def sct_pool(Y, S, action_set):
    """V = W^T S / T, one pooled class score vector per set action."""
    if Y.shape != S.shape:
        raise ValueError(f"Y {Y.shape} and S {S.shape} must have the same shape")
    W = mask_matrix(Y, action_set)
    return ad.mul(ad.matmul(ad.transpose(W), S), 1.0 / Y.shape[0])


def self_supervision_loss(V, action_set):
    """Softmax cross-entropy of every pooled row V[m] against its action."""
    idx = _set_index(action_set)
    if V.shape[0] != len(idx):
        raise ValueError(f"V has {V.shape[0]} rows but the action set has {len(idx)} members")
    logp = ad.log_softmax(V, axis=1)
    picked = np.zeros(V.shape, dtype=V.dtype)
    picked[np.arange(len(idx)), idx] = 1.0
    return ad.mul(ad.sum(ad.mul(logp, picked)), -1.0 / len(idx))


def length_regularizer(L, delta=1.0):
    """Hinge penalty on raw lengths outside [-delta, delta]."""
    return ad.mean(ad.add(ad.relu(ad.sub(L, delta)), ad.relu(ad.sub(ad.neg(L), delta))))


def jsd_loss(Y, S):
    """Frame-wise Jensen-Shannon divergence between Y and S, averaged over frames."""
    if Y.shape != S.shape:
        raise ValueError(f"Y {Y.shape} and S {S.shape} must have the same shape")
    if not (np.all(np.isfinite(Y.data)) and np.all(np.isfinite(S.data))):
        raise ValueError("jsd_loss got non-finite input")
    # the clamp guards the logs only: an entry with p = 0 contributes 0 * finite = 0
    logM = _log_clamped(ad.mul(ad.add(Y, S), 0.5))
    kl_y = ad.sum(ad.mul(Y, ad.sub(_log_clamped(Y), logM)), axis=1)
    kl_s = ad.sum(ad.mul(S, ad.sub(_log_clamped(S), logM)), axis=1)
    return ad.mean(ad.mul(ad.add(kl_y, kl_s), 0.5))


@dataclass
class LossWeights:
    set: float = 1.0
    region: float = 1.0
    inverse_sparsity: float = 1.0
    consistency: float = 1.0
    sct: float = 1.0
    length: float = 1.0
    jsd: float = 0.0

    def __post_init__(self):
        for f in fields(self):
            v = float(getattr(self, f.name))
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"loss weight {f.name} must be a non-negative finite number, got {v}")
            setattr(self, f.name, v)

    @classmethod
    def only(cls, *names, **overrides):
        w = {t: 0.0 for t in TERMS}
        for n in names:
            w[n] = 1.0
        w.update(overrides)
        return cls(**w)

    def enabled(self):
        return [t for t in TERMS if getattr(self, t) > 0]

    def to_dict(self):
        return {t: getattr(self, t) for t in TERMS}


def loss_terms(A, L, Y, S, action_set, weights, delta=1.0):
    """Evaluate every term. Disabled terms are computed without a graph, for logging only.

    Returns (total tensor, {term: float}).
    """
    enabled = weights.enabled()
    if not enabled:
        raise ValueError("all loss terms are disabled")
    builders = {
        "set": lambda: set_loss(A, action_set),
        "region": lambda: region_loss(A, action_set),
        "inverse_sparsity": lambda: inverse_sparsity(A, action_set),
        "consistency": lambda: temporal_consistency(A, action_set),
        "sct": lambda: self_supervision_loss(sct_pool(Y, S, action_set), action_set),
        "length": lambda: length_regularizer(L, delta),
        "jsd": lambda: jsd_loss(Y, S),
    }
    values, total = {}, None
    for name in TERMS:
        if name in enabled:
            term = builders[name]()
            weighted = ad.mul(term, getattr(weights, name))
            total = weighted if total is None else ad.add(total, weighted)
        else:
            with ad.no_grad():
                term = builders[name]()
        values[name] = float(term.data)
    values["total"] = float(total.data)
    return total, values


def total_loss(terms, weights):
    """Weighted sum of already-computed term tensors keyed by name."""
    enabled = [t for t in weights.enabled() if t in terms]
    if not enabled:
        raise ValueError("all loss terms are disabled")
    total = None
    for name in enabled:
        weighted = ad.mul(terms[name], getattr(weights, name))
        total = weighted if total is None else ad.add(total, weighted)
    return total
