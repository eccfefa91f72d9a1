"""Variational mutual-information bounds and their regularized training losses.

Every bound consumes a square score matrix whose diagonal holds critic
scores of jointly drawn pairs and whose off-diagonal holds scores of
product-of-marginals pairs (in-batch negatives).  Training losses negate
a bound and optionally add a squared anchor on the log-partition term,
``beta * (logZ - alpha)^2``, which keeps critic outputs from drifting.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import ndmath as nd
from .ndmath import ShapeError, Tensor

ESTIMATOR_KINDS = ("ce", "mine", "smile", "infonce", "nwj", "tuba", "js", "nwjjs")

# estimators whose log-partition is log-mean-exp of raw off-diagonal scores
_DV_FAMILY = ("mine", "smile", "infonce")
# estimators whose partition term is the mean of exp(T - 1)
_NWJ_FAMILY = ("nwj", "tuba", "nwjjs")


@dataclass(frozen=True)
class MILossConfig:
    kind: str = "ce"
    alpha: float = 0.0
    beta: float = 0.1
    smile_tau: float = 5.0
    tuba_baseline: float = math.e

    def __post_init__(self):
        if self.kind not in ESTIMATOR_KINDS:
            raise ValueError(f"unknown estimator kind {self.kind!r}; choose from {ESTIMATOR_KINDS}")
        if self.beta < 0:
            raise ValueError(f"beta must be >= 0, got {self.beta}")
        if self.smile_tau <= 0:
            raise ValueError(f"smile_tau must be > 0, got {self.smile_tau}")
        if self.tuba_baseline <= 0:
            raise ValueError(f"tuba_baseline must be > 0, got {self.tuba_baseline}")


def _square(scores):
    if not isinstance(scores, Tensor):
        scores = Tensor(np.asarray(scores))
    if scores.ndim != 2 or scores.shape[0] != scores.shape[1]:
        raise ShapeError(f"score matrix must be square, got shape {scores.shape}")
    return scores


def _split_diag(scores, min_k=2):
    """Diagonal and off-diagonal entries as flat tensors."""
    scores = _square(scores)
    k = scores.shape[0]
    if k < min_k:
        raise ShapeError(f"score matrix must be at least {min_k}x{min_k}, got {k}x{k}")
    flat = nd.reshape(scores, (k * k,))
    idx = np.arange(k * k)
    diag = nd.index_select(flat, 0, idx[:: k + 1])
    off = nd.index_select(flat, 0, idx[idx % (k + 1) != 0])
    return diag, off, k


def _logmeanexp(t):
    return nd.logsumexp(t) - math.log(t.size)


def ce_loss(logits, labels):
    """Cross-entropy baseline: mean negative log-softmax of the true class."""
    if not isinstance(logits, Tensor):
        logits = Tensor(np.asarray(logits))
    return nd.softmax_cross_entropy(logits, labels)


def dv_bound(scores):
    """Donsker-Varadhan lower bound: mean joint score minus the log-mean-exp
    of the marginal scores."""
    diag, off, _ = _split_diag(scores)
    return nd.mean(diag) - _logmeanexp(off)


def nwj_bound(scores):
    """Fenchel-dual bound: mean joint score minus mean exp(T - 1) over
    marginal scores."""
    diag, off, _ = _split_diag(scores)
    return nd.mean(diag) - nd.mean(nd.exp(off - 1.0))


def infonce_bound(scores):
    """Contrastive bound: per-row classification of the true pair against
    the full row; never exceeds log K."""
    scores = _square(scores)
    k = scores.shape[0]
    flat = nd.reshape(scores, (k * k,))
    diag = nd.index_select(flat, 0, np.arange(k * k)[:: k + 1])
    row_lse = nd.logsumexp(scores, axis=1)
    return nd.mean(diag) - nd.mean(row_lse) + math.log(k)


def smile_bound(scores, tau):
    """DV bound with off-diagonal scores clipped to [-tau, tau] inside the
    log-mean-exp; equals the DV bound whenever the clip is inactive."""
    if tau <= 0:
        raise ValueError(f"smile_bound: tau must be > 0, got {tau}")
    diag, off, _ = _split_diag(scores)
    return nd.mean(diag) - _logmeanexp(nd.clamp(off, -tau, tau))


def tuba_bound(scores, a):
    """Unnormalized baseline bound; with a = e it coincides with nwj_bound."""
    if a <= 0:
        raise ValueError(f"tuba_bound: baseline must be > 0, got {a}")
    diag, off, _ = _split_diag(scores)
    return 1.0 + nd.mean(diag) - math.log(a) - nd.mean(nd.exp(off)) * (1.0 / a)


def js_bound(scores):
    """Jensen-Shannon surrogate: -softplus(-T) on joints minus softplus(T)
    on marginals."""
    diag, off, _ = _split_diag(scores)
    return nd.mean(nd.neg(nd.softplus(nd.neg(diag)))) - nd.mean(nd.softplus(off))


def nwjjs_loss(scores):
    """Hybrid objective: reports the NWJ bound value while its gradient is
    that of the negated JS surrogate (the JS path is the stable one to
    optimize; NWJ is the better MI readout)."""
    nwj = nwj_bound(scores)
    js = js_bound(scores)
    return nd.detach(nwj + js) - js


def _log_partition(kind, scores, tau):
    _, off, _ = _split_diag(scores)
    if kind in _DV_FAMILY:
        return _logmeanexp(off)
    if kind in _NWJ_FAMILY:
        return _logmeanexp(off) - 1.0
    if kind == "js":
        return nd.mean(nd.softplus(off))
    raise ValueError(f"no partition term for estimator kind {kind!r}")


def regularize(kind, scores, alpha, beta, tau=5.0, a=math.e):
    """Training loss for one estimator: negated bound plus the squared
    anchor ``beta * (logZ - alpha)^2``.  ``beta = 0`` recovers the plain
    negated bound exactly."""
    if beta < 0:
        raise ValueError(f"regularize: beta must be >= 0, got {beta}")
    if kind == "mine":
        loss = nd.neg(dv_bound(scores))
    elif kind == "smile":
        loss = nd.neg(smile_bound(scores, tau))
    elif kind == "infonce":
        loss = nd.neg(infonce_bound(scores))
    elif kind == "nwj":
        loss = nd.neg(nwj_bound(scores))
    elif kind == "tuba":
        loss = nd.neg(tuba_bound(scores, a))
    elif kind == "js":
        loss = nd.neg(js_bound(scores))
    elif kind == "nwjjs":
        loss = nwjjs_loss(scores)
    else:
        raise ValueError(f"regularize: unknown estimator kind {kind!r}")
    if beta == 0:
        return loss
    drift = _log_partition(kind, scores, tau) - alpha
    return loss + beta * nd.mul(drift, drift)


def mi_loss(config, scores_or_logits, labels=None):
    """Dispatch a training loss per the configured estimator kind."""
    if config.kind == "ce":
        return ce_loss(scores_or_logits, labels)
    return regularize(
        config.kind,
        scores_or_logits,
        config.alpha,
        config.beta,
        tau=config.smile_tau,
        a=config.tuba_baseline,
    )


def mi_estimate(config, scores):
    """Plain bound value (float) for monitoring; no regularization term."""
    kind = config.kind
    if kind == "mine":
        return dv_bound(scores).item()
    if kind == "smile":
        return smile_bound(scores, config.smile_tau).item()
    if kind == "infonce":
        return infonce_bound(scores).item()
    if kind in ("nwj", "nwjjs"):
        return nwj_bound(scores).item()
    if kind == "tuba":
        return tuba_bound(scores, config.tuba_baseline).item()
    if kind == "js":
        return js_bound(scores).item()
    raise ValueError(f"mi_estimate: no bound for estimator kind {kind!r}")
