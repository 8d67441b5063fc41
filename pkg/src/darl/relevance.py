"""How relevant a source instance is to the target domain, and the binary reward."""
from __future__ import annotations

import logging

import numpy as np

from .adversarial import features, predict
from . import nn
from .exceptions import BatchError, LabelError

logger = logging.getLogger(__name__)


def class_relevance(nets, target_x):
    """Mean predicted class distribution over the target, divided by its max.

    If every entry is zero the vector is returned unnormalised and a
    warning is logged.
    """
    target_x = np.asarray(target_x, dtype=np.float64)
    if target_x.ndim != 2 or target_x.shape[1] == 0:
        raise BatchError("class relevance needs at least one target instance")
    probs = predict(nets, target_x)[0]
    mu = probs.mean(axis=1)
    top = mu.max()
    if top <= 0:
        logger.warning("degenerate class relevance (max is 0); left unnormalised")
        return mu
    return mu / top


def domain_scores(nets, x):
    """Probability of D's target-domain slot for each column of ``x``."""
    feats = features(nets, x)
    return nn.forward(nets.d_params, nets.d_spec, feats)[0][-1]


def relevance_scores(nets, x, mu, class_labels):
    """Vectorised :func:`relevance_score` over the columns of ``x``."""
    class_labels = np.asarray(class_labels, dtype=np.int64)
    if class_labels.size and (class_labels.min() < 0 or class_labels.max() >= len(mu)):
        raise LabelError(f"class labels must lie in [0, {len(mu)})")
    return np.asarray(mu)[class_labels] * domain_scores(nets, x)


def relevance_score(nets, x, mu, class_label):
    """``mu[class_label] * D(F(x))_domain`` for a single instance."""
    x = np.asarray(x, dtype=np.float64).reshape(nets.d_in, 1)
    return float(relevance_scores(nets, x, mu, [class_label])[0])


def reward(phi, tau):
    """+1 if ``phi > tau`` (strictly), else -1."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must lie in [0, 1], got {tau}")
    return 1 if phi > tau else -1
