"""Feature extractor F, classifier C and (K+1)-way discriminator D.

D's first K slots are source classes and slot K is "target domain".  The
two alternating objectives use mirrored label encodings:

* D-step (F frozen): source -> its class slot, target -> slot K.
* F-step (D frozen): source -> slot K, target -> its pseudo-label slot,
  plus the source classification loss for C and F.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .exceptions import BatchError, LabelError


@dataclass
class AdvNets:
    f_params: nn.ParamSet
    c_params: nn.ParamSet
    d_params: nn.ParamSet
    f_spec: nn.MlpSpec
    c_spec: nn.MlpSpec
    d_spec: nn.MlpSpec
    k_source: int

    def __post_init__(self):
        d = self.f_spec.out_dim
        if self.c_spec.layer_widths != (d, self.k_source):
            raise ValueError(f"C must map {d} -> {self.k_source}, got {self.c_spec.layer_widths}")
        if self.d_spec.in_dim != d or self.d_spec.out_dim != self.k_source + 1:
            raise ValueError(f"D must map {d} -> ... -> {self.k_source + 1}, got {self.d_spec.layer_widths}")

    @property
    def feature_dim(self):
        return self.f_spec.out_dim

    @property
    def d_in(self):
        return self.f_spec.in_dim

    def copy(self):
        return AdvNets(
            self.f_params.copy(), self.c_params.copy(), self.d_params.copy(),
            self.f_spec, self.c_spec, self.d_spec, self.k_source,
        )


def make_adv_nets(d_in, k_source, rng, feature_dim=16, hidden=32, disc_hidden=32):
    """F: d_in -> hidden -> hidden -> feature_dim, C: feature_dim -> K, D: feature_dim -> disc_hidden -> K+1."""
    f_spec = nn.MlpSpec((d_in, hidden, hidden, feature_dim), "relu", "linear")
    c_spec = nn.MlpSpec((feature_dim, k_source), "relu", "softmax")
    d_spec = nn.MlpSpec((feature_dim, disc_hidden, k_source + 1), "relu", "softmax")
    return AdvNets(
        nn.init_params(f_spec, rng),
        nn.init_params(c_spec, rng),
        nn.init_params(d_spec, rng),
        f_spec, c_spec, d_spec, k_source,
    )


# -- label encodings ----------------------------------------------------------

def _one_hot_rows(indices, k):
    indices = np.asarray(indices, dtype=np.int64).reshape(-1)
    if indices.size and (indices.min() < 0 or indices.max() >= k):
        raise LabelError(f"labels must lie in [0, {k}), got {indices.tolist()}")
    out = np.zeros((k + 1, indices.size))
    out[indices, np.arange(indices.size)] = 1.0
    return out


def _domain_slot(n, k):
    out = np.zeros((k + 1, n))
    out[k] = 1.0
    return out


def build_disc_labels(batch_domain, class_labels, k, n=None):
    """Discriminator-step targets, shape ``(k + 1, n)``.

    Source instance of class ``i`` -> one-hot at ``i``; target instance ->
    one-hot at slot ``k``.  For target batches pass ``class_labels=None``
    and the batch size ``n``.
    """
    if batch_domain == "source":
        if class_labels is None:
            raise LabelError("source batches need class labels")
        return _one_hot_rows(class_labels, k)
    if batch_domain == "target":
        if n is None:
            n = 0 if class_labels is None else len(class_labels)
        return _domain_slot(n, k)
    raise ValueError(f"batch_domain must be 'source' or 'target', got {batch_domain!r}")


def build_feat_labels(batch_domain, pseudo_labels, k, n=None):
    """Feature-step targets: source -> slot ``k``, target with pseudo label ``j`` -> slot ``j``."""
    if batch_domain == "source":
        if n is None:
            n = 0 if pseudo_labels is None else len(pseudo_labels)
        return _domain_slot(n, k)
    if batch_domain == "target":
        if pseudo_labels is None:
            raise LabelError("target batches need pseudo labels")
        return _one_hot_rows(pseudo_labels, k)
    raise ValueError(f"batch_domain must be 'source' or 'target', got {batch_domain!r}")


def one_hot(labels, k):
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise LabelError(f"labels must lie in [0, {k})")
    out = np.zeros((k, labels.size))
    out[labels, np.arange(labels.size)] = 1.0
    return out


# -- forward helpers ----------------------------------------------------------

def features(nets, x):
    return nn.forward(nets.f_params, nets.f_spec, x)[0]


def predict(nets, x):
    """Class probabilities, argmax pseudo labels (ties -> lowest index) and D probabilities."""
    feats = features(nets, x)
    class_probs = nn.forward(nets.c_params, nets.c_spec, feats)[0]
    d_probs = nn.forward(nets.d_params, nets.d_spec, feats)[0]
    return class_probs, np.argmax(class_probs, axis=0), d_probs


def _require_nonempty(*batches):
    for b in batches:
        if np.asarray(b).ndim < 2 or np.asarray(b).shape[1] == 0:
            raise BatchError("adversarial steps need nonempty source and target batches")


# -- losses -----------------------------------------------------------------------

def classifier_loss(nets, batch_x, batch_y):
    """Mean source cross-entropy of C(F(x)).  Returns ``(loss, f_grads, c_grads)``."""
    feats, f_cache = nn.forward(nets.f_params, nets.f_spec, batch_x)
    probs, c_cache = nn.forward(nets.c_params, nets.c_spec, feats)
    loss, delta = nn.output_delta(nets.c_spec, probs, one_hot(batch_y, nets.k_source), "cross_entropy")
    c_grads, dfeat = nn.backward(nets.c_params, nets.c_spec, c_cache, delta)
    f_grads, _ = nn.backward(nets.f_params, nets.f_spec, f_cache, dfeat)
    return loss, f_grads, c_grads


def discriminator_loss(nets, src_x, src_y, tgt_x):
    """D-step objective with F frozen.  Returns ``(loss, d_grads)``."""
    _require_nonempty(src_x, tgt_x)
    k = nets.k_source
    total, grads = 0.0, None
    for x, labels in (
        (src_x, build_disc_labels("source", src_y, k)),
        (tgt_x, build_disc_labels("target", None, k, n=np.asarray(tgt_x).shape[1])),
    ):
        probs, cache = nn.forward(nets.d_params, nets.d_spec, features(nets, x))
        loss, delta = nn.output_delta(nets.d_spec, probs, labels, "cross_entropy")
        g, _ = nn.backward(nets.d_params, nets.d_spec, cache, delta)
        total += loss
        grads = g if grads is None else [a + b for a, b in zip(grads, g)]
    return total, grads


def feature_loss(nets, src_x, src_y, tgt_x, pseudo_labels, cls_x=None, cls_y=None):
    """F-step objective with D frozen: source risk plus the flipped-label D loss.

    The source risk is taken over ``(cls_x, cls_y)`` when given, otherwise
    over the adversarial source batch ``(src_x, src_y)``.

    Returns
    -------
    losses : dict
        ``classifier``, ``adversarial`` and ``total``.
    f_grads, c_grads : list of ndarray
    """
    _require_nonempty(src_x, tgt_x)
    k = nets.k_source
    feats_s, fcache_s = nn.forward(nets.f_params, nets.f_spec, src_x)
    feats_t, fcache_t = nn.forward(nets.f_params, nets.f_spec, tgt_x)

    if cls_x is None:
        loss_c, f_grads_c, c_grads = classifier_loss(nets, src_x, src_y)
    else:
        loss_c, f_grads_c, c_grads = classifier_loss(nets, cls_x, cls_y)

    loss_y = 0.0
    dfeats = []
    for feats, labels in (
        (feats_s, build_feat_labels("source", None, k, n=feats_s.shape[1])),
        (feats_t, build_feat_labels("target", pseudo_labels, k)),
    ):
        dprobs, d_cache = nn.forward(nets.d_params, nets.d_spec, feats)
        loss, delta = nn.output_delta(nets.d_spec, dprobs, labels, "cross_entropy")
        _, dfeat = nn.backward(nets.d_params, nets.d_spec, d_cache, delta)
        loss_y += loss
        dfeats.append(dfeat)

    g_s, _ = nn.backward(nets.f_params, nets.f_spec, fcache_s, dfeats[0])
    g_t, _ = nn.backward(nets.f_params, nets.f_spec, fcache_t, dfeats[1])
    f_grads = [a + b + c for a, b, c in zip(g_s, g_t, f_grads_c)]
    losses = {"classifier": loss_c, "adversarial": loss_y, "total": loss_c + loss_y}
    return losses, f_grads, c_grads


# -- update steps ---------------------------------------------------------------

def discriminator_step(nets, src_x, src_y, tgt_x, lr, beta1=0.5):
    """One Adam step on D only.  Returns the loss before the step."""
    loss, grads = discriminator_loss(nets, src_x, src_y, tgt_x)
    nn.adam_step(nets.d_params, grads, lr, beta1=beta1)
    return loss


def feature_classifier_step(nets, src_x, src_y, tgt_x, lr, beta1=0.5, cls_x=None, cls_y=None):
    """One Adam step on F and C; pseudo labels come from the current C(F(target)).

    Returns the loss dict evaluated before the step.
    """
    _require_nonempty(src_x, tgt_x)
    _, pseudo, _ = predict(nets, tgt_x)
    losses, f_grads, c_grads = feature_loss(nets, src_x, src_y, tgt_x, pseudo, cls_x, cls_y)
    nn.adam_step(nets.f_params, f_grads, lr, beta1=beta1)
    nn.adam_step(nets.c_params, c_grads, lr, beta1=beta1)
    return losses


def classifier_step(nets, x, y, lr, beta1=0.5):
    loss, f_grads, c_grads = classifier_loss(nets, x, y)
    nn.adam_step(nets.f_params, f_grads, lr, beta1=beta1)
    nn.adam_step(nets.c_params, c_grads, lr, beta1=beta1)
    return loss


def pretrain_source(nets, task, epochs, lr, rng, batch_size=32, beta1=0.5):
    """Minibatch training of F and C on the labelled source.  D is not touched.

    Returns the list of mean per-epoch losses.
    """
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    n = task.n_source
    curve = []
    for _ in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            total += classifier_step(nets, task.source_x[:, idx], task.source_y[idx], lr, beta1) * idx.size
        curve.append(total / n)
    return curve


def sample_batches(rng, n_src, n_tgt, cap):
    """Index batches of equal size ``min(n_src, cap)`` for source and target."""
    size = min(n_src, cap)
    src_idx = np.arange(n_src) if n_src <= cap else np.sort(rng.choice(n_src, size, replace=False))
    tgt_idx = rng.choice(n_tgt, size, replace=size > n_tgt)
    return src_idx, tgt_idx


def adversarial_round(nets, src_x, src_y, tgt_x, steps, lr, rng, cap=64, beta1=0.5, cls_x=None, cls_y=None):
    """``steps`` alternating (D-step, F-step) pairs on balanced batches.

    With ``cls_x``/``cls_y`` the classifier term of each F-step uses a
    batch of up to ``cap`` instances drawn from that labelled pool instead
    of the adversarial source batch.

    Returns mean D loss, mean F-side adversarial loss and mean classifier loss.
    """
    d_losses, y_losses, c_losses = [], [], []
    for _ in range(steps):
        s_idx, t_idx = sample_batches(rng, src_x.shape[1], tgt_x.shape[1], cap)
        xs, ys, xt = src_x[:, s_idx], src_y[s_idx], tgt_x[:, t_idx]
        d_losses.append(discriminator_step(nets, xs, ys, xt, lr, beta1))
        bx = by = None
        if cls_x is not None:
            c_idx, _ = sample_batches(rng, cls_x.shape[1], 1, cap)
            bx, by = cls_x[:, c_idx], cls_y[c_idx]
        losses = feature_classifier_step(nets, xs, ys, xt, lr, beta1, bx, by)
        y_losses.append(losses["adversarial"])
        c_losses.append(losses["classifier"])
    return float(np.mean(d_losses)), float(np.mean(y_losses)), float(np.mean(c_losses))


def warm_up_discriminator(nets, task, steps, lr, rng, cap=64, beta1=0.5):
    """D-steps on all source vs. target with F frozen, so D's domain slot is informative."""
    losses = []
    for _ in range(steps):
        s_idx, t_idx = sample_batches(rng, task.n_source, task.n_target, cap)
        losses.append(discriminator_step(
            nets, task.source_x[:, s_idx], task.source_y[s_idx], task.target_x[:, t_idx], lr, beta1
        ))
    return losses
