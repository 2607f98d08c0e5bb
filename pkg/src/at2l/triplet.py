"""Cross-entropy, the adversarial-training loss, the adversarial-anchored
triplet hinge, the combined AT2L objective, and negative sampling.

Embeddings are raw logits of the last dense layer. Triplet anchors are the
adversarial examples, positives their clean sources, negatives other clean
examples from the same mini-batch.
"""

import copy
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, ops

NEGATIVE_MODES = ("binary", "multiclass_advclass", "multiclass_anylabel")
PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 0.3
    lambda2: float = 1.0
    alpha: float = 1.0
    distance: str = "linf"

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0 or self.alpha < 0:
            raise ValueError(f"loss weights must be non-negative: {self}")
        if self.distance not in ("linf", "l2"):
            raise ValueError(f"unknown distance {self.distance!r}")


@dataclass
class Triplet:
    anchor: np.ndarray
    positive: np.ndarray
    negative: np.ndarray
    anchor_label: int
    positive_label: int
    negative_label: int


@dataclass
class PairedBatch:
    """k clean examples and their index-aligned adversarial counterparts."""

    x: np.ndarray
    x_adv: np.ndarray
    y: np.ndarray
    adv_pred: np.ndarray = None

    def __post_init__(self):
        if len(self.x) != len(self.x_adv) or len(self.x) != len(self.y):
            raise ValueError(
                f"paired batch length mismatch: {len(self.x)} clean, "
                f"{len(self.x_adv)} adversarial, {len(self.y)} labels"
            )

    def __len__(self):
        return len(self.y)


def _onehot(y, num_classes, dtype):
    y = np.asarray(y)
    if np.any(y < 0) or np.any(y >= num_classes):
        raise ValueError(f"label out of range for {num_classes} classes")
    out = np.zeros((len(y), num_classes), dtype=dtype)
    out[np.arange(len(y)), y] = 1.0
    return out


def cross_entropy(probs, y, reduction="sum"):
    """-log(max(probs[y], 1e-12)) per row, reduced by ``reduction``."""
    if not isinstance(probs, Tensor):
        probs = Tensor(probs)
    squeeze = probs.ndim == 1
    if squeeze:
        probs = ops.reshape(probs, (1, -1))
        y = [y]
    onehot = _onehot(y, probs.shape[1], probs.dtype)
    per = ops.neg(ops.sum(ops.multiply(ops.log(ops.clamp_min(probs, PROB_FLOOR)), onehot), axis=1))
    if reduction == "none":
        return per
    if reduction == "mean":
        return ops.scale(ops.sum(per), 1.0 / len(onehot))
    return ops.sum(per)


def embedding_distance(a, b, norm="linf"):
    """Row-wise distance between embeddings; 1-d inputs give a scalar."""
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = b if isinstance(b, Tensor) else Tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"embedding_distance: shape mismatch {a.shape} vs {b.shape}")
    diff = ops.subtract(a, b)
    if norm == "linf":
        return ops.max(ops.abs(diff), axis=-1)
    if norm == "l2":
        return ops.sqrt(ops.sum(ops.multiply(diff, diff), axis=-1))
    raise ValueError(f"unknown norm {norm!r}")


def triplet_hinge(emb_anchor, emb_pos, emb_neg, alpha, norm="linf"):
    """Per-triplet max(d(a, p) - d(a, n) + alpha, 0)."""
    d_pos = embedding_distance(emb_anchor, emb_pos, norm)
    d_neg = embedding_distance(emb_anchor, emb_neg, norm)
    return ops.relu(ops.add(ops.subtract(d_pos, d_neg), alpha))


def triplet_loss(triplets, model, alpha, norm="linf"):
    """Mean hinge over a list of :class:`Triplet`, embeddings from ``model``."""
    if not triplets:
        raise ValueError("triplet_loss needs at least one triplet")
    stack = lambda attr: np.stack([getattr(t, attr) for t in triplets])  # noqa: E731
    emb_a = model.forward(stack("anchor"))
    emb_p = model.forward(stack("positive"))
    emb_n = model.forward(stack("negative"))
    return ops.mean(triplet_hinge(emb_a, emb_p, emb_n, alpha, norm))


@dataclass
class LossTerms:
    """Scalar tensors of one evaluation of the objective."""

    total: Tensor
    ce_clean: Tensor  # mean clean cross-entropy
    ce_adv: Tensor  # mean adversarial cross-entropy
    triplet: Tensor  # mean triplet hinge (before lambda2)


def pair_forward(model, batch, train=False, rng=None):
    """(clean, adversarial) logits. In train mode both passes replay the same
    dropout draws, so example i and its adversarial twin go through the same
    thinned network and their distance is not dominated by mask noise. The
    clean pass consumes ``rng`` exactly as a lone clean pass would."""
    twin = copy.deepcopy(rng) if train and rng is not None else rng
    logits = model.forward(batch.x, train=train, rng=rng)
    logits_adv = model.forward(batch.x_adv, train=train, rng=twin)
    return logits, logits_adv


def at2l_terms(model, batch, neg_index, weights, train=False, rng=None, logits=None):
    """Evaluate the combined objective and its parts.

    ``neg_index[i]`` is the position in the clean batch of the negative for
    triplet i. ``logits`` may carry a precomputed (clean, adversarial) pair.
    """
    logits, logits_adv = logits if logits is not None else pair_forward(model, batch, train, rng)
    k = len(batch)
    sum_clean = cross_entropy(ops.softmax(logits), batch.y)
    sum_adv = cross_entropy(ops.softmax(logits_adv), batch.y)
    lam1 = weights.lambda1
    adv_part = ops.scale(ops.add(sum_clean, ops.scale(sum_adv, lam1)), 1.0 / ((1.0 + lam1) * k))
    if neg_index is None:
        hinge_mean = Tensor(np.zeros((), dtype=logits.dtype))
        total = adv_part
    else:
        hinge = triplet_hinge(logits_adv, logits, ops.take(logits, neg_index), weights.alpha, weights.distance)
        hinge_sum = ops.sum(hinge)
        hinge_mean = ops.scale(hinge_sum, 1.0 / k)
        total = ops.add(adv_part, ops.scale(hinge_sum, weights.lambda2 / k))
    return LossTerms(
        total=total,
        ce_clean=ops.scale(sum_clean, 1.0 / k),
        ce_adv=ops.scale(sum_adv, 1.0 / k),
        triplet=hinge_mean,
    )


def adv_train_loss(model, batch, lam, train=False, rng=None):
    """(sum clean CE + lam * sum adversarial CE) / ((1 + lam) k)."""
    return at2l_terms(model, batch, None, LossWeights(lam, 0.0, 0.0), train, rng).total


def at2l_loss(model, batch, neg_index, weights, train=False, rng=None):
    return at2l_terms(model, batch, neg_index, weights, train, rng).total


def triplet_regularizer(model, batch, neg_index, lam, alpha=1.0, norm="linf", train=False, rng=None, logits=None):
    """(lam / k) * sum of adversarial-anchored hinges; add to any host loss."""
    if logits is None:
        logits, logits_adv = pair_forward(model, batch, train, rng)
    else:
        logits, logits_adv = logits
    hinge = triplet_hinge(logits_adv, logits, ops.take(logits, neg_index), alpha, norm)
    return ops.scale(ops.sum(hinge), lam / len(batch))


def sample_negative_indices(y, adv_pred, mode, rng):
    """Pick one negative per example from the batch itself.

    Returns (indices, fallback_count). ``multiclass_advclass`` falls back to
    ``multiclass_anylabel`` for examples whose adversarial prediction equals
    the true label or whose predicted class is absent from the batch.
    """
    if mode not in NEGATIVE_MODES:
        raise ValueError(f"unknown negative mode {mode!r}")
    y = np.asarray(y)
    if len(np.unique(y)) < 2:
        raise ValueError("negative sampling needs at least two distinct labels in the batch")
    out = np.empty(len(y), dtype=np.int64)
    fallbacks = 0
    for i, label in enumerate(y):
        cand = None
        if mode == "multiclass_advclass":
            target = adv_pred[i]
            if target != label:
                cand = np.flatnonzero(y == target)
            if cand is None or len(cand) == 0:
                cand = None
                fallbacks += 1
        if cand is None:
            cand = np.flatnonzero(y != label)
        out[i] = cand[rng.integers(len(cand))]
    return out, fallbacks


def sample_negatives(batch, adversarial_predictions, mode, rng):
    """One :class:`Triplet` per batch example (anchor = adversarial)."""
    idx, _ = sample_negative_indices(batch.y, adversarial_predictions, mode, rng)
    return [
        Triplet(batch.x_adv[i], batch.x[i], batch.x[j], int(batch.y[i]), int(batch.y[i]), int(batch.y[j]))
        for i, j in enumerate(idx)
    ]
