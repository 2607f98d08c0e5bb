"""Independent reference implementations used by the tests.

Nothing here imports the autodiff engine: every oracle is written with plain
numpy loops or closed forms so a shared bug cannot hide on both sides.
"""

import math

import numpy as np


def central_difference(f, x, h=1e-6):
    """Numerical gradient of scalar ``f`` at array ``x`` (float64)."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = x[i]
        x[i] = orig + h
        fp = f(x)
        x[i] = orig - h
        fm = f(x)
        x[i] = orig
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_error(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    # the 1e-6 floor keeps all-zero gradients (inactive hinges) from dividing
    # finite-difference noise by nothing
    return float(np.max(np.abs(a - b)) / max(1e-6, np.max(np.abs(a)), np.max(np.abs(b))))


def conv2d_loops(x, w, b):
    n, h, wd, c = x.shape
    kh, kw, _, f = w.shape
    out = np.zeros((n, h - kh + 1, wd - kw + 1, f))
    for i in range(n):
        for r in range(h - kh + 1):
            for s in range(wd - kw + 1):
                patch = x[i, r:r + kh, s:s + kw, :]
                for o in range(f):
                    out[i, r, s, o] = np.sum(patch * w[:, :, :, o]) + b[o]
    return out


def softmax_row(z):
    e = [math.exp(v - max(z)) for v in z]
    s = sum(e)
    return [v / s for v in e]


def cross_entropy_scalar(probs, y):
    return -math.log(max(probs[y], 1e-12))


def linf(a, b):
    return max(abs(p - q) for p, q in zip(a, b))


def hinge_scalar(emb_a, emb_p, emb_n, alpha, dist=linf):
    return max(dist(emb_a, emb_p) - dist(emb_a, emb_n) + alpha, 0.0)


def adv_train_loss_oracle(logits_clean, logits_adv, y, lam):
    k = len(y)
    clean = sum(cross_entropy_scalar(softmax_row(list(z)), t) for z, t in zip(logits_clean, y))
    adv = sum(cross_entropy_scalar(softmax_row(list(z)), t) for z, t in zip(logits_adv, y))
    return (clean + lam * adv) / ((1 + lam) * k)


def at2l_loss_oracle(logits_clean, logits_adv, y, neg_idx, lam1, lam2, alpha):
    k = len(y)
    hinges = [hinge_scalar(list(logits_adv[i]), list(logits_clean[i]), list(logits_clean[j]), alpha)
              for i, j in enumerate(neg_idx)]
    return adv_train_loss_oracle(logits_clean, logits_adv, y, lam1) + lam2 * sum(hinges) / k


def negative_candidates(y, adv_pred, mode):
    """Exhaustive filter: per example, (allowed candidate set, is_fallback)."""
    out = []
    for i in range(len(y)):
        primary = set()
        if mode == "multiclass_advclass" and adv_pred[i] != y[i]:
            primary = {j for j in range(len(y)) if y[j] == adv_pred[i]}
        if mode == "multiclass_advclass" and primary:
            out.append((primary, False))
        else:
            out.append(({j for j in range(len(y)) if y[j] != y[i]}, mode == "multiclass_advclass"))
    return out


def linearly_separable(x, y):
    """Perceptron separability check for two classes (converges iff separable)."""
    xb = np.hstack([x, np.ones((len(x), 1))])
    t = np.where(y == y[0], 1.0, -1.0)
    w = np.zeros(xb.shape[1])
    for _ in range(10000):
        wrong = np.flatnonzero(t * (xb @ w) <= 0)
        if len(wrong) == 0:
            return True
        w += t[wrong[0]] * xb[wrong[0]]
    return False
