"""Adversarial example generation.

Gradient attacks (FGSM, LL and their iterative versions) take sign steps on
the input gradient of the cross-entropy and clip to the [0, 1] box;
iterative versions also project back onto the l-inf ball around the
original. C&W minimizes squared l2 distortion plus ``c`` times a logit
margin in tanh space, doubling ``c`` on failure.

All attacks are batched: ``x`` is (N, *input_shape), labels are (N,).
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .autodiff import Tensor, backward, no_grad, ops
from .models import logits_of, read_arrays, write_arrays
from .triplet import cross_entropy

FAMILIES = ("FGSM", "LL", "I_FGSM", "I_LL", "CW")


@dataclass(frozen=True)
class CWParams:
    max_iterations: int = 1000
    initial_c: float = 1e-3
    max_c: float = 2.0
    c_growth_rate: float = 2.0
    learning_rate: float = 5e-3
    norm_p: int = 2
    kappa: float = 0.0
    abort_early: bool = True

    def __post_init__(self):
        if self.initial_c > self.max_c:
            raise ValueError("cw.initial_c must not exceed cw.max_c")
        if self.c_growth_rate <= 1:
            raise ValueError("cw.c_growth_rate must be > 1")
        if self.norm_p != 2:
            raise ValueError("only the l2 C&W variant is implemented")
        if self.max_iterations < 1:
            raise ValueError("cw.max_iterations must be >= 1")


@dataclass(frozen=True)
class AttackConfig:
    family: str
    epsilon: float = 0.3
    steps: int = 1
    step_size: float = 0.03
    cw: CWParams = field(default_factory=CWParams)
    name: str = ""

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown attack family {self.family!r}")
        if self.epsilon < 0 or (self.epsilon == 0 and self.family == "CW"):
            raise ValueError("epsilon must be positive")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if not self.name:
            object.__setattr__(self, "name", self.family)

    @property
    def label(self):
        return self.name

    def params(self):
        d = asdict(self)
        cw = d.pop("cw")
        if self.family == "CW":
            d.update({f"cw.{k}": v for k, v in cw.items()})
        return d


def fgsm_config(epsilon=0.3, name=""):
    return AttackConfig("FGSM", epsilon=epsilon, name=name)


def ll_config(epsilon=0.3, name=""):
    return AttackConfig("LL", epsilon=epsilon, name=name)


def ifgsm_config(epsilon=0.3, steps=10, step_size=0.03, name=""):
    return AttackConfig("I_FGSM", epsilon=epsilon, steps=steps, step_size=step_size, name=name)


def ill_config(epsilon=0.3, steps=10, step_size=0.03, name=""):
    return AttackConfig("I_LL", epsilon=epsilon, steps=steps, step_size=step_size, name=name)


def cw_config(max_iterations=1000, name="", **kw):
    return AttackConfig("CW", cw=CWParams(max_iterations=max_iterations, **kw), name=name)


def gradient_attack_set(epsilon=0.3):
    return [fgsm_config(epsilon), ll_config(epsilon), ifgsm_config(epsilon), ill_config(epsilon)]


def mixed_attack_set(epsilon=0.3, cw_iterations=1000):
    return gradient_attack_set(epsilon) + [cw_config(cw_iterations)]


@dataclass
class AdversarialBatch:
    originals: np.ndarray
    adversarials: np.ndarray
    true_labels: np.ndarray
    adversarial_predicted_labels: np.ndarray
    attack: AttackConfig
    source_model: str
    failed: np.ndarray  # bool per example: zero gradient or no C&W success
    param_hash: str = ""

    def __len__(self):
        return len(self.true_labels)

    def save(self, path):
        """Binary payload plus a ``<path>.manifest`` sidecar."""
        write_arrays(path, {
            "originals": self.originals,
            "adversarials": self.adversarials,
            "true_labels": self.true_labels,
            "adversarial_predicted_labels": self.adversarial_predicted_labels,
        }, {"source_model": self.source_model})
        lines = [f"family={self.attack.family}", f"source_model={self.source_model}",
                 f"param_hash={self.param_hash}"]
        lines += [f"{k}={v}" for k, v in sorted(self.attack.params().items()) if k != "family"]
        lines.append("failures=" + ",".join(str(i) for i in np.flatnonzero(self.failed)))
        with open(f"{path}.manifest", "w") as fh:
            fh.write("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path):
        arrays, _ = read_arrays(path)
        with open(f"{path}.manifest") as fh:
            man = dict(line.rstrip("\n").split("=", 1) for line in fh if "=" in line)
        attack = attack_from_params(man)
        failed = np.zeros(len(arrays["true_labels"]), dtype=bool)
        if man.get("failures"):
            failed[[int(i) for i in man["failures"].split(",")]] = True
        return cls(
            originals=arrays["originals"],
            adversarials=arrays["adversarials"],
            true_labels=arrays["true_labels"].astype(np.int64),
            adversarial_predicted_labels=arrays["adversarial_predicted_labels"].astype(np.int64),
            attack=attack,
            source_model=man["source_model"],
            failed=failed,
            param_hash=man.get("param_hash", ""),
        )


def attack_from_params(d):
    """Build an AttackConfig from flat string key/values (manifests, configs)."""
    cw_kw = {}
    for key, value in d.items():
        if key.startswith("cw."):
            k = key[3:]
            if k in ("max_iterations", "norm_p"):
                cw_kw[k] = int(value)
            elif k == "abort_early":
                cw_kw[k] = str(value).lower() in ("1", "true", "yes")
            else:
                cw_kw[k] = float(value)
    return AttackConfig(
        family=str(d["family"]).upper().replace("-", "_"),
        epsilon=float(d.get("epsilon", 0.3)),
        steps=int(d.get("steps", 1)),
        step_size=float(d.get("step_size", 0.03)),
        cw=CWParams(**cw_kw),
        name=str(d.get("name", "")),
    )


def _sign(g):
    # np.sign already maps 0 -> 0; the perturbation is "<= eps" componentwise.
    # float64 so eps is not rounded to the model's float32
    return np.sign(g).astype(np.float64)


def input_gradient(model, x, labels):
    """Gradient of the summed cross-entropy at ``labels`` w.r.t. the input."""
    xt = Tensor(np.asarray(x, dtype=model.dtype), requires_grad=True)
    loss = cross_entropy(ops.softmax(model.frozen().forward(xt, train=False)), labels)
    grads = backward(loss)
    return grads[xt]


def _grad_batched(model, x, labels, batch_size):
    out = np.empty(x.shape, dtype=model.dtype)
    for s in range(0, len(x), batch_size):
        out[s:s + batch_size] = input_gradient(model, x[s:s + batch_size], labels[s:s + batch_size])
    return out


def least_likely_labels(model, x, batch_size=256):
    """argmin of the logits; ties go to the lowest class index."""
    return logits_of(model, x, batch_size).argmin(axis=1)


def _box(x):
    return np.clip(x, 0.0, 1.0)


def fgsm(model, x, y_true, cfg, batch_size=128):
    x = np.asarray(x, dtype=np.float64)
    g = _grad_batched(model, x, np.asarray(y_true), batch_size)
    return _box(x + cfg.epsilon * _sign(g))


def least_likely(model, x, cfg, batch_size=128):
    x = np.asarray(x, dtype=np.float64)
    y_ll = least_likely_labels(model, x, batch_size)
    g = _grad_batched(model, x, y_ll, batch_size)
    return _box(x - cfg.epsilon * _sign(g))


def iterative_attack(model, x, y, cfg, batch_size=128):
    """I-FGSM (``y`` = true labels) or I-LL (``y`` ignored; target fixed at
    the least-likely class of the clean input)."""
    x = np.asarray(x, dtype=np.float64)
    if cfg.family == "I_LL":
        target, direction = least_likely_labels(model, x, batch_size), -1.0
    else:
        target, direction = np.asarray(y), 1.0
    lo, hi = x - cfg.epsilon, x + cfg.epsilon
    adv = x.copy()
    for _ in range(cfg.steps):
        g = _grad_batched(model, adv, target, batch_size)
        adv = _box(np.clip(adv + direction * cfg.step_size * _sign(g), lo, hi))
    return adv


def _margin_and_grad(model, xp, y, kappa):
    """Per-example max(Z_y - max_{j != y} Z_j, -kappa), its input gradient
    (of the sum), and the logits."""
    xt = Tensor(np.asarray(xp, dtype=model.dtype), requires_grad=True)
    z = model.frozen().forward(xt, train=False)
    onehot = np.zeros(z.shape, dtype=z.dtype)
    onehot[np.arange(len(y)), y] = 1.0
    real = ops.sum(ops.multiply(z, onehot), axis=1)
    # push the true class far down so max() picks the best other class
    other = ops.max(ops.subtract(z, onehot * np.asarray(1e9, dtype=z.dtype)), axis=1)
    diff = ops.subtract(real, other)
    margin = diff.data.copy()
    active = margin > -kappa
    grads = backward(ops.sum(ops.multiply(diff, active.astype(z.dtype))))
    return np.maximum(margin, -kappa), grads[xt].astype(np.float64), z.data


def cw_attack(model, x, y_true, cfg, batch_size=128):
    """Carlini-Wagner l2 with pure doubling of ``c``.

    Returns (adversarials, success). Examples where no ``c`` up to
    ``max_c`` succeeds are returned unchanged with success False.
    """
    x = np.asarray(x, dtype=np.float64)
    y_true = np.asarray(y_true)
    adv = x.copy()
    success = np.zeros(len(x), dtype=bool)
    for s in range(0, len(x), batch_size):
        sl = slice(s, s + batch_size)
        adv[sl], success[sl] = _cw_batch(model, x[sl], y_true[sl], cfg.cw)
    return adv, success


def _to_tanh_space(x):
    return np.arctanh((2.0 * x - 1.0) * 0.999999)


def _cw_batch(model, x, y, p):
    n = len(x)
    flat = lambda a: a.reshape(len(a), -1)  # noqa: E731
    col = (-1,) + (1,) * (x.ndim - 1)
    best_l2 = np.full(n, np.inf)
    best_adv = x.copy()
    c = np.full(n, p.initial_c)
    pending = np.ones(n, dtype=bool)  # still looking for a first success
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    w0 = _to_tanh_space(x)
    check_every = max(p.max_iterations // 10, 1)
    while pending.any():
        # rows of the working arrays are the still-live examples, in order
        live = np.flatnonzero(pending)
        w = w0[live].copy()
        m = np.zeros_like(w)
        v = np.zeros_like(w)
        xs, ys, ci = x[live], y[live], c[live]
        prev = np.full(len(live), np.inf)
        for it in range(1, p.max_iterations + 1):
            t = np.tanh(w)
            xp = (t + 1.0) / 2.0
            delta = xp - xs
            l2 = flat(delta ** 2).sum(axis=1)
            margin, g_margin, z = _margin_and_grad(model, xp, ys, p.kappa)
            loss = l2 + ci * margin
            # record successes of the current iterate
            hit = (z.argmax(axis=1) != ys) & (l2 < best_l2[live])
            if p.kappa > 0:
                hit &= margin <= -p.kappa
            best_l2[live[hit]] = l2[hit]
            best_adv[live[hit]] = xp[hit]
            # gradient in tanh space, then one Adam step
            g_w = (2.0 * delta + ci.reshape(col) * g_margin) * (1.0 - t * t) / 2.0
            m *= beta1
            m += (1 - beta1) * g_w
            v *= beta2
            v += (1 - beta2) * g_w * g_w
            w -= p.learning_rate * (m / (1 - beta1 ** it)) / (np.sqrt(v / (1 - beta2 ** it)) + eps)
            if p.abort_early and it % check_every == 0:
                keep = loss <= prev * 0.9999
                prev = loss
                if not keep.all():
                    live, w, m, v, xs, ys, ci, prev = (a[keep] for a in (live, w, m, v, xs, ys, ci, prev))
                    if len(live) == 0:
                        break
        idx = np.flatnonzero(pending)
        found = np.isfinite(best_l2[idx])
        pending[idx[found]] = False
        c[idx] *= p.c_growth_rate
        pending &= c <= p.max_c
    success = np.isfinite(best_l2)
    # the final verdict comes from a clean eval pass on the returned points
    if success.any():
        pred = logits_of(model, best_adv[success]).argmax(axis=1)
        ok = pred != y[success]
        drop = np.flatnonzero(success)[~ok]
        best_adv[drop] = x[drop]
        success[drop] = False
    return best_adv, success


def generate(model, x, y, cfg, batch_size=128, threads=1):
    """Run one attack against ``model`` and package the result.

    With ``threads > 1`` disjoint slices are attacked concurrently and merged
    in input order.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    if threads > 1 and len(x) > batch_size:
        bounds = np.array_split(np.arange(len(x)), threads)
        with ThreadPoolExecutor(threads) as pool:
            parts = list(pool.map(lambda ix: _generate_slice(model, x[ix], y[ix], cfg, batch_size), bounds))
        adv = np.concatenate([p[0] for p in parts])
        failed = np.concatenate([p[1] for p in parts])
    else:
        adv, failed = _generate_slice(model, x, y, cfg, batch_size)
    pred = logits_of(model, adv).argmax(axis=1)
    return AdversarialBatch(x, adv, y, pred, cfg, model.name, failed, model.param_hash())


def _generate_slice(model, x, y, cfg, batch_size):
    if cfg.family == "CW":
        adv, success = cw_attack(model, x, y, cfg, batch_size)
        return adv, ~success
    if cfg.family == "FGSM":
        adv = fgsm(model, x, y, cfg, batch_size)
    elif cfg.family == "LL":
        adv = least_likely(model, x, cfg, batch_size)
    else:
        adv = iterative_attack(model, x, y, cfg, batch_size)
    failed = np.all((adv == x).reshape(len(x), -1), axis=1)
    return adv, failed


def generate_ensemble(models, attacks, x, y, batch_size=128, threads=1):
    """{(attack name, model name): AdversarialBatch} over every pair."""
    if not models or not attacks:
        raise ValueError("generate_ensemble needs at least one model and one attack")
    out = {}
    for a in attacks:
        for m in models:
            out[(a.label, m.name)] = generate(m, x, y, a, batch_size, threads)
    return out


def with_epsilon(cfg, epsilon):
    return replace(cfg, epsilon=epsilon)


def error_rate(model, x, y, batch_size=256):
    """Percent of examples ``model`` misclassifies."""
    pred = logits_of(model, np.asarray(x), batch_size).argmax(axis=1)
    return 100.0 * float(np.mean(pred != np.asarray(y)))


def transfer_error(defender, attacker, cfg, x, y, batch_size=128, threads=1):
    """Error of ``defender`` on adversarials crafted against ``attacker``.

    Failed C&W examples come back as the original input, so they count with
    the defender's clean outcome.
    """
    batch = generate(attacker, x, y, cfg, batch_size, threads)
    return error_rate(defender, batch.adversarials, y), batch
