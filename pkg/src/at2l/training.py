"""Trainers: plain cross-entropy, adversarial training, AT2L (single model and
ensemble), and a host loss plus the triplet regularizer.

All trainers share one loop. An outer round regenerates adversarial
examples against the current model and then runs ``epochs_per_round``
epochs of mini-batch SGD. Random streams are split by purpose (batch order,
adversarial-pair choice, negatives, dropout) so switching a loss term off
does not shift the randomness any other part sees.
"""

import csv
import math
import pathlib
from dataclasses import dataclass, field

import numpy as np

from .attacks import AdversarialBatch, error_rate, fgsm_config, generate, transfer_error
from .autodiff import backward, no_grad, ops
from .data import batches
from .models import build_model, save_checkpoint
from .triplet import (NEGATIVE_MODES, LossWeights, PairedBatch, at2l_terms, cross_entropy,
                      pair_forward, sample_negative_indices, triplet_regularizer)

MODES = ("plain", "adv_train", "at2l", "ensemble_at2l", "regularizer")

# stream ids for np.random.default_rng([seed, stream, ...])
_BATCHES, _PAIRS, _NEGATIVES, _DROPOUT, _PROBE, _STATIC = 2, 3, 4, 5, 6, 7


class NumericError(RuntimeError):
    """Training produced a non-finite loss or gradient."""


class TrainingConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 32
    epochs_per_round: int = 1
    outer_rounds: int = 10
    pretrain_epochs: int = 1
    learning_rate: float = 0.01
    momentum: float = 0.0
    weights: LossWeights = field(default_factory=LossWeights)
    attack_set: list = field(default_factory=lambda: [fgsm_config()])
    model_set: list = field(default_factory=list)  # ModelSpecs; empty means [defender]
    negative_mode: str = None
    seed: int = 0
    dtype: str = "float64"
    early_stop_tol: float = None
    probe_size: int = 32
    attack_batch_size: int = 128
    threads: int = 1

    def __post_init__(self):
        if self.batch_size < 2:
            raise TrainingConfigError("batch_size must be >= 2 (negative sampling needs two labels)")
        if self.outer_rounds < 1:
            raise TrainingConfigError("outer_rounds must be >= 1")
        if self.negative_mode is not None and self.negative_mode not in NEGATIVE_MODES:
            raise TrainingConfigError(f"unknown negative_mode {self.negative_mode!r}")


@dataclass
class RoundRecord:
    round: int
    clean_err: float
    attack_err: dict
    loss: float  # probe-batch objective
    loss_ce_clean: float
    loss_ce_adv: float
    loss_triplet: float
    fallback_count: int
    param_hash: str  # model the round's adversarials were generated against
    train_loss: float  # mean mini-batch objective over the round


@dataclass
class TrainingTrace:
    mode: str
    records: list = field(default_factory=list)
    probe: object = None  # (PairedBatch, neg_index) used for the probe losses
    initial: dict = None  # errors of the pretrained model before round 1

    def curve(self, key):
        if key == "clean":
            return [r.clean_err for r in self.records]
        return [r.attack_err[key] for r in self.records]

    def to_csv(self, path, attack_names=None):
        names = attack_names if attack_names is not None else (
            sorted(self.records[0].attack_err) if self.records else [])
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["round", "clean_err", *names, "loss_ce_clean", "loss_ce_adv",
                        "loss_triplet", "fallback_count"])
            for r in self.records:
                w.writerow([r.round, repr(r.clean_err), *(repr(r.attack_err[n]) for n in names),
                            repr(r.loss_ce_clean), repr(r.loss_ce_adv), repr(r.loss_triplet),
                            r.fallback_count])


# -- optimizer

def sgd_step(model, grads, lr):
    """theta <- theta - lr * grad, in place. ``grads`` maps names to arrays."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name}")
    for name, g in grads.items():
        p = model.params[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name} {p.shape}")
        p.data -= lr * g
    return model


class SGD:
    def __init__(self, model, lr, momentum=0.0):
        self.model = model
        self.lr = lr
        self.momentum = momentum
        self.velocity = {}

    def step(self, grads):
        if self.momentum == 0.0:
            return sgd_step(self.model, grads, self.lr)
        for name, g in grads.items():
            v = self.velocity.get(name)
            self.velocity[name] = g if v is None else self.momentum * v + g
        return sgd_step(self.model, self.velocity, self.lr)


def param_grads(model, loss):
    if not math.isfinite(float(loss.data)):
        raise NumericError(f"loss diverged ({float(loss.data)})")
    grads = backward(loss)
    return {name: grads[t] for name, t in model.params.items() if t in grads}


# -- losses used by the loop

def clean_loss(model, x, y, train=False, rng=None, logits=None):
    """Mean clean cross-entropy: sum / k."""
    if logits is None:
        logits = model.forward(x, train=train, rng=rng)
    return ops.scale(cross_entropy(ops.softmax(logits), y), 1.0 / len(y))


def default_host_loss(model, batch, logits):
    return clean_loss(model, batch.x, batch.y, logits=logits[0])


def _objective(mode, model, batch, neg_idx, cfg, host_loss, train, rng):
    """(total tensor, ce_clean, ce_adv, triplet) for one paired batch."""
    logits = pair_forward(model, batch, train, rng)
    if mode == "regularizer":
        host = host_loss(model, batch, logits)
        w = cfg.weights
        reg = triplet_regularizer(model, batch, neg_idx, w.lambda2, w.alpha, w.distance, logits=logits)
        terms = at2l_terms(model, batch, neg_idx, LossWeights(0.0, 1.0, w.alpha, w.distance), logits=logits)
        return ops.add(host, reg), terms
    if mode == "adv_train":
        # baseline objective alone: the triplet term is not built at all
        terms = at2l_terms(model, batch, None, cfg.weights, logits=logits)
        return terms.total, terms
    terms = at2l_terms(model, batch, neg_idx, cfg.weights, logits=logits)
    return terms.total, terms


# -- the shared loop

def _epoch_rng(seed, stream, epoch, *extra):
    return np.random.default_rng([seed, stream, epoch, *extra])


def _plain_epoch(model, opt, data, cfg, epoch_id):
    losses = []
    for step, idx in enumerate(batches(len(data), cfg.batch_size, _epoch_rng(cfg.seed, _BATCHES, epoch_id))):
        drop = _epoch_rng(cfg.seed, _DROPOUT, epoch_id, step)
        loss = clean_loss(model, data.x[idx], data.y[idx], train=True, rng=drop)
        opt.step(param_grads(model, loss))
        losses.append(float(loss.data))
    return float(np.mean(losses))


def pretrain(spec, data, cfg, epochs=None):
    """Plain training from a seeded initialization (the shared starting point)."""
    model = build_model(spec, cfg.seed, dtype=np.dtype(cfg.dtype))
    opt = SGD(model, cfg.learning_rate, cfg.momentum)
    for e in range(cfg.pretrain_epochs if epochs is None else epochs):
        _plain_epoch(model, opt, data, cfg, e)
    return model, opt


def static_models(specs, data, cfg, exclude):
    """Plainly trained models for the other structures in the model set."""
    out = {}
    for j, spec in enumerate(specs):
        if spec.name == exclude:
            continue
        sub = TrainConfig(**{**cfg.__dict__, "seed": int(np.random.default_rng([cfg.seed, _STATIC, j]).integers(2**31))})
        out[spec.name], _ = pretrain(spec, data, sub)
    return out


def _default_eval(eval_data, eval_attacks, batch_size=128):
    def fn(model):
        errs = {a.label: transfer_error(model, model, a, eval_data.x, eval_data.y, batch_size)[0]
                for a in eval_attacks}
        return error_rate(model, eval_data.x, eval_data.y), errs
    return fn


def train(spec, data, cfg, mode, *, host_loss=None, init_model=None, init_optimizer=None,
          eval_fn=None, eval_data=None, eval_attacks=(), statics=None, checkpoint_dir=None,
          on_round=None):
    """Run one of :data:`MODES` and return (model, trace).

    ``eval_fn(model) -> (clean_err, {attack: err})`` fills the per-round
    trace; without it, ``eval_data``/``eval_attacks`` give white-box errors.
    ``init_model`` skips pretraining (it is copied, not modified).
    """
    if mode not in MODES:
        raise TrainingConfigError(f"unknown training mode {mode!r}")
    adversarial = mode != "plain"
    if adversarial and not cfg.attack_set:
        raise TrainingConfigError("attack_set must not be empty")
    if mode in ("at2l", "ensemble_at2l", "regularizer") and cfg.negative_mode is None:
        raise TrainingConfigError("negative_mode is mandatory for triplet-based training")
    model_set = list(cfg.model_set) or [spec]
    if mode == "at2l" and [m.name for m in model_set] != [spec.name]:
        raise TrainingConfigError("single-model AT2L needs model_set == [defender spec]")
    host_loss = host_loss or default_host_loss
    if eval_fn is None and eval_data is not None:
        eval_fn = _default_eval(eval_data, eval_attacks, cfg.attack_batch_size)

    if init_model is not None:
        model = init_model.copy()
        opt = SGD(model, cfg.learning_rate, cfg.momentum)
        if init_optimizer is not None:
            opt.velocity = {k: v.copy() for k, v in init_optimizer.velocity.items()}
    else:
        model, opt = pretrain(spec, data, cfg)
    if adversarial and statics is None:
        statics = static_models(model_set, data, cfg, exclude=spec.name)

    trace = TrainingTrace(mode)
    if eval_fn is not None:
        clean0, errs0 = eval_fn(model)
        trace.initial = {"clean": clean0, **errs0}
    neg_mode = cfg.negative_mode or "multiclass_anylabel"
    probe = None
    cache = {}
    epoch_id = cfg.pretrain_epochs
    prev_probe = None
    for r in range(1, cfg.outer_rounds + 1):
        gen_hash = model.param_hash()
        fallbacks = 0
        losses = []
        if adversarial:
            pools = []
            for a in cfg.attack_set:
                for m in model_set:
                    if m.name == spec.name:
                        pools.append(generate(model, data.x, data.y, a, cfg.attack_batch_size, cfg.threads))
                    else:
                        key = (a.label, m.name)
                        if key not in cache:
                            cache[key] = generate(statics[m.name], data.x, data.y, a, cfg.attack_batch_size, cfg.threads)
                        pools.append(cache[key])
            adv_x = np.stack([p.adversarials for p in pools])
            adv_pred = np.stack([p.adversarial_predicted_labels for p in pools])
            if probe is None:
                probe = _make_probe(data, pools[0], cfg, neg_mode)
            for _ in range(cfg.epochs_per_round):
                order = batches(len(data), cfg.batch_size, _epoch_rng(cfg.seed, _BATCHES, epoch_id))
                pair_rng = _epoch_rng(cfg.seed, _PAIRS, epoch_id)
                neg_rng = _epoch_rng(cfg.seed, _NEGATIVES, epoch_id)
                for step, idx in enumerate(order):
                    pick = pair_rng.integers(len(pools), size=len(idx))
                    batch = PairedBatch(data.x[idx], adv_x[pick, idx], data.y[idx], adv_pred[pick, idx])
                    neg_idx, fb = sample_negative_indices(batch.y, batch.adv_pred, neg_mode, neg_rng)
                    fallbacks += fb
                    drop = _epoch_rng(cfg.seed, _DROPOUT, epoch_id, step)
                    total, _ = _objective(mode, model, batch, neg_idx, cfg, host_loss, True, drop)
                    opt.step(param_grads(model, total))
                    losses.append(float(total.data))
                epoch_id += 1
        else:
            for _ in range(cfg.epochs_per_round):
                losses.append(_plain_epoch(model, opt, data, cfg, epoch_id))
                epoch_id += 1

        parts = _probe_terms(mode, model, probe, cfg, host_loss, data)
        clean_err, errs = eval_fn(model) if eval_fn is not None else (float("nan"), {})
        trace.records.append(RoundRecord(
            round=r, clean_err=clean_err, attack_err=errs, loss=parts[0], loss_ce_clean=parts[1],
            loss_ce_adv=parts[2], loss_triplet=parts[3], fallback_count=fallbacks,
            param_hash=gen_hash, train_loss=float(np.mean(losses)),
        ))
        if checkpoint_dir is not None:
            path = pathlib.Path(checkpoint_dir)
            path.mkdir(parents=True, exist_ok=True)
            save_checkpoint(model, path / f"{mode}_round{r:03d}.ckpt", {"round": r, "mode": mode})
        if on_round is not None:
            on_round(r, model, trace)
        if cfg.early_stop_tol is not None and prev_probe is not None and prev_probe - parts[0] < cfg.early_stop_tol:
            break
        prev_probe = parts[0]
    trace.probe = probe
    return model, trace


def _make_probe(data, pool, cfg, neg_mode):
    n = min(cfg.probe_size, len(data))
    idx = np.arange(n)
    batch = PairedBatch(data.x[idx], pool.adversarials[idx], data.y[idx], pool.adversarial_predicted_labels[idx])
    neg_idx, _ = sample_negative_indices(batch.y, batch.adv_pred, neg_mode, np.random.default_rng([cfg.seed, _PROBE]))
    return batch, neg_idx


def probe_objective(mode, model, probe, cfg, host_loss=None):
    """Eval-mode objective on the fixed probe batch (total, ce_clean, ce_adv, triplet)."""
    batch, neg_idx = probe
    with no_grad():
        total, terms = _objective(mode, model, batch, neg_idx, cfg, host_loss or default_host_loss, False, None)
    return float(total.data), float(terms.ce_clean.data), float(terms.ce_adv.data), float(terms.triplet.data)


def _probe_terms(mode, model, probe, cfg, host_loss, data):
    if probe is None:
        n = min(cfg.probe_size, len(data))
        with no_grad():
            ce = float(clean_loss(model, data.x[:n], data.y[:n]).data)
        return ce, ce, float("nan"), float("nan")
    return probe_objective(mode, model, probe, cfg, host_loss)


def train_plain(spec, data, cfg, **kw):
    return train(spec, data, cfg, "plain", **kw)


def train_adversarial(spec, data, cfg, **kw):
    """Baseline adversarial training: the AT2L loop with lambda2 = 0."""
    return train(spec, data, cfg, "adv_train", **kw)


def train_at2l(spec, data, cfg, **kw):
    return train(spec, data, cfg, "at2l", **kw)


def train_ensemble_at2l(spec, data, cfg, **kw):
    return train(spec, data, cfg, "ensemble_at2l", **kw)


def train_with_regularizer(spec, data, host_loss, cfg, **kw):
    return train(spec, data, cfg, "regularizer", host_loss=host_loss, **kw)
