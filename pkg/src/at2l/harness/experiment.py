"""End-to-end runs: train every configured mode, evaluate the attack list
after each outer round, and write checkpoints, traces, adversarial batches,
a JSON report and plots into the output directory.
"""

import json
import pathlib
import zlib
from dataclasses import asdict, dataclass, field

import numpy as np

from ..attacks import AdversarialBatch, error_rate, generate
from ..data import Dataset, load_mnist_idx, synthetic_2d
from ..models import load_checkpoint, save_checkpoint
from ..training import NumericError, pretrain, static_models, train
from .config import ConfigError

REPORT_NAME = "report.json"
_SOURCE_STREAM = 8


@dataclass
class ModeResult:
    clean_err: float
    rates: dict  # entry key -> final error percent
    curve: dict  # entry key -> error per outer round
    clean_curve: list
    initial: dict
    fallback_total: int
    checkpoint: str


@dataclass
class EvalReport:
    name: str
    config_hash: str
    seed: int
    train_size: int
    eval_size: int
    outer_rounds: int
    entries: list
    modes: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)
    status: str = "complete"

    def __post_init__(self):
        for mode, res in self.modes.items():
            if isinstance(res, dict):
                self.modes[mode] = ModeResult(**res)

    def check(self):
        for mode, res in self.modes.items():
            for v in [res.clean_err, *res.rates.values(), *(x for c in res.curve.values() for x in c)]:
                if not 0.0 <= v <= 100.0:
                    raise ValueError(f"{mode}: rate {v} outside [0, 100]")
            if self.status == "complete" and any(len(c) != self.outer_rounds for c in res.curve.values()):
                raise ValueError(f"{mode}: curve length differs from outer_rounds={self.outer_rounds}")

    def to_json(self):
        return json.dumps(asdict(self), indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        return cls(**json.loads(text))

    def save(self, path):
        pathlib.Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def load(cls, path):
        return cls.from_json(pathlib.Path(path).read_text())


def load_data(cfg):
    """(train, test) datasets per the [data] section."""
    d = cfg.data
    if d["source"] == "synthetic":
        n = int(d["n"])
        full = synthetic_2d(d["synthetic_kind"], n, float(d["noise"]), int(d["seed"]))
        n_test = int(round(n * float(d["test_fraction"])))
        train_ds = full.subset(np.arange(n - n_test), "train")
        test_ds = full.subset(np.arange(n - n_test, n), "test")
    else:
        train_ds = load_mnist_idx(d["train_images"], d["train_labels"], "train")
        test_ds = load_mnist_idx(d["test_images"], d["test_labels"], "test")
    if int(d["train_size"]):
        train_ds = train_ds.head(int(d["train_size"]))
    if int(d["test_size"]):
        test_ds = test_ds.head(int(d["test_size"]))
    if cfg.eval_size:
        test_ds = test_ds.head(cfg.eval_size)
    dtype = np.dtype(cfg.train.dtype)
    cast = lambda ds: Dataset(ds.x.astype(dtype), ds.y, ds.num_classes, ds.split)  # noqa: E731
    return cast(train_ds), cast(test_ds)


def evaluate(defender, attacker, attack, test, batch_size=128, threads=1):
    """Percent of ``test`` the defender gets wrong on adversarials crafted
    against ``attacker`` (pass the defender itself for white-box)."""
    if len(test) == 0:
        raise ValueError("evaluate: empty test set")
    batch = generate(attacker, test.x, test.y, attack, batch_size, threads)
    return error_rate(defender, batch.adversarials.astype(defender.dtype), test.y), batch


def evaluate_saved(defender, batch):
    """Recompute an error rate from a stored adversarial batch."""
    return error_rate(defender, batch.adversarials.astype(defender.dtype), batch.true_labels)


class SourceModels:
    """Attack-source models, trained plainly once and shared across modes."""

    def __init__(self, cfg, train_data, specs):
        self.cfg, self.data = cfg, train_data
        self.specs = {s.name: s for s in specs}
        self.models = {}

    def add_statics(self, statics):
        self.models.update(statics)

    def get(self, name):
        if name not in self.models:
            spec = self.specs[name]
            seed = int(np.random.default_rng([self.cfg.train.seed, _SOURCE_STREAM, zlib.crc32(name.encode())]).integers(2**31))
            tc = self.cfg.train
            sub = type(tc)(**{**tc.__dict__, "seed": seed})
            self.models[name], _ = pretrain(spec, self.data, sub)
        return self.models[name]


def _entry_specs(cfg):
    from .config import _model_spec

    return [_model_spec(e.source, cfg.sections) for e in cfg.evaluation if e.source != "defender"]


def run_experiment(cfg, out_dir=None, log=None):
    """Train each mode in ``cfg.modes``, evaluate, and write all artifacts."""
    from .plots import emit_plots

    out = pathlib.Path(out_dir or cfg.out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.ini").write_text(cfg.canonical())
    except OSError as exc:
        raise OSError(f"cannot write output directory {out}: {exc}") from exc
    log = log or (lambda msg: None)
    train_ds, test_ds = load_data(cfg)
    tc = cfg.train
    report = EvalReport(
        name=cfg.name, config_hash=cfg.hash, seed=cfg.seed, train_size=len(train_ds), eval_size=len(test_ds),
        outer_rounds=tc.outer_rounds, entries=[e.key for e in cfg.evaluation],
        meta={"cw_max_iterations": {e.key: e.attack.cw.max_iterations for e in cfg.evaluation if e.attack.family == "CW"},
              "dtype": tc.dtype, "threads": cfg.threads},
    )
    specs = list(tc.model_set) + _entry_specs(cfg)
    sources = SourceModels(cfg, train_ds, specs)
    needs_statics = any(m != "plain" for m in cfg.modes) or any(
        e.source not in ("defender", cfg.defender.name) for e in cfg.evaluation)
    if needs_statics:
        sources.add_statics(static_models(tc.model_set, train_ds, tc, exclude=cfg.defender.name))
    try:
        for mode in cfg.modes:
            log(f"[{mode}] training {cfg.defender.name} for {tc.outer_rounds} rounds")
            last = {}

            def eval_fn(model, _last=last):
                rates = {}
                for e in cfg.evaluation:
                    attacker = model if e.source == "defender" else sources.get(e.source)
                    rates[e.key], _last[e.key] = evaluate(model, attacker, e.attack, test_ds, cfg.eval_batch_size, cfg.threads)
                return error_rate(model, test_ds.x, test_ds.y), rates

            def on_round(r, model, trace, _mode=mode):
                rec = trace.records[-1]
                log(f"[{_mode}] round {r}: clean {rec.clean_err:.2f}% "
                    + " ".join(f"{k} {v:.2f}%" for k, v in rec.attack_err.items()))

            ckpt_dir = out / "checkpoints" / mode
            model, trace = train(cfg.defender, train_ds, tc, mode, eval_fn=eval_fn, statics=sources.models,
                                 checkpoint_dir=ckpt_dir, on_round=on_round)
            final = out / f"{mode}_final.ckpt"
            save_checkpoint(model, final, {"mode": mode, "config_hash": cfg.hash})
            trace.to_csv(out / f"trace_{mode}.csv", [e.key for e in cfg.evaluation])
            adv_dir = out / "adversarials" / mode
            adv_dir.mkdir(parents=True, exist_ok=True)
            for i, e in enumerate(cfg.evaluation):
                last[e.key].save(adv_dir / f"entry{i}.adv")
            rec = trace.records[-1]
            report.modes[mode] = ModeResult(
                clean_err=rec.clean_err, rates=dict(rec.attack_err),
                curve={e.key: trace.curve(e.key) for e in cfg.evaluation},
                clean_curve=trace.curve("clean"), initial=trace.initial,
                fallback_total=int(sum(r.fallback_count for r in trace.records)),
                checkpoint=final.name,
            )
            report.save(out / REPORT_NAME)
    except (NumericError, ConfigError, OSError) as exc:
        report.status = f"aborted: {exc}"
        report.save(out / REPORT_NAME)
        raise
    report.check()
    report.save(out / REPORT_NAME)
    emit_plots(report, out / "plots")
    return report


def recompute_rates(out_dir):
    """{mode: {entry: rate}} rebuilt from the saved checkpoints and batches."""
    out = pathlib.Path(out_dir)
    report = EvalReport.load(out / REPORT_NAME)
    rates = {}
    for mode, res in report.modes.items():
        model = load_checkpoint(out / res.checkpoint)
        rates[mode] = {key: evaluate_saved(model, AdversarialBatch.load(out / "adversarials" / mode / f"entry{i}.adv"))
                       for i, key in enumerate(report.entries)}
    return rates
