"""Command-line entry point: ``at2l {train,attack,eval,experiment,plot}``.

Exit codes: 0 success, 1 config error, 2 numeric failure, 3 I/O error.
"""

import argparse
import logging
import pathlib
import sys

from threadpoolctl import threadpool_limits

from ..attacks import AdversarialBatch, generate
from ..data import IDXError, load_mnist_idx
from ..models import load_checkpoint, save_checkpoint
from ..training import NumericError, TrainingConfigError, train
from . import config as config_mod
from .config import ConfigError, parse_attack
from .experiment import EvalReport, evaluate, evaluate_saved, load_data, run_experiment
from .plots import emit_plots

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3
log = logging.getLogger("at2l")


def _load_config(args):
    overrides = {"experiment": {}}
    if args.seed is not None:
        overrides["experiment"]["seed"] = args.seed
    if args.threads is not None:
        overrides["experiment"]["threads"] = args.threads
    if args.config is None:
        return config_mod.loads("", overrides=overrides)
    return config_mod.load(args.config, overrides=overrides)


def _out(args, cfg=None):
    path = pathlib.Path(args.out or (cfg.out_dir if cfg else "."))
    path.mkdir(parents=True, exist_ok=True)
    return path


def cmd_train(args):
    cfg = _load_config(args)
    mode = args.mode or cfg.modes[0]
    train_ds, test_ds = load_data(cfg)
    out = _out(args, cfg)
    model, trace = train(cfg.defender, train_ds, cfg.train, mode, checkpoint_dir=out / "checkpoints",
                         eval_data=test_ds, eval_attacks=[e.attack for e in cfg.evaluation],
                         on_round=lambda r, m, t: log.info("round %d: clean error %.2f%%", r, t.records[-1].clean_err))
    save_checkpoint(model, out / f"{mode}_final.ckpt", {"mode": mode, "config_hash": cfg.hash})
    trace.to_csv(out / f"trace_{mode}.csv", [e.attack.label for e in cfg.evaluation])
    print(out / f"{mode}_final.ckpt")


def _dataset(args):
    if args.images:
        return load_mnist_idx(args.images, args.labels, "test")
    _, test = load_data(_load_config(args))
    return test


def cmd_attack(args):
    model = load_checkpoint(args.checkpoint)
    ds = _dataset(args)
    if args.limit:
        ds = ds.head(args.limit)
    batch = generate(model, ds.x, ds.y, parse_attack(args.attack), threads=args.threads or 1)
    batch.save(args.output)
    print(f"{args.output}: {len(batch)} examples, {int(batch.failed.sum())} failed")


def cmd_eval(args):
    defender = load_checkpoint(args.checkpoint)
    if args.adversarials:
        rate = evaluate_saved(defender, AdversarialBatch.load(args.adversarials))
    else:
        if not args.attack:
            raise ConfigError("eval needs --adversarials or --attack")
        ds = _dataset(args)
        if args.limit:
            ds = ds.head(args.limit)
        attacker = load_checkpoint(args.attacker) if args.attacker else defender
        rate, _ = evaluate(defender, attacker, parse_attack(args.attack), ds, threads=args.threads or 1)
    print(f"error_rate={rate!r}")


def cmd_experiment(args):
    cfg = _load_config(args)
    report = run_experiment(cfg, _out(args, cfg), log=log.info)
    for mode, res in report.modes.items():
        rates = " ".join(f"{k}={v:.2f}" for k, v in res.rates.items())
        print(f"{mode}: clean={res.clean_err:.2f} {rates}")


def cmd_plot(args):
    report = EvalReport.load(args.report)
    for path in emit_plots(report, _out(args)):
        print(path)


def build_parser():
    p = argparse.ArgumentParser(prog="at2l", description="Adversarial training with triplet loss.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", help="experiment config file")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--threads", type=int)

    sp = sub.add_parser("train", help="config -> checkpoint + trace")
    common(sp)
    sp.add_argument("--mode", help="training mode (default: first of [experiment] modes)")
    sp.set_defaults(fn=cmd_train)

    for name, fn, help_ in (("attack", cmd_attack, "checkpoint + dataset -> adversarial batch"),
                            ("eval", cmd_eval, "defender + adversarials or attack -> error rate")):
        sp = sub.add_parser(name, help=help_)
        common(sp)
        sp.add_argument("--checkpoint", required=True)
        sp.add_argument("--images", help="IDX images (default: [data] test split of --config)")
        sp.add_argument("--labels")
        sp.add_argument("--attack", help="e.g. 'FGSM(epsilon=0.3)'", required=name == "attack")
        sp.add_argument("--limit", type=int, default=0)
        if name == "attack":
            sp.add_argument("--output", required=True)
        else:
            sp.add_argument("--adversarials", help="saved adversarial batch file")
            sp.add_argument("--attacker", help="attack-source checkpoint (default: the defender)")
        sp.set_defaults(fn=fn)

    sp = sub.add_parser("experiment", help="full config -> report")
    common(sp)
    sp.set_defaults(fn=cmd_experiment)

    sp = sub.add_parser("plot", help="report -> figures")
    common(sp, config=False)
    sp.add_argument("--report", required=True)
    sp.set_defaults(fn=cmd_plot)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    threads = getattr(args, "threads", None) or 1
    try:
        # one BLAS thread per worker keeps single-threaded runs reproducible
        with threadpool_limits(limits=1 if threads == 1 else None):
            args.fn(args)
    except (ConfigError, TrainingConfigError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, IDXError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
