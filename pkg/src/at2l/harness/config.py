"""Experiment configs: INI-style sections of key = value pairs.

Serialization is canonical (sections and keys sorted, values normalized), so
the config hash is stable across reformatting. Any key can be overridden
from the environment as ``AT2L_<SECTION>__<KEY>``.
"""

import configparser
import hashlib
import os
import re
from dataclasses import dataclass, field

from ..attacks import FAMILIES, attack_from_params
from ..models import ModelSpec, mlp_spec, zoo_spec
from ..training import MODES, TrainConfig
from ..triplet import NEGATIVE_MODES, LossWeights

ENV_PREFIX = "AT2L_"
SCENARIOS = ("known", "unknown")


class ConfigError(ValueError):
    pass


DEFAULTS = {
    "experiment": {"name": "experiment", "seed": "0", "modes": "plain", "threads": "1", "out_dir": "runs"},
    "data": {"source": "idx", "train_size": "0", "test_size": "0", "seed": "0",
             "train_images": "data/mnist5k/train-images-idx3-ubyte.gz",
             "train_labels": "data/mnist5k/train-labels-idx1-ubyte.gz",
             "test_images": "data/mnist5k/t10k-images-idx3-ubyte.gz",
             "test_labels": "data/mnist5k/t10k-labels-idx1-ubyte.gz",
             "synthetic_kind": "four_gaussians", "n": "2000", "noise": "0.4", "test_fraction": "0.5"},
    "model": {"defender": "A", "dtype": "float64"},
    "train": {"batch_size": "32", "epochs_per_round": "1", "outer_rounds": "10", "pretrain_epochs": "1",
              "learning_rate": "0.01", "momentum": "0.0", "lambda1": "0.3", "lambda2": "1.0",
              "alpha": "1.0", "distance": "linf", "negative_mode": "", "attacks": "FGSM(epsilon=0.3)",
              "model_set": "", "early_stop_tol": "", "attack_batch_size": "128", "probe_size": "32"},
    "eval": {"attacks": "FGSM(epsilon=0.3)@defender/known", "size": "0", "cw_max_iterations": "200",
             "batch_size": "128"},
}


def _normalize(text):
    return ", ".join(p.strip() for p in text.split(",")) if "(" not in text else re.sub(r"\s+", " ", text.strip())


def canonical(sections):
    lines = []
    for name in sorted(sections):
        lines.append(f"[{name}]")
        for key in sorted(sections[name]):
            lines.append(f"{key} = {sections[name][key]}")
        lines.append("")
    return "\n".join(lines)


def config_hash(sections):
    return hashlib.sha256(canonical(sections).encode()).hexdigest()[:16]


def parse_text(text, env=None):
    """Raw text -> {section: {key: value}} with defaults and env overrides."""
    cp = configparser.ConfigParser(interpolation=None, delimiters=("=",), comment_prefixes=("#", ";"))
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    sections = {name: dict(values) for name, values in DEFAULTS.items()}
    for name in cp.sections():
        if name not in DEFAULTS:
            raise ConfigError(f"unknown section [{name}]")
        for key, value in cp.items(name):
            if key not in DEFAULTS[name]:
                raise ConfigError(f"unknown key {key!r} in [{name}]")
            sections[name][key] = value
    env = os.environ if env is None else env
    for var, value in env.items():
        if not var.startswith(ENV_PREFIX) or "__" not in var:
            continue
        section, key = var[len(ENV_PREFIX):].lower().split("__", 1)
        if section not in DEFAULTS or key not in DEFAULTS[section]:
            raise ConfigError(f"environment override {var} names no config key")
        sections[section][key] = value
    for values in sections.values():
        for key in values:
            values[key] = _normalize(values[key])
    return sections


# -- attack and model strings

_ATTACK_RE = re.compile(r"^\s*([A-Za-z_\-]+)\s*(?:\((.*)\))?\s*$")


def parse_attack(text):
    """``FGSM(epsilon=0.1)``, ``I_FGSM(epsilon=0.3, steps=10)``, ``CW(cw.max_iterations=200)``."""
    m = _ATTACK_RE.match(text)
    if not m:
        raise ConfigError(f"cannot parse attack {text!r}")
    params = {"family": m.group(1).upper().replace("-", "_")}
    if params["family"] not in FAMILIES:
        raise ConfigError(f"unknown attack family in {text!r}")
    for item in filter(None, (s.strip() for s in (m.group(2) or "").split(","))):
        if "=" not in item:
            raise ConfigError(f"attack argument {item!r} is not key=value")
        k, v = (s.strip() for s in item.split("=", 1))
        params[k] = v
    try:
        return attack_from_params(params)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad attack {text!r}: {exc}") from exc


def split_list(text):
    """Split on commas that are not inside parentheses."""
    out, depth, cur = [], 0, ""
    for ch in text:
        depth += ch == "("
        depth -= ch == ")"
        if ch == "," and depth == 0:
            out.append(cur.strip())
            cur = ""
        else:
            cur += ch
    if cur.strip():
        out.append(cur.strip())
    return out


def parse_model(text):
    """A zoo name (``A``..``D``) or ``mlp:32 32`` for small dense nets."""
    text = text.strip()
    if text.startswith("mlp"):
        return text
    try:
        return zoo_spec(text)
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"unknown model {text!r}") from exc


@dataclass
class EvalEntry:
    attack: object
    source: str
    scenario: str

    @property
    def key(self):
        return f"{self.attack.label}@{self.source}/{self.scenario}"


@dataclass
class ExperimentConfig:
    sections: dict
    name: str
    seed: int
    modes: list
    threads: int
    out_dir: str
    data: dict
    defender: object  # ModelSpec
    train: TrainConfig
    evaluation: list = field(default_factory=list)
    eval_size: int = 0
    eval_batch_size: int = 128

    @property
    def hash(self):
        return config_hash(self.sections)

    def canonical(self):
        return canonical(self.sections)


def _num(sections, section, key, kind):
    raw = sections[section][key]
    try:
        return kind(raw)
    except ValueError as exc:
        raise ConfigError(f"[{section}] {key} = {raw!r} is not a valid {kind.__name__}") from exc


def _model_spec(name, sections):
    spec = parse_model(name)
    if isinstance(spec, ModelSpec):
        return spec
    hidden = [int(h) for h in spec.split(":", 1)[1].split()] if ":" in spec else [32, 32]
    data = sections["data"]
    num_classes = {"two_gaussians": 2, "xor": 2, "four_gaussians": 4}.get(data["synthetic_kind"], 4)
    return mlp_spec(spec.replace(":", "_").replace(" ", "_"), hidden, num_classes=num_classes)


def build(sections):
    """Validate raw sections and assemble an :class:`ExperimentConfig`."""
    ex, tr, ev = sections["experiment"], sections["train"], sections["eval"]
    modes = split_list(ex["modes"])
    for m in modes:
        if m not in MODES:
            raise ConfigError(f"unknown training mode {m!r}")
    if not modes:
        raise ConfigError("[experiment] modes is empty")
    # mlp hidden sizes are written "mlp:32 32" so the list syntax stays unambiguous
    defender = _model_spec(sections["model"]["defender"], sections)
    model_set = [_model_spec(n, sections) for n in split_list(tr["model_set"])] or [defender]
    neg = tr["negative_mode"] or None
    if neg is not None and neg not in NEGATIVE_MODES:
        raise ConfigError(f"unknown negative_mode {neg!r}")
    if any(m in ("at2l", "ensemble_at2l", "regularizer") for m in modes) and neg is None:
        raise ConfigError("[train] negative_mode is mandatory for triplet-based modes")
    try:
        weights = LossWeights(_num(sections, "train", "lambda1", float), _num(sections, "train", "lambda2", float),
                              _num(sections, "train", "alpha", float), tr["distance"])
        cfg = TrainConfig(
            batch_size=_num(sections, "train", "batch_size", int),
            epochs_per_round=_num(sections, "train", "epochs_per_round", int),
            outer_rounds=_num(sections, "train", "outer_rounds", int),
            pretrain_epochs=_num(sections, "train", "pretrain_epochs", int),
            learning_rate=_num(sections, "train", "learning_rate", float),
            momentum=_num(sections, "train", "momentum", float),
            weights=weights,
            attack_set=[parse_attack(a) for a in split_list(tr["attacks"])],
            model_set=model_set,
            negative_mode=neg,
            seed=_num(sections, "experiment", "seed", int),
            dtype=sections["model"]["dtype"],
            early_stop_tol=float(tr["early_stop_tol"]) if tr["early_stop_tol"] else None,
            probe_size=_num(sections, "train", "probe_size", int),
            attack_batch_size=_num(sections, "train", "attack_batch_size", int),
            threads=_num(sections, "experiment", "threads", int),
        )
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc
    if cfg.dtype not in ("float32", "float64"):
        raise ConfigError(f"[model] dtype must be float32 or float64, got {cfg.dtype!r}")
    set_names = {m.name for m in model_set}
    entries = []
    cw_cap = _num(sections, "eval", "cw_max_iterations", int)
    for item in split_list(ev["attacks"]):
        try:
            attack_text, rest = item.rsplit("@", 1)
            source, scenario = (s.strip() for s in rest.split("/", 1))
        except ValueError as exc:
            raise ConfigError(f"eval entry {item!r} must look like ATTACK@SOURCE/SCENARIO") from exc
        attack = parse_attack(attack_text)
        if attack.family == "CW" and "max_iterations" not in attack_text:
            attack = attack_from_params({**attack.params(), "cw.max_iterations": cw_cap})
        if scenario not in SCENARIOS:
            raise ConfigError(f"unknown scenario {scenario!r} in {item!r}")
        name = defender.name if source == "defender" else _model_spec(source, sections).name
        inside = name == defender.name or name in set_names
        if scenario == "known" and not inside:
            raise ConfigError(f"known-type entry {item!r}: source {name} is not in the model set")
        if scenario == "unknown" and inside:
            raise ConfigError(f"unknown-type entry {item!r}: source {name} is in the model set")
        entries.append(EvalEntry(attack, name if source != "defender" else "defender", scenario))
    if sections["data"]["source"] not in ("idx", "synthetic"):
        raise ConfigError("[data] source must be idx or synthetic")
    return ExperimentConfig(
        sections=sections, name=ex["name"], seed=cfg.seed, modes=modes, threads=cfg.threads,
        out_dir=ex["out_dir"], data=dict(sections["data"]), defender=defender, train=cfg,
        evaluation=entries, eval_size=_num(sections, "eval", "size", int),
        eval_batch_size=_num(sections, "eval", "batch_size", int),
    )


def load(path, env=None, overrides=None):
    """Read, apply env and explicit ``{section: {key: value}}`` overrides, validate."""
    try:
        with open(path) as fh:
            text = fh.read()
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    return loads(text, env, overrides)


def loads(text, env=None, overrides=None):
    sections = parse_text(text, env)
    for section, values in (overrides or {}).items():
        for key, value in values.items():
            sections[section][key] = _normalize(str(value))
    return build(sections)
