"""Run configuration: one JSON document, dotted ``--set`` overrides, three seeds."""
from __future__ import annotations

import copy
import json
from dataclasses import MISSING, fields
from pathlib import Path

from .augment import AugmentConfig
from .encoder import EncoderConfig
from .errors import ConfigError
from .pretext import PretextHyper
from .probe import FinetuneHyper, ProbeSpec

TASKS = ("rotnet", "deepcluster")
ABLATION_FLAGS = ("scale_crop", "rotation", "jitter")

# hyperparameter fields that are driven by the seeds / --threads instead
_PRETEXT_DERIVED = {"epoch_seed", "cluster_seed", "threads"}
_PROBE_DERIVED = {"seed", "tap"}
_FINETUNE_DERIVED = {"seed", "head_seed"}


def _field_defaults(cls, skip=()):
    out = {}
    for f in fields(cls):
        if f.name in skip:
            continue
        v = f.default_factory() if f.default is MISSING else f.default
        out[f.name] = list(v) if isinstance(v, tuple) else v
    return out


def default_config() -> dict:
    return {
        "seeds": {"data_seed": 0, "model_seed": 0, "epoch_seed": 0},
        "threads": 1,
        "data": {"sources": [], "d": 5000},
        "augment": AugmentConfig().to_dict(),
        "encoder": {"variant": "SmallAlexNet", "input_size": 32, "widths": None, "batchnorm": True},
        "pretext": {"task": "rotnet", **_field_defaults(PretextHyper, _PRETEXT_DERIVED)},
        "probe": {
            "checkpoint": None,
            "taps": None,
            "cifar_dir": None,
            "train_limit": None,
            "val_limit": None,
            "method": None,
            **_field_defaults(ProbeSpec, _PROBE_DERIVED),
        },
        "finetune": {
            "checkpoint": None,
            "k_frozen": 2,
            "cifar_dir": None,
            "train_limit": None,
            "val_limit": None,
            **_field_defaults(FinetuneHyper, _FINETUNE_DERIVED),
        },
        "out_dir": "runs/default",
    }


def _merge(base, update, prefix=""):
    for key, value in update.items():
        path = f"{prefix}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {path!r}")
        if isinstance(base[key], dict) and isinstance(value, dict):
            _merge(base[key], value, path + ".")
        else:
            base[key] = value


def parse_value(text):
    """JSON if it parses, otherwise the raw string."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(cfg: dict, assignment: str):
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not of the form key=value")
    key, raw = assignment.split("=", 1)
    parts = key.strip().split(".")
    node = cfg
    for i, p in enumerate(parts[:-1]):
        if not isinstance(node.get(p), dict):
            raise ConfigError(f"unknown config key {'.'.join(parts[: i + 1])!r}")
        node = node[p]
    if parts[-1] not in node:
        raise ConfigError(f"unknown config key {key.strip()!r}")
    node[parts[-1]] = parse_value(raw)


def load_config(path=None, overrides=()) -> dict:
    """Defaults, then the JSON file at ``path``, then ``key=value`` overrides."""
    cfg = default_config()
    if path is not None:
        with open(path) as f:
            try:
                data = json.load(f)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be an object")
        _merge(cfg, data)
    for o in overrides:
        apply_override(cfg, o)
    validate(cfg)
    return cfg


def validate(cfg: dict):
    """Build every typed section once so bad values fail before any compute."""
    try:
        _validate(cfg)
    except (TypeError, KeyError) as exc:
        raise ConfigError(f"malformed config value: {exc}") from exc


def _validate(cfg: dict):
    for name in ("data_seed", "model_seed", "epoch_seed"):
        if not isinstance(cfg["seeds"][name], int) or cfg["seeds"][name] < 0:
            raise ConfigError(f"seeds.{name} must be a nonnegative integer")
    if not isinstance(cfg["threads"], int) or cfg["threads"] < 1:
        raise ConfigError("threads must be a positive integer")
    if not isinstance(cfg["data"]["d"], int) or cfg["data"]["d"] < 1:
        raise ConfigError("data.d must be a positive integer")
    augment_config(cfg)
    encoder_config(cfg, 4)
    if cfg["pretext"]["task"] not in TASKS:
        raise ConfigError(f"pretext.task must be one of {TASKS}, got {cfg['pretext']['task']!r}")
    pretext_hyper(cfg)
    probe_spec(cfg, "conv1")
    finetune_hyper(cfg)


def augment_config(cfg) -> AugmentConfig:
    return AugmentConfig.from_dict(cfg["augment"])


def encoder_config(cfg, num_classes) -> EncoderConfig:
    e = cfg["encoder"]
    widths = tuple(e["widths"]) if e.get("widths") else None
    return EncoderConfig(e["variant"], int(e["input_size"]), widths, num_classes, bool(e["batchnorm"]))


def pretext_hyper(cfg) -> PretextHyper:
    p = {k: v for k, v in cfg["pretext"].items() if k != "task"}
    return PretextHyper(
        **p,
        epoch_seed=cfg["seeds"]["epoch_seed"],
        cluster_seed=cfg["seeds"]["model_seed"],
        threads=cfg["threads"],
    )


def probe_spec(cfg, tap) -> ProbeSpec:
    extra = {"checkpoint", "taps", "cifar_dir", "train_limit", "val_limit", "method"}
    p = {k: v for k, v in cfg["probe"].items() if k not in extra}
    return ProbeSpec(tap=tap, seed=cfg["seeds"]["epoch_seed"], **p)


def finetune_hyper(cfg) -> FinetuneHyper:
    extra = {"checkpoint", "k_frozen", "cifar_dir", "train_limit", "val_limit"}
    p = {k: v for k, v in cfg["finetune"].items() if k not in extra}
    return FinetuneHyper(seed=cfg["seeds"]["epoch_seed"], head_seed=cfg["seeds"]["model_seed"], **p)


def save_config(cfg: dict, path):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(cfg, f, indent=2, sort_keys=True)
        f.write("\n")


def ablation_name(flags: dict) -> str:
    return "scale{}_rot{}_jitter{}".format(*(int(bool(flags[k])) for k in ABLATION_FLAGS))


def ablation_matrix(cfg: dict):
    """The eight configs toggling scale crops, rotation and colour jitter."""
    out = []
    for scale in (0, 1):
        for rot in (0, 1):
            for jit in (0, 1):
                c = copy.deepcopy(cfg)
                c["augment"].update(scale_crop=bool(scale), rotation=bool(rot), jitter=bool(jit))
                out.append((ablation_name(c["augment"]), c))
    return out
