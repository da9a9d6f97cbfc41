"""Run configuration: a flat, sectioned key-value file with embedded defaults.

Files are TOML restricted to one level of ``[section]`` tables holding
scalars and flat lists. Any key left out falls back to the default; unknown
sections or keys and type mismatches are validation errors.
"""

from __future__ import annotations

import copy
import hashlib
import json
import sys
from importlib import resources
from pathlib import Path

from .errors import ValidationError
from .masks import BudgetConfig
from .models import ModelSpec
from .optim import OptimConfig
from .tuner import FreezeTuneConfig
from . import vocab

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

DEFAULTS: dict[str, dict] = {
    "tasks": {
        "base_domain": "gazette",
        "target_domain": "ledger",
        "base_per_cell": 1000,
        "target_per_cell": 100,
        "eval_fraction": 0.2,
        "base_seed": 1,
        "target_seed": 2,
        "base_eval_stride": 4,
        "max_answer_len": 40,
    },
    "model": {
        "kind": "seq_transducer",
        "model_dim": 32,
        "num_layers": 2,
        "num_heads": 4,
        "context_len": 80,
        "seed": 0,
    },
    "pretrain": {
        "learning_rate": 3e-3,
        "weight_decay": 0.05,
        "warmup_ratio": 0.03,
        "schedule": "cosine",
        "epochs": 6,
        "batch_size": 32,
        "seed": 0,
    },
    "finetune": {
        "learning_rate": 3e-3,
        "weight_decay": 0.05,
        "warmup_ratio": 0.03,
        "schedule": "cosine",
        "epochs": 3,
        "batch_size": 32,
    },
    "tuner": {
        "method": "lwaft",
        "alpha": 0.1,
        "freeze_rate": 0.99,
        "global_count": 0,
        "lora_rank": 2,
        "seed": 0,
    },
    "sweep": {
        "alpha_values": [0.05, 0.1, 0.25, 0.5, 1.0],
        "freeze_rate_values": [0.90, 0.95, 0.99, 0.999],
    },
}

PRESET_NAMES = ("toy", "paper-scale", "mixture")


def _check_type(section: str, key: str, value, default):
    where = f"{section}.{key}"
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif isinstance(default, str):
        ok = isinstance(value, str)
    elif isinstance(default, list):
        ok = isinstance(value, list) and all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in value)
        value = [float(x) for x in value] if ok else value
    elif isinstance(default, dict):
        ok = isinstance(value, dict) and all(isinstance(x, (int, float)) for x in value.values())
        value = {k: float(x) for k, x in value.items()} if ok else value
    else:
        ok = False
    if not ok:
        raise ValidationError(f"{where}: expected {type(default).__name__}, got {value!r}")
    return value


def merge(overrides: dict, base: dict | None = None) -> dict:
    """Defaults (or ``base``) updated with ``overrides``, type-checked."""
    out = copy.deepcopy(DEFAULTS if base is None else base)
    for section, values in overrides.items():
        if section == "domains":
            # optional mixture weights for the base suite
            out["domains"] = {k: _check_type("domains", k, v, 1.0) for k, v in values.items()}
            continue
        if section not in DEFAULTS:
            raise ValidationError(f"unknown config section [{section}]")
        if not isinstance(values, dict):
            raise ValidationError(f"[{section}] must be a table")
        for key, value in values.items():
            if key not in DEFAULTS[section]:
                raise ValidationError(f"unknown config key {section}.{key}")
            out[section][key] = _check_type(section, key, value, DEFAULTS[section][key])
    validate(out)
    return out


def validate(cfg: dict) -> None:
    model_spec(cfg)
    optim_config(cfg, "pretrain")
    optim_config(cfg, "finetune")
    tune_config(cfg)
    t = cfg["tasks"]
    for key in ("base_per_cell", "target_per_cell", "base_eval_stride", "max_answer_len"):
        if t[key] < 1:
            raise ValidationError(f"tasks.{key}: must be >= 1")
    for key in ("base_domain", "target_domain"):
        from .tasks import DOMAINS

        if t[key] not in DOMAINS:
            raise ValidationError(f"tasks.{key}: unknown domain {t[key]!r}")
    if t["base_domain"] == t["target_domain"]:
        raise ValidationError("tasks.target_domain: must differ from tasks.base_domain")
    if not 0.0 < t["eval_fraction"] < 1.0:
        raise ValidationError("tasks.eval_fraction: must be in (0, 1)")
    sw = cfg["sweep"]
    if not sw["alpha_values"] or not all(0 < a <= 1 for a in sw["alpha_values"]):
        raise ValidationError("sweep.alpha_values: need a non-empty list within (0, 1]")
    if not sw["freeze_rate_values"] or not all(0 <= f < 1 for f in sw["freeze_rate_values"]):
        raise ValidationError("sweep.freeze_rate_values: need a non-empty list within [0, 1)")


def load(path_or_preset: str | Path | None = None) -> dict:
    """Defaults, a preset name, or a config file path."""
    if path_or_preset is None or str(path_or_preset) == "toy":
        return merge({})
    if str(path_or_preset) in PRESET_NAMES:
        text = resources.files("lwaft").joinpath("presets", f"{path_or_preset}.toml").read_text("utf-8")
        return merge(loads(text))
    path = Path(path_or_preset)
    if not path.is_file():
        raise ValidationError(f"config file not found: {path}")
    return merge(loads(path.read_text("utf-8")))


def loads(text: str) -> dict:
    try:
        return tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ValidationError(f"config does not parse: {exc}") from None


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, str):
        return json.dumps(value)
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, list):
        return "[" + ", ".join(_fmt(v) for v in value) + "]"
    return str(value)


def dumps(cfg: dict) -> str:
    lines = []
    for section, values in cfg.items():
        if lines:
            lines.append("")
        lines.append(f"[{section}]")
        for key, value in values.items():
            name = key if key.replace("_", "").replace("-", "").isalnum() else json.dumps(key)
            lines.append(f"{name} = {_fmt(value)}")
    return "\n".join(lines) + "\n"


def digest(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:16]


def model_spec(cfg: dict) -> ModelSpec:
    m = cfg["model"]
    return ModelSpec(kind=m["kind"], vocab_size=vocab.SIZE, model_dim=m["model_dim"], num_layers=m["num_layers"],
                     num_heads=m["num_heads"], context_len=m["context_len"], seed=m["seed"])


def optim_config(cfg: dict, section: str) -> OptimConfig:
    o = cfg[section]
    return OptimConfig(learning_rate=o["learning_rate"], weight_decay=o["weight_decay"],
                       warmup_ratio=o["warmup_ratio"], schedule=o["schedule"], epochs=o["epochs"],
                       batch_size=o["batch_size"])


def budget_config(cfg: dict) -> BudgetConfig:
    t = cfg["tuner"]
    if t["global_count"] > 0:
        return BudgetConfig(global_count=t["global_count"])
    return BudgetConfig(freeze_rate=t["freeze_rate"])


def tune_config(cfg: dict, **overrides) -> FreezeTuneConfig:
    t = cfg["tuner"]
    out = FreezeTuneConfig(alpha=t["alpha"], budget=budget_config(cfg), method=t["method"], lora_rank=t["lora_rank"],
                           optim=optim_config(cfg, "finetune"), seed=t["seed"])
    return out.with_(**overrides) if overrides else out
