"""INI run configuration shared by every CLI verb.

Sections and keys::

    [run]     seed                      (overridden by $TSNAT_SEED)
    [task]    TaskConfig fields, n_train, n_dev
    [model]   preset, then any ModelConfig field as an override
    [train]   TrainConfig fields except seed
    [decode]  mode, DecodeConfig fields
    [paths]   corpus, dev_corpus, out_dir   (relative to the config file)

Unknown sections or keys are rejected.  Values are parsed according to the
type of the field's default.
"""

from __future__ import annotations

import configparser
import dataclasses
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

from .corpus import TaskConfig
from .inference import DecodeConfig
from .model import PRESETS, ModelConfig, preset
from .training import TrainConfig

SEED_ENV = "TSNAT_SEED"
DECODE_MODES = ("greedy", "twostep", "arbeam")


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending ``section.key``."""


@dataclass
class Paths:
    corpus: Path = Path("train.corpus")
    dev_corpus: Path = Path("dev.corpus")
    out_dir: Path = Path("exp")


@dataclass
class RunConfig:
    seed: int = 0
    task: TaskConfig = field(default_factory=TaskConfig)
    n_train: int = 2000
    n_dev: int = 200
    model_preset: str = "TSNAT-Toy"
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    decode: DecodeConfig = field(default_factory=DecodeConfig)
    mode: str = "twostep"
    paths: Paths = field(default_factory=Paths)


def _parse(section: str, key: str, raw: str, default):
    where = f"{section}.{key}"
    try:
        if default is None:
            return None if raw.strip().lower() in ("", "none") else int(raw)
        if isinstance(default, bool):
            return configparser.ConfigParser.BOOLEAN_STATES[raw.strip().lower()]
        if isinstance(default, Path):
            return Path(raw.strip())
        return type(default)(raw.strip())
    except (KeyError, ValueError):
        raise ConfigError(f"{where}: cannot parse {raw!r} as {type(default).__name__}") from None


def _defaults(obj, skip=()) -> dict:
    return {f.name: getattr(obj, f.name) for f in dataclasses.fields(obj) if f.name not in skip}


def _overrides(cp, section: str, defaults: dict) -> dict:
    if not cp.has_section(section):
        return {}
    out = {}
    for key, raw in cp.items(section):
        if key not in defaults:
            raise ConfigError(f"{section}.{key}: unknown key (expected one of {', '.join(sorted(defaults))})")
        out[key] = _parse(section, key, raw, defaults[key])
    return out


def _build(section: str, cls, values: dict):
    try:
        return cls(**values)
    except ValueError as err:
        raise ConfigError(f"[{section}] {err}") from None


def parse_config(text: str, base_dir: Path = Path("."), env: Optional[dict] = None) -> RunConfig:
    env = os.environ if env is None else env
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        cp.read_string(text)
    except configparser.Error as err:
        raise ConfigError(f"malformed config: {err}") from None

    known = {"run", "task", "model", "train", "decode", "paths"}
    for s in cp.sections():
        if s not in known:
            raise ConfigError(f"{s}: unknown section")

    seed = _overrides(cp, "run", {"seed": 0}).get("seed", 0)
    if env.get(SEED_ENV):
        seed = _parse("env", SEED_ENV, env[SEED_ENV], 0)

    task_vals = _overrides(cp, "task", {**_defaults(TaskConfig()), "n_train": 2000, "n_dev": 200})
    n_train = task_vals.pop("n_train", 2000)
    n_dev = task_vals.pop("n_dev", 200)
    if n_train < 1 or n_dev < 1:
        raise ConfigError("task.n_train and task.n_dev must be >= 1")
    task = _build("task", TaskConfig, task_vals)

    model_vals = _overrides(cp, "model", {**_defaults(ModelConfig()), "preset": "TSNAT-Toy"})
    name = model_vals.pop("preset", "TSNAT-Toy")
    if name not in PRESETS:
        raise ConfigError(f"model.preset: unknown preset {name!r} (choose from {', '.join(PRESETS)})")
    try:
        model = preset(name, **model_vals)
    except ValueError as err:
        raise ConfigError(f"[model] {err}") from None

    train = _build("train", TrainConfig, {**_overrides(cp, "train", _defaults(TrainConfig(), skip=("seed",))), "seed": seed})

    dec_vals = _overrides(cp, "decode", {**_defaults(DecodeConfig()), "mode": "twostep"})
    mode = dec_vals.pop("mode", "twostep")
    if mode not in DECODE_MODES:
        raise ConfigError(f"decode.mode: expected one of {', '.join(DECODE_MODES)}, got {mode!r}")
    decode = _build("decode", DecodeConfig, dec_vals)

    paths = replace(Paths(), **_overrides(cp, "paths", _defaults(Paths())))
    paths = Paths(*(p if p.is_absolute() else base_dir / p for p in (paths.corpus, paths.dev_corpus, paths.out_dir)))
    return RunConfig(seed, task, n_train, n_dev, name, model, train, decode, mode, paths)


def load_config(path, env: Optional[dict] = None) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    return parse_config(text, path.parent, env)
