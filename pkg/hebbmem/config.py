#==========================================================
# ExperimentConfig, PRESETS
# default_preset, config_issues, resolve_config
#==========================================================

from __future__ import annotations

#------------------Standard Library-------------------
import dataclasses
import logging
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Mapping, Optional, Sequence

#------------------Third-Party-------------------
import yaml
from platformdirs import user_config_dir

#------------------Local-------------------
from .concentration.ppo import PpoConfig
from .conversion import ConversionConfig
from .errors import ArgumentError, ConfigError
from .model import ModelConfig
from .tasks import AssociationTaskConfig
from .training import TrainConfig

logger = logging.getLogger(__name__)

TASKS = ("assoc", "ood", "rl", "convert-demo", "gradcheck")
SECTIONS = ("model", "train", "assoc", "ppo", "conversion")
OOD_LABEL_RANGE = 30
ROLLOUT_BY_PAIRS = {2: 10, 3: 100}
_WORD_BOOLEANS = ("yes", "no", "on", "off")

# Full-scale vs desk-scale hyperparameters; anything not named keeps its default.
PRESETS: dict[str, dict[str, dict[str, Any]]] = {
    "full": {
        "train": {"batch_size": 512, "iterations": 4250, "micro_batch": 16, "eval_every": 100, "eval_episodes": 1000},
        "ppo": {"n_envs": 64, "iterations": 4000, "minibatches": 16},
    },
    "desk": {
        "train": {"batch_size": 64, "iterations": 1500, "micro_batch": 8},
        "ppo": {"n_envs": 16, "iterations": 500, "minibatches": 4},
    },
}


#------------------User defaults-------------------
def _read_user_preset() -> Optional[str]:
    # <user_config_dir>/hebbmem/config.yaml  ->  preset: full
    cfg = Path(user_config_dir("hebbmem")) / "config.yaml"
    if cfg.is_file():
        try:
            data = yaml.safe_load(cfg.read_text(encoding="utf-8")) or {}
            if isinstance(data, dict) and data.get("preset"):
                return str(data["preset"])
        except (OSError, yaml.YAMLError) as e:
            logger.warning("ignoring unreadable user config %s: %s", cfg, e)
    return None


def default_preset() -> str:
    # Priority: env var, then user config file
    return os.getenv("HEBBMEM_PRESET") or _read_user_preset() or "desk"


#------------------ExperimentConfig-------------------
@dataclass(frozen=True)
class ExperimentConfig:
    task: str = "assoc"
    preset: str = "desk"
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    assoc: AssociationTaskConfig = field(default_factory=AssociationTaskConfig)
    ppo: PpoConfig = field(default_factory=PpoConfig)
    conversion: ConversionConfig = field(default_factory=ConversionConfig)

    def resolved_dict(self) -> dict[str, Any]:
        return asdict(self)


#------------------Validation-------------------
def _type_issue(key: str, type_name: str, value: Any) -> Optional[str]:
    if value is None:
        return None if "Optional" in type_name else f"{key} cannot be null"
    base = type_name.replace("Optional[", "").rstrip("]")
    if base == "bool":
        ok = isinstance(value, bool)
    elif base == "int":
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif base == "float":
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    elif base == "str":
        ok = isinstance(value, str)
    else:
        ok = True
    return None if ok else f"{key} expects {base}, got {value!r}"


def _walk_issues(template: Any, data: Mapping[str, Any], prefix: str, issues: list[tuple[str, str]]) -> None:
    fields = {f.name: f for f in dataclasses.fields(template)}
    for key, value in data.items():
        path = f"{prefix}.{key}" if prefix else str(key)
        if key not in fields:
            issues.append((path, f"unknown key (known: {', '.join(sorted(fields))})"))
            continue
        current = getattr(template, key)
        if dataclasses.is_dataclass(current):
            if not isinstance(value, Mapping):
                issues.append((path, "expected a mapping"))
            else:
                _walk_issues(current, value, path, issues)
            continue
        problem = _type_issue(path, str(fields[key].type), value)
        if problem:
            issues.append((path, problem))


def config_issues(data: Mapping[str, Any]) -> list[tuple[str, str]]:
    """(key, message) for every unknown key or mistyped value in a config mapping."""
    issues: list[tuple[str, str]] = []
    if not isinstance(data, Mapping):
        return [("<root>", "config file must contain a mapping")]
    _walk_issues(ExperimentConfig(), data, "", issues)
    return issues


def _apply(obj: Any, updates: Mapping[str, Any], prefix: str) -> Any:
    changes = {}
    for key, value in updates.items():
        current = getattr(obj, key)
        if dataclasses.is_dataclass(current):
            changes[key] = _apply(current, value, f"{prefix}.{key}" if prefix else key)
        elif isinstance(current, float) and isinstance(value, int):
            changes[key] = float(value)
        else:
            changes[key] = value
    try:
        return replace(obj, **changes)
    except ArgumentError as e:
        raise ConfigError(prefix or "<root>", str(e)) from e


def _merge(into: dict[str, Any], updates: Mapping[str, Any]) -> dict[str, Any]:
    for key, value in updates.items():
        if isinstance(value, Mapping) and isinstance(into.get(key), dict):
            _merge(into[key], value)
        else:
            into[key] = dict(value) if isinstance(value, Mapping) else value
    return into


def parse_overrides(items: Sequence[str]) -> dict[str, Any]:
    """`section.field=value` pairs into a nested mapping; values are read as YAML scalars.

    yes/no/on/off stay strings (plasticity=off), only true/false are booleans.
    """
    nested: dict[str, Any] = {}
    for item in items:
        key, sep, raw = item.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigError(item, "override must look like section.field=value")
        try:
            if raw.strip().lower() in _WORD_BOOLEANS:
                value = raw.strip()
            else:
                value = yaml.safe_load(raw) if raw.strip() else None
        except yaml.YAMLError as e:
            raise ConfigError(key, f"unreadable value {raw!r}: {e}") from e
        node = nested
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(key, "conflicting overrides")
        node[parts[-1]] = value
    return nested


def load_config_file(path: Path) -> dict[str, Any]:
    path = Path(path)
    if not path.is_file():
        raise ConfigError("--config", f"file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    except yaml.YAMLError as e:
        raise ConfigError("--config", f"{path}: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError("--config", f"{path} must contain a mapping")
    return data


#------------------resolve_config-------------------
def resolve_config(
    task: str,
    preset: Optional[str] = None,
    seed: Optional[int] = None,
    config_path: Optional[Path] = None,
    overrides: Sequence[str] = (),
    n_pairs: Optional[int] = None,
) -> ExperimentConfig:
    """Defaults, then the preset, then the config file, then --override pairs.

    The top-level seed is copied into every section. Association tasks size the
    model's label input and readout from the task.
    """
    if task not in TASKS:
        raise ConfigError("task", f"{task!r} is not one of {', '.join(TASKS)}")
    preset = preset or default_preset()
    if preset not in PRESETS:
        raise ConfigError("preset", f"{preset!r} is not one of {', '.join(PRESETS)}")

    data: dict[str, Any] = {"task": task, "preset": preset}
    _merge(data, PRESETS[preset])
    if task == "ood":
        _merge(data, {"assoc": {"label_range": OOD_LABEL_RANGE}})
    if n_pairs is not None:
        _merge(data, {"ppo": {"n_pairs": n_pairs, "rollout_steps": ROLLOUT_BY_PAIRS.get(n_pairs, 10 * n_pairs)}})
    if config_path is not None:
        file_data = load_config_file(config_path)
        file_data.pop("task", None)
        file_data.pop("preset", None)
        _merge(data, file_data)
    _merge(data, parse_overrides(overrides))
    if seed is not None:
        data["seed"] = seed

    issues = config_issues(data)
    if issues:
        key, message = issues[0]
        raise ConfigError(key, message)

    config = _apply(ExperimentConfig(), data, "")
    s = config.seed
    assoc = replace(config.assoc, seed=s)
    model = config.model
    if task in ("assoc", "ood"):
        model = _apply(model, {"input_dim": assoc.vec_dim, "label_range": assoc.output_range}, "model")
    config = replace(
        config,
        model=model,
        assoc=assoc,
        train=replace(config.train, seed=s),
        ppo=replace(config.ppo, seed=s),
    )
    logger.debug("resolved %s config (preset=%s, seed=%d)", task, preset, s)
    return config


def export_preset(task: str, preset: str) -> str:
    """YAML text of a fully resolved preset, a starting point for --config files."""
    config = resolve_config(task, preset, seed=0)
    data = config.resolved_dict()
    data.pop("task")
    data.pop("preset")
    return yaml.safe_dump(data, sort_keys=False, allow_unicode=True)
