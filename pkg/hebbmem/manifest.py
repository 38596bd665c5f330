#=================================================
# write_manifest, read_manifest, check_run_task
#=================================================

from __future__ import annotations

#--------------------Standard Library-------------
import json
import logging
import os
import platform
from datetime import datetime
from pathlib import Path
from typing import Any, Optional

#--------------------Local Library----------------
from . import __version__
from .config import ExperimentConfig
from .errors import ConfigError

logger = logging.getLogger(__name__)

MANIFEST_NAME = "run.json"


#--------------------_meta-------------------
def _meta(kind: str) -> dict[str, Any]:
    return {
        "type": kind,
        "created_at": datetime.now().strftime("%Y%m%d-%H%M%S"),
        "user": os.getenv("USER") or os.getenv("USERNAME") or "",
        "host": platform.node(),
    }


#--------------------write_manifest----------------
def write_manifest(
    out_dir: Path,
    config: ExperimentConfig,
    command: str,
    extra: Optional[dict[str, Any]] = None,
) -> Path:
    """Everything needed to rerun: resolved config, seed and package version."""
    payload = {
        "command": command,
        "task": config.task,
        "preset": config.preset,
        "seed": config.seed,
        "version": __version__,
        "config": config.resolved_dict(),
    }
    if extra:
        payload.update(extra)
    payload["_meta"] = _meta("run")
    out = Path(out_dir) / MANIFEST_NAME
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(payload, indent=2, sort_keys=False) + "\n", encoding="utf-8")
    return out


def read_manifest(path: Path) -> dict[str, Any]:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError("--out", f"cannot read run manifest {path}: {e}") from e
    if not isinstance(payload, dict) or "task" not in payload:
        raise ConfigError("--out", f"{path} is not a run manifest")
    return payload


#--------------------check_run_task----------------
# assoc and ood runs share checkpoints
_TASK_FAMILY = {"ood": "assoc"}


def check_run_task(out_dir: Path, task: str, seed: int) -> Optional[dict[str, Any]]:
    """Refuse to evaluate a run directory written for another task. Runs without a manifest pass."""
    path = Path(out_dir) / MANIFEST_NAME
    if not path.is_file():
        return None
    manifest = read_manifest(path)
    written = manifest["task"]
    if _TASK_FAMILY.get(written, written) != _TASK_FAMILY.get(task, task):
        raise ConfigError("--out", f"{path.parent} holds a {written!r} run, not {task!r}")
    if manifest.get("seed") != seed:
        logger.warning("%s was written with seed %s, evaluating with seed %d", path, manifest.get("seed"), seed)
    return manifest
