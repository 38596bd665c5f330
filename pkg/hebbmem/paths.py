#=================================
# Output locations for runs
#=================================

from __future__ import annotations

#---------------Standard Library---------------
import logging
import os
from pathlib import Path
from typing import Optional

#---------------Third-Party---------------
from platformdirs import user_data_dir

logger = logging.getLogger(__name__)


def run_name(task: str, seed: int) -> str:
    return f"{task}-seed{seed}"


def resolve_output_dir(task: str, seed: int, out: Optional[Path] = None) -> Path:
    """--out, else $HEBBMEM_OUTPUT_DIR/<run>, else <user data dir>/hebbmem/runs/<run>."""
    if out is not None:
        target = Path(out)
    elif os.getenv("HEBBMEM_OUTPUT_DIR"):
        target = Path(os.environ["HEBBMEM_OUTPUT_DIR"]) / run_name(task, seed)
    else:
        target = Path(user_data_dir("hebbmem")) / "runs" / run_name(task, seed)
    target.mkdir(parents=True, exist_ok=True)
    logger.debug("output directory: %s", target)
    return target
