#=================================
# save_checkpoint, load_checkpoint, save_model, load_model
#=================================

from __future__ import annotations

#---------------Standard Library---------------
import logging
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

#---------------Third-Party---------------
import numpy as np
import yaml

#---------------Local---------------
from .errors import CheckpointError
from .model import ModelConfig, ModelParams, expected_param_shapes

logger = logging.getLogger(__name__)

MAGIC = b"HMEMCKPT"
VERSION = 1
_PREAMBLE = struct.Struct("<8sIQ")
_DTYPE = np.dtype("<f8")


@dataclass
class Checkpoint:
    arrays: dict[str, np.ndarray]
    config: dict[str, Any]
    metadata: dict[str, Any] = field(default_factory=dict)


#---------------Container---------------
def save_checkpoint(
    path: Path,
    arrays: dict[str, np.ndarray],
    config: dict[str, Any],
    metadata: Optional[dict[str, Any]] = None,
) -> Path:
    """Write magic, version, YAML header, then every tensor as little-endian float64.

    The file is first written next to its destination and then moved over it, so a
    crash mid-write never leaves a half-written checkpoint behind.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tensors, offset = [], 0
    for name, array in arrays.items():
        array = np.asarray(array)
        tensors.append({"name": name, "shape": list(array.shape), "offset": offset, "count": int(array.size)})
        offset += int(array.size)
    header = {
        "format": "hebbmem-checkpoint",
        "version": VERSION,
        "dtype": "float64",
        "byte_order": "little",
        "config": config,
        "metadata": metadata or {},
        "tensors": tensors,
    }
    header_bytes = yaml.safe_dump(header, sort_keys=False, allow_unicode=True).encode("utf-8")

    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(_PREAMBLE.pack(MAGIC, VERSION, len(header_bytes)))
        f.write(header_bytes)
        for array in arrays.values():
            f.write(np.ascontiguousarray(array, dtype=_DTYPE).tobytes())
    os.replace(tmp, path)
    logger.debug("wrote checkpoint %s (%d tensors)", path, len(tensors))
    return path


def load_checkpoint(path: Path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if len(raw) < _PREAMBLE.size:
        raise CheckpointError(f"{path}: truncated preamble")
    magic, version, header_len = _PREAMBLE.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: not a hebbmem checkpoint")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version} (expected {VERSION})")
    start = _PREAMBLE.size
    try:
        header = yaml.safe_load(raw[start:start + header_len].decode("utf-8"))
    except (yaml.YAMLError, UnicodeDecodeError) as e:
        raise CheckpointError(f"{path}: unreadable header: {e}") from e
    if not isinstance(header, dict) or header.get("version") != VERSION:
        raise CheckpointError(f"{path}: header version does not match container version")

    data = np.frombuffer(raw, dtype=_DTYPE, offset=start + header_len) if len(raw) > start + header_len else np.zeros(0)
    arrays = {}
    for entry in header.get("tensors", []):
        lo, count = int(entry["offset"]), int(entry["count"])
        if lo + count > data.size:
            raise CheckpointError(f"{path}: tensor {entry['name']!r} runs past the end of the file")
        shape = tuple(entry["shape"])
        if int(np.prod(shape, dtype=np.int64)) != count:
            raise CheckpointError(f"{path}: tensor {entry['name']!r} shape {shape} disagrees with count {count}")
        arrays[entry["name"]] = data[lo:lo + count].reshape(shape).astype(np.float64)
    return Checkpoint(arrays, header.get("config") or {}, header.get("metadata") or {})


#---------------Model glue---------------
def save_model(
    path: Path,
    params: ModelParams,
    config: ModelConfig,
    metadata: Optional[dict[str, Any]] = None,
) -> Path:
    return save_checkpoint(path, params.arrays(), config.to_dict(), metadata)


def load_model(path: Path, expected: Optional[ModelConfig] = None) -> tuple[ModelParams, ModelConfig, dict[str, Any]]:
    """Load params and config; reject tensors whose shapes disagree with the config."""
    ckpt = load_checkpoint(path)
    try:
        config = ModelConfig.from_dict(ckpt.config)
    except (TypeError, ValueError) as e:
        raise CheckpointError(f"{path}: invalid model config: {e}") from e
    if expected is not None and expected.layout != config.layout:
        raise CheckpointError(f"{path}: layout {config.layout} does not match expected {expected.layout}")
    shapes = expected_param_shapes(config)
    if set(shapes) != set(ckpt.arrays):
        raise CheckpointError(f"{path}: tensors {sorted(ckpt.arrays)} do not match expected {sorted(shapes)}")
    for name, shape in shapes.items():
        if ckpt.arrays[name].shape != shape:
            raise CheckpointError(f"{path}: tensor {name!r} has shape {ckpt.arrays[name].shape}, expected {shape}")
    return ModelParams.from_arrays(ckpt.arrays), config, ckpt.metadata
