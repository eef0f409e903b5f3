"""
Binary checkpoint format (see docs/checkpoint_format.md).

    magic      8 bytes   b"MPRCKPT\\x00"
    version    uint32
    config     uint32 length + UTF-8 JSON (model config and run metadata)
    tensors    uint32 count, then per tensor:
                 uint16 name length, UTF-8 name, uint8 dtype code,
                 uint8 ndim, ndim x uint32 dims, little-endian data

All integers are little-endian. Parameters and batch-norm running statistics
are stored alike; buffer names end in running_mean / running_var.
"""

from __future__ import annotations

import json
import logging
import struct
from pathlib import Path
from typing import Any, BinaryIO, Dict, Optional, Tuple, Union

import numpy as np

from .config import ModelConfig
from .errors import ConfigError, DataError
from .regression_model import ModelState, init_state

logger = logging.getLogger(__name__)

MAGIC = b"MPRCKPT\x00"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}
_BUFFER_SUFFIXES = (".running_mean", ".running_var")


def _write_tensor(fh: BinaryIO, name: str, arr: np.ndarray) -> None:
    code = _CODES.get(arr.dtype)
    if code is None:
        raise DataError(f"Tensor {name} has unsupported dtype {arr.dtype}")
    encoded = name.encode("utf-8")
    fh.write(struct.pack("<H", len(encoded)))
    fh.write(encoded)
    fh.write(struct.pack("<BB", code, arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise DataError("Checkpoint is truncated")
    return data


def _read_tensor(fh: BinaryIO) -> Tuple[str, np.ndarray]:
    (name_len,) = struct.unpack("<H", _read_exact(fh, 2))
    name = _read_exact(fh, name_len).decode("utf-8")
    code, ndim = struct.unpack("<BB", _read_exact(fh, 2))
    if code not in _DTYPES:
        raise DataError(f"Tensor {name} has unknown dtype code {code}")
    shape = struct.unpack(f"<{ndim}I", _read_exact(fh, 4 * ndim))
    dtype = _DTYPES[code]
    count = int(np.prod(shape, dtype=np.int64))
    data = np.frombuffer(_read_exact(fh, count * dtype.itemsize), dtype=dtype)
    return name, data.reshape(shape).astype(dtype.newbyteorder("="))


def save_checkpoint(path: Union[str, Path], state: ModelState, metadata: Optional[Dict[str, Any]] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = json.dumps({"model": state.cfg.as_dict(), "metadata": metadata or {}}, sort_keys=True).encode("utf-8")
    tensors = {**state.params, **state.buffers}
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(header)))
        fh.write(header)
        fh.write(struct.pack("<I", len(tensors)))
        for name in sorted(tensors):
            _write_tensor(fh, name, tensors[name])
    tmp.replace(path)
    logger.debug("Saved checkpoint %s (%d tensors)", path, len(tensors))
    return path


def _check_layout(path: Path, cfg: ModelConfig, tensors: Dict[str, np.ndarray]) -> None:
    """Tensor names, shapes and dtypes must be exactly those the stored config builds."""
    reference = init_state(cfg)
    expected = {**reference.params, **reference.buffers}
    missing = sorted(set(expected) - set(tensors))
    extra = sorted(set(tensors) - set(expected))
    if missing or extra:
        raise ConfigError(f"Checkpoint {path} does not match its model config: missing {missing}, unexpected {extra}")
    for name, ref in expected.items():
        arr = tensors[name]
        if arr.shape != ref.shape or arr.dtype != ref.dtype:
            raise ConfigError(
                f"Checkpoint {path}: tensor {name} is {arr.dtype}{list(arr.shape)}, "
                f"the model config expects {ref.dtype}{list(ref.shape)}"
            )


def load_checkpoint(path: Union[str, Path]) -> Tuple[ModelState, Dict[str, Any]]:
    """Returns the model state and the metadata stored with it."""
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            if _read_exact(fh, len(MAGIC)) != MAGIC:
                raise DataError(f"{path} is not a checkpoint file")
            version, header_len = struct.unpack("<II", _read_exact(fh, 8))
            if version != VERSION:
                raise DataError(f"Checkpoint version {version} is not supported (expected {VERSION})")
            header = json.loads(_read_exact(fh, header_len).decode("utf-8"))
            (count,) = struct.unpack("<I", _read_exact(fh, 4))
            tensors = dict(_read_tensor(fh) for _ in range(count))
        model = header["model"]
    except (OSError, ValueError, KeyError, TypeError, struct.error) as exc:
        raise DataError(f"Cannot read checkpoint {path}: {exc}") from exc
    cfg = ModelConfig.from_dict(model)
    _check_layout(path, cfg, tensors)
    params = {k: v for k, v in tensors.items() if not k.endswith(_BUFFER_SUFFIXES)}
    buffers = {k: v for k, v in tensors.items() if k.endswith(_BUFFER_SUFFIXES)}
    return ModelState(cfg, params, buffers), header.get("metadata", {})
