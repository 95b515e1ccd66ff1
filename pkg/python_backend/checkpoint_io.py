"""
Checkpoint file format.

    magic      8 bytes   b"LCLDENC1"
    version    u32 LE
    header_len u32 LE
    header     UTF-8 JSON (sorted keys, compact): format_version, model_config,
               step, temperature, config_hash, tensors [{name, shape, offset}]
    payload    float32 LE tensors in directory order; offsets are relative to
               the first payload byte

Model parameters come first in layout order, then the AdamW moments as
`adam.m.<param>` and `adam.v.<param>`.
"""
import hashlib
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Tuple

import numpy as np

from numerics import LabError
from encoders import DualEncoder, ModelConfig

logger = logging.getLogger(__name__)

MAGIC = b"LCLDENC1"
FORMAT_VERSION = 1
MOMENT_PREFIXES = ("adam.m.", "adam.v.")
_U32 = struct.Struct("<I")
_PAYLOAD_DTYPE = np.dtype("<f4")


class CheckpointFormatError(LabError):
    """File is not a checkpoint this version can read"""


@dataclass
class Checkpoint:
    model: DualEncoder
    moments_m: Dict[str, np.ndarray] = field(default_factory=dict)
    moments_v: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    config_hash: str = ""
    format_version: int = FORMAT_VERSION

    @property
    def temperature(self) -> float:
        return self.model.temperature

    @property
    def config(self) -> ModelConfig:
        return self.model.config


def _tensors(ckpt: Checkpoint) -> List[Tuple[str, np.ndarray]]:
    items = list(ckpt.model.params.items())
    items += [(f"adam.m.{k}", v) for k, v in ckpt.moments_m.items()]
    items += [(f"adam.v.{k}", v) for k, v in ckpt.moments_v.items()]
    return items


def serialize(ckpt: Checkpoint) -> bytes:
    directory, payloads, offset = [], [], 0
    for name, value in _tensors(ckpt):
        data = np.ascontiguousarray(value, dtype=_PAYLOAD_DTYPE).tobytes()
        directory.append({"name": name, "shape": list(value.shape), "offset": offset})
        payloads.append(data)
        offset += len(data)
    header = {
        "format_version": ckpt.format_version,
        "model_config": ckpt.model.config.to_dict(),
        "step": int(ckpt.step),
        "temperature": float(np.float32(ckpt.temperature)),
        "config_hash": ckpt.config_hash,
        "tensors": directory,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return b"".join([MAGIC, _U32.pack(FORMAT_VERSION), _U32.pack(len(header_bytes)), header_bytes, *payloads])


def deserialize(blob: bytes) -> Checkpoint:
    if len(blob) < len(MAGIC) + 2 * _U32.size:
        raise CheckpointFormatError(f"file too short for a checkpoint header ({len(blob)} bytes)")
    magic = blob[: len(MAGIC)]
    if magic != MAGIC:
        raise CheckpointFormatError(f"bad magic: expected {MAGIC!r}, found {magic!r}")
    pos = len(MAGIC)
    (version,) = _U32.unpack_from(blob, pos)
    if version != FORMAT_VERSION:
        raise CheckpointFormatError(f"unsupported version: expected {FORMAT_VERSION}, found {version}")
    (header_len,) = _U32.unpack_from(blob, pos + _U32.size)
    start = pos + 2 * _U32.size
    try:
        header = json.loads(blob[start:start + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointFormatError(f"unreadable checkpoint header: {e}") from e

    payload = memoryview(blob)[start + header_len:]
    try:
        return _from_header(header, payload)
    except (KeyError, TypeError, ValueError) as e:
        raise CheckpointFormatError(f"malformed checkpoint header: {type(e).__name__}: {e}") from e


def _from_header(header: dict, payload: memoryview) -> Checkpoint:
    params, moments_m, moments_v = {}, {}, {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        end = entry["offset"] + count * _PAYLOAD_DTYPE.itemsize
        if end > len(payload):
            raise CheckpointFormatError(
                f"tensor {entry['name']} runs past the end of the file: expected {end} payload bytes, found {len(payload)}"
            )
        value = np.frombuffer(payload, dtype=_PAYLOAD_DTYPE, count=count, offset=entry["offset"])
        value = value.astype(np.float32).reshape(shape)
        name = entry["name"]
        if name.startswith("adam.m."):
            moments_m[name[len("adam.m."):]] = value
        elif name.startswith("adam.v."):
            moments_v[name[len("adam.v."):]] = value
        else:
            params[name] = value

    model = DualEncoder(ModelConfig(**header["model_config"]), params)
    return Checkpoint(model, moments_m, moments_v, step=int(header["step"]),
                      config_hash=header["config_hash"], format_version=int(header["format_version"]))


def save_checkpoint(path, ckpt: Checkpoint) -> str:
    """Write the checkpoint; returns its sha256 digest."""
    blob = serialize(ckpt)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(blob)
    digest = hashlib.sha256(blob).hexdigest()
    logger.info("Saved checkpoint %s (context %d, step %d, sha256 %s)",
                path, ckpt.config.context_len, ckpt.step, digest[:12])
    return digest


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    ckpt = deserialize(path.read_bytes())
    logger.info("Loaded checkpoint %s (context %d, step %d)", path, ckpt.config.context_len, ckpt.step)
    return ckpt


def checkpoint_digest(ckpt: Checkpoint) -> str:
    return hashlib.sha256(serialize(ckpt)).hexdigest()
