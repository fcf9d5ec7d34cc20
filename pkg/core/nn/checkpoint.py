import json
import logging
import struct
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np

from core.errors import ConfigError, MissingInputError, ShapeMismatchError
from core.nn.tensor import Param

MAGIC = b"DGMC"
VERSION = 1
STATE_FILE = "state.json"

# magic, version, reserved
_HEADER = struct.Struct("<4sHH")


def write_arrays(path: str, arrays: Dict[str, np.ndarray], config_hash: str, init_scheme: str) -> Path:
    """
    Little-endian checkpoint: header with the model config hash and init scheme, then
    (name length, name, rank, dims, f32 payload) per array in sorted name order.
    """
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    digest = bytes.fromhex(config_hash)
    if len(digest) != 32:
        raise ConfigError(f"config hash must be a SHA-256 hex digest, got {config_hash!r}")
    scheme = init_scheme.encode("utf-8")
    chunks = [_HEADER.pack(MAGIC, VERSION, 0), digest, struct.pack("<H", len(scheme)), scheme,
              struct.pack("<I", len(arrays))]
    for name in sorted(arrays):
        value = np.asarray(arrays[name])
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<B", value.ndim))
        chunks.append(struct.pack(f"<{value.ndim}I", *value.shape))
        chunks.append(value.astype("<f4").tobytes())
    out.write_bytes(b"".join(chunks))
    return out


def read_arrays(path: str, expected_hash: Optional[str] = None) -> Tuple[Dict[str, np.ndarray], Dict[str, str]]:
    src = Path(path)
    if not src.exists():
        raise MissingInputError(f"checkpoint not found: {src}")
    try:
        return _decode_arrays(src.read_bytes(), src, expected_hash)
    except (struct.error, UnicodeDecodeError) as e:
        raise ShapeMismatchError(f"checkpoint {src} is truncated or corrupt: {e}") from e


def _decode_arrays(raw: bytes, src: Path, expected_hash: Optional[str]):
    magic, version, _ = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC or version != VERSION:
        raise ShapeMismatchError(f"{src} is not a version {VERSION} checkpoint")
    offset = _HEADER.size
    digest = raw[offset:offset + 32].hex()
    offset += 32
    (scheme_len,) = struct.unpack_from("<H", raw, offset)
    offset += 2
    scheme = raw[offset:offset + scheme_len].decode("utf-8")
    offset += scheme_len
    (count,) = struct.unpack_from("<I", raw, offset)
    offset += 4

    if expected_hash is not None and digest != expected_hash:
        raise ConfigError(f"checkpoint {src} was trained with a different model config "
                          f"(hash {digest[:12]}, expected {expected_hash[:12]})")

    arrays: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", raw, offset)
        offset += 2
        name = raw[offset:offset + name_len].decode("utf-8")
        offset += name_len
        (rank,) = struct.unpack_from("<B", raw, offset)
        offset += 1
        dims = struct.unpack_from(f"<{rank}I", raw, offset)
        offset += 4 * rank
        size = int(np.prod(dims)) if rank else 1
        if offset + 4 * size > len(raw):
            raise ShapeMismatchError(f"checkpoint {src} is truncated inside array {name}")
        arrays[name] = np.frombuffer(raw, dtype="<f4", count=size, offset=offset).reshape(dims).copy()
        offset += 4 * size
    return arrays, {"config_hash": digest, "init_scheme": scheme}


def save_optimizer_state(directory: str, params: Dict[str, Param], config_hash: str, init_scheme: str,
                         epoch: int) -> None:
    """Adam moments under adam_m/<name> and adam_v/<name>, step counts and epoch in state.json."""
    out = Path(directory)
    arrays = {}
    for name, p in params.items():
        arrays[f"adam_m/{name}"] = p.adam_m
        arrays[f"adam_v/{name}"] = p.adam_v
    write_arrays(str(out / "optimizer.bin"), arrays, config_hash, init_scheme)
    state = {
        "epoch": epoch,
        "step_counts": {name: p.step_count for name, p in params.items()},
    }
    (out / STATE_FILE).write_text(json.dumps(state, indent=2, sort_keys=True), encoding="utf-8")


def load_optimizer_state(directory: str, params: Dict[str, Param], config_hash: str) -> int:
    """Restores Adam moments and step counts; returns the last completed epoch."""
    src = Path(directory)
    state_path = src / STATE_FILE
    if not state_path.exists():
        raise MissingInputError(f"training state not found: {state_path}")
    try:
        state = json.loads(state_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise MissingInputError(f"training state {state_path} is not valid JSON: {e}") from e
    arrays, _ = read_arrays(str(src / "optimizer.bin"), expected_hash=config_hash)
    for name, p in params.items():
        p.adam_m = arrays[f"adam_m/{name}"].astype(p.data.dtype)
        p.adam_v = arrays[f"adam_v/{name}"].astype(p.data.dtype)
        p.step_count = int(state["step_counts"].get(name, 0))
    logging.info(f"Restored optimizer state from {src} (epoch {state['epoch']})")
    return int(state["epoch"])
