"""
Dataset Store
Binary per-state records (little-endian complex128 after a JSON header)
and the JSON artifacts shared between pipeline phases
"""

import json
import struct
from pathlib import Path
from typing import Tuple

import numpy as np

from services.errors import PrerequisiteError

MAGIC = b"DPDLAB01"


def write_record(path: Path, header: dict, data: np.ndarray) -> None:
    data = np.ascontiguousarray(data, dtype="<c16")
    header = dict(header, shape=list(data.shape), dtype="<c16")
    blob = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        f.write(data.tobytes())


def read_record(path: Path) -> Tuple[dict, np.ndarray]:
    path = Path(path)
    if not path.exists():
        raise PrerequisiteError(f"Missing record {path}")
    raw = path.read_bytes()
    if raw[: len(MAGIC)] != MAGIC:
        raise PrerequisiteError(f"{path} is not a dataset record")
    offset = len(MAGIC)
    (size,) = struct.unpack("<I", raw[offset: offset + 4])
    offset += 4
    header = json.loads(raw[offset: offset + size])
    offset += size
    shape = tuple(header["shape"])
    expected = int(np.prod(shape)) * 16
    if len(raw) - offset != expected:
        raise PrerequisiteError(f"{path} is truncated: expected {expected} data bytes, found {len(raw) - offset}")
    data = np.frombuffer(raw, dtype="<c16", offset=offset).reshape(shape).astype(np.complex128)
    return header, data


def state_file(directory: Path, state_id: int) -> Path:
    return Path(directory) / f"state_{state_id:02d}.bin"


def write_json(path: Path, doc: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=1, sort_keys=True))


def read_json(path: Path) -> dict:
    path = Path(path)
    if not path.exists():
        raise PrerequisiteError(f"Missing artifact {path}")
    return json.loads(path.read_text())
