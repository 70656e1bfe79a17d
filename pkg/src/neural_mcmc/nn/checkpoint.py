"""Binary container: one JSON header line followed by little-endian float64 arrays.

The header lists every array as ``{"name", "shape"}`` in storage order, so a
loader can check sizes before trusting any bytes.  Model checkpoints, KL
basis caches and datasets all use this layout.
"""

from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Mapping

import numpy as np

from neural_mcmc.errors import CheckpointError

FORMAT_VERSION = 1
_LE_F64 = np.dtype("<f8")


def save_arrays(path: str | os.PathLike, header: Mapping, arrays: Mapping[str, np.ndarray]) -> None:
    head = dict(header)
    head["format_version"] = FORMAT_VERSION
    head["arrays"] = [{"name": k, "shape": list(np.shape(v))} for k, v in arrays.items()]
    line = json.dumps(head, sort_keys=True, separators=(",", ":")).encode("utf-8")
    if b"\n" in line:
        raise CheckpointError("header must serialize to a single line")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(line + b"\n")
        for v in arrays.values():
            fh.write(np.ascontiguousarray(v, dtype=_LE_F64).tobytes())
    os.replace(tmp, path)


def read_header(path: str | os.PathLike) -> dict:
    with open(path, "rb") as fh:
        line = fh.readline()
    try:
        header = json.loads(line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header") from exc
    if not isinstance(header, dict) or "format_version" not in header:
        raise CheckpointError(f"{path}: header lacks format_version")
    if header["format_version"] != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: unsupported format_version {header['format_version']} "
            f"(this build reads version {FORMAT_VERSION})"
        )
    return header


def load_arrays(path: str | os.PathLike) -> tuple[dict, dict[str, np.ndarray]]:
    header = read_header(path)
    with open(path, "rb") as fh:
        fh.readline()
        payload = fh.read()
    specs = header.get("arrays", [])
    expected = sum(int(np.prod(s["shape"], dtype=np.int64)) for s in specs) * 8
    if len(payload) != expected:
        raise CheckpointError(f"{path}: payload has {len(payload)} bytes, header promises {expected}")
    arrays: dict[str, np.ndarray] = {}
    offset = 0
    for s in specs:
        count = int(np.prod(s["shape"], dtype=np.int64))
        a = np.frombuffer(payload, dtype=_LE_F64, count=count, offset=offset)
        arrays[s["name"]] = a.astype(np.float64).reshape(s["shape"])
        offset += count * 8
    return header, arrays
