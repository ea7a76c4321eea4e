"""Directory container for named float32 tensors plus a JSON manifest.

Layout::

    <dir>/manifest.json   format, version, metadata, tensor index
    <dir>/tensors.bin     little-endian float32 blobs, one per tensor

Writes go to a sibling temp directory that is renamed into place.
"""

from __future__ import annotations

import json
import os
import shutil
import tempfile
import zlib
from pathlib import Path

import numpy as np

FORMAT = "spectemp-tensors"
VERSION = 1


class ContainerError(ValueError):
    pass


def write_container(path, tensors: dict[str, np.ndarray], meta: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    index = []
    offset = 0
    blobs = []
    for name, arr in tensors.items():
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        index.append({"name": name, "shape": list(np.shape(arr)), "offset": offset,
                      "nbytes": len(data), "crc32": zlib.crc32(data)})
        blobs.append(data)
        offset += len(data)
    manifest = {"format": FORMAT, "version": VERSION, "meta": meta, "tensors": index}
    tmp = Path(tempfile.mkdtemp(prefix=path.name + ".", dir=path.parent))
    try:
        with open(tmp / "tensors.bin", "wb") as fh:
            for blob in blobs:
                fh.write(blob)
        (tmp / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
        if path.exists():
            old = path.with_name(path.name + ".old")
            os.replace(path, old)
            os.replace(tmp, path)
            shutil.rmtree(old)
        else:
            os.replace(tmp, path)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return path


def read_container(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
        raw = (path / "tensors.bin").read_bytes()
    except (OSError, json.JSONDecodeError) as exc:
        raise ContainerError(f"{path}: unreadable container ({exc})") from exc
    if manifest.get("format") != FORMAT:
        raise ContainerError(f"{path}: not a {FORMAT} container")
    if manifest.get("version") != VERSION:
        raise ContainerError(f"{path}: container version {manifest.get('version')}, expected {VERSION}")
    tensors = {}
    for entry in manifest["tensors"]:
        start, n = entry["offset"], entry["nbytes"]
        blob = raw[start:start + n]
        if len(blob) != n or zlib.crc32(blob) != entry["crc32"]:
            raise ContainerError(f"{path}: tensor {entry['name']} is corrupt or truncated")
        shape = tuple(entry["shape"])
        tensors[entry["name"]] = np.frombuffer(blob, "<f4").reshape(shape).astype(np.float32)
    return tensors, manifest["meta"]
