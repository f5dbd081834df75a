"""Directory container: JSON manifest + raw little-endian float64 payload.

Layout of ``<dir>/payload.bin``: the named arrays, C-order, back to back, in
manifest order.  Each descriptor records ``name``, ``shape``, ``offset`` and
``nbytes``; descriptors must tile the payload exactly.  The SHA-256 of the
payload is stored in the manifest and verified on load.
"""

from __future__ import annotations

import hashlib
import json
import os
from collections import OrderedDict
from pathlib import Path
from typing import Mapping

import numpy as np

PAYLOAD_NAME = "payload.bin"
DTYPE = "<f8"


class ContainerError(ValueError):
    pass


class ChecksumError(ContainerError):
    pass


class VersionError(ContainerError):
    pass


class TruncatedPayloadError(ContainerError):
    pass


class DescriptorError(ContainerError):
    pass


def write_container(path, kind: str, version: int, arrays: Mapping[str, np.ndarray],
                    meta: dict, manifest_name: str = "manifest.json") -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    descriptors = []
    chunks = []
    offset = 0
    for name, arr in arrays.items():
        a = np.ascontiguousarray(np.asarray(arr, dtype=np.float64)).astype(DTYPE, copy=False)
        raw = a.tobytes(order="C")
        descriptors.append({"name": name, "shape": list(a.shape), "dtype": DTYPE,
                            "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    manifest = {
        "format": kind,
        "version": version,
        **meta,
        "tensors": descriptors,
        "payload": {"file": PAYLOAD_NAME, "nbytes": len(payload),
                    "sha256": hashlib.sha256(payload).hexdigest()},
    }
    tmp = path / (PAYLOAD_NAME + ".tmp")
    tmp.write_bytes(payload)
    os.replace(tmp, path / PAYLOAD_NAME)
    (path / manifest_name).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def read_container(path, kind: str, version: int,
                   manifest_name: str = "manifest.json") -> tuple[dict, OrderedDict[str, np.ndarray]]:
    path = Path(path)
    mpath = path / manifest_name
    if not mpath.is_file():
        raise FileNotFoundError(f"no {manifest_name} in {path}")
    manifest = json.loads(mpath.read_text())
    if manifest.get("format") != kind:
        raise VersionError(f"{path} holds {manifest.get('format')!r}, expected {kind!r}")
    if manifest.get("version") != version:
        raise VersionError(f"{path}: unsupported {kind} version {manifest.get('version')!r} "
                           f"(this build reads version {version})")
    info = manifest["payload"]
    payload = (path / info["file"]).read_bytes()
    if len(payload) < info["nbytes"]:
        raise TruncatedPayloadError(f"{path}: payload has {len(payload)} bytes, manifest says {info['nbytes']}")
    if len(payload) != info["nbytes"]:
        raise DescriptorError(f"{path}: payload has {len(payload)} bytes, manifest says {info['nbytes']}")
    if hashlib.sha256(payload).hexdigest() != info["sha256"]:
        raise ChecksumError(f"{path}: payload checksum mismatch")
    arrays: OrderedDict[str, np.ndarray] = OrderedDict()
    expected = 0
    for d in manifest["tensors"]:
        n = int(np.prod(d["shape"], dtype=np.int64)) * 8
        if d["offset"] != expected or d["nbytes"] != n or d.get("dtype", DTYPE) != DTYPE:
            raise DescriptorError(f"{path}: descriptor for {d['name']!r} is inconsistent")
        arr = np.frombuffer(payload, dtype=DTYPE, count=n // 8, offset=d["offset"])
        arrays[d["name"]] = arr.astype(np.float64).reshape(d["shape"])
        expected += n
    if expected != len(payload):
        raise DescriptorError(f"{path}: descriptors cover {expected} of {len(payload)} payload bytes")
    return manifest, arrays
