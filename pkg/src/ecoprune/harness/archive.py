"""Binary tensor archive.

Layout::

    b"ECOD" | version 0x01 | manifest length (u64 little-endian) |
    UTF-8 JSON manifest | payload of little-endian float64 values

The manifest has ``tensors: [{name, shape, offset, count}]`` where
``offset`` is the index of the tensor's first float in the payload and
``count`` its number of floats. Other top-level manifest keys carry metadata
(model config, gate groups) and are ignored by the reader.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"ECOD"
VERSION = 1
_HEADER = struct.Struct("<4sBQ")


class ArchiveFormatError(ValueError):
    """File is not a well-formed archive."""


def encode(tensors: dict, meta: dict | None = None) -> bytes:
    entries, chunks, offset = [], [], 0
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset,
                        "count": int(arr.size)})
        chunks.append(arr.tobytes())
        offset += arr.size
    manifest = dict(meta or {})
    manifest["tensors"] = entries
    blob = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return _HEADER.pack(MAGIC, VERSION, len(blob)) + blob + b"".join(chunks)


def decode(data: bytes) -> tuple:
    """Parse archive bytes into ``(tensors, manifest)``; validates before copying."""
    if len(data) < _HEADER.size:
        raise ArchiveFormatError("file shorter than the archive header")
    magic, version, mlen = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise ArchiveFormatError(f"bad magic bytes {magic!r}")
    if version != VERSION:
        raise ArchiveFormatError(f"unsupported archive version {version}")
    start = _HEADER.size
    if mlen > len(data) - start:
        raise ArchiveFormatError("manifest length exceeds file size")
    try:
        manifest = json.loads(data[start:start + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ArchiveFormatError(f"manifest is not valid UTF-8 JSON: {exc}") from None
    payload = memoryview(data)[start + mlen:]
    if payload.nbytes % 8:
        raise ArchiveFormatError("payload is not a whole number of float64 values")
    n_floats = payload.nbytes // 8
    entries = manifest.get("tensors")
    if not isinstance(entries, list):
        raise ArchiveFormatError("manifest lacks a tensors list")
    spans = []
    for e in entries:
        try:
            name, shape, off, count = e["name"], [int(s) for s in e["shape"]], int(e["offset"]), int(e["count"])
        except (KeyError, TypeError, ValueError):
            raise ArchiveFormatError(f"malformed tensor entry {e!r}") from None
        if any(s < 0 for s in shape) or int(np.prod(shape, dtype=np.int64)) != count or off < 0:
            raise ArchiveFormatError(f"tensor {name!r}: shape {shape} inconsistent with count {count}")
        spans.append((off, off + count, name, shape))
    spans.sort()
    end = 0
    for lo, hi, name, _ in spans:
        if lo < end:
            raise ArchiveFormatError(f"tensor {name!r} overlaps its predecessor")
        end = hi
    if sum(hi - lo for lo, hi, _, _ in spans) != n_floats or end != n_floats:
        raise ArchiveFormatError(f"payload holds {n_floats} floats, manifest describes "
                                 f"{sum(hi - lo for lo, hi, _, _ in spans)}")
    values = np.frombuffer(payload, dtype="<f8")
    tensors = {}
    for e in entries:
        off, count = int(e["offset"]), int(e["count"])
        tensors[e["name"]] = values[off:off + count].astype(np.float64).reshape(e["shape"])
    return tensors, manifest


def save(path, tensors: dict, meta: dict | None = None) -> None:
    Path(path).write_bytes(encode(tensors, meta))


def load(path) -> tuple:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise FileNotFoundError(f"cannot read archive {path}: {exc.strerror}") from None
    return decode(data)


# -- typed wrappers ----------------------------------------------------------

def save_model(path, model, **meta) -> None:
    from dataclasses import asdict
    save(path, model.params, {"kind": "denoiser", "config": asdict(model.config), **meta})


def load_model(path):
    from ..denoiser import Denoiser, DenoiserConfig
    tensors, manifest = load(path)
    if manifest.get("kind") != "denoiser":
        raise ArchiveFormatError(f"{path} does not hold a denoiser (kind={manifest.get('kind')!r})")
    try:
        config = DenoiserConfig(**manifest["config"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ArchiveFormatError(f"{path}: bad model config: {exc}") from None
    return Denoiser(config, tensors)


def save_gates(path, lam, groups, **meta) -> None:
    save(path, {"lambda": np.asarray(lam)},
         {"kind": "gates", "groups": [[name, int(n)] for name, n in groups], **meta})


def load_gates(path) -> tuple:
    """Return ``(lam, groups, manifest)``."""
    tensors, manifest = load(path)
    if manifest.get("kind") != "gates" or "lambda" not in tensors:
        raise ArchiveFormatError(f"{path} does not hold mask logits")
    groups = tuple((str(name), int(n)) for name, n in manifest.get("groups", []))
    return tensors["lambda"], groups, manifest
