"""Checkpoint container.

Layout (all integers little-endian)::

    b"PALN"                      magic
    u32 version (=1)
    u32 header_len, header_len bytes of UTF-8 JSON (config records)
    u32 count
    count × { u32 name_len, name (UTF-8), u32 ndim, ndim × u64 dims,
              prod(dims) × f64 payload }

A JSON sidecar ``<path>.json`` repeats the config records for humans.
"""

from __future__ import annotations

import json
import struct
from collections import OrderedDict
from pathlib import Path
from typing import Dict, Tuple

import numpy as np

from . import partnet as pn
from .ndgrad import Tensor

MAGIC = b"PALN"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save(path, model: pn.Model, extra: dict = None) -> None:
    path = Path(path)
    header = model.config_dict()
    if extra:
        header["extra"] = extra
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    chunks = [MAGIC, struct.pack("<II", VERSION, len(hbytes)), hbytes,
              struct.pack("<I", len(model.params))]
    for name, t in model.params.items():
        nb = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(nb)) + nb)
        chunks.append(struct.pack("<I", t.data.ndim) + struct.pack(f"<{t.data.ndim}Q", *t.shape))
        chunks.append(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    path.write_bytes(b"".join(chunks))
    Path(str(path) + ".json").write_text(json.dumps(header, indent=2, sort_keys=True))


def read_raw(path) -> Tuple[dict, "OrderedDict[str, np.ndarray]"]:
    data = Path(path).read_bytes()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise CheckpointError(f"{path}: truncated at byte {pos} (wanted {n} more)")
        out = data[pos:pos + n]
        pos += n
        return out

    if take(4) != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint")
    version, hlen = struct.unpack("<II", take(8))
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    try:
        header = json.loads(take(hlen).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable config header ({exc})") from None
    (count,) = struct.unpack("<I", take(4))
    arrays: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode("utf-8", errors="replace")
        (ndim,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{ndim}Q", take(8 * ndim))
        size = int(np.prod(dims)) if dims else 1
        arrays[name] = np.frombuffer(take(8 * size), dtype="<f8").reshape(dims).astype(np.float64)
    if pos != len(data):
        raise CheckpointError(f"{path}: {len(data) - pos} trailing bytes")
    return header, arrays


def config_from_header(header: dict) -> Tuple[pn.BackboneConfig, pn.PartNetConfig]:
    try:
        return pn.BackboneConfig(**header["backbone"]), pn.PartNetConfig(**header["partnet"])
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"config header incomplete: {exc}") from None


def load(path, model: pn.Model = None) -> pn.Model:
    """Load a checkpoint; with ``model`` given, its configs must be compatible."""
    header, arrays = read_raw(path)
    if model is None:
        backbone, head = config_from_header(header)
        model = pn.Model(backbone, head)
    problems = pn.check_params(model, arrays)
    if problems:
        raise CheckpointError(f"{path}: incompatible with model:\n  " + "\n  ".join(problems))
    model.params = OrderedDict((k, Tensor(v, True, k)) for k, v in arrays.items())
    return model


def params_equal(a: Dict[str, Tensor], b: Dict[str, Tensor]) -> bool:
    return a.keys() == b.keys() and all(np.array_equal(a[k].data, b[k].data) for k in a)
