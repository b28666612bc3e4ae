"""Self-contained binary checkpoints and deterministic CSV output.

The checkpoint format is little-endian with magic ``MLAB1``: a JSON echo of
the model config, then length-prefixed named float64 tensor records for the
differentiable parameters followed by the running statistics.  Round trips
are bit-exact, and the bytes depend only on the parameter values, so
identical runs produce identical files.
"""
from __future__ import annotations

import dataclasses
import json
import struct
from pathlib import Path

import numpy as np

from .model import ModelConfig, ParameterSet
from .ops import ContractViolation

MAGIC = b"MLAB1"
VERSION = 1


def _pack_record(name, arr):
    if arr.dtype != np.float64:
        raise ContractViolation(f"tensor {name!r} is not float64")
    raw = name.encode("utf-8")
    parts = [struct.pack("<H", len(raw)), raw,
             struct.pack("<B", arr.ndim),
             struct.pack(f"<{arr.ndim}I", *arr.shape)]
    parts.append(np.ascontiguousarray(arr).astype("<f8").tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.data):
            raise ContractViolation("truncated checkpoint file")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def record(self):
        (name_len,) = struct.unpack("<H", self.take(2))
        name = self.take(name_len).decode("utf-8")
        (ndim,) = struct.unpack("<B", self.take(1))
        shape = struct.unpack(f"<{ndim}I", self.take(4 * ndim))
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(self.take(8 * count), dtype="<f8").reshape(shape)
        return name, arr.astype(np.float64)


def save_checkpoint(path, params):
    """Serialize a ParameterSet (config, parameters, running stats)."""
    if params.config is None:
        raise ContractViolation("checkpoint needs a ParameterSet with a config")
    cfg = json.dumps(dataclasses.asdict(params.config),
                     sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", VERSION),
             struct.pack("<I", len(cfg)), cfg]
    items = list(params.param_items())
    parts.append(struct.pack("<I", len(items)))
    parts.extend(_pack_record(name, arr) for name, arr in items)
    stats = list(params.running_stats.items())
    parts.append(struct.pack("<I", len(stats)))
    parts.extend(_pack_record(name, arr) for name, arr in stats)
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path):
    """Rebuild the ParameterSet stored by :func:`save_checkpoint`."""
    path = Path(path)
    if not path.is_file():
        raise ContractViolation(f"checkpoint {path} does not exist")
    reader = _Reader(path.read_bytes())
    if reader.take(len(MAGIC)) != MAGIC:
        raise ContractViolation(f"{path}: bad checkpoint magic")
    (version,) = struct.unpack("<I", reader.take(4))
    if version != VERSION:
        raise ContractViolation(f"{path}: unsupported version {version}")
    (cfg_len,) = struct.unpack("<I", reader.take(4))
    config = ModelConfig(**json.loads(reader.take(cfg_len).decode("utf-8")))
    blocks = {}
    (n_params,) = struct.unpack("<I", reader.take(4))
    for _ in range(n_params):
        name, arr = reader.record()
        bname, pname = name.split(".", 1)
        blocks.setdefault(bname, {})[pname] = arr
    stats = {}
    (n_stats,) = struct.unpack("<I", reader.take(4))
    for _ in range(n_stats):
        name, arr = reader.record()
        stats[name] = arr
    return ParameterSet(blocks=blocks, running_stats=stats, config=config)


# ---------------------------------------------------------------------------
# CSV output
# ---------------------------------------------------------------------------

def fmt(value):
    """Render numbers with 17 significant digits so files are reproducible
    and round-trip through float64 exactly."""
    if isinstance(value, float):
        return f"{value:.17g}"
    return str(value)


def write_csv(path, header, rows):
    lines = [",".join(header)]
    lines.extend(",".join(fmt(v) for v in row) for row in rows)
    Path(path).write_text("\n".join(lines) + "\n")
