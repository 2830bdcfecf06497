"""Named trainable parameters and the binary checkpoint format.

Checkpoint layout (little-endian throughout):

    magic   4 bytes  "GBCK"
    version u32
    cfg_len u32, followed by cfg_len bytes of UTF-8 JSON
    entries until EOF, each:
        name_len u32, name bytes (UTF-8)
        rank u32, dims u32 * rank
        float32 values (row-major)

All stored arrays are float32; the file round-trips bit-exactly.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .tape import Tensor

MAGIC = b"GBCK"
VERSION = 1


class ParamStore:
    """Unique-named map of tensors; buffers are non-trainable state."""

    def __init__(self):
        self._tensors: dict[str, Tensor] = {}
        self._buffers: set[str] = set()

    def add(self, name: str, value, buffer: bool = False) -> Tensor:
        if name in self._tensors:
            raise ValueError(f"duplicate parameter name: {name}")
        t = Tensor(np.asarray(value), requires_grad=not buffer)
        self._tensors[name] = t
        if buffer:
            self._buffers.add(name)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __len__(self) -> int:
        return len(self._tensors)

    def names(self) -> list[str]:
        return list(self._tensors)

    def is_buffer(self, name: str) -> bool:
        return name in self._buffers

    def items(self):
        return self._tensors.items()

    def trainable_items(self):
        return [(n, t) for n, t in self._tensors.items() if n not in self._buffers]

    def zero_grad(self) -> None:
        for t in self._tensors.values():
            t.grad = None

    def astype(self, dtype) -> "ParamStore":
        """Copy with every tensor cast to `dtype` (e.g. float64 shadow)."""
        out = ParamStore()
        for name, t in self._tensors.items():
            out.add(name, t.data.astype(dtype), buffer=name in self._buffers)
        return out

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {n: t.data for n, t in self._tensors.items()}


def save_checkpoint(path, store: ParamStore, config: dict) -> None:
    payload = {"config": config, "buffers": sorted(store._buffers)}
    blob = json.dumps(payload, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for name, t in store.items():
            arr = np.ascontiguousarray(t.data, dtype="<f4")
            nb = name.encode("utf-8")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def load_checkpoint(path) -> tuple[ParamStore, dict]:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file (bad magic)")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    (blob_len,) = struct.unpack_from("<I", raw, 8)
    off = 12
    payload = json.loads(raw[off : off + blob_len].decode("utf-8"))
    off += blob_len
    buffers = set(payload.get("buffers", []))
    store = ParamStore()
    while off < len(raw):
        (name_len,) = struct.unpack_from("<I", raw, off)
        off += 4
        name = raw[off : off + name_len].decode("utf-8")
        off += name_len
        (rank,) = struct.unpack_from("<I", raw, off)
        off += 4
        dims = struct.unpack_from(f"<{rank}I", raw, off)
        off += 4 * rank
        count = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=off).reshape(dims).copy()
        off += 4 * count
        store.add(name, arr, buffer=name in buffers)
    return store, payload["config"]
