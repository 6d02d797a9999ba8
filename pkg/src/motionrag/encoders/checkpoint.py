"""Named-tensor container.

``<path>`` is a text manifest with one ``name<TAB>shape<TAB>offset`` line per
tensor (shape as comma-separated extents, offset in bytes); ``<path>.bin`` is
the concatenated little-endian float64 payload. Tensor order is preserved.
"""

from __future__ import annotations

import hashlib
import os

import numpy as np


class CheckpointError(ValueError):
    pass


def save_tensors(path, tensors: dict[str, np.ndarray]) -> None:
    path = os.fspath(path)
    lines, offset = [], 0
    with open(path + ".bin", "wb") as blob:
        for name, arr in tensors.items():
            if not name or any(c in name for c in "\t\n"):
                raise CheckpointError(f"invalid tensor name {name!r}")
            arr = np.ascontiguousarray(arr, dtype="<f8")
            shape = ",".join(str(s) for s in arr.shape)
            lines.append(f"{name}\t{shape}\t{offset}\n")
            blob.write(arr.tobytes())
            offset += arr.nbytes
    with open(path, "w", encoding="utf-8") as fh:
        fh.writelines(lines)


def load_tensors(path) -> dict[str, np.ndarray]:
    path = os.fspath(path)
    if not os.path.exists(path) or not os.path.exists(path + ".bin"):
        raise CheckpointError(f"missing checkpoint {path}")
    with open(path + ".bin", "rb") as fh:
        blob = fh.read()
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            name, shape_s, offset_s = line.rstrip("\n").split("\t")
            shape = tuple(int(s) for s in shape_s.split(",")) if shape_s else ()
            offset = int(offset_s)
            n = int(np.prod(shape)) if shape else 1
            if offset + 8 * n > len(blob):
                raise CheckpointError(f"tensor {name} runs past end of blob")
            out[name] = np.frombuffer(blob, dtype="<f8", count=n, offset=offset).reshape(shape).copy()
    return out


def checksum(tensors: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name in sorted(tensors):
        h.update(name.encode())
        h.update(np.ascontiguousarray(tensors[name], dtype="<f8").tobytes())
    return h.hexdigest()
