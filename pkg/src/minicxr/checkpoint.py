"""Checkpoint serialization for named parameter collections.

Layout: a human-readable UTF-8 header, one blank line, then a flat
little-endian float64 payload. Header lines:

    CGAFT1
    tag=<phase tag>
    params=<count>
    <name>\t<d0,d1,...>\t<element offset>   (repeated <count> times)
    payload=<total element count>

Offsets index float64 elements from the start of the payload.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .autodiff import DiffArray, param

MAGIC = "CGAFT1"


class CheckpointError(ValueError):
    """Malformed or wrong-version checkpoint file."""


def save_checkpoint(path, params: dict[str, DiffArray], tag: str = "") -> None:
    path = Path(path)
    names = list(params.keys())
    lines = [MAGIC, f"tag={tag}", f"params={len(names)}"]
    offset = 0
    chunks = []
    for name in names:
        v = params[name].values
        dims = ",".join(str(d) for d in v.shape) if v.shape else ""
        lines.append(f"{name}\t{dims}\t{offset}")
        offset += v.size
        chunks.append(np.ascontiguousarray(v, dtype="<f8"))
    lines.append(f"payload={offset}")
    header = "\n".join(lines) + "\n\n"
    payload = b"".join(c.tobytes() for c in chunks)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(header.encode("utf-8"))
        fh.write(payload)


def load_checkpoint(path) -> tuple[dict[str, DiffArray], str]:
    """Read a checkpoint; returns (params, tag)."""
    raw = Path(path).read_bytes()
    sep = raw.find(b"\n\n")
    if sep < 0:
        raise CheckpointError(f"{path}: missing header terminator")
    header = raw[:sep].decode("utf-8").splitlines()
    payload = raw[sep + 2:]
    if not header or header[0] != MAGIC:
        raise CheckpointError(f"{path}: bad magic (expected {MAGIC})")
    if not header[1].startswith("tag=") or not header[2].startswith("params="):
        raise CheckpointError(f"{path}: malformed header")
    tag = header[1][len("tag="):]
    count = int(header[2][len("params="):])
    entries = header[3:3 + count]
    trailer = header[3 + count]
    if not trailer.startswith("payload="):
        raise CheckpointError(f"{path}: missing payload line")
    total = int(trailer[len("payload="):])
    flat = np.frombuffer(payload, dtype="<f8")
    if flat.size != total:
        raise CheckpointError(f"{path}: payload has {flat.size} elements, header says {total}")
    params: dict[str, DiffArray] = {}
    for line in entries:
        name, dims, off = line.split("\t")
        shape = tuple(int(d) for d in dims.split(",")) if dims else ()
        size = int(np.prod(shape)) if shape else 1
        start = int(off)
        params[name] = param(flat[start:start + size].reshape(shape).copy())
    return params, tag
