"""Named-tensor container used for every saved model.

Layout::

    CAPSDEC-CONTAINER 1\n
    key = value\n            (zero or more header lines, UTF-8)
    END-HEADER\n
    TENSOR <name> <d0,d1,...>\n<raw little-endian float32 bytes>\n
    ...
    END\n

Values round-trip bit-exactly because tensors are stored as their raw
float32 bytes.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

MAGIC = b"CAPSDEC-CONTAINER 1\n"
_LE_F32 = np.dtype("<f4")


class CheckpointError(ValueError):
    pass


def dumps(header: dict[str, object], tensors: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC]
    for key, value in header.items():
        key = str(key)
        text = str(value)
        if "\n" in key or "=" in key or "\n" in text:
            raise CheckpointError(f"header entry {key!r} cannot contain newlines or '=' in the key")
        parts.append(f"{key} = {text}\n".encode())
    parts.append(b"END-HEADER\n")
    for name, arr in tensors.items():
        if any(ch.isspace() for ch in name):
            raise CheckpointError(f"tensor name {name!r} contains whitespace")
        arr = np.asarray(arr)
        shape = ",".join(str(d) for d in arr.shape)
        parts.append(f"TENSOR {name} {shape}\n".encode())
        parts.append(np.ascontiguousarray(arr, dtype=_LE_F32).tobytes())
        parts.append(b"\n")
    parts.append(b"END\n")
    return b"".join(parts)


def loads(blob: bytes) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    if not blob.startswith(MAGIC):
        raise CheckpointError("not a capsdec container (bad magic)")
    pos = len(MAGIC)

    def readline() -> str:
        nonlocal pos
        end = blob.find(b"\n", pos)
        if end < 0:
            raise CheckpointError(f"truncated container at byte {pos}")
        line = blob[pos:end].decode()
        pos = end + 1
        return line

    header: dict[str, str] = {}
    while True:
        line = readline()
        if line == "END-HEADER":
            break
        key, sep, value = line.partition(" = ")
        if not sep:
            raise CheckpointError(f"malformed header line {line!r}")
        header[key] = value

    tensors: dict[str, np.ndarray] = {}
    while True:
        line = readline()
        if line == "END":
            break
        tag, name, shape_text = (line.split(" ") + ["", ""])[:3]
        if tag != "TENSOR" or not name:
            raise CheckpointError(f"expected TENSOR record at byte {pos}, got {line!r}")
        shape = tuple(int(d) for d in shape_text.split(",")) if shape_text else ()
        nbytes = int(np.prod(shape, dtype=np.int64)) * 4
        if pos + nbytes + 1 > len(blob):
            raise CheckpointError(f"truncated tensor {name!r} at byte {pos}")
        arr = np.frombuffer(blob, dtype=_LE_F32, count=nbytes // 4, offset=pos).reshape(shape)
        tensors[name] = arr.astype(np.float32)
        pos += nbytes
        if blob[pos:pos + 1] != b"\n":
            raise CheckpointError(f"missing record terminator after tensor {name!r}")
        pos += 1
    return header, tensors


def save(path, header: dict[str, object], tensors: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(header, tensors))


def load(path) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    return loads(Path(path).read_bytes())
