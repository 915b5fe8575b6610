"""Reader/writer for .rvw tensor archives (little-endian, SHA-256 trailer)."""

import hashlib
import struct

import numpy as np

WEIGHTS_MAGIC = b"RAVEWGHT"
VERSION = 1


def _string(buf, s):
    b = s.encode("utf-8")
    buf += struct.pack("<I", len(b)) + b


def encode(tensors, metadata=None, string_lists=None, magic=WEIGHTS_MAGIC):
    buf = bytearray(magic)
    buf += struct.pack("<I", VERSION)
    metadata = dict(sorted((metadata or {}).items()))
    buf += struct.pack("<I", len(metadata))
    for k, v in metadata.items():
        _string(buf, k)
        _string(buf, str(v))
    buf += struct.pack("<I", len(tensors))
    for name, arr in tensors:
        arr = np.ascontiguousarray(arr, dtype="<f4")
        _string(buf, name)
        buf += struct.pack("<I", arr.ndim)
        for d in arr.shape:
            buf += struct.pack("<Q", d)
        buf += arr.tobytes()
    string_lists = string_lists or []
    buf += struct.pack("<I", len(string_lists))
    for name, items in string_lists:
        _string(buf, name)
        buf += struct.pack("<I", len(items))
        for s in items:
            _string(buf, s)
    buf += hashlib.sha256(buf).digest()
    return bytes(buf)


def decode(data, magic=WEIGHTS_MAGIC):
    body, trailer = data[:-32], data[-32:]
    if not body.startswith(magic):
        raise ValueError("bad magic")
    if hashlib.sha256(body).digest() != trailer:
        raise ValueError("checksum mismatch")
    pos = len(magic)

    def take(fmt):
        nonlocal pos
        vals = struct.unpack_from(fmt, body, pos)
        pos += struct.calcsize(fmt)
        return vals[0]

    def string():
        nonlocal pos
        n = take("<I")
        s = body[pos:pos + n].decode("utf-8")
        pos += n
        return s

    if take("<I") != VERSION:
        raise ValueError("unsupported version")
    metadata = {}
    for _ in range(take("<I")):
        k = string()
        metadata[k] = string()
    tensors = []
    for _ in range(take("<I")):
        name = string()
        shape = [take("<Q") for _ in range(take("<I"))]
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(body, dtype="<f4", count=count, offset=pos).reshape(shape)
        pos += 4 * count
        tensors.append((name, arr))
    lists = []
    for _ in range(take("<I")):
        name = string()
        lists.append((name, [string() for _ in range(take("<I"))]))
    return tensors, metadata, lists


def write(path, tensors, metadata=None, string_lists=None):
    data = encode(tensors, metadata, string_lists)
    with open(path, "wb") as f:
        f.write(data)
    return hashlib.sha256(data).hexdigest()


def read(path):
    with open(path, "rb") as f:
        return decode(f.read())
