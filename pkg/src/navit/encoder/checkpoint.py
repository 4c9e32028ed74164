"""Checkpoint files: an ordered list of named float32 tensors.

Layout (little-endian): ``NVCK`` | version u32 | count u64; then per tensor
name length u32 | UTF-8 name | rank u32 | dims u32[rank] | float32 payload.
"""

import struct

import numpy as np

from ..errors import FormatError

MAGIC = b"NVCK"
VERSION = 1
_HEADER = struct.Struct("<4sIQ")


def write_tensors(named, path):
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, len(named)))
        for name, array in named.items():
            array = np.asarray(array)
            raw = name.encode()
            fh.write(struct.pack("<I", len(raw)) + raw)
            fh.write(struct.pack(f"<I{array.ndim}I", array.ndim, *array.shape))
            fh.write(np.ascontiguousarray(array, dtype="<f4").tobytes())


def read_tensors(path):
    buf = open(path, "rb").read()
    if len(buf) < _HEADER.size:
        raise FormatError("truncated header", len(buf))
    magic, version, count = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    offset = _HEADER.size
    out = {}
    for _ in range(count):
        try:
            (length,) = struct.unpack_from("<I", buf, offset)
            name = buf[offset + 4: offset + 4 + length].decode()
            offset += 4 + length
            (rank,) = struct.unpack_from("<I", buf, offset)
            dims = struct.unpack_from(f"<{rank}I", buf, offset + 4)
            offset += 4 + 4 * rank
        except (struct.error, UnicodeDecodeError) as exc:
            raise FormatError(f"corrupt tensor header: {exc}", offset) from None
        size = int(np.prod(dims, dtype=np.int64))
        if offset + 4 * size > len(buf):
            raise FormatError(f"truncated payload for {name!r}", offset)
        out[name] = np.frombuffer(buf, "<f4", size, offset).reshape(dims).copy()
        offset += 4 * size
    if offset != len(buf):
        raise FormatError(f"{len(buf) - offset} trailing bytes", offset)
    return out


def save_checkpoint(params, path, optimizer=None):
    named = {name: t.data for name, t in params.tensors.items()}
    if optimizer is not None:
        named["opt/step"] = np.array([optimizer.step], dtype=np.float32)
        for name in params.tensors:
            if name in optimizer.m:
                named[f"opt/m/{name}"] = optimizer.m[name]
                named[f"opt/v/{name}"] = optimizer.v[name]
    write_tensors(named, path)


def load_checkpoint(params, path, optimizer=None):
    """Overwrite ``params`` (and optimizer state) in place; shapes and names must match."""
    named = read_tensors(path)
    expected = {name: t.shape for name, t in params.tensors.items()}
    found = {name: a.shape for name, a in named.items() if not name.startswith("opt/")}
    if expected != found:
        missing = sorted(set(expected) ^ set(found)) or sorted(
            n for n in expected if expected[n] != found[n])
        raise FormatError(f"checkpoint does not match the model configuration: {missing[:5]}", 0)
    for name, t in params.tensors.items():
        t.data = named[name].astype(t.data.dtype)
    if optimizer is not None and "opt/step" in named:
        optimizer.step = int(named["opt/step"][0])
        dtype = next(iter(params.tensors.values())).data.dtype
        optimizer.m = {n[6:]: a.astype(dtype) for n, a in named.items() if n.startswith("opt/m/")}
        optimizer.v = {n[6:]: a.astype(dtype) for n, a in named.items() if n.startswith("opt/v/")}
    return params
