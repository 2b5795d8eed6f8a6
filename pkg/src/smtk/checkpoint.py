"""Named-tensor checkpoint files.

Layout (little-endian)::

    b"SMTK" | u32 version=1 | u32 count
    per tensor: u16 name_len | name (utf-8) | u8 rank | u64 dims[rank] | f64 data
"""

import struct

import numpy as np

from .errors import FormatError

MAGIC = b"SMTK"
VERSION = 1


def write_tensors(path, tensors):
    """Write an ordered mapping of name -> array."""
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(tensors)))
        for name, arr in tensors.items():
            raw = name.encode("utf-8")
            if len(raw) > 0xFFFF:
                raise ValueError(f"tensor name too long: {name[:40]}...")
            arr = np.asarray(arr, dtype="<f8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(np.ascontiguousarray(arr).tobytes())


class _Reader:
    def __init__(self, buf, path):
        self.buf = buf
        self.pos = 0
        self.path = path

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise FormatError(f"{self.path}: truncated checkpoint at byte {self.pos}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_tensors(path):
    """Read a checkpoint into an ordered dict of name -> float64 array."""
    with open(path, "rb") as fh:
        r = _Reader(fh.read(), path)
    if r.take(4) != MAGIC:
        raise FormatError(f"{path}: bad magic, not a checkpoint")
    version, count = r.unpack("<II")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    out = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        try:
            name = r.take(name_len).decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError(f"{path}: tensor name is not valid utf-8") from None
        (rank,) = r.unpack("<B")
        shape = r.unpack(f"<{rank}Q")
        size = int(np.prod(shape, dtype=np.int64))
        data = np.frombuffer(r.take(8 * size), dtype="<f8").reshape(shape)
        out[name] = data.astype(np.float64)
    if r.pos != len(r.buf):
        raise FormatError(f"{path}: {len(r.buf) - r.pos} trailing bytes")
    return out


def encode_text(text):
    """Store a string as a rank-1 tensor of byte values."""
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.float64)


def decode_text(arr):
    return bytes(np.asarray(arr).astype(np.uint8)).decode("utf-8")
