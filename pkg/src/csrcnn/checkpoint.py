"""Little-endian binary container for models and cached tensors.

Layout::

    b"CSRC"  u32 version
    u32 stage_count, then per stage: u32 d, s, m, upscale
    u64 iteration  u64 seed
    u32 record_count, then per record:
        u32 name_len, name (utf-8), u8 dtype tag, u32 rank, u32 dims[rank],
        raw little-endian scalars

Parameter records are named ``stage{k}.layer{i}.{weight,bias,slopes}``; the
matching SGD velocity is stored under the same name plus ``@velocity``.
"""

import io
import struct

import numpy as np

from .errors import FormatError
from .model import StageConfig, build_cascade

MAGIC = b"CSRC"
VERSION = 1
VELOCITY_SUFFIX = "@velocity"

_DTYPE_TAGS = {np.dtype("<f4"): 0, np.dtype("<f8"): 1, np.dtype("<i8"): 2, np.dtype("<u1"): 3}
_TAG_DTYPES = {v: k for k, v in _DTYPE_TAGS.items()}


def write_container(f, configs, records, iteration=0, seed=0):
    """Write ``records`` (an iterable of ``(name, array)``) to the binary file ``f``."""
    records = list(records)
    f.write(MAGIC)
    f.write(struct.pack("<I", VERSION))
    f.write(struct.pack("<I", len(configs)))
    for c in configs:
        f.write(struct.pack("<4I", c.d, c.s, c.m, c.upscale))
    f.write(struct.pack("<QQ", iteration, seed))
    f.write(struct.pack("<I", len(records)))
    for name, arr in records:
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<")
        if dt not in _DTYPE_TAGS:
            raise TypeError(f"unsupported dtype {arr.dtype} for record {name!r}")
        encoded = name.encode("utf-8")
        f.write(struct.pack("<I", len(encoded)))
        f.write(encoded)
        f.write(struct.pack("<BI", _DTYPE_TAGS[dt], arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        f.write(np.ascontiguousarray(arr, dtype=dt).tobytes())


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.data):
            raise FormatError(f"truncated file while reading {what}", self.pos)
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def read_container(data):
    """Parse container bytes into ``(configs, records, iteration, seed)``."""
    r = _Reader(data)
    if r.take(4, "magic") != MAGIC:
        raise FormatError("bad magic, not a CSRC file", 0)
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise FormatError(f"unsupported format version {version} (expected {VERSION})", 4)
    (count,) = r.unpack("<I", "stage count")
    configs = []
    for _ in range(count):
        at = r.pos
        d, s, m, u = r.unpack("<4I", "stage config")
        try:
            configs.append(StageConfig(d, s, m, u).validate())
        except ValueError as exc:
            raise FormatError(f"invalid stage config: {exc}", at) from None
    iteration, seed = r.unpack("<QQ", "iteration counter")
    (n_records,) = r.unpack("<I", "record count")
    records = {}
    for _ in range(n_records):
        (name_len,) = r.unpack("<I", "record name length")
        at = r.pos
        try:
            name = r.take(name_len, "record name").decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("record name is not utf-8", at) from None
        at = r.pos
        tag, rank = r.unpack("<BI", "record header")
        if tag not in _TAG_DTYPES:
            raise FormatError(f"unknown dtype tag {tag} for {name!r}", at)
        dims = r.unpack(f"<{rank}I", "record dims")
        dtype = _TAG_DTYPES[tag]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
        raw = r.take(nbytes, f"data of {name!r}")
        records[name] = np.frombuffer(raw, dtype=dtype).reshape(dims).astype(dtype.newbyteorder("="))
    if r.pos != len(data):
        raise FormatError("trailing bytes after last record", r.pos)
    return configs, records, iteration, seed


def model_records(model):
    for name, value, _, _ in model.named_params():
        yield name, value
    for name, _, _, velocity in model.named_params():
        yield name + VELOCITY_SUFFIX, velocity


def checkpoint_bytes(model):
    buf = io.BytesIO()
    write_container(buf, model.configs, model_records(model), model.iteration, model.seed)
    return buf.getvalue()


def save_checkpoint(model, path):
    with open(path, "wb") as f:
        f.write(checkpoint_bytes(model))


def model_from_bytes(data):
    configs, records, iteration, seed = read_container(data)
    if not configs:
        raise FormatError("container holds no model", 8)
    first = records.get("stage0.layer0.weight")
    dtype = np.float32 if first is None else first.dtype
    model = build_cascade(configs, seed=seed, dtype=dtype)
    for name, value, _, velocity in model.named_params():
        for key, target in ((name, value), (name + VELOCITY_SUFFIX, velocity)):
            if key not in records:
                raise FormatError(f"missing tensor {key!r}")
            stored = records.pop(key)
            if stored.shape != target.shape:
                raise FormatError(f"tensor {key!r} has shape {stored.shape}, expected {target.shape}")
            target[...] = stored
    if records:
        raise FormatError(f"unexpected tensors: {sorted(records)[:3]}")
    model.iteration = iteration
    return model


def load_checkpoint(path):
    with open(path, "rb") as f:
        return model_from_bytes(f.read())
