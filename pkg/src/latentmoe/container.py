"""Single-file binary container for MoE and MoLAE layers.

Layout (all integers little-endian)::

    0   8s   magic  b"LATMOE\\x00\\x1a"
    8   u8   format version (1)
    9   u8   layer kind      (0 = moe, 1 = molae)
    10  u8   activation      (0 = silu, 1 = identity, 2 = relu)
    11  u8   op mask bits    (1 = up, 2 = gate, 4 = down; 0 for moe)
    12  5*u32  n, m, num_experts, top_k, group_size
    32  u32  tensor count
    36  u64  payload length in bytes
    44  tensor table, one entry per tensor:
            u16 name length, name (utf-8), u8 dtype (1 = f32, 2 = f64),
            u8 ndim, ndim * u32 dims, u64 offset into payload, u64 byte length
    ..  payload: raw little-endian tensor data, in table order, no gaps

Tensors are written in the layer's ``parameters()`` order, so the same layer
and dtype always serialize to the same bytes.
"""

from __future__ import annotations

import hashlib
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .errors import (
    BadMagicError,
    FormatError,
    NonFiniteError,
    ShapeMismatchError,
    TruncatedFileError,
    VersionMismatchError,
)
from .moe import OPERATORS, MoeConfig, MoeLayer, RoutedFFN
from .molae import MolaeConfig, MolaeLayer, parameter_shapes

MAGIC = b"LATMOE\x00\x1a"
VERSION = 1
_HEADER = struct.Struct("<8sBBBB5IIQ")
_KINDS = {"moe": 0, "molae": 1}
_ACTS = {"silu": 0, "identity": 1, "relu": 2}
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_DTYPE_CODES = {"float32": 1, "f32": 1, "float64": 2, "f64": 2}
_OP_BITS = {"up": 1, "gate": 2, "down": 4}


def _expected_shapes(kind: str, config) -> dict[str, tuple[int, ...]]:
    if kind == "molae":
        return parameter_shapes(config)
    n, m = config.n, config.m
    shapes = {"router": (config.num_experts, n)}
    for i in range(config.num_experts):
        shapes[f"experts.{i}.up"] = (m, n)
        shapes[f"experts.{i}.gate"] = (m, n)
        shapes[f"experts.{i}.down"] = (n, m)
    return shapes


def dumps(layer: RoutedFFN, dtype: str = "float32") -> bytes:
    code = _DTYPE_CODES.get(dtype)
    if code is None:
        raise ValueError(f"unsupported dtype {dtype!r}")
    dt = _DTYPES[code]
    c = layer.config
    if isinstance(layer, MolaeLayer):
        kind, k, mask = "molae", c.group_size, sum(_OP_BITS[o] for o in c.op_mask)
    else:
        kind, k, mask = "moe", 1, 0
    params = layer.parameters()
    table, chunks, offset = [], [], 0
    for name, arr in params.items():
        data = np.ascontiguousarray(arr, dtype=dt).tobytes()
        raw = name.encode("utf-8")
        shape = np.shape(arr)
        table.append(
            struct.pack("<H", len(raw)) + raw + struct.pack(f"<BB{len(shape)}I", code, len(shape), *shape)
            + struct.pack("<QQ", offset, len(data))
        )
        chunks.append(data)
        offset += len(data)
    header = _HEADER.pack(
        MAGIC, VERSION, _KINDS[kind], _ACTS[c.activation], mask,
        c.n, c.m, c.num_experts, c.top_k, k, len(params), offset,
    )
    return header + b"".join(table) + b"".join(chunks)


def loads(buf: bytes) -> RoutedFFN:
    """Parse a container; every tensor is widened to float64."""
    size = len(buf)
    head = min(size, len(MAGIC))
    if bytes(buf[:head]) != MAGIC[:head]:
        raise BadMagicError(f"not a latentmoe container (magic {bytes(buf[:8])!r})", 0)
    if size < _HEADER.size:
        raise TruncatedFileError(f"header needs {_HEADER.size} bytes, file has {size}", size)
    magic, version, kind_code, act_code, mask_bits, n, m, N, top_k, k, count, payload_len = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise BadMagicError(f"not a latentmoe container (magic {magic!r})", 0)
    if version != VERSION:
        raise VersionMismatchError(f"container version {version}, reader supports {VERSION}", 8)
    kinds = {v: k_ for k_, v in _KINDS.items()}
    acts = {v: k_ for k_, v in _ACTS.items()}
    if kind_code not in kinds:
        raise FormatError(f"unknown layer kind code {kind_code}", 9)
    if act_code not in acts:
        raise FormatError(f"unknown activation code {act_code}", 10)
    kind = kinds[kind_code]
    try:
        if kind == "molae":
            ops = frozenset(o for o, b in _OP_BITS.items() if mask_bits & b)
            config = MolaeConfig(n, m, N, top_k, acts[act_code], group_size=k, op_mask=ops)
        else:
            config = MoeConfig(n, m, N, top_k, acts[act_code])
    except ValueError as exc:
        raise FormatError(f"invalid config record: {exc}", 12) from exc

    pos = _HEADER.size
    entries = []

    def need(nbytes: int, what: str):
        if pos + nbytes > size:
            raise TruncatedFileError(f"{what} needs bytes up to {pos + nbytes}, file has {size}", pos)

    for _ in range(count):
        need(2, "tensor table")
        (name_len,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        need(name_len + 2, "tensor table")
        name = bytes(buf[pos : pos + name_len]).decode("utf-8", errors="replace")
        pos += name_len
        dcode, ndim = struct.unpack_from("<BB", buf, pos)
        pos += 2
        if dcode not in _DTYPES:
            raise FormatError(f"tensor {name!r}: unknown dtype code {dcode}", pos - 2)
        need(4 * ndim + 16, "tensor table")
        shape = struct.unpack_from(f"<{ndim}I", buf, pos)
        pos += 4 * ndim
        off, nbytes = struct.unpack_from("<QQ", buf, pos)
        pos += 16
        entries.append((name, _DTYPES[dcode], tuple(shape), off, nbytes, pos - 16))

    payload_start = pos
    expected_len = payload_start + payload_len
    if size < expected_len:
        raise TruncatedFileError(f"expected {expected_len} bytes, file has {size}", size)
    if size > expected_len:
        raise FormatError(f"{size - expected_len} trailing bytes after payload", expected_len)

    schema = _expected_shapes(kind, config)
    seen = {e[0] for e in entries}
    missing = [nm for nm in schema if nm not in seen]
    extra = [e[0] for e in entries if e[0] not in schema]
    if missing or extra or len(entries) != len(seen):
        raise ShapeMismatchError(
            f"tensor set does not match {kind} schema (missing {missing[:3]}, unexpected {extra[:3]})",
            _HEADER.size,
        )
    cursor = 0
    params = {}
    for name, dt, shape, off, nbytes, where in entries:
        if shape != schema[name]:
            raise ShapeMismatchError(f"tensor {name!r} has shape {shape}, expected {schema[name]}", where)
        if nbytes != int(np.prod(shape)) * dt.itemsize:
            raise ShapeMismatchError(f"tensor {name!r}: byte length {nbytes} does not fit shape {shape}", where)
        if off != cursor:
            raise FormatError(f"tensor {name!r} at payload offset {off}, expected {cursor}", where)
        cursor += nbytes
        start = payload_start + off
        arr = np.frombuffer(buf, dtype=dt, count=int(np.prod(shape)), offset=start).reshape(shape)
        if not np.all(np.isfinite(arr)):
            bad = int(np.flatnonzero(~np.isfinite(arr.ravel()))[0])
            raise NonFiniteError(f"tensor {name!r} contains NaN/Inf (element {bad})", start + bad * dt.itemsize)
        params[name] = arr.astype(np.float64)
    if cursor != payload_len:
        raise FormatError(f"tensor data covers {cursor} bytes, payload declares {payload_len}", 36)
    if kind == "molae":
        return MolaeLayer.from_parameters(config, params)
    return MoeLayer.from_parameters(config, params)


def atomic_write(path, data: bytes) -> None:
    path = Path(path)
    directory = path.parent if str(path.parent) else Path(".")
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=directory)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save(layer: RoutedFFN, path, dtype: str = "float32") -> str:
    """Write ``layer`` to ``path`` atomically; returns the sha256 of the bytes written."""
    data = dumps(layer, dtype)
    atomic_write(path, data)
    return hashlib.sha256(data).hexdigest()


def load(path) -> RoutedFFN:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc.strerror}") from exc
    return loads(buf)


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


__all__ = ["dumps", "loads", "save", "load", "atomic_write", "sha256_file", "MAGIC", "VERSION", "OPERATORS"]
