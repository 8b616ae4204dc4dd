"""Binary checkpoint format ("ODN1") for full and extracted networks.

Layout, all integers little-endian:

    magic        4 bytes  b"ODN1"
    version      u32      currently 1
    header_len   u32
    header       JSON (utf-8): kind (full|extracted), arch_id, depth_max,
                 depth, num_classes, in_channels, width_multiplier, meta
    count        u32      number of tensor records
    per record:
        name_len u16, name utf-8
        dtype    u8       0 = float32
        rank     u8
        dims     rank x u64
        payload  raw little-endian float32, 4 * prod(dims) bytes

Tensor records hold parameter values and batch-norm running buffers;
round-tripping is bit-exact.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Union

import numpy as np

from .network import DepthPartitionedNetwork, ExtractedNetwork, build_network, extract_odn

MAGIC = b"ODN1"
VERSION = 1
DTYPE_FLOAT32 = 0


class CheckpointError(Exception):
    """Base class for checkpoint read/write failures."""


class BadMagicError(CheckpointError):
    def __init__(self, path, actual: bytes) -> None:
        self.path, self.actual = path, actual
        super().__init__(f"{path}: bad magic {actual!r}, expected {MAGIC!r}")


class VersionMismatchError(CheckpointError):
    def __init__(self, path, actual: int) -> None:
        self.path, self.actual = path, actual
        super().__init__(f"{path}: unsupported version {actual}, expected {VERSION}")


class TruncatedCheckpointError(CheckpointError):
    def __init__(self, path, context: str) -> None:
        self.path, self.context = path, context
        super().__init__(f"{path}: truncated while reading {context}")


class PayloadLengthError(CheckpointError):
    def __init__(self, path, tensor_name: str, expected: int, actual: int) -> None:
        self.path, self.tensor_name = path, tensor_name
        self.expected, self.actual = expected, actual
        super().__init__(f"{path}: tensor {tensor_name!r} payload needs {expected} bytes, "
                         f"got {actual}")


class DuplicateNameError(CheckpointError):
    def __init__(self, path, tensor_name: str) -> None:
        self.path, self.tensor_name = path, tensor_name
        super().__init__(f"{path}: duplicate tensor name {tensor_name!r}")


Network = Union[DepthPartitionedNetwork, ExtractedNetwork]


def _network_header(net: Network, meta: dict | None) -> dict:
    if isinstance(net, DepthPartitionedNetwork):
        kind, depth, depth_max = "full", net.active_depth, net.depth_max
    else:
        kind, depth, depth_max = "extracted", net.depth, None
    return {
        "kind": kind,
        "arch_id": net.arch_id,
        "depth_max": depth_max,
        "depth": depth,
        "num_classes": net.num_classes,
        "in_channels": net.in_channels,
        "width_multiplier": net.width_multiplier,
        "meta": meta or {},
    }


def tensor_entries(net: Network) -> dict[str, np.ndarray]:
    """Parameter values plus batch-norm buffers, keyed by unique name."""
    entries = {name: p.value.data for name, p in net.named_parameters().items()}
    for name, buf in net.named_buffers().items():
        if name in entries:
            raise CheckpointError(f"parameter/buffer name collision: {name!r}")
        entries[name] = buf
    return entries


def payload_bytes(net: Network) -> int:
    """Total raw tensor payload size (excludes all headers and metadata)."""
    return sum(4 * arr.size for arr in tensor_entries(net).values())


def save_checkpoint(net: Network, path, meta: dict | None = None) -> None:
    header = json.dumps(_network_header(net, meta)).encode()
    entries = tensor_entries(net)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(header)))
        fh.write(header)
        fh.write(struct.pack("<I", len(entries)))
        for name, arr in entries.items():
            name_b = name.encode()
            arr32 = np.ascontiguousarray(arr, dtype="<f4")
            fh.write(struct.pack("<H", len(name_b)))
            fh.write(name_b)
            fh.write(struct.pack("<BB", DTYPE_FLOAT32, arr32.ndim))
            fh.write(struct.pack(f"<{arr32.ndim}Q", *arr32.shape))
            fh.write(arr32.tobytes())


class _Reader:
    def __init__(self, path) -> None:
        self.path = path
        self.buf = Path(path).read_bytes()
        self.pos = 0

    def take(self, n: int, context: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedCheckpointError(self.path, context)
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Parse and validate a checkpoint into (header, name -> float32 array)."""
    r = _Reader(path)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise BadMagicError(path, magic)
    version, header_len = struct.unpack("<II", r.take(8, "version/header length"))
    if version != VERSION:
        raise VersionMismatchError(path, version)
    try:
        header = json.loads(r.take(header_len, "header"))
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: malformed header JSON: {exc}") from exc
    (count,) = struct.unpack("<I", r.take(4, "tensor count"))
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", r.take(2, "tensor name length"))
        name = r.take(name_len, "tensor name").decode()
        dtype_code, rank = struct.unpack("<BB", r.take(2, f"dtype/rank of {name!r}"))
        if dtype_code != DTYPE_FLOAT32:
            raise CheckpointError(f"{path}: tensor {name!r} has unknown dtype code {dtype_code}")
        dims = struct.unpack(f"<{rank}Q", r.take(8 * rank, f"dims of {name!r}"))
        n_bytes = 4 * int(np.prod(dims, dtype=np.int64)) if rank else 4
        remaining = len(r.buf) - r.pos
        if remaining < n_bytes:
            raise PayloadLengthError(path, name, n_bytes, remaining)
        payload = r.take(n_bytes, f"payload of {name!r}")
        if name in tensors:
            raise DuplicateNameError(path, name)
        tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
    return header, tensors


def load_checkpoint(path) -> Network:
    """Rebuild the saved network and restore every tensor bit-exactly."""
    header, tensors = read_checkpoint(path)
    net = build_network(header["arch_id"], header["in_channels"], header["num_classes"],
                        header["width_multiplier"])
    if header["kind"] == "extracted":
        target: Network = extract_odn(net, header["depth"])
    else:
        net.activate_depth(header["depth"])
        target = net
    expected = set(tensor_entries(target))
    got = set(tensors)
    if expected != got:
        missing = sorted(expected - got)[:5]
        extra = sorted(got - expected)[:5]
        raise CheckpointError(f"{path}: tensor set mismatch (missing {missing}, extra {extra})")
    target.load_state_dict(tensors)
    return target


def load_header(path) -> dict:
    header, _ = read_checkpoint(path)
    return header
