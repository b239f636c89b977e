"""NET1 checkpoint files.

Layout, all little-endian:
  magic "NET1" | u16 arch id length | arch id (utf-8) | u64 scalar count
  | u8 flags (bit 0: Adam state, bit 1: appendix)
  | f32 parameters
  | [u64 step | f32 m | f32 v]      when flag bit 0
  | [u32 length | raw bytes]        when flag bit 1
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .network import Network

NET1_MAGIC = b"NET1"
_FLAG_ADAM = 1
_FLAG_APPENDIX = 2


class CheckpointError(ValueError):
    pass


def save_network(path: str | Path, net: Network, include_adam: bool = False, appendix: bytes | None = None) -> None:
    params = net.parameters()
    count = sum(p.size for p in params)
    flags = 0
    if include_adam and net.adam_m is not None:
        flags |= _FLAG_ADAM
    if appendix is not None:
        flags |= _FLAG_APPENDIX
    arch = net.arch_id.encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(NET1_MAGIC)
        fh.write(struct.pack("<H", len(arch)))
        fh.write(arch)
        fh.write(struct.pack("<QB", count, flags))
        for p in params:
            fh.write(np.ascontiguousarray(p.value, dtype="<f4").tobytes())
        if flags & _FLAG_ADAM:
            fh.write(struct.pack("<Q", net.adam_step_count))
            for buf in (net.adam_m, net.adam_v):
                for arr in buf:
                    fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        if flags & _FLAG_APPENDIX:
            fh.write(struct.pack("<I", len(appendix)))
            fh.write(appendix)


def _read_exact(fh, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return buf


def load_network(path: str | Path, net: Network) -> bytes | None:
    """Load parameters (and Adam state if stored) into net.

    The architecture id and scalar count must match the receiving
    network. Returns the appendix bytes when present, else None.
    """
    params = net.parameters()
    count = sum(p.size for p in params)
    with open(path, "rb") as fh:
        if _read_exact(fh, 4, "magic") != NET1_MAGIC:
            raise CheckpointError(f"bad magic in {path}")
        (arch_len,) = struct.unpack("<H", _read_exact(fh, 2, "header"))
        arch = _read_exact(fh, arch_len, "arch id").decode("utf-8")
        stored_count, flags = struct.unpack("<QB", _read_exact(fh, 9, "header"))
        if arch != net.arch_id:
            raise CheckpointError(f"architecture mismatch: file has {arch!r}, net is {net.arch_id!r}")
        if stored_count != count:
            raise CheckpointError(f"parameter count mismatch: file has {stored_count}, net has {count}")
        for p in params:
            raw = _read_exact(fh, 4 * p.size, f"parameter {p.name}")
            p.value[...] = np.frombuffer(raw, dtype="<f4").reshape(p.value.shape).astype(net.dtype)
            p.grad[...] = 0.0
        if flags & _FLAG_ADAM:
            (net.adam_step_count,) = struct.unpack("<Q", _read_exact(fh, 8, "adam step"))
            net.adam_m = []
            net.adam_v = []
            for store in (net.adam_m, net.adam_v):
                for p in params:
                    raw = _read_exact(fh, 4 * p.size, "adam state")
                    store.append(np.frombuffer(raw, dtype="<f4").reshape(p.value.shape).astype(net.dtype))
        appendix = None
        if flags & _FLAG_APPENDIX:
            (alen,) = struct.unpack("<I", _read_exact(fh, 4, "appendix length"))
            appendix = _read_exact(fh, alen, "appendix")
        trailing = fh.read(1)
        if trailing:
            raise CheckpointError("trailing bytes after checkpoint payload")
    return appendix
