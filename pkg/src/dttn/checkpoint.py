"""Binary checkpoint container.

Layout (all integers little-endian)::

    b"DTTN" | u16 version | 3-byte dtype tag ("f32"/"f64")
    u32 config length | config text (UTF-8)
    u32 tensor count | manifest entries
    payloads, concatenated in manifest order

A manifest entry is ``u16 name length | name | u8 kind | u8 rank |
u32 extents[rank] | u64 offset | u64 nbytes`` where ``offset`` is relative to
the start of the payload region and ``kind`` is 0 (f32), 1 (f64) or 2 (i64).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DimensionError, FormatError
from .tensor import DTYPES, dtype_tag

MAGIC = b"DTTN"
VERSION = 1
KINDS = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
KIND_OF = {np.dtype(np.float32): 0, np.dtype(np.float64): 1, np.dtype(np.int64): 2}


@dataclass
class Checkpoint:
    dtype: str
    config_text: str = ""
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def group(self, prefix: str) -> dict[str, np.ndarray]:
        n = len(prefix)
        return {k[n:]: v for k, v in self.tensors.items() if k.startswith(prefix)}

    def to_bytes(self) -> bytes:
        if self.dtype not in DTYPES:
            raise FormatError(f"unknown dtype tag {self.dtype!r}")
        cfg = self.config_text.encode("utf-8")
        head = [MAGIC, struct.pack("<H", VERSION), self.dtype.encode("ascii"), struct.pack("<I", len(cfg)), cfg,
                struct.pack("<I", len(self.tensors))]
        payloads, offset = [], 0
        for name, arr in self.tensors.items():
            arr = np.asarray(arr)
            if arr.dtype not in KIND_OF:
                raise FormatError(f"tensor {name}: unsupported dtype {arr.dtype}")
            kind = KIND_OF[arr.dtype]
            data = np.ascontiguousarray(arr, dtype=KINDS[kind]).tobytes()
            key = name.encode("utf-8")
            head.append(struct.pack("<H", len(key)) + key + struct.pack("<BB", kind, arr.ndim)
                        + struct.pack(f"<{arr.ndim}I", *arr.shape) + struct.pack("<QQ", offset, len(data)))
            payloads.append(data)
            offset += len(data)
        return b"".join(head + payloads)

    @classmethod
    def from_bytes(cls, raw: bytes, source: str = "<bytes>") -> "Checkpoint":
        pos = 0

        def take(n: int) -> bytes:
            nonlocal pos
            if pos + n > len(raw):
                raise FormatError(f"{source}: truncated at byte offset {len(raw)} (needed {pos + n})")
            out = raw[pos:pos + n]
            pos += n
            return out

        if take(4) != MAGIC:
            raise FormatError(f"{source}: bad magic at byte offset 0 (not a DTTN checkpoint)")
        (version,) = struct.unpack("<H", take(2))
        if version != VERSION:
            raise FormatError(f"{source}: unsupported version {version} at byte offset 4")
        tag = take(3).decode("ascii", "replace")
        if tag not in DTYPES:
            raise FormatError(f"{source}: unknown dtype tag {tag!r} at byte offset 6")
        (clen,) = struct.unpack("<I", take(4))
        try:
            config_text = take(clen).decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError(f"{source}: config text is not UTF-8") from None
        (count,) = struct.unpack("<I", take(4))
        manifest = []
        for _ in range(count):
            at = pos
            (nlen,) = struct.unpack("<H", take(2))
            name = take(nlen).decode("utf-8", "replace")
            kind, rank = struct.unpack("<BB", take(2))
            if kind not in KINDS:
                raise FormatError(f"{source}: tensor {name!r} has unknown kind {kind} (entry at byte offset {at})")
            shape = struct.unpack(f"<{rank}I", take(4 * rank))
            off, nbytes = struct.unpack("<QQ", take(16))
            if nbytes != int(np.prod(shape, dtype=np.int64)) * KINDS[kind].itemsize:
                raise FormatError(f"{source}: tensor {name!r} size does not match its extents (entry at byte offset {at})")
            manifest.append((name, kind, shape, off, nbytes))
        base = pos
        tensors = {}
        for name, kind, shape, off, nbytes in manifest:
            start = base + off
            if start + nbytes > len(raw):
                raise FormatError(f"{source}: payload of {name!r} truncated at byte offset {len(raw)}")
            tensors[name] = np.frombuffer(raw, KINDS[kind], count=nbytes // KINDS[kind].itemsize,
                                          offset=start).reshape(shape).astype(KINDS[kind].newbyteorder("="))
        end = base + sum(m[4] for m in manifest)
        if end != len(raw):
            raise FormatError(f"{source}: {len(raw) - end} unexpected bytes after byte offset {end}")
        return cls(tag, config_text, tensors)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())


def load_checkpoint(path, expect_dtype: str | None = None) -> Checkpoint:
    """Read a checkpoint; ``expect_dtype`` rejects a precision mismatch."""
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"checkpoint {p} not found")
    ckpt = Checkpoint.from_bytes(p.read_bytes(), str(p))
    if expect_dtype is not None and ckpt.dtype != expect_dtype:
        raise FormatError(f"{p}: checkpoint holds {ckpt.dtype} tensors but {expect_dtype} was requested")
    return ckpt


def save_checkpoint(model, opt_state: dict | None, path, config_text: str = "", extra: dict | None = None) -> Checkpoint:
    """Write parameters, buffers (BN running stats), momentum buffers and ``extra``."""
    state = model.state_dict()
    tag = dtype_tag(next(iter(state.values())).dtype)
    tensors = {f"model.{k}": v for k, v in state.items()}
    tensors.update({f"opt.{k}": v for k, v in (opt_state or {}).items()})
    tensors.update({f"meta.{k}": np.asarray(v) for k, v in (extra or {}).items()})
    ckpt = Checkpoint(tag, config_text, tensors)
    ckpt.save(path)
    return ckpt


def restore_model(model, ckpt: Checkpoint) -> None:
    own = dtype_tag(next(iter(model.state_dict().values())).dtype)
    if own != ckpt.dtype:
        raise FormatError(f"cannot load a {ckpt.dtype} checkpoint into a {own} model")
    try:
        model.load_state_dict(ckpt.group("model."))
    except (KeyError, DimensionError) as exc:
        raise FormatError(f"checkpoint does not match the model: {exc}") from None
