"""Binary checkpoint format.

Layout (all little-endian):

    magic  b"PPEA1"
    u32    format version (1)
    u32    stage provenance (0 = unknown)
    u64    entry count
    entry* u32 name length, UTF-8 name, u8 dtype tag (0=f32, 1=f64),
           u8 rank, rank x u64 dims, raw values
    u32    CRC32 of everything before it

Entries are sorted by name, so save -> load -> save is byte-identical.
Parameters are stored as "param.<dotted name>", BN running statistics as
"bn.<dotted name>.running_{mean,var}", cost-volume range state under
"student_state.*", and optimizer state under "adam.*".
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"PPEA1"
FORMAT_VERSION = 1
_DTYPE_TAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_TAG_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


@dataclass
class Checkpoint:
    version: int = FORMAT_VERSION
    stage: int = 0
    entries: dict = field(default_factory=dict)  # name -> np.ndarray


@dataclass
class LoadReport:
    missing: list = field(default_factory=list)  # wanted by the model, absent in file
    unexpected: list = field(default_factory=list)  # in file, unused by the model


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    buf = bytearray()
    buf += MAGIC
    buf += struct.pack("<II", ckpt.version, ckpt.stage)
    buf += struct.pack("<Q", len(ckpt.entries))
    for name in sorted(ckpt.entries):
        arr = np.ascontiguousarray(ckpt.entries[name])
        if arr.dtype not in _DTYPE_TAGS:
            raise TypeError(f"entry {name!r} has unsupported dtype {arr.dtype}")
        nb = name.encode("utf-8")
        buf += struct.pack("<I", len(nb))
        buf += nb
        buf += struct.pack("<BB", _DTYPE_TAGS[arr.dtype], arr.ndim)
        buf += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        buf += arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
    buf += struct.pack("<I", zlib.crc32(bytes(buf)) & 0xFFFFFFFF)
    Path(path).write_bytes(bytes(buf))


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < len(MAGIC) + 16 or raw[:len(MAGIC)] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    (stored_crc,) = struct.unpack("<I", raw[-4:])
    if zlib.crc32(raw[:-4]) & 0xFFFFFFFF != stored_crc:
        raise ValueError(f"{path}: CRC mismatch, file corrupt")
    off = len(MAGIC)
    version, stage = struct.unpack_from("<II", raw, off)
    off += 8
    (count,) = struct.unpack_from("<Q", raw, off)
    off += 8
    entries = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", raw, off)
        off += 4
        name = raw[off:off + nlen].decode("utf-8")
        off += nlen
        tag, rank = struct.unpack_from("<BB", raw, off)
        off += 2
        dims = struct.unpack_from(f"<{rank}Q", raw, off)
        off += 8 * rank
        dtype = _TAG_DTYPES[tag]
        n_elem = int(np.prod(dims, dtype=np.int64)) if rank else 1
        nbytes = n_elem * dtype.itemsize
        arr = np.frombuffer(raw, dtype=dtype, count=n_elem, offset=off).reshape(dims)
        off += nbytes
        entries[name] = arr.astype(dtype.newbyteorder("="))
    return Checkpoint(version, stage, entries)


def checkpoint_from_model(model, student_state=None, stage: int = 0, adam=None) -> Checkpoint:
    entries = {}
    for name, p in model.named_parameters():
        entries[f"param.{name}"] = p.tensor.data.copy()
    for name, st in model.named_bn_states():
        entries[f"bn.{name}.running_mean"] = st.running_mean.copy()
        entries[f"bn.{name}.running_var"] = st.running_var.copy()
    if student_state is not None:
        entries["student_state.d_min_ema"] = np.array([student_state.d_min_ema])
        entries["student_state.d_max_ema"] = np.array([student_state.d_max_ema])
        entries["student_state.bins"] = student_state.bins.values.copy()
    if adam is not None:
        entries["adam.step"] = np.array([float(adam.step_count)])
        for name, m, v in adam.state_entries():
            entries[f"adam.m.{name}"] = m.copy()
            entries[f"adam.v.{name}"] = v.copy()
    return Checkpoint(FORMAT_VERSION, stage, entries)


def apply_checkpoint(ckpt: Checkpoint, model, student_state=None, strict_shapes: bool = True) -> LoadReport:
    """Copy matching entries into the model; absent modules keep their init.

    Returns a report naming entries the model wanted but the file lacks
    (e.g. a freshly attached decoder adapter) and file entries nothing used.
    """
    report = LoadReport()
    used = set()
    for name, p in model.named_parameters():
        key = f"param.{name}"
        if key in ckpt.entries:
            arr = ckpt.entries[key]
            if tuple(arr.shape) != tuple(p.tensor.shape):
                raise ValueError(f"{key}: shape {arr.shape} != model {p.tensor.shape}")
            p.tensor.data = arr.astype(p.tensor.dtype)
            used.add(key)
        else:
            report.missing.append(key)
    for name, st in model.named_bn_states():
        for suffix, attr in (("running_mean", "running_mean"), ("running_var", "running_var")):
            key = f"bn.{name}.{suffix}"
            if key in ckpt.entries:
                setattr(st, attr, ckpt.entries[key].astype(getattr(st, attr).dtype))
                used.add(key)
            else:
                report.missing.append(key)
    if student_state is not None:
        from .geometry import build_depth_bins

        if "student_state.d_min_ema" in ckpt.entries:
            student_state.d_min_ema = float(ckpt.entries["student_state.d_min_ema"][0])
            student_state.d_max_ema = float(ckpt.entries["student_state.d_max_ema"][0])
            bins = ckpt.entries["student_state.bins"]
            student_state.bins = build_depth_bins(float(bins[0]), float(bins[-1]), bins.size)
            used.update(k for k in ckpt.entries if k.startswith("student_state."))
        else:
            report.missing.append("student_state.*")
    report.unexpected = [k for k in ckpt.entries
                         if k not in used and not k.startswith("adam.")]
    return report
