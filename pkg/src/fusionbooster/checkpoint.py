"""
Binary checkpoints for a trained booster.

Layout (all integers little-endian)::

    b"FBST"                      magic
    u32 version
    u32 block count
    per block:
        u32 name length, UTF-8 name
        4 x u32 shape
        float32 data
    u32 trailer length, UTF-8 key=value trailer (config and loss traces)
    u64 checksum                 sum of all parameter data bytes mod 2**64

Files are written to a temporary sibling and renamed into place.
"""
from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .booster import AseModule, BoosterConfig, ProbeUnit
from .errors import CheckpointFormatError

__all__ = ["MAGIC", "VERSION", "Checkpoint", "save_checkpoint", "load_checkpoint"]

MAGIC = b"FBST"
VERSION = 1

_NETS = (("probe_a", ProbeUnit), ("probe_b", ProbeUnit), ("ase", AseModule))


@dataclass
class Checkpoint:
    probe_a: ProbeUnit
    probe_b: ProbeUnit
    ase: AseModule
    config: BoosterConfig
    traces: dict = field(default_factory=dict)
    version: int = VERSION

    @property
    def models(self):
        return self.probe_a, self.probe_b, self.ase


def _byte_sum(buf):
    return int(np.frombuffer(buf, dtype=np.uint8).sum(dtype=np.uint64))


def _trailer(cfg, traces):
    lines = [f"config.{k}={v!r}" for k, v in cfg.to_dict().items()]
    for name, values in traces.items():
        lines.append(f"trace.{name}=" + ",".join(repr(float(v)) for v in values))
    return ("\n".join(lines) + "\n").encode("utf-8")


def save_checkpoint(path, probe_a, probe_b, ase, cfg, traces=None):
    """Serialise the three networks, their config and loss traces to ``path``."""
    path = Path(path)
    nets = {"probe_a": probe_a, "probe_b": probe_b, "ase": ase}
    blocks = []
    checksum = 0
    for net_name, _ in _NETS:
        for pname, p in nets[net_name].named_parameters():
            data = np.ascontiguousarray(p.data, dtype="<f4").tobytes()
            checksum = (checksum + _byte_sum(data)) % 2**64
            name = f"{net_name}.{pname}".encode("utf-8")
            blocks.append(struct.pack("<I", len(name)) + name + struct.pack("<4I", *p.shape) + data)
    trailer = _trailer(cfg, traces or {})
    payload = b"".join([
        MAGIC,
        struct.pack("<II", VERSION, len(blocks)),
        *blocks,
        struct.pack("<I", len(trailer)),
        trailer,
        struct.pack("<Q", checksum),
    ])
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        # mkstemp creates 0600; give the file the permissions a plain open() would
        umask = os.umask(0)
        os.umask(umask)
        os.chmod(tmp, 0o666 & ~umask)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n, what, block=None):
        if self.pos + n > len(self.buf):
            raise CheckpointFormatError(f"truncated {what}", offset=self.pos, block=block)
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt, what, block=None):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what, block))


def _parse_trailer(text):
    cfg, traces = {}, {}
    for line in text.splitlines():
        if not line:
            continue
        key, _, value = line.partition("=")
        if key.startswith("config."):
            cfg[key[7:]] = value
        elif key.startswith("trace."):
            traces[key[6:]] = [float(v) for v in value.split(",")] if value else []
    return BoosterConfig.from_dict(cfg), traces


def load_checkpoint(path):
    """Read a checkpoint written by :func:`save_checkpoint`."""
    buf = Path(path).read_bytes()
    r = _Reader(buf)
    if r.take(4, "magic") != MAGIC:
        raise CheckpointFormatError("bad magic bytes, not a booster checkpoint", offset=0)
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version} (expected {VERSION})", offset=4)
    (count,) = r.unpack("<I", "block count")

    arrays = {}
    checksum = 0
    for _ in range(count):
        start = r.pos
        (nlen,) = r.unpack("<I", "block name length")
        try:
            name = r.take(nlen, "block name").decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointFormatError("block name is not UTF-8", offset=start) from None
        shape = r.unpack("<4I", "block shape", name)
        data = r.take(4 * int(np.prod(shape)), "parameter block", name)
        checksum = (checksum + _byte_sum(data)) % 2**64
        arrays[name] = np.frombuffer(data, dtype="<f4").reshape(shape).astype(np.float32)
    (tlen,) = r.unpack("<I", "trailer length")
    trailer = r.take(tlen, "trailer")
    (stored,) = r.unpack("<Q", "checksum")
    if stored != checksum:
        raise CheckpointFormatError(f"checksum mismatch (stored {stored}, computed {checksum})", offset=r.pos - 8)
    if r.pos != len(buf):
        raise CheckpointFormatError("unexpected bytes after checksum", offset=r.pos)

    try:
        cfg, traces = _parse_trailer(trailer.decode("utf-8"))
    except (UnicodeDecodeError, ValueError) as exc:
        raise CheckpointFormatError(f"unreadable trailer: {exc}", offset=r.pos - 8 - tlen) from None

    nets = {}
    for net_name, cls in _NETS:
        net = cls()
        for pname, p in net.named_parameters():
            key = f"{net_name}.{pname}"
            if key not in arrays:
                raise CheckpointFormatError("missing parameter block", block=key)
            if arrays[key].shape != p.shape:
                raise CheckpointFormatError(f"shape {arrays[key].shape} does not match {p.shape}", block=key)
            p.data = arrays.pop(key)
        nets[net_name] = net
    if arrays:
        raise CheckpointFormatError(f"unexpected blocks: {', '.join(sorted(arrays))}")
    return Checkpoint(nets["probe_a"], nets["probe_b"], nets["ase"], cfg, traces, version)
