"""Container layout.

Header (21 bytes)::

    magic   4s   b"NRDC"
    version u8
    mode    u8   0 = CC, 1 = CR, 2 = MCR
    C       u8   channel size of the condition signal
    digest  8s   truncated hash of the model/config identity
    width   u16  big-endian, unpadded frame width
    height  u16  big-endian, unpadded frame height

followed by one record per frame::

    frame_type  u8   0 = intra passthrough, 1 = intra learned, 2 = inter
    motion_len  u32  big-endian
    inter_len   u32  big-endian
    motion payload (motion_len bytes), inter payload (inter_len bytes)
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field

MAGIC = b"NRDC"
VERSION = 1
_HEADER = struct.Struct(">4sBBB8sHH")
_RECORD = struct.Struct(">BII")
HEADER_SIZE = _HEADER.size
RECORD_OVERHEAD = _RECORD.size


class BitstreamError(ValueError):
    pass


class FrameType(enum.IntEnum):
    INTRA_PASSTHROUGH = 0
    INTRA_LEARNED = 1
    INTER = 2


@dataclass(frozen=True)
class Header:
    mode: int
    channels: int
    digest: bytes
    width: int
    height: int
    version: int = VERSION

    def pack(self) -> bytes:
        if len(self.digest) != 8:
            raise BitstreamError("config digest must be 8 bytes")
        return _HEADER.pack(MAGIC, self.version, self.mode, self.channels, self.digest, self.width, self.height)


@dataclass(frozen=True)
class FrameRecord:
    frame_type: FrameType
    motion: bytes = b""
    inter: bytes = b""

    def pack(self) -> bytes:
        return _RECORD.pack(int(self.frame_type), len(self.motion), len(self.inter)) + self.motion + self.inter

    @property
    def size(self) -> int:
        return RECORD_OVERHEAD + len(self.motion) + len(self.inter)


@dataclass
class Bitstream:
    header: Header
    records: list[FrameRecord] = field(default_factory=list)

    def to_bytes(self) -> bytes:
        return self.header.pack() + b"".join(r.pack() for r in self.records)

    def __len__(self) -> int:
        return HEADER_SIZE + sum(r.size for r in self.records)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Bitstream":
        if len(data) < HEADER_SIZE:
            raise BitstreamError(f"stream of {len(data)} bytes is shorter than the header")
        magic, version, mode, channels, digest, width, height = _HEADER.unpack_from(data, 0)
        if magic != MAGIC:
            raise BitstreamError(f"bad magic {magic!r}")
        if version != VERSION:
            raise BitstreamError(f"unsupported version {version}")
        header = Header(mode, channels, digest, width, height, version)
        records = []
        pos = HEADER_SIZE
        while pos < len(data):
            if pos + RECORD_OVERHEAD > len(data):
                raise BitstreamError(f"truncated record header at byte offset {pos}")
            ftype, mlen, ilen = _RECORD.unpack_from(data, pos)
            try:
                ftype = FrameType(ftype)
            except ValueError:
                raise BitstreamError(f"unknown frame type {ftype} at byte offset {pos}") from None
            pos += RECORD_OVERHEAD
            end = pos + mlen + ilen
            if end > len(data):
                raise BitstreamError(f"record at byte offset {pos - RECORD_OVERHEAD} claims {mlen + ilen} "
                                     f"payload bytes, only {len(data) - pos} remain")
            records.append(FrameRecord(ftype, bytes(data[pos:pos + mlen]), bytes(data[pos + mlen:end])))
            pos = end
        return cls(header, records)
