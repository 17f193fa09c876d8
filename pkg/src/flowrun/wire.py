"""Chunked flow framing.

Header layout (big-endian, 44 bytes)::

    magic   u16  0xDF17
    version u8   0x01
    flags   u8   bit0 DATA, bit1 END, bit2 SMALL
    request 16s
    flow_id u64
    seq     u64
    length  u32  payload length
    crc32   u32  of the payload (reflected polynomial 0xEDB88320)
"""

from __future__ import annotations

import enum
import hashlib
import struct
import zlib
from dataclasses import dataclass

MAGIC = 0xDF17
VERSION = 0x01
HEADER = struct.Struct(">HBB16sQQII")
HEADER_SIZE = HEADER.size
CHUNK_SIZE = 65536
SMALL_DATA_THRESHOLD = 16384

assert HEADER_SIZE == 44


class Flag(enum.IntFlag):
    DATA = 0x01
    END = 0x02
    SMALL = 0x04


_KNOWN_FLAGS = int(Flag.DATA | Flag.END | Flag.SMALL)
_U64 = 1 << 64


class FrameError(ValueError):
    pass


class BadMagic(FrameError):
    pass


class BadVersion(FrameError):
    pass


class BadLength(FrameError):
    pass


class BadCrc(FrameError):
    pass


class TruncatedFrame(FrameError):
    pass


class BadFlags(FrameError):
    pass


def _check_chunk(request_id: bytes, flow_id: int, seq: int, flags: int, payload: bytes,
                 chunk_size: int) -> None:
    if len(request_id) != 16:
        raise ValueError("request_id must be 16 bytes")
    if not 0 <= flow_id < _U64 or not 0 <= seq < _U64:
        raise ValueError("flow_id and seq must fit in 64 bits")
    if flags & ~_KNOWN_FLAGS:
        raise BadFlags(f"unknown flag bits {flags:#x}")
    if bool(flags & Flag.DATA) != bool(payload):
        raise BadFlags("DATA must be set exactly when the payload is non-empty")
    if flags & Flag.SMALL and (seq != 0 or not flags & Flag.END):
        raise BadFlags("SMALL frames are single-frame transfers (seq 0, END)")
    if len(payload) > chunk_size:
        raise BadLength(f"payload of {len(payload)} bytes exceeds chunk size {chunk_size}")


@dataclass(frozen=True)
class FlowChunk:
    request_id: bytes
    flow_id: int
    seq: int
    flags: Flag
    payload: bytes = b""

    def __post_init__(self):
        _check_chunk(self.request_id, self.flow_id, self.seq, int(self.flags), self.payload, CHUNK_SIZE)

    @property
    def is_end(self) -> bool:
        return bool(self.flags & Flag.END)

    @property
    def is_small(self) -> bool:
        return bool(self.flags & Flag.SMALL)


def flow_id_for(source: str, data_name: str, destination: str) -> int:
    """64-bit flow identity of (source function, data name, chosen destination)."""
    key = "\x00".join((source, data_name, destination)).encode()
    return int.from_bytes(hashlib.blake2b(key, digest_size=8).digest(), "big")


def encode_frame(chunk: FlowChunk) -> bytes:
    payload = chunk.payload
    header = HEADER.pack(MAGIC, VERSION, int(chunk.flags), chunk.request_id, chunk.flow_id,
                         chunk.seq, len(payload), zlib.crc32(payload))
    return header + payload


def decode_frame(buf: bytes, chunk_size: int = CHUNK_SIZE) -> FlowChunk:
    """Decode exactly one frame; every malformed input raises a FrameError."""
    buf = bytes(buf)
    if len(buf) < HEADER_SIZE:
        raise TruncatedFrame(f"{len(buf)} bytes is shorter than the {HEADER_SIZE}-byte header")
    magic, version, flags, request_id, flow_id, seq, length, crc = HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise BadMagic(f"magic {magic:#06x}")
    if version != VERSION:
        raise BadVersion(f"version {version}")
    if length > chunk_size:
        raise BadLength(f"declared payload {length} exceeds chunk size {chunk_size}")
    if len(buf) < HEADER_SIZE + length:
        raise TruncatedFrame(f"payload needs {length} bytes, have {len(buf) - HEADER_SIZE}")
    if len(buf) > HEADER_SIZE + length:
        raise BadLength(f"{len(buf) - HEADER_SIZE - length} trailing bytes")
    payload = buf[HEADER_SIZE:]
    if zlib.crc32(payload) != crc:
        raise BadCrc(f"crc {zlib.crc32(payload):#010x} != {crc:#010x}")
    _check_chunk(request_id, flow_id, seq, flags, payload, chunk_size)
    return FlowChunk(request_id, flow_id, seq, Flag(flags), payload)


def chunk_count(total: int, chunk_size: int = CHUNK_SIZE) -> int:
    """Frames needed for ``total`` bytes; an empty transfer still sends END."""
    return max(1, -(-total // chunk_size))


def make_chunk(request_id: bytes, flow_id: int, payload: bytes, seq: int,
               chunk_size: int = CHUNK_SIZE, small: bool = False) -> FlowChunk:
    """Build chunk ``seq`` of a transfer of ``payload``."""
    n = chunk_count(len(payload), chunk_size)
    if not 0 <= seq < n:
        raise IndexError(seq)
    body = payload[seq * chunk_size:(seq + 1) * chunk_size]
    flags = Flag(0)
    if body:
        flags |= Flag.DATA
    if seq == n - 1:
        flags |= Flag.END
    if small:
        flags |= Flag.SMALL
    return FlowChunk(request_id, flow_id, seq, flags, body)


def split_payload(request_id: bytes, flow_id: int, payload: bytes,
                  chunk_size: int = CHUNK_SIZE, small_threshold: int = SMALL_DATA_THRESHOLD) -> list[FlowChunk]:
    small = len(payload) < small_threshold and len(payload) <= chunk_size
    return [make_chunk(request_id, flow_id, payload, i, chunk_size, small)
            for i in range(chunk_count(len(payload), chunk_size))]
