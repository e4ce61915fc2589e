"""Token sequences and their on-disk format.

Layout, all integers little-endian::

    "DSCT" | version u8 | flags u8 (bit0: PQ) | token_rate u16 | n_groups u8
    | group_sizes u16 * n_groups | codec_id u64 | original_length u64
    | n_codes u64 | codes (u16 if effective size <= 65536 else u32)
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"DSCT"
VERSION = 1
FLAG_PQ = 0x01

_HEAD = struct.Struct("<4sBBHB")
_TAIL = struct.Struct("<QQQ")


class TokenFormatError(ValueError):
    pass


@dataclass
class TokenSequence:
    codes: np.ndarray
    codec_id: int
    group_sizes: tuple[int, ...]
    token_rate: int
    original_length: int
    pq: bool = False

    def __post_init__(self):
        self.codes = np.asarray(self.codes, dtype=np.int64).reshape(-1)
        self.group_sizes = tuple(int(s) for s in self.group_sizes)
        if self.codes.size and (self.codes.min() < 0 or self.codes.max() >= self.effective_size):
            raise TokenFormatError(f"code out of range [0, {self.effective_size})")

    @property
    def effective_size(self) -> int:
        return int(np.prod(self.group_sizes, dtype=object))

    @property
    def code_width(self) -> int:
        return 2 if self.effective_size <= 65536 else 4

    def __len__(self):
        return self.codes.shape[0]

    def __eq__(self, other):
        if not isinstance(other, TokenSequence):
            return NotImplemented
        return (
            np.array_equal(self.codes, other.codes)
            and self.codec_id == other.codec_id
            and self.group_sizes == other.group_sizes
            and self.token_rate == other.token_rate
            and self.original_length == other.original_length
            and self.pq == other.pq
        )


def serialize_tokens(tokens: TokenSequence) -> bytes:
    if not 1 <= len(tokens.group_sizes) <= 255:
        raise TokenFormatError("between 1 and 255 groups are representable")
    if any(not 2 <= s <= 0xFFFF for s in tokens.group_sizes):
        raise TokenFormatError("group sizes must fit in u16")
    dtype = "<u2" if tokens.code_width == 2 else "<u4"
    parts = [
        _HEAD.pack(MAGIC, VERSION, FLAG_PQ if tokens.pq else 0, tokens.token_rate, len(tokens.group_sizes)),
        struct.pack(f"<{len(tokens.group_sizes)}H", *tokens.group_sizes),
        _TAIL.pack(tokens.codec_id & 0xFFFFFFFFFFFFFFFF, tokens.original_length, len(tokens)),
        tokens.codes.astype(dtype).tobytes(),
    ]
    return b"".join(parts)


def deserialize_tokens(data: bytes) -> TokenSequence:
    if len(data) < _HEAD.size:
        raise TokenFormatError("truncated header")
    magic, version, flags, rate, n_groups = _HEAD.unpack_from(data, 0)
    if magic != MAGIC:
        raise TokenFormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise TokenFormatError(f"unsupported token format version {version}")
    if n_groups == 0:
        raise TokenFormatError("n_groups must be >= 1")
    off = _HEAD.size
    need = off + 2 * n_groups + _TAIL.size
    if len(data) < need:
        raise TokenFormatError("truncated header")
    sizes = struct.unpack_from(f"<{n_groups}H", data, off)
    off += 2 * n_groups
    codec_id, original_length, n_codes = _TAIL.unpack_from(data, off)
    off += _TAIL.size
    effective = int(np.prod(sizes, dtype=object))
    width = 2 if effective <= 65536 else 4
    if len(data) != off + width * n_codes:
        raise TokenFormatError(
            f"payload is {len(data) - off} bytes, expected {width * n_codes} for {n_codes} codes"
        )
    codes = np.frombuffer(data, dtype="<u2" if width == 2 else "<u4", count=n_codes, offset=off)
    return TokenSequence(codes.astype(np.int64), codec_id, sizes, rate, original_length, bool(flags & FLAG_PQ))
