"""Static-model range coding of quantization indices.

Byte layout (little-endian)::

    b"EPIC" | u8 version | u32 T | f32 lo | f32 hi | f32 sigma | u16 W
    u8 rank | u32 dims[rank]
    u32 distinct | (u32 symbol, u32 count) * distinct
    u64 payload_len | payload

The payload is produced by a carry-less 64-bit range coder (Subbotin style)
driven by the count table, using integer arithmetic only, so identical
indices always give identical bytes.
"""
from __future__ import annotations

import struct
from bisect import bisect_right
from dataclasses import dataclass

import numpy as np

from .quantizer import QuantizerSpec

MAGIC = b"EPIC"
VERSION = 1

_BITS = 64
_MASK = (1 << _BITS) - 1
_TOP = 1 << (_BITS - 8)
_BOT = 1 << (_BITS - 16)


class BitstreamError(ValueError):
    """Base class for undecodable bitstreams."""


class BadMagicError(BitstreamError):
    pass


class BadVersionError(BitstreamError):
    pass


class TruncatedError(BitstreamError):
    pass


class BadHeaderError(BitstreamError):
    """Header fields do not describe a valid quantizer."""


class InconsistentTableError(BitstreamError):
    pass


@dataclass
class Header:
    levels: int
    lo: float
    hi: float
    sigma: float
    window: int
    shape: tuple[int, ...]
    symbols: np.ndarray
    counts: np.ndarray

    def spec(self) -> QuantizerSpec:
        return QuantizerSpec(self.levels, self.lo, self.hi, self.sigma, self.window)


def _cumulative(counts) -> list[int]:
    cum = [0]
    for c in counts:
        cum.append(cum[-1] + int(c))
    return cum


def range_encode(symbols_idx, counts) -> bytes:
    """Encode a sequence of table positions (not raw symbols) with the given counts."""
    cum = _cumulative(counts)
    total = cum[-1]
    if total > _BOT:
        raise ValueError(f"count total {total} exceeds coder precision")
    out = bytearray()
    low, rng = 0, _MASK
    for s in symbols_idx:
        r = rng // total
        low += r * cum[s]
        rng = r * (cum[s + 1] - cum[s])
        while True:
            if (low ^ (low + rng)) < _TOP:
                pass
            elif rng < _BOT:
                rng = (-low) & (_BOT - 1)
            else:
                break
            out.append(low >> (_BITS - 8))
            low = (low << 8) & _MASK
            rng = (rng << 8) & _MASK
    for _ in range(_BITS // 8):
        out.append(low >> (_BITS - 8))
        low = (low << 8) & _MASK
    return bytes(out)


def range_decode(payload: bytes, counts, n: int) -> list[int]:
    cum = _cumulative(counts)
    total = cum[-1]
    nbytes = _BITS // 8
    if len(payload) < nbytes:
        raise TruncatedError(f"payload of {len(payload)} bytes is shorter than the coder state")
    pos = nbytes
    code = int.from_bytes(payload[:nbytes], "big")
    low, rng = 0, _MASK
    out = []
    last = len(counts) - 1
    for _ in range(n):
        r = rng // total
        v = (code - low) // r
        if v >= total or v < 0:
            raise InconsistentTableError("payload decodes outside the frequency table")
        s = min(bisect_right(cum, v) - 1, last)
        out.append(s)
        low += r * cum[s]
        rng = r * (cum[s + 1] - cum[s])
        while True:
            if (low ^ (low + rng)) < _TOP:
                pass
            elif rng < _BOT:
                rng = (-low) & (_BOT - 1)
            else:
                break
            if pos >= len(payload):
                raise TruncatedError("payload ended before all symbols were decoded")
            code = ((code << 8) | payload[pos]) & _MASK
            pos += 1
            low = (low << 8) & _MASK
            rng = (rng << 8) & _MASK
    if pos != len(payload):
        raise InconsistentTableError(f"{len(payload) - pos} payload bytes left after decoding")
    return out


def encode_bitstream(indices, spec: QuantizerSpec) -> bytes:
    q = np.asarray(indices)
    if q.size and (q.min() < 0 or q.max() >= spec.levels):
        raise ValueError(f"indices must lie in [0, {spec.levels})")
    flat = q.reshape(-1).astype(np.int64)
    symbols, positions, counts = np.unique(flat, return_inverse=True, return_counts=True)
    payload = range_encode(positions.tolist(), counts.tolist())
    parts = [
        MAGIC,
        struct.pack("<BIfffH", VERSION, spec.levels, spec.lo, spec.hi, spec.sigma, spec.window),
        struct.pack("<B", q.ndim),
        struct.pack(f"<{q.ndim}I", *q.shape),
        struct.pack("<I", len(symbols)),
        np.column_stack([symbols, counts]).astype("<u4").tobytes(),
        struct.pack("<Q", len(payload)),
        payload,
    ]
    return b"".join(parts)


def read_header(buf: bytes) -> tuple[Header, int]:
    """Parse the header; returns it with the offset of the payload-length field's end."""
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise BadMagicError(f"bad magic {bytes(buf[:4])!r}, expected {MAGIC!r}")
    try:
        (version,) = struct.unpack_from("<B", buf, 4)
        if version != VERSION:
            raise BadVersionError(f"unsupported bitstream version {version}")
        levels, lo, hi, sigma, window = struct.unpack_from("<IfffH", buf, 5)
        pos = 5 + struct.calcsize("<IfffH")
        (rank,) = struct.unpack_from("<B", buf, pos)
        pos += 1
        shape = struct.unpack_from(f"<{rank}I", buf, pos)
        pos += 4 * rank
        (distinct,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        if len(buf) < pos + 8 * distinct + 8:
            raise TruncatedError("header truncated inside the frequency table")
        table = np.frombuffer(buf, dtype="<u4", count=2 * distinct, offset=pos).reshape(distinct, 2)
        pos += 8 * distinct
    except struct.error as exc:
        raise TruncatedError(f"header truncated: {exc}") from exc
    if not (levels >= 2 and np.isfinite([lo, hi, sigma]).all() and hi > lo and sigma > 0
            and window >= 1 and window % 2 == 1):
        raise BadHeaderError(f"invalid quantizer fields T={levels} lo={lo} hi={hi} sigma={sigma} W={window}")
    symbols = table[:, 0].astype(np.int64)
    counts = table[:, 1].astype(np.int64)
    n = int(np.prod(shape)) if rank else 1
    if distinct and (np.any(np.diff(symbols) <= 0) or symbols[-1] >= levels):
        raise InconsistentTableError("frequency table symbols unsorted or out of range")
    if np.any(counts == 0) or int(counts.sum()) != n:
        raise InconsistentTableError(f"frequency table counts sum to {int(counts.sum())}, shape holds {n}")
    header = Header(levels, lo, hi, sigma, window, tuple(shape), symbols, counts)
    return header, pos


def decode_bitstream(buf: bytes) -> tuple[np.ndarray, Header]:
    """Inverse of ``encode_bitstream``; returns indices and the parsed header."""
    header, pos = read_header(buf)
    try:
        (plen,) = struct.unpack_from("<Q", buf, pos)
    except struct.error as exc:
        raise TruncatedError("missing payload length") from exc
    pos += 8
    payload = bytes(buf[pos : pos + plen])
    if len(payload) < plen:
        raise TruncatedError(f"payload has {len(payload)} of {plen} bytes")
    if pos + plen != len(buf):
        raise InconsistentTableError("bytes follow the declared payload")
    n = int(header.counts.sum())
    if n == 0:
        return np.zeros(header.shape, dtype=np.int64), header
    pos_idx = range_decode(payload, header.counts.tolist(), n)
    indices = header.symbols[np.asarray(pos_idx, dtype=np.int64)]
    if not np.array_equal(np.bincount(pos_idx, minlength=len(header.counts)), header.counts):
        raise InconsistentTableError("decoded symbol counts disagree with the frequency table")
    return indices.reshape(header.shape), header


def payload_length(buf: bytes) -> int:
    _, pos = read_header(buf)
    return struct.unpack_from("<Q", buf, pos)[0]
