"""Static-model range coder for latent symbols, plus the SCZ1 image container.

The coder keeps a 32-bit range with byte-wise renormalization and propagates
carries through a cached byte and a run of pending 0xFF bytes.  A CRC-32 of
the payload is appended so corrupt or truncated streams raise
:class:`DecodeError` instead of decoding to wrong symbols.
"""

from __future__ import annotations

import struct
import zlib
from bisect import bisect_right
from dataclasses import dataclass

import numpy as np

from .errors import DecodeError

TOP = 1 << 24
MASK32 = 0xFFFFFFFF
MAX_TOTAL = 1 << 16


@dataclass(frozen=True)
class FrequencyTable:
    counts: tuple[int, ...]

    def __post_init__(self):
        if not self.counts or min(self.counts) < 1:
            raise ValueError("every symbol needs a positive count")
        if sum(self.counts) > MAX_TOTAL:
            raise ValueError(f"total count {sum(self.counts)} exceeds {MAX_TOTAL}")

    @classmethod
    def from_symbols(cls, symbols, num_symbols: int) -> "FrequencyTable":
        """Histogram with add-one smoothing, rescaled so the total fits the coder."""
        hist = np.bincount(np.asarray(symbols, dtype=np.int64).ravel(), minlength=num_symbols)
        if hist.size > num_symbols:
            raise ValueError(f"symbol {hist.size - 1} outside alphabet of {num_symbols}")
        return cls.from_counts(hist + 1)

    @classmethod
    def from_counts(cls, counts) -> "FrequencyTable":
        c = np.asarray(counts, dtype=np.float64)
        total = c.sum()
        if total > MAX_TOTAL:
            c = np.maximum(1, np.floor(c * (MAX_TOTAL - c.size) / total))
        return cls(tuple(int(x) for x in c))

    @property
    def num_symbols(self) -> int:
        return len(self.counts)

    @property
    def total(self) -> int:
        return sum(self.counts)

    def cumulative(self) -> list[int]:
        cum = [0]
        for c in self.counts:
            cum.append(cum[-1] + c)
        return cum

    def cross_entropy_bits(self, symbols) -> float:
        """Ideal code length in bits of ``symbols`` under this table."""
        p = np.asarray(self.counts, dtype=np.float64) / self.total
        idx = np.asarray(symbols, dtype=np.int64).ravel()
        return float(-np.log2(p[idx]).sum())


def range_encode(symbols, table: FrequencyTable) -> bytes:
    syms = np.asarray(symbols, dtype=np.int64).ravel()
    if syms.size and (syms.min() < 0 or syms.max() >= table.num_symbols):
        raise ValueError("symbol outside the frequency table's alphabet")
    cum = table.cumulative()
    freq = table.counts
    total = table.total
    out = bytearray()
    low = 0
    rng = MASK32
    cache = 0
    pending = 1  # the cache byte itself counts as one pending output

    def shift_low():
        nonlocal low, cache, pending
        if low < 0xFF000000 or low > MASK32:
            carry = low >> 32
            byte = cache
            while pending:
                out.append((byte + carry) & 0xFF)
                byte = 0xFF
                pending -= 1
            cache = (low >> 24) & 0xFF
        pending += 1
        low = (low << 8) & MASK32

    for s in syms.tolist():
        r = rng // total
        low += r * cum[s]
        rng = r * freq[s]
        while rng < TOP:
            rng <<= 8
            shift_low()
    for _ in range(5):
        shift_low()
    payload = bytes(out)
    return payload + struct.pack("<I", zlib.crc32(payload))


def range_decode(blob: bytes, shape, table: FrequencyTable) -> np.ndarray:
    if len(blob) < 9:
        raise DecodeError("stream too short")
    payload, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(payload) != crc:
        raise DecodeError("checksum mismatch: stream is corrupt")
    n = int(np.prod(shape, dtype=np.int64))
    cum = table.cumulative()
    freq = table.counts
    total = table.total
    pos = 0
    size = len(payload)

    def next_byte():
        nonlocal pos
        if pos >= size:
            raise DecodeError("stream ended early")
        b = payload[pos]
        pos += 1
        return b

    if next_byte() != 0:
        raise DecodeError("bad stream header byte")
    code = 0
    for _ in range(4):
        code = (code << 8) | next_byte()
    rng = MASK32
    out = np.empty(n, dtype=np.int64)
    for i in range(n):
        r = rng // total
        v = code // r
        if v >= total:
            raise DecodeError(f"invalid code value at symbol {i}")
        s = bisect_right(cum, v) - 1
        out[i] = s
        code -= r * cum[s]
        rng = r * freq[s]
        while rng < TOP:
            rng <<= 8
            code = ((code << 8) | next_byte()) & MASK32
    if pos != size:
        raise DecodeError(f"{size - pos} unused bytes after the last symbol")
    return out.reshape(shape)


def bpp_coded(num_bytes: int, num_pixels: int) -> float:
    if num_pixels <= 0:
        raise ValueError("pixel count must be positive")
    return 8.0 * num_bytes / num_pixels


def bpp_estimate(entropy_bits_per_symbol: float, num_symbols: int, num_pixels: int) -> float:
    if num_pixels <= 0:
        raise ValueError("pixel count must be positive")
    return entropy_bits_per_symbol * num_symbols / num_pixels


# ---------------------------------------------------------------------------
# SCZ1 container

SCZ_MAGIC = b"SCZ1"
SCZ_VERSION = 1
_SCZ_HEAD = struct.Struct("<4sHHHHHHBI")


@dataclass
class CompressedImage:
    grid_rows: int
    grid_cols: int
    latent_shape: tuple[int, int, int]  # channels, height, width per patch
    quant_bits: int
    table: FrequencyTable
    payload: bytes

    def to_bytes(self) -> bytes:
        c, h, w = self.latent_shape
        head = _SCZ_HEAD.pack(SCZ_MAGIC, SCZ_VERSION, self.grid_rows, self.grid_cols, c, h, w,
                              self.quant_bits, self.table.num_symbols)
        counts = struct.pack(f"<{self.table.num_symbols}I", *self.table.counts)
        return head + counts + struct.pack("<I", len(self.payload)) + self.payload

    @classmethod
    def from_bytes(cls, blob: bytes) -> "CompressedImage":
        if len(blob) < _SCZ_HEAD.size:
            raise DecodeError("container truncated")
        magic, version, rows, cols, c, h, w, bits, nsym = _SCZ_HEAD.unpack_from(blob)
        if magic != SCZ_MAGIC:
            raise DecodeError("bad container magic")
        if version != SCZ_VERSION:
            raise DecodeError(f"unsupported container version {version}")
        pos = _SCZ_HEAD.size
        if len(blob) < pos + 4 * nsym + 4:
            raise DecodeError("container truncated")
        counts = struct.unpack_from(f"<{nsym}I", blob, pos)
        pos += 4 * nsym
        (plen,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        if len(blob) != pos + plen:
            raise DecodeError("payload length does not match container size")
        try:
            table = FrequencyTable(tuple(counts))
        except ValueError as exc:
            raise DecodeError(f"bad frequency table: {exc}") from exc
        return cls(rows, cols, (c, h, w), bits, table, blob[pos:])

    def symbols(self) -> np.ndarray:
        c, h, w = self.latent_shape
        return range_decode(self.payload, (self.grid_rows * self.grid_cols, c, h, w), self.table)
