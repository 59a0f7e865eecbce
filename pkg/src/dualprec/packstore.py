"""Bit-exact model serialization with attach/strip precision switching.

`.dpw` stream layout (all integers little-endian, scales 32-bit IEEE-754):

    low section:
      magic "DPWM" | version u16 | arch-id (u16 len + utf-8) | bits u8 |
      scale-rule u8 | entry-count u16
      per entry:
        name (u16 len + utf-8) | kind u8 (0 quantized, 1 full-precision) |
        rank u8 | dims u32 x rank
        quantized:      scale f32 | ceil(n*b/8) plane bytes
        full-precision: n x f32
    optional up-scale section:
      magic "DPUP"
      per quantized entry, low-section order:
        scale f32 | ceil(n/8) bit-plane bytes

Quantized indices are stored offset-binary (index + 2^(b-1)) in b bits each,
first element in the most significant bits, zero padding. The up-scale
section is a pure suffix: stripping it yields, byte for byte, the stream a
low-precision-only save would produce.

`.dpb` detached bit-plane files carry magic "DPBP", a version, a 64-bit
digest of the low section they belong to, and the up-scale section bytes
verbatim, so strip-then-attach is the identity on the full stream.
"""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

import numpy as np

from . import models
from .quant import INDEX_DTYPE, LevelTensor, QuantSpec, ScaleRule, UpscaleBits, upscale_indices

MAGIC_MODEL = b"DPWM"
MAGIC_UPSCALE = b"DPUP"
MAGIC_BITPLANE = b"DPBP"
FORMAT_VERSION = 1

KIND_QUANT = 0
KIND_FP = 1

_RULE_CODES = {ScaleRule.LEVEL_SPAN: 0, ScaleRule.RANGE_EXACT: 1}
_RULE_FROM_CODE = {v: k for k, v in _RULE_CODES.items()}


class PackError(Exception):
    """Base class for serialization failures."""


class BadMagicError(PackError):
    pass


class TruncatedStreamError(PackError):
    pass


class FormatError(PackError):
    pass


class IndexRangeError(PackError):
    pass


class ChecksumMismatchError(PackError):
    pass


@dataclass
class QuantEntry:
    name: str
    shape: tuple
    scale_low: float
    indices_low: np.ndarray
    lam: np.ndarray | None = None
    scale_high: float | None = None

    @property
    def count(self):
        return int(np.prod(self.shape)) if self.shape else 1


@dataclass
class FpEntry:
    name: str
    shape: tuple
    values: np.ndarray


@dataclass
class ModelState:
    """In-memory form of a packed model."""

    arch: str
    bits: int
    scale_rule: ScaleRule
    entries: list

    @property
    def has_upscale(self):
        return all(e.lam is not None for e in self.quant_entries())

    def quant_entries(self):
        return [e for e in self.entries if isinstance(e, QuantEntry)]

    def fp_entries(self):
        return [e for e in self.entries if isinstance(e, FpEntry)]

    def spec(self):
        return QuantSpec(self.bits, self.scale_rule)

    def levels_low(self, entry) -> LevelTensor:
        return LevelTensor(entry.indices_low.reshape(entry.shape), self.spec(),
                           entry.scale_low)

    def levels_high(self, entry) -> LevelTensor:
        if entry.lam is None:
            raise FormatError("stream carries no up-scale section")
        hi = upscale_indices(self.levels_low(entry), UpscaleBits(entry.lam.reshape(entry.shape)))
        return LevelTensor(hi.indices, hi.spec, entry.scale_high)

    def to_network(self, precision="low"):
        """Materialize a runnable network at the requested precision."""
        arch, in_shape, classes = models.parse_arch_id(self.arch)
        net = models.build_network(arch, in_shape, classes, np.random.default_rng(0))
        by_key = {}
        for layer in net.layers:
            for pname, arr in layer.params().items():
                by_key[f"{layer.name}.{pname}"] = (layer, pname)
            if hasattr(layer, "buffers"):
                for pname, arr in layer.buffers().items():
                    by_key[f"{layer.name}.{pname}"] = (layer, pname)
        for entry in self.entries:
            if entry.name not in by_key:
                raise FormatError(f"stream entry {entry.name!r} not in architecture {arch!r}")
            layer, pname = by_key[entry.name]
            if isinstance(entry, QuantEntry):
                levels = self.levels_high(entry) if precision == "high" else self.levels_low(entry)
                value = (levels.indices * levels.scale).astype(np.float32)
            else:
                value = entry.values.reshape(entry.shape).astype(np.float32)
            getattr(layer, pname)[...] = value.reshape(getattr(layer, pname).shape)
        return net

    def level_counts(self, precision="low"):
        out = {}
        for entry in self.quant_entries():
            levels = self.levels_high(entry) if precision == "high" else self.levels_low(entry)
            out[entry.name] = levels.distinct_levels()
        return out


# ---------------------------------------------------------------------------
# bit packing
# ---------------------------------------------------------------------------

def pack_plane(indices, bits):
    """Pack signed indices offset-binary into bits-per-value, MSB first."""
    flat = np.asarray(indices).reshape(-1).astype(np.int64)
    offset = flat + (1 << (bits - 1))
    if offset.size and (offset.min() < 0 or offset.max() >= (1 << bits)):
        raise IndexRangeError(f"index out of clip range for {bits}-bit plane")
    shifts = np.arange(bits - 1, -1, -1)
    bitstream = ((offset[:, None] >> shifts[None, :]) & 1).astype(np.uint8).reshape(-1)
    return np.packbits(bitstream).tobytes()


def unpack_plane(raw, count, bits):
    """Inverse of :func:`pack_plane`; validates range and zero padding."""
    need = (count * bits + 7) // 8
    if len(raw) != need:
        raise TruncatedStreamError(f"plane needs {need} bytes, got {len(raw)}")
    bitstream = np.unpackbits(np.frombuffer(raw, dtype=np.uint8))
    if bitstream[count * bits:].any():
        raise FormatError("nonzero padding bits in index plane")
    bitstream = bitstream[:count * bits].reshape(count, bits)
    weights = 1 << np.arange(bits - 1, -1, -1, dtype=np.int64)
    offset = bitstream.astype(np.int64) @ weights
    return (offset - (1 << (bits - 1))).astype(INDEX_DTYPE)


def pack_bitplane(lam):
    flat = np.asarray(lam).reshape(-1).astype(np.uint8)
    if flat.size and flat.max() > 1:
        raise IndexRangeError("up-scaling bits must be 0 or 1")
    return np.packbits(flat).tobytes()


def unpack_bitplane(raw, count):
    need = (count + 7) // 8
    if len(raw) != need:
        raise TruncatedStreamError(f"bit-plane needs {need} bytes, got {len(raw)}")
    bits = np.unpackbits(np.frombuffer(raw, dtype=np.uint8))
    if bits[count:].any():
        raise FormatError("nonzero padding bits in up-scaling plane")
    return bits[:count].astype(np.uint8)


# ---------------------------------------------------------------------------
# streams
# ---------------------------------------------------------------------------

class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.data):
            raise TruncatedStreamError(
                f"stream ends at byte {len(self.data)}, needed {self.pos + n}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    @property
    def remaining(self):
        return len(self.data) - self.pos


def _write_str(chunks, text):
    raw = text.encode("utf-8")
    chunks.append(struct.pack("<H", len(raw)))
    chunks.append(raw)


def _read_str(reader):
    (n,) = reader.unpack("<H")
    return reader.take(n).decode("utf-8")


def pack(state: ModelState, include_upscale=True) -> bytes:
    """Serialize a model; the up-scale section is an optional pure suffix."""
    chunks = [MAGIC_MODEL, struct.pack("<H", FORMAT_VERSION)]
    _write_str(chunks, state.arch)
    chunks.append(struct.pack("<BBH", state.bits, _RULE_CODES[state.scale_rule],
                              len(state.entries)))
    for entry in state.entries:
        _write_str(chunks, entry.name)
        kind = KIND_QUANT if isinstance(entry, QuantEntry) else KIND_FP
        chunks.append(struct.pack("<BB", kind, len(entry.shape)))
        chunks.append(struct.pack(f"<{len(entry.shape)}I", *entry.shape))
        if kind == KIND_QUANT:
            chunks.append(struct.pack("<f", entry.scale_low))
            chunks.append(pack_plane(entry.indices_low, state.bits))
        else:
            chunks.append(np.ascontiguousarray(entry.values, dtype="<f4").tobytes())
    if include_upscale:
        quant = state.quant_entries()
        if any(e.lam is None for e in quant):
            raise FormatError("model has no up-scaling bits to serialize")
        chunks.append(MAGIC_UPSCALE)
        for entry in quant:
            chunks.append(struct.pack("<f", entry.scale_high))
            chunks.append(pack_bitplane(entry.lam))
    return b"".join(chunks)


def _parse_low(reader: _Reader) -> ModelState:
    if reader.take(4) != MAGIC_MODEL:
        raise BadMagicError("bad magic: not a packed model stream")
    (version,) = reader.unpack("<H")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version}")
    arch = _read_str(reader)
    bits, rule_code, n_entries = reader.unpack("<BBH")
    if rule_code not in _RULE_FROM_CODE:
        raise FormatError(f"unknown scale-rule code {rule_code}")
    spec = QuantSpec(bits, _RULE_FROM_CODE[rule_code])
    entries = []
    for _ in range(n_entries):
        name = _read_str(reader)
        kind, rank = reader.unpack("<BB")
        shape = tuple(reader.unpack(f"<{rank}I"))
        count = int(np.prod(shape)) if shape else 1
        if kind == KIND_QUANT:
            (scale,) = reader.unpack("<f")
            if not scale > 0:
                raise FormatError(f"{name}: non-positive scale")
            plane = reader.take((count * bits + 7) // 8)
            idx = unpack_plane(plane, count, bits).reshape(shape)
            if idx.size and (idx.min() < spec.lower_clip or idx.max() > spec.upper_clip):
                raise IndexRangeError(f"{name}: index out of clip range")
            entries.append(QuantEntry(name, shape, float(scale), idx))
        elif kind == KIND_FP:
            values = np.frombuffer(reader.take(4 * count), dtype="<f4").reshape(shape)
            entries.append(FpEntry(name, shape, values.copy()))
        else:
            raise FormatError(f"{name}: unknown entry kind {kind}")
    return ModelState(arch, bits, _RULE_FROM_CODE[rule_code], entries)


def _parse_upscale(reader: _Reader, state: ModelState):
    if reader.take(4) != MAGIC_UPSCALE:
        raise BadMagicError("bad magic: up-scale section expected")
    for entry in state.quant_entries():
        (scale_hi,) = reader.unpack("<f")
        if not scale_hi > 0:
            raise FormatError(f"{entry.name}: non-positive up-scaled scale")
        plane = reader.take((entry.count + 7) // 8)
        entry.lam = unpack_bitplane(plane, entry.count).reshape(entry.shape)
        entry.scale_high = float(scale_hi)


def unpack(data: bytes) -> ModelState:
    """Parse a `.dpw` stream at whichever precision it carries."""
    reader = _Reader(data)
    state = _parse_low(reader)
    if reader.remaining:
        _parse_upscale(reader, state)
        if reader.remaining:
            raise FormatError(f"{reader.remaining} trailing bytes after up-scale section")
    return state


def split_stream(data: bytes):
    """Split a stream into (low-section bytes, up-scale-section bytes or None)."""
    reader = _Reader(data)
    _parse_low(reader)
    boundary = reader.pos
    if reader.remaining == 0:
        return data, None
    return data[:boundary], data[boundary:]


def _digest(low_bytes):
    return hashlib.blake2b(low_bytes, digest_size=8).digest()


def make_bitplane_file(low_bytes, upscale_bytes) -> bytes:
    return b"".join([MAGIC_BITPLANE, struct.pack("<H", FORMAT_VERSION),
                     _digest(low_bytes), upscale_bytes])


def parse_bitplane_file(data: bytes):
    reader = _Reader(data)
    if reader.take(4) != MAGIC_BITPLANE:
        raise BadMagicError("bad magic: not a detached bit-plane file")
    (version,) = reader.unpack("<H")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version}")
    digest = reader.take(8)
    return digest, reader.data[reader.pos:]


def switch_precision(data: bytes, direction: str, bitplane: bytes | None = None):
    """Attach or strip the up-scaling bit-plane of a serialized model.

    Pure byte-level restructuring: no index arithmetic is performed.
    Returns (new_stream, detached_bitplane_bytes_or_None); "down" emits the
    detached plane, "up" consumes one and verifies its digest against the
    low section it claims to extend.
    """
    if direction == "down":
        low, upsection = split_stream(data)
        if upsection is None:
            raise FormatError("stream carries no up-scale section to strip")
        return low, make_bitplane_file(low, upsection)
    if direction == "up":
        if bitplane is None:
            raise FormatError("attaching needs a detached bit-plane")
        low, upsection = split_stream(data)
        if upsection is not None:
            raise FormatError("stream already carries an up-scale section")
        digest, payload = parse_bitplane_file(bitplane)
        if digest != _digest(low):
            raise ChecksumMismatchError(
                "bit-plane does not match this model (shape or checksum mismatch)")
        full = low + payload
        unpack(full)  # structural validation
        return full, None
    raise ValueError(f"direction must be 'up' or 'down', got {direction!r}")
