"""Sparse model upload message and byte accounting.

Layout, all integers little-endian::

    "FKLP" | version u16 | client_id u16 | round u16 | pruning_ratio f32 | klaw_raw f32
    | layer_count u16
    | per layer: name_len u16 | name utf-8 | rank u8 | dims u32 * rank
                 | mask ceil(n/8) bytes (LSB-first) | nonzero_count u32 | values f32 * nonzero_count

Layers of rank >= 2 are weight matrices and count as prunable; lower-rank
layers (biases) are not.
"""

from __future__ import annotations

import math
import struct

import numpy as np

from .agg import ClientReport
from .params import DegenerateModel, Layer, MaskLayer, ParamVector, PruneMask, prunable_count, pruning_ratio

MAGIC = b"FKLP"
VERSION = 1
_HEADER = struct.Struct("<4sHHHffH")
HEADER_SIZE = _HEADER.size

BAD_MAGIC = "bad-magic"
VERSION_MISMATCH = "version-mismatch"
TRUNCATED = "truncated"
POPCOUNT_MISMATCH = "popcount-mismatch"
INCONSISTENT_RATIO = "inconsistent-ratio"
MALFORMED = "malformed"


class WireError(ValueError):
    def __init__(self, code: str, detail: str = ""):
        super().__init__(f"{code}: {detail}" if detail else code)
        self.code = code


def _ratio_tolerance(mask: PruneMask) -> float:
    return 1.0 / prunable_count(mask)


def _check_ratio(ratio: float, mask: PruneMask) -> None:
    try:
        actual = pruning_ratio(mask)
    except DegenerateModel:
        return
    if not abs(actual - ratio) <= _ratio_tolerance(mask):
        raise WireError(INCONSISTENT_RATIO, f"header ratio {ratio} vs mask ratio {actual}")


def encode(report: ClientReport) -> bytes:
    params, mask = report.params, report.mask
    if len(params.layers) != len(mask.layers):
        raise WireError(MALFORMED, "params and mask differ in layer count")
    _check_ratio(report.pruning_ratio, mask)
    out = [_HEADER.pack(MAGIC, VERSION, report.client_id, report.round,
                        report.pruning_ratio, report.klaw_raw, len(params.layers))]
    for layer, ml in zip(params.layers, mask.layers):
        if layer.name != ml.name or layer.values.size != ml.bits.size:
            raise WireError(MALFORMED, f"layer {layer.name!r} does not match its mask")
        if layer.prunable != (len(layer.shape) >= 2):
            raise WireError(MALFORMED, f"layer {layer.name!r}: only rank>=2 layers may be prunable")
        vals = layer.values.astype("<f4")
        if np.any(vals[~ml.bits] != 0):
            raise WireError(MALFORMED, f"layer {layer.name!r} has values under cleared mask bits")
        name = layer.name.encode("utf-8")
        out.append(struct.pack("<H", len(name)))
        out.append(name)
        out.append(struct.pack("<B", len(layer.shape)))
        out.append(struct.pack(f"<{len(layer.shape)}I", *layer.shape))
        out.append(np.packbits(ml.bits, bitorder="little").tobytes())
        kept = vals[ml.bits]
        out.append(struct.pack("<I", kept.size))
        out.append(kept.tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.data):
            raise WireError(TRUNCATED, f"need {n} bytes at offset {self.pos}, have {len(self.data) - self.pos}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        s = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(s))


def decode(data: bytes, dataset_size: int | None = None) -> ClientReport:
    """Inverse of :func:`encode`; raises :class:`WireError` on any malformed input."""
    data = bytes(data)
    if len(data) < 4 or data[:4] != MAGIC:
        raise WireError(BAD_MAGIC, repr(data[:4]))
    r = _Reader(data)
    _, version, client_id, rnd, ratio, klaw, n_layers = r.unpack(_HEADER.format)
    if version != VERSION:
        raise WireError(VERSION_MISMATCH, f"got {version}, expected {VERSION}")
    layers, masks = [], []
    for _ in range(n_layers):
        (name_len,) = r.unpack("<H")
        try:
            name = r.take(name_len).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise WireError(MALFORMED, "layer name is not utf-8") from exc
        (rank,) = r.unpack("<B")
        shape = r.unpack(f"<{rank}I")
        n = math.prod(shape)
        raw_mask = r.take((n + 7) // 8)
        bits = np.unpackbits(np.frombuffer(raw_mask, np.uint8), bitorder="little")
        if bits[n:].any():
            raise WireError(MALFORMED, f"layer {name!r}: padding bits set")
        bits = bits[:n].astype(bool)
        (nnz,) = r.unpack("<I")
        if nnz != int(np.count_nonzero(bits)):
            raise WireError(POPCOUNT_MISMATCH, f"layer {name!r}: {nnz} values for {int(bits.sum())} set bits")
        kept = np.frombuffer(r.take(4 * nnz), dtype="<f4")
        vals = np.zeros(n, dtype=np.float32)
        vals[bits] = kept
        prunable = rank >= 2
        if not prunable and not bits.all():
            raise WireError(MALFORMED, f"non-prunable layer {name!r} has cleared bits")
        layers.append(Layer(name, shape, vals, prunable))
        masks.append(MaskLayer(name, bits, prunable))
    if r.pos != len(data):
        raise WireError(MALFORMED, f"{len(data) - r.pos} trailing bytes")
    mask = PruneMask(masks)
    if not 0.0 <= ratio <= 1.0:
        raise WireError(INCONSISTENT_RATIO, f"ratio {ratio} outside [0, 1]")
    _check_ratio(ratio, mask)
    if not math.isfinite(klaw):
        raise WireError(MALFORMED, "klaw_raw is not finite")
    return ClientReport(client_id, rnd, ParamVector(layers), mask, float(ratio), float(klaw), dataset_size)


def layer_body_bytes(n: int, nonzero: int) -> int:
    """Mask bitmap plus packed values for one layer."""
    return (n + 7) // 8 + 4 * nonzero


def dense_bytes(params: ParamVector) -> int:
    """Raw float32 payload of a dense model; what one broadcast costs."""
    return 4 * params.size()


def cost_bytes(message: bytes) -> int:
    return len(message)


def round_cost(messages, global_params: ParamVector) -> tuple[int, int]:
    """(upload, download) bytes for one round: encoded uploads plus dense broadcasts."""
    messages = list(messages)
    return sum(len(m) for m in messages), dense_bytes(global_params) * len(messages)
