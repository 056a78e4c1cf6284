"""Packed accelerator memory images and the per-layer fetch plan.

All multi-byte fields are little-endian.  Five byte-exact formats:

activations   one 64-byte word per (ifm_group, y, x); byte lane c holds
              channel group*64 + c as a raw two's complement byte; words
              ordered group-major, then row-major over (y, x)
weights       one 16-byte word per (ofm_group, ifm_group, ky, kx, ifm lane);
              2-bit lane L (= ofm mod 64) sits at bits [2L+1:2L] of the
              little-endian 128-bit word; codes 00=0, 01=+1, 11=-1, 10 is
              reserved and rejected on unpack
block scales  unsigned 16-bit words ordered (ifm_group, ky, kx, ofm)
biases        signed 32-bit words in ofm order
partials      signed 32-bit accumulator words ordered (ofm, y, x)

Channel counts are padded to multiples of 64 before packing; the quantizer
produces tensors already padded that way.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import dfp
from .quantizer import FusedLayerWeights

# Lane geometry shared by every format.
LANES = 64
IFM_WORD_BYTES = 64          # 512-bit activation word
WT_WORD_BYTES = 16           # 128-bit kernel word
SCALE_WORD_BYTES = 2
BIAS_WORD_BYTES = 4
PARTIAL_WORD_BYTES = 4

# Trit encoding inside a kernel word.
TRIT_CODES = {0: 0b00, 1: 0b01, -1: 0b11}
TRIT_INVALID = 0b10

# Load-store unit geometry: four read channels and one write channel,
# each moving 64 bytes per cycle.
READ_CHANNELS = 4
CHANNEL_BYTES = 64


class LayoutError(ValueError):
    """Malformed packed image: bad size, bad code, or bad geometry."""


def out_dims(h: int, w: int, kh: int, kw: int, stride: int, pad: int) -> tuple[int, int]:
    """Output spatial dims of a convolution, floor convention."""
    if stride <= 0:
        raise LayoutError("stride must be positive")
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    return max(oh, 0), max(ow, 0)


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

@dataclass
class PackedIfm:
    """Packed activation image.  exp is side-band metadata, not encoded."""

    payload: bytes
    ifm_groups: int
    height: int
    width: int
    exp: int = 0

    def __post_init__(self):
        expect = self.ifm_groups * self.height * self.width * IFM_WORD_BYTES
        if len(self.payload) != expect:
            raise LayoutError(f"activation payload {len(self.payload)}B, expected {expect}B")

    def word(self, group: int, y: int, x: int) -> bytes:
        off = ((group * self.height + y) * self.width + x) * IFM_WORD_BYTES
        return self.payload[off:off + IFM_WORD_BYTES]


def pack_ifm(t: dfp.DfpTensor) -> PackedIfm:
    """Pack an int8 (channels, h, w) tensor, channels a multiple of 64."""
    data = t.data
    if data.ndim != 3:
        raise LayoutError("activation tensor must be (channels, h, w)")
    c, h, w = data.shape
    if c % LANES != 0:
        raise LayoutError(f"channels {c} not a multiple of {LANES}")
    g = c // LANES
    arr = np.ascontiguousarray(data.reshape(g, LANES, h, w).transpose(0, 2, 3, 1))
    return PackedIfm(arr.tobytes(), g, h, w, exp=t.exp)


def unpack_ifm(p: PackedIfm) -> dfp.DfpTensor:
    arr = np.frombuffer(p.payload, dtype=np.int8)
    arr = arr.reshape(p.ifm_groups, p.height, p.width, LANES)
    data = arr.transpose(0, 3, 1, 2).reshape(p.ifm_groups * LANES, p.height, p.width)
    return dfp.DfpTensor(data.copy(), p.exp)


# ---------------------------------------------------------------------------
# ternary kernel words
# ---------------------------------------------------------------------------

@dataclass
class PackedWeights:
    """Packed ternary kernel image."""

    payload: bytes
    ofm_groups: int
    ifm_groups: int
    kh: int
    kw: int

    def __post_init__(self):
        expect = self.ofm_groups * self.ifm_groups * self.kh * self.kw * LANES * WT_WORD_BYTES
        if len(self.payload) != expect:
            raise LayoutError(f"weight payload {len(self.payload)}B, expected {expect}B")

    def word(self, ofm_group: int, ifm_group: int, ky: int, kx: int, ifm_lane: int) -> bytes:
        idx = (((ofm_group * self.ifm_groups + ifm_group) * self.kh + ky)
               * self.kw + kx) * LANES + ifm_lane
        off = idx * WT_WORD_BYTES
        return self.payload[off:off + WT_WORD_BYTES]


def _require_packed_geometry(w: FusedLayerWeights):
    if w.block != LANES:
        raise LayoutError(f"packed formats require block size {LANES}, got {w.block}")
    if w.ofm % LANES != 0 or w.ifm_padded % LANES != 0:
        raise LayoutError("channel counts must be multiples of 64 before packing")


def pack_weights(w: FusedLayerWeights) -> PackedWeights:
    _require_packed_geometry(w)
    og, ig = w.ofm // LANES, w.ifm_padded // LANES
    codes = (w.trits & 0x3).astype(np.uint8)  # -1 -> 0b11, 0 -> 0b00, +1 -> 0b01
    # (ofm, ifm, kh, kw) -> (og, ig, ky, kx, ifm lane, ofm lane)
    arr = codes.reshape(og, LANES, ig, LANES, w.kh, w.kw).transpose(0, 2, 4, 5, 3, 1)
    quads = np.ascontiguousarray(arr).reshape(-1, WT_WORD_BYTES, 4)
    packed = (quads[:, :, 0] | (quads[:, :, 1] << 2)
              | (quads[:, :, 2] << 4) | (quads[:, :, 3] << 6))
    return PackedWeights(packed.astype(np.uint8).tobytes(), og, ig, w.kh, w.kw)


def unpack_weights(p: PackedWeights) -> np.ndarray:
    """Recover trits as int8 (ofm, ifm, kh, kw); rejects the reserved code."""
    raw = np.frombuffer(p.payload, dtype=np.uint8)
    quads = raw.reshape(-1, WT_WORD_BYTES, 1)
    codes = np.concatenate([(quads >> s) & 0x3 for s in (0, 2, 4, 6)], axis=2)
    if np.any(codes == TRIT_INVALID):
        raise LayoutError("reserved trit code 0b10 in weight image")
    arr = codes.reshape(p.ofm_groups, p.ifm_groups, p.kh, p.kw, LANES, LANES)
    arr = arr.transpose(0, 5, 1, 4, 2, 3)  # -> (og, ofm lane, ig, ifm lane, ky, kx)
    trits = arr.reshape(p.ofm_groups * LANES, p.ifm_groups * LANES, p.kh, p.kw)
    trits = trits.astype(np.int8)
    trits[trits == 3] = -1
    return trits


# ---------------------------------------------------------------------------
# block scales and biases
# ---------------------------------------------------------------------------

@dataclass
class PackedScales:
    """Packed block scales; wt_exp rides along as side-band metadata."""

    payload: bytes
    ofm: int
    ifm_groups: int
    kh: int
    kw: int
    wt_exp: int = 0

    def __post_init__(self):
        expect = self.ofm * self.ifm_groups * self.kh * self.kw * SCALE_WORD_BYTES
        if len(self.payload) != expect:
            raise LayoutError(f"scale payload {len(self.payload)}B, expected {expect}B")

    def word(self, ifm_group: int, ky: int, kx: int, ofm: int) -> bytes:
        idx = ((ifm_group * self.kh + ky) * self.kw + kx) * self.ofm + ofm
        off = idx * SCALE_WORD_BYTES
        return self.payload[off:off + SCALE_WORD_BYTES]


def pack_scales(w: FusedLayerWeights) -> PackedScales:
    _require_packed_geometry(w)
    arr = np.ascontiguousarray(w.alpha_q.transpose(1, 2, 3, 0)).astype("<u2")
    return PackedScales(arr.tobytes(), w.ofm, w.ifm_groups, w.kh, w.kw, wt_exp=w.wt_exp)


def unpack_scales(p: PackedScales) -> np.ndarray:
    arr = np.frombuffer(p.payload, dtype="<u2")
    arr = arr.reshape(p.ifm_groups, p.kh, p.kw, p.ofm).transpose(3, 0, 1, 2)
    return arr.astype(np.uint16)


@dataclass
class PackedBias:
    payload: bytes
    ofm: int

    def __post_init__(self):
        if len(self.payload) != self.ofm * BIAS_WORD_BYTES:
            raise LayoutError(f"bias payload {len(self.payload)}B, "
                              f"expected {self.ofm * BIAS_WORD_BYTES}B")

    def word(self, ofm: int) -> bytes:
        return self.payload[ofm * BIAS_WORD_BYTES:(ofm + 1) * BIAS_WORD_BYTES]


def pack_bias(w: FusedLayerWeights) -> PackedBias:
    _require_packed_geometry(w)
    return PackedBias(w.bias_q.astype("<i4").tobytes(), w.ofm)


def unpack_bias(p: PackedBias) -> np.ndarray:
    return np.frombuffer(p.payload, dtype="<i4").astype(np.int32)


@dataclass
class PackedPartials:
    """32-bit accumulator image parked in memory between passes.

    One little-endian int32 per (ofm, y, x), ofm-major then row-major:
    the write channel drains accumulators in the same order the
    down-converter would otherwise consume them.
    """

    payload: bytes
    ofm: int
    height: int
    width: int
    act_exp: int = 0
    wt_exp: int = 0

    def __post_init__(self):
        expect = self.ofm * self.height * self.width * PARTIAL_WORD_BYTES
        if len(self.payload) != expect:
            raise LayoutError(f"partials payload {len(self.payload)}B, "
                              f"geometry needs {expect}B")

    def word(self, ofm: int, y: int, x: int) -> bytes:
        i = (ofm * self.height + y) * self.width + x
        return self.payload[i * PARTIAL_WORD_BYTES:(i + 1) * PARTIAL_WORD_BYTES]


def pack_partials(t: dfp.AccTensor) -> PackedPartials:
    if t.data.ndim != 3:
        raise LayoutError("partials tensor must be (ofm, h, w)")
    ofm, h, w = t.data.shape
    payload = np.ascontiguousarray(t.data.astype("<i4")).tobytes()
    return PackedPartials(payload, ofm, h, w, t.act_exp, t.wt_exp)


def unpack_partials(p: PackedPartials) -> dfp.AccTensor:
    arr = np.frombuffer(p.payload, dtype="<i4").reshape(p.ofm, p.height, p.width)
    return dfp.AccTensor(arr.astype(np.int32), p.act_exp, p.wt_exp)


# ---------------------------------------------------------------------------
# fetch plan
# ---------------------------------------------------------------------------

@dataclass
class FetchPlan:
    """Byte traffic of one layer and its channel assignment.

    Reads stream row-major in the word orders defined above.  Convolutions
    use all four read channels; elementwise layers read two activation
    images.  The single write channel carries the packed 8-bit output.
    """

    ifm_bytes: int = 0
    weight_bytes: int = 0
    scale_bytes: int = 0
    bias_bytes: int = 0
    eltwise_bytes: int = 0
    write_bytes: int = 0
    read_channels: dict = field(default_factory=dict)

    @property
    def total_read_bytes(self) -> int:
        return (self.ifm_bytes + self.weight_bytes + self.scale_bytes
                + self.bias_bytes + self.eltwise_bytes)


def _ceil_div(a: int, b: int) -> int:
    return -(-a // b)


def lsu_plan(desc) -> FetchPlan:
    """Fetch plan for a layer descriptor (duck-typed: kind plus geometry).

    Channel counts are padded up to multiples of 64, matching the packed
    image sizes exactly.  Degenerate layers (any zero dimension) plan zero
    traffic.
    """
    kind = getattr(desc, "kind", "conv")
    if kind == "eltwise":
        if min(desc.ofm, desc.h, desc.w) <= 0:
            return FetchPlan()
        g = _ceil_div(desc.ofm, LANES)
        act = g * desc.h * desc.w * IFM_WORD_BYTES
        return FetchPlan(ifm_bytes=act, eltwise_bytes=act, write_bytes=act,
                         read_channels={0: "ifm", 1: "eltwise"})
    if kind != "conv":
        raise LayoutError(f"no fetch plan for kind {kind!r}")
    oh, ow = out_dims(desc.h, desc.w, desc.kh, desc.kw, desc.stride, desc.pad)
    if min(desc.ifm, desc.ofm, desc.h, desc.w, desc.kh, desc.kw) <= 0 or oh * ow == 0:
        return FetchPlan()
    ig = _ceil_div(desc.ifm, LANES)
    og = _ceil_div(desc.ofm, LANES)
    return FetchPlan(
        ifm_bytes=ig * desc.h * desc.w * IFM_WORD_BYTES,
        weight_bytes=og * (ig * LANES) * desc.kh * desc.kw * WT_WORD_BYTES,
        scale_bytes=og * LANES * ig * desc.kh * desc.kw * SCALE_WORD_BYTES,
        bias_bytes=og * LANES * BIAS_WORD_BYTES,
        write_bytes=og * LANES * oh * ow,
        read_channels={0: "ifm", 1: "weights", 2: "scales", 3: "bias"},
    )
