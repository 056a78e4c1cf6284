"""Functional model of the tiled ternary compute core.

The datapath per output value: a 64-lane sign-select dot product (15-bit
result, no general multiplier), one 16-bit block-scale multiply (31-bit
product), 32-bit two's complement wrapping accumulation seeded with the
bias (or a previously stored partial), then one tensor-wide down-conversion
back to int8.  Work is spread across 64 tiles (output channel mod 64) each
holding 4 PEs (output pixel mod 4); that mapping schedules work but never
changes a value, which run_layer lets tests demonstrate by permuting the
evaluation order.

run_layer consumes and produces packed byte images through a MemoryImage,
exactly as the load-store unit would; conv_direct exposes the same
arithmetic on plain arrays for calibration and quick checks.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TextIO

import numpy as np

from . import dfp, layout
from .dfp import DfpTensor, AccTensor, RoundingMode, ShapeError

# Hardware geometry of the modeled core.
TILES = 64
PES_PER_TILE = 4
DOT_LANES = 64

# Value bounds along the pipe: |dot| <= 64*128, |dot * alpha| < 2**30.
DOT_MAX = DOT_LANES * 128
SCALE_LIMIT = (1 << 30) - 1

_SIGN32 = 1 << 31
_MASK32 = (1 << 32) - 1


class LayerConfigError(ValueError):
    """Descriptor, register image and memory regions disagree."""


# ---------------------------------------------------------------------------
# descriptor and register images
# ---------------------------------------------------------------------------

@dataclass
class Region:
    """Byte range inside a MemoryImage."""

    base: int
    size: int

    @property
    def end(self) -> int:
        return self.base + self.size

    def overlaps(self, other: "Region") -> bool:
        return self.size > 0 and other.size > 0 and \
            self.base < other.end and other.base < self.end


@dataclass
class CoreRegs:
    """Programmed geometry and exponent registers for one layer pass."""

    ifm: int
    ofm: int
    h: int
    w: int
    kh: int = 1
    kw: int = 1
    stride: int = 1
    pad: int = 0
    relu: bool = False
    fuse_partial: bool = False
    store_partials: bool = False
    act_exp: int = 0
    wt_exp: int = 0
    ew_exp: int = 0
    tiles: int = TILES
    pes: int = PES_PER_TILE


@dataclass
class LsuRegs:
    """Base addresses and byte counts for the load-store channels."""

    ifm: Region
    out: Region
    weights: Region | None = None
    scales: Region | None = None
    bias: Region | None = None
    partials: Region | None = None
    eltwise: Region | None = None

    def regions(self):
        named = [("ifm", self.ifm), ("weights", self.weights), ("scales", self.scales),
                 ("bias", self.bias), ("out", self.out), ("partials", self.partials),
                 ("eltwise", self.eltwise)]
        return [(n, r) for n, r in named if r is not None]


@dataclass
class LayerDescriptor:
    """One schedulable unit of accelerator work.

    kind is "conv" or "eltwise".  For eltwise, ifm == ofm and the second
    operand image arrives through lsu_regs.eltwise at exponent ew_exp.
    store_partials keeps the 32-bit accumulators in memory instead of
    down-converting (more input-channel groups arrive in a later pass);
    fuse_partial seeds the accumulators from such a stored image instead
    of the bias, which has already been folded in by the first pass.
    """

    name: str
    kind: str
    ifm: int
    ofm: int
    h: int
    w: int
    kh: int = 1
    kw: int = 1
    stride: int = 1
    pad: int = 0
    relu: bool = False
    fuse_partial: bool = False
    store_partials: bool = False
    core_regs: CoreRegs | None = None
    lsu_regs: LsuRegs | None = None

    def out_dims(self) -> tuple[int, int]:
        if self.kind == "eltwise":
            return self.h, self.w
        return layout.out_dims(self.h, self.w, self.kh, self.kw, self.stride, self.pad)


@dataclass
class RunInfo:
    """What a layer pass produced besides bytes in memory."""

    name: str
    out_exp: int | None
    shift: int | None
    overflow_count: int
    out: DfpTensor | None = None
    acc: AccTensor | None = None


class MemoryImage:
    """Flat byte-addressed memory backing all packed regions."""

    def __init__(self, size: int):
        self._buf = bytearray(size)

    @property
    def size(self) -> int:
        return len(self._buf)

    def _check(self, region: Region):
        if region.base < 0 or region.end > len(self._buf):
            raise LayerConfigError(
                f"region [{region.base}, {region.end}) outside memory of {len(self._buf)}B")

    def read(self, region: Region) -> bytes:
        self._check(region)
        return bytes(self._buf[region.base:region.end])

    def write(self, region: Region, payload: bytes):
        self._check(region)
        if len(payload) != region.size:
            raise LayerConfigError(
                f"payload {len(payload)}B does not fill region of {region.size}B")
        self._buf[region.base:region.end] = payload


# ---------------------------------------------------------------------------
# scalar datapath ops
# ---------------------------------------------------------------------------

def dot64(x, w) -> int:
    """64-lane dot product of int8 activations with ternary sign codes.

    No general multiply: the result is (sum of x where w == +1) minus
    (sum of x where w == -1).  The result always fits 15 bits; |v| <= 8192
    is checked.
    """
    x = np.asarray(x)
    w = np.asarray(w)
    if x.shape != (DOT_LANES,) or w.shape != (DOT_LANES,):
        raise ShapeError(f"dot64 needs two {DOT_LANES}-lane vectors")
    if np.any(x < dfp.DATA_MIN) or np.any(x > dfp.DATA_MAX):
        raise ShapeError("activations out of int8 range")
    if not np.all(np.isin(w, (-1, 0, 1))):
        raise ShapeError("weights must be ternary")
    v = int(x[w > 0].sum(dtype=np.int64)) - int(x[w < 0].sum(dtype=np.int64))
    assert -DOT_MAX <= v <= DOT_MAX
    return v


def scale(d: int, alpha_q: int) -> int:
    """Multiply a dot-product result by an unsigned 16-bit block scale."""
    if not 0 <= alpha_q <= 0xFFFF:
        raise ShapeError(f"alpha_q {alpha_q} outside unsigned 16-bit range")
    if not -DOT_MAX <= d <= DOT_MAX:
        raise ShapeError(f"dot value {d} outside [-{DOT_MAX}, {DOT_MAX}]")
    v = int(d) * int(alpha_q)
    assert -SCALE_LIMIT <= v <= SCALE_LIMIT
    return v


def accumulate(acc: int, v: int) -> int:
    """32-bit two's complement wrapping add."""
    return (((int(acc) + int(v)) + _SIGN32) & _MASK32) - _SIGN32


def eltwise_merge(a: DfpTensor, b: DfpTensor, relu: bool = False) -> DfpTensor:
    """Elementwise DFP add of two int8 tensors.

    The tensor with the smaller exponent is arithmetic-right-shifted by the
    exponent difference, sums saturate to [-128, 127], and the result
    carries the larger exponent.  Optional ReLU afterwards.
    """
    if a.data.shape != b.data.shape:
        raise ShapeError(f"eltwise shapes differ: {a.data.shape} vs {b.data.shape}")
    av = a.data.astype(np.int64)
    bv = b.data.astype(np.int64)
    if a.exp < b.exp:
        av = av >> (b.exp - a.exp)
    elif b.exp < a.exp:
        bv = bv >> (a.exp - b.exp)
    s = np.clip(av + bv, dfp.DATA_MIN, dfp.DATA_MAX)
    if relu:
        s = np.maximum(s, 0)
    return DfpTensor(s.astype(np.int8), max(a.exp, b.exp))


# ---------------------------------------------------------------------------
# layer execution
# ---------------------------------------------------------------------------

def run_layer(desc: LayerDescriptor, mem: MemoryImage, *,
              mode: RoundingMode = dfp.DEFAULT_MODE,
              trace: TextIO | None = None,
              keep_acc: bool = False,
              tile_order=None, pe_order=None) -> RunInfo:
    """Execute one descriptor against packed memory.

    Reads every input region, runs the datapath, and writes the packed
    result back through the single write channel: int8 activation words
    normally, raw little-endian int32 accumulators when store_partials.
    Returns the side-band values (output exponent, shift, overflow events,
    optionally the raw accumulators) that hardware would latch in
    registers rather than memory.
    """
    _validate(desc)
    if desc.kind == "eltwise":
        return _run_eltwise(desc, mem, trace)

    cr, lr = desc.core_regs, desc.lsu_regs
    plan = layout.lsu_plan(desc)
    oh, ow = desc.out_dims()
    groups = desc.ifm // DOT_LANES
    ogroups = desc.ofm // DOT_LANES

    _expect(lr.ifm, plan.ifm_bytes, "ifm")
    _expect(lr.weights, plan.weight_bytes, "weights")
    _expect(lr.scales, plan.scale_bytes, "scales")
    _expect(lr.bias, plan.bias_bytes, "bias")
    out_bytes = plan.write_bytes * (4 if desc.store_partials else 1)
    _expect(lr.out, out_bytes, "out")

    x = layout.unpack_ifm(layout.PackedIfm(
        mem.read(lr.ifm), groups, desc.h, desc.w, exp=cr.act_exp))
    trits = layout.unpack_weights(layout.PackedWeights(
        mem.read(lr.weights), ogroups, groups, desc.kh, desc.kw))
    alpha = layout.unpack_scales(layout.PackedScales(
        mem.read(lr.scales), desc.ofm, groups, desc.kh, desc.kw, wt_exp=cr.wt_exp))

    if desc.fuse_partial:
        _expect(lr.partials, plan.write_bytes * 4, "partials")
        stored = layout.unpack_partials(layout.PackedPartials(
            mem.read(lr.partials), desc.ofm, oh, ow))
        acc0 = stored.data.astype(np.int64).reshape(desc.ofm, oh * ow)
    else:
        bias = layout.unpack_bias(layout.PackedBias(mem.read(lr.bias), desc.ofm))
        acc0 = np.repeat(bias.astype(np.int64)[:, None], oh * ow, axis=1)

    acc, overflow = _conv_pipeline(desc, x.data, trits, alpha, acc0, oh, ow,
                                   tile_order, pe_order, trace)

    if desc.store_partials:
        acc_img = AccTensor(acc.reshape(desc.ofm, oh, ow).astype(np.int32),
                            cr.act_exp, cr.wt_exp)
        mem.write(lr.out, layout.pack_partials(acc_img).payload)
        return RunInfo(desc.name, None, None, overflow, out=None,
                       acc=acc_img if keep_acc else None)

    acc_t = AccTensor(acc.reshape(desc.ofm, oh, ow).astype(np.int32),
                      cr.act_exp, cr.wt_exp)
    out = dfp.downconvert_tensor(acc_t, relu=desc.relu, mode=mode)
    mem.write(lr.out, layout.pack_ifm(out).payload)
    return RunInfo(desc.name, out.exp, out.exp - (cr.act_exp + cr.wt_exp),
                   overflow, out=out, acc=acc_t if keep_acc else None)


def conv_direct(x: DfpTensor, w, *, stride: int = 1, pad: int = 0,
                relu: bool = False, mode: RoundingMode = dfp.DEFAULT_MODE,
                act_exp: int | None = None,
                keep_acc: bool = False) -> tuple[DfpTensor, RunInfo]:
    """Same arithmetic as run_layer on plain arrays, skipping the LSU.

    x channels must already match w's padded input channels; bias comes
    from w.  Used for calibration sweeps and quick experiments.
    """
    act_exp = x.exp if act_exp is None else act_exp
    if x.data.shape[0] != w.ifm_padded:
        raise ShapeError(f"input channels {x.data.shape[0]} != weights {w.ifm_padded}")
    if w.block != DOT_LANES:
        raise LayerConfigError(f"engine block size must be {DOT_LANES}")
    h, wdim = x.data.shape[1], x.data.shape[2]
    oh, ow = layout.out_dims(h, wdim, w.kh, w.kw, stride, pad)
    desc = LayerDescriptor("direct", "conv", w.ifm_padded, w.ofm, h, wdim,
                           w.kh, w.kw, stride, pad, relu)
    acc0 = np.repeat(w.bias_q.astype(np.int64)[:, None], oh * ow, axis=1)
    acc, overflow = _conv_pipeline(desc, x.data, w.trits, w.alpha_q, acc0,
                                   oh, ow, None, None, None)
    acc_t = AccTensor(acc.reshape(w.ofm, oh, ow).astype(np.int32), act_exp, w.wt_exp)
    out = dfp.downconvert_tensor(acc_t, relu=relu, mode=mode)
    info = RunInfo("direct", out.exp, out.exp - (act_exp + w.wt_exp), overflow,
                   out=out, acc=acc_t if keep_acc else None)
    return out, info


# ---------------------------------------------------------------------------
# internals
# ---------------------------------------------------------------------------

def _conv_pipeline(desc, xdata, trits, alpha, acc0, oh, ow,
                   tile_order, pe_order, trace):
    """Accumulate every (kernel pixel, input group) step into acc0.

    Kernel pixel is the outer loop, input-channel group the inner one.
    tile_order / pe_order pick the order in which (ofm mod 64, pixel mod 4)
    strips are evaluated; every strip owns disjoint accumulators, so any
    order gives identical bytes.
    """
    chans = xdata.shape[0]
    groups = chans // DOT_LANES
    npix = oh * ow
    acc = acc0
    overflow = 0
    if npix == 0:
        return acc, overflow

    xp = np.zeros((chans, desc.h + 2 * desc.pad, desc.w + 2 * desc.pad), dtype=np.int64)
    xp[:, desc.pad:desc.pad + desc.h, desc.pad:desc.pad + desc.w] = xdata
    plus = trits > 0
    minus = trits < 0
    alpha64 = alpha.astype(np.int64)

    if tile_order is None and pe_order is None:
        strips = [(None, None)]
    else:
        tile_order = list(range(TILES)) if tile_order is None else list(tile_order)
        pe_order = list(range(PES_PER_TILE)) if pe_order is None else list(pe_order)
        if sorted(tile_order) != list(range(TILES)) or sorted(pe_order) != list(range(PES_PER_TILE)):
            raise LayerConfigError("orders must permute all tiles / PEs")
        ofm_ids = np.arange(desc.ofm)
        pix_ids = np.arange(npix)
        strips = [(ofm_ids[ofm_ids % TILES == t], pix_ids[pix_ids % PES_PER_TILE == p])
                  for t in tile_order for p in pe_order]

    for rows, cols in strips:
        step = 0
        for ky in range(desc.kh):
            for kx in range(desc.kw):
                win = xp[:, ky:ky + oh * desc.stride:desc.stride,
                         kx:kx + ow * desc.stride:desc.stride].reshape(chans, npix)
                for g in range(groups):
                    lo = g * DOT_LANES
                    xg = win[lo:lo + DOT_LANES]
                    pm = plus[:, lo:lo + DOT_LANES, ky, kx]
                    mm = minus[:, lo:lo + DOT_LANES, ky, kx]
                    av = alpha64[:, g, ky, kx]
                    if rows is None:
                        dot = (pm.astype(np.int64) @ xg) - (mm.astype(np.int64) @ xg)
                        assert np.all(np.abs(dot) <= DOT_MAX)
                        scaled = dot * av[:, None]
                        assert np.all(np.abs(scaled) <= SCALE_LIMIT)
                        exact = acc + scaled
                        wrapped = ((exact + _SIGN32) & _MASK32) - _SIGN32
                        overflow += int(np.count_nonzero(wrapped != exact))
                        acc = wrapped
                        if trace is not None:
                            _trace_step(trace, desc.name, step, ky, kx, g, ow,
                                        None, None, dot, scaled, acc)
                    else:
                        sub = acc[np.ix_(rows, cols)]
                        xs = xg[:, cols]
                        dot = (pm[rows].astype(np.int64) @ xs) - (mm[rows].astype(np.int64) @ xs)
                        assert np.all(np.abs(dot) <= DOT_MAX)
                        scaled = dot * av[rows, None]
                        exact = sub + scaled
                        wrapped = ((exact + _SIGN32) & _MASK32) - _SIGN32
                        overflow += int(np.count_nonzero(wrapped != exact))
                        acc[np.ix_(rows, cols)] = wrapped
                        if trace is not None:
                            _trace_step(trace, desc.name, step, ky, kx, g, ow,
                                        rows, cols, dot, scaled, wrapped)
                    step += 1
    return acc, overflow


def _trace_step(sink, name, step, ky, kx, g, ow, rows, cols, dot, scaled, acc):
    # One record per pipeline op; layers are small whenever tracing is on.
    nr, nc = dot.shape
    for i in range(nr):
        o = int(rows[i]) if rows is not None else i
        for j in range(nc):
            px = int(cols[j]) if cols is not None else j
            sink.write(
                f"layer={name} step={step} ky={ky} kx={kx} group={g} "
                f"tile={o % TILES} pe={px % PES_PER_TILE} ofm={o} "
                f"oy={px // ow if ow else 0} ox={px % ow if ow else 0} "
                f"dot={int(dot[i, j])} scaled={int(scaled[i, j])} acc={int(acc[i, j])}\n")


def _run_eltwise(desc, mem, trace):
    cr, lr = desc.core_regs, desc.lsu_regs
    plan = layout.lsu_plan(desc)
    _expect(lr.ifm, plan.ifm_bytes, "ifm")
    _expect(lr.eltwise, plan.eltwise_bytes, "eltwise")
    _expect(lr.out, plan.write_bytes, "out")
    groups = desc.ofm // DOT_LANES
    a = layout.unpack_ifm(layout.PackedIfm(mem.read(lr.ifm), groups,
                                           desc.h, desc.w, exp=cr.act_exp))
    b = layout.unpack_ifm(layout.PackedIfm(mem.read(lr.eltwise), groups,
                                           desc.h, desc.w, exp=cr.ew_exp))
    out = eltwise_merge(a, b, relu=desc.relu)
    mem.write(lr.out, layout.pack_ifm(out).payload)
    if trace is not None:
        flat_a, flat_b, flat_o = a.data.ravel(), b.data.ravel(), out.data.ravel()
        for idx in range(flat_o.size):
            c, px = divmod(idx, desc.h * desc.w)
            oy, ox = divmod(px, desc.w)
            trace.write(f"layer={desc.name} step=0 op=add tile={c % TILES} "
                        f"pe={px % PES_PER_TILE} ofm={c} oy={oy} ox={ox} "
                        f"a={int(flat_a[idx])} b={int(flat_b[idx])} out={int(flat_o[idx])}\n")
    return RunInfo(desc.name, out.exp, None, 0, out=out)


def _expect(region: Region | None, nbytes: int, name: str):
    if region is None:
        raise LayerConfigError(f"missing {name} region")
    if region.size != nbytes:
        raise LayerConfigError(f"{name} region holds {region.size}B, plan needs {nbytes}B")


def _validate(desc: LayerDescriptor):
    if desc.kind not in ("conv", "eltwise"):
        raise LayerConfigError(f"unknown layer kind {desc.kind!r}")
    if desc.core_regs is None or desc.lsu_regs is None:
        raise LayerConfigError(f"layer {desc.name!r} has unprogrammed registers")
    cr = desc.core_regs
    mirror = dict(ifm=desc.ifm, ofm=desc.ofm, h=desc.h, w=desc.w, kh=desc.kh,
                  kw=desc.kw, stride=desc.stride, pad=desc.pad, relu=desc.relu,
                  fuse_partial=desc.fuse_partial, store_partials=desc.store_partials)
    for key, want in mirror.items():
        got = getattr(cr, key)
        if got != want:
            raise LayerConfigError(
                f"layer {desc.name!r}: core register {key}={got} != descriptor {want}")
    if desc.h < 0 or desc.w < 0 or desc.stride < 1 or desc.pad < 0:
        raise LayerConfigError("bad spatial geometry")
    if desc.kind == "conv":
        if desc.kh < 1 or desc.kw < 1:
            raise LayerConfigError("kernel dims must be >= 1")
        if desc.ifm <= 0 or desc.ofm <= 0 or desc.ifm % DOT_LANES or desc.ofm % DOT_LANES:
            raise LayerConfigError("channel counts must be positive multiples of 64")
    else:
        if desc.ifm != desc.ofm or desc.ofm % DOT_LANES:
            raise LayerConfigError("eltwise needs matching channel counts, multiple of 64")
        if desc.fuse_partial or desc.store_partials:
            raise LayerConfigError("eltwise cannot carry partials")


def plan_single_layer(desc: LayerDescriptor, base: int = 0) -> tuple[LsuRegs, int]:
    """Back-to-back region assignment for a standalone layer image.

    Returns the register image plus total bytes consumed; callers size a
    MemoryImage with the latter.
    """
    plan = layout.lsu_plan(desc)
    oh, ow = desc.out_dims()
    off = base

    def take(nbytes):
        nonlocal off
        r = Region(off, nbytes)
        off += nbytes
        return r

    ifm = take(plan.ifm_bytes)
    if desc.kind == "eltwise":
        ew = take(plan.eltwise_bytes)
        out = take(plan.write_bytes)
        return LsuRegs(ifm=ifm, out=out, eltwise=ew), off
    wt = take(plan.weight_bytes)
    sc = take(plan.scale_bytes)
    bs = take(plan.bias_bytes)
    partials = take(desc.ofm * oh * ow * 4) if desc.fuse_partial else None
    out = take(plan.write_bytes * (4 if desc.store_partials else 1))
    return LsuRegs(ifm=ifm, out=out, weights=wt, scales=sc, bias=bs,
                   partials=partials), off
