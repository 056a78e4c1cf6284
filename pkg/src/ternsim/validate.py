"""Randomized engine-vs-reference equivalence at the byte level.

Each case draws a small random layer, runs it through the packed-memory
pipeline and through the naive reference, and compares three things:
the 32-bit accumulator image, the down-conversion shift, and the packed
output bytes.  Fault-injection knobs perturb one side so the harness can
demonstrate it catches single-bit disagreements instead of vacuously
passing.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import dfp, engine, layout, oracle
from .dfp import DfpTensor, RoundingMode
from .quantizer import FusedLayerWeights

# What can be deliberately broken, and on which side.
FAULTS = ("none", "engine-acc-lsb", "engine-drop-bias", "reference-truncate")

_MODE_TO_REF = {
    RoundingMode.TRUNCATE: oracle.REF_TRUNCATE,
    RoundingMode.ROUND_HALF_UP: oracle.REF_HALF_UP,
    RoundingMode.ROUND_AND_BIAS: oracle.REF_ROUND_BIAS,
}


@dataclass
class Divergence:
    layer: str
    stage: str            # "accumulator", "shift" or "output"
    ofm: int
    pixel: tuple[int, int]
    engine_value: int
    reference_value: int

    def __str__(self):
        return (f"{self.layer}: {self.stage} diverges at ofm={self.ofm} "
                f"pixel={self.pixel}: engine={self.engine_value} "
                f"reference={self.reference_value}")


@dataclass
class CaseReport:
    index: int
    layer: str
    geometry: str
    divergences: list[Divergence] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.divergences


@dataclass
class SuiteReport:
    cases: int
    failures: list[CaseReport]
    elapsed: float

    @property
    def ok(self) -> bool:
        return not self.failures


def random_layer_case(rng: np.random.Generator, index: int):
    """A small random quantized layer plus a random input image."""
    ifm = int(rng.choice((64, 128)))
    ofm = int(rng.choice((64, 128)))
    kh = kw = int(rng.choice((1, 3)))
    h = int(rng.integers(kh, 9))
    w = int(rng.integers(kw, 9))
    stride = int(rng.choice((1, 2)))
    pad = int(rng.integers(0, 2)) if kh == 3 else 0
    relu = bool(rng.integers(0, 2))
    trits = rng.integers(-1, 2, (ofm, ifm, kh, kw)).astype(np.int8)
    alpha = rng.integers(1, 65536, (ofm, ifm // 64, kh, kw)).astype(np.uint16)
    if rng.random() < 0.1:
        # occasionally push the accumulator into genuine 32-bit wrap-around
        bias = rng.integers(-(1 << 31), (1 << 31) - 1, ofm).astype(np.int32)
    else:
        bias = rng.integers(-(1 << 20), 1 << 20, ofm).astype(np.int32)
    wt_exp = int(rng.integers(-24, 1))
    act_exp = int(rng.integers(-12, 5))
    weights = FusedLayerWeights(trits, alpha, bias, wt_exp)
    x = DfpTensor(rng.integers(-128, 128, (ifm, h, w)).astype(np.int8), act_exp)
    desc = engine.LayerDescriptor(f"case{index}", "conv", ifm, ofm, h, w,
                                  kh, kw, stride, pad, relu)
    desc.core_regs = engine.CoreRegs(ifm, ofm, h, w, kh, kw, stride, pad, relu,
                                     False, False, act_exp, wt_exp, 0)
    return desc, weights, x


def run_case(desc: engine.LayerDescriptor, weights: FusedLayerWeights,
             x: DfpTensor, *, index: int = 0,
             mode: RoundingMode = dfp.DEFAULT_MODE,
             fault: str = "none", max_records: int = 4) -> CaseReport:
    """Run one layer on both sides and record every disagreement."""
    if fault not in FAULTS:
        raise ValueError(f"unknown fault {fault!r}; choose from {FAULTS}")
    lsu, total = engine.plan_single_layer(desc)
    desc.lsu_regs = lsu
    mem = engine.MemoryImage(total)
    mem.write(lsu.ifm, layout.pack_ifm(x).payload)
    mem.write(lsu.weights, layout.pack_weights(weights).payload)
    mem.write(lsu.scales, layout.pack_scales(weights).payload)
    if fault == "engine-drop-bias":
        mem.write(lsu.bias, bytes(lsu.bias.size))
    else:
        mem.write(lsu.bias, layout.pack_bias(weights).payload)
    info = engine.run_layer(desc, mem, mode=mode, keep_acc=True)
    eng_acc = info.acc.data
    if fault == "engine-acc-lsb":
        eng_acc = eng_acc.copy()
        eng_acc[0, 0, 0] ^= 1

    ref_acc = oracle.ref_ternary_conv(x.data, weights, desc)
    ref_mode = (oracle.REF_TRUNCATE if fault == "reference-truncate"
                else _MODE_TO_REF[mode])
    ref_out, ref_shift = oracle.ref_downconvert(ref_acc, relu=desc.relu,
                                                mode=ref_mode)
    geometry = (f"{desc.ifm}x{desc.h}x{desc.w} -> {desc.ofm}, k{desc.kh} "
                f"s{desc.stride} p{desc.pad}{' relu' if desc.relu else ''}")
    report = CaseReport(index, desc.name, geometry)

    for (o, oy, ox) in np.argwhere(eng_acc != ref_acc)[:max_records]:
        report.divergences.append(Divergence(
            desc.name, "accumulator", int(o), (int(oy), int(ox)),
            int(eng_acc[o, oy, ox]), int(ref_acc[o, oy, ox])))
    if info.shift != ref_shift:
        report.divergences.append(Divergence(desc.name, "shift", -1, (-1, -1),
                                             info.shift, ref_shift))
    eng_bytes = mem.read(lsu.out)
    ref_bytes = oracle.ref_pack_activations(ref_out)
    if eng_bytes != ref_bytes:
        ea = np.frombuffer(eng_bytes, np.int8)
        ra = np.frombuffer(ref_bytes, np.int8)
        oh, ow = desc.out_dims()
        for pos in np.flatnonzero(ea != ra)[:max_records]:
            g, rem = divmod(int(pos), oh * ow * 64)
            px, lane = divmod(rem, 64)
            report.divergences.append(Divergence(
                desc.name, "output", g * 64 + lane, (px // ow, px % ow),
                int(ea[pos]), int(ra[pos])))
    return report


def run_suite(layers: int = 1000, seed: int = 0, *,
              mode: RoundingMode = dfp.DEFAULT_MODE, fault: str = "none",
              progress=None) -> SuiteReport:
    """Randomized sweep; deterministic for a given seed and layer count."""
    rng = np.random.default_rng(seed)
    failures = []
    t0 = time.perf_counter()
    for i in range(layers):
        desc, weights, x = random_layer_case(rng, i)
        report = run_case(desc, weights, x, index=i, mode=mode, fault=fault)
        if not report.ok:
            failures.append(report)
        if progress and (i + 1) % 100 == 0:
            progress(i + 1, layers, len(failures))
    return SuiteReport(layers, failures, time.perf_counter() - t0)
