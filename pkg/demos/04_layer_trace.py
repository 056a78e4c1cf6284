"""One tiny convolution pushed through the packed-memory engine.

Builds a 64->64 3x3 layer by hand, programs its registers, stages the
byte images, runs it with a pipeline trace, and shows where every number
in the first output came from.
"""

import io

import numpy as np

from ternsim import engine, layout, oracle
from ternsim.dfp import DfpTensor
from ternsim.quantizer import FusedLayerWeights

rng = np.random.default_rng(33)
ifm = ofm = 64
h = w = 4

trits = rng.integers(-1, 2, (ofm, ifm, 3, 3)).astype(np.int8)
alpha = rng.integers(1, 1 << 16, (ofm, 1, 3, 3)).astype(np.uint16)
bias = rng.integers(-(1 << 16), 1 << 16, ofm).astype(np.int32)
weights = FusedLayerWeights(trits, alpha, bias, wt_exp=-17)
x = DfpTensor(rng.integers(-128, 128, (ifm, h, w)).astype(np.int8), exp=-7)

# -- program the layer ---------------------------------------------------------
desc = engine.LayerDescriptor("demo", "conv", ifm, ofm, h, w, 3, 3,
                              stride=1, pad=1, relu=True)
desc.core_regs = engine.CoreRegs(ifm, ofm, h, w, 3, 3, 1, 1, True,
                                 False, False, x.exp, weights.wt_exp, 0)
lsu, total = engine.plan_single_layer(desc)
desc.lsu_regs = lsu
print(f"memory image: {total} bytes")
for name in ("ifm", "weights", "scales", "bias", "out"):
    r = getattr(lsu, name)
    print(f"  {name:8s} at 0x{r.base:05x}, {r.size} bytes")
print()

# -- stage inputs and run --------------------------------------------------------
mem = engine.MemoryImage(total)
mem.write(lsu.ifm, layout.pack_ifm(x).payload)
mem.write(lsu.weights, layout.pack_weights(weights).payload)
mem.write(lsu.scales, layout.pack_scales(weights).payload)
mem.write(lsu.bias, layout.pack_bias(weights).payload)

trace = io.StringIO()
info = engine.run_layer(desc, mem, trace=trace, keep_acc=True)
lines = trace.getvalue().splitlines()
print(f"trace: {len(lines)} dot-product events, first three:")
for ln in lines[:3]:
    print(f"  {ln}")
print()

# -- read the output back ----------------------------------------------------------
out = layout.unpack_ifm(layout.PackedIfm(mem.read(lsu.out), ofm // 64, h, w,
                                         info.out_exp))
print(f"accumulator range [{info.acc.data.min()}, {info.acc.data.max()}], "
      f"narrowing shift {info.shift}")
print(f"output exponent {info.out_exp} = {x.exp} (input) + {weights.wt_exp} "
      f"(weights) + {info.shift} (shift)")
print(f"output[0..7, 0, 0] = {out.data[:8, 0, 0]}")
print()

# -- agree with the naive reference --------------------------------------------------
ref_acc = oracle.ref_ternary_conv(x.data, weights, desc)
ref_out, ref_shift = oracle.ref_downconvert(ref_acc, relu=True)
same = (np.array_equal(info.acc.data, ref_acc)
        and np.array_equal(out.data, ref_out) and info.shift == ref_shift)
print(f"naive reference agrees byte for byte: {same}")
