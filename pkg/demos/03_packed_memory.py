"""Hexdumps of the five packed memory formats.

Everything the engine reads or writes is a flat byte stream with a fixed
word geometry, so each format is shown on a tensor small enough to check
by eye.
"""

import numpy as np

from ternsim import layout
from ternsim.dfp import AccTensor, DfpTensor
from ternsim.quantizer import FusedLayerWeights


def dump(payload: bytes, width=16, limit=4):
    for row in range(min(limit, (len(payload) + width - 1) // width)):
        chunk = payload[row * width:(row + 1) * width]
        print(f"  {row * width:04x}  {' '.join(f'{b:02x}' for b in chunk)}")
    if len(payload) > limit * width:
        print(f"  ....  ({len(payload)} bytes total)")


# -- activations: 64-byte words, one per (channel group, y, x) ----------------
print("activations, shape (64, 2, 2), value = 10*y + x + channel")
x = np.zeros((64, 2, 2), np.int8)
for c in range(64):
    for y in range(2):
        for xx in range(2):
            x[c, y, xx] = (10 * y + xx + c) % 100
p = layout.pack_ifm(DfpTensor(x, -7))
dump(p.payload, width=16, limit=4)
print("  first word is pixel (0,0): channels 0..63 in order\n")

# -- ternary weights: one 16-byte word = one input lane across 64 ofm ---------
print("weights: w[ofm=0,ifm=0]=+1  w[ofm=5,ifm=0]=+1  w[ofm=0,ifm=1]=-1")
trits = np.zeros((64, 64, 1, 1), np.int8)
trits[0, 0] = trits[5, 0] = 1
trits[0, 1] = -1
w = FusedLayerWeights(trits, np.ones((64, 1, 1, 1), np.uint16),
                      np.zeros(64, np.int32), -15)
pw = layout.pack_weights(w)
dump(pw.payload, width=16, limit=2)
print("  word 0 is input lane 0: ofm0 code 01 in byte0, ofm5 code 01 lands")
print("  in byte1 bit 2; word 1 is input lane 1: ofm0 code 11 means -1\n")

# -- block scales: little-endian uint16, output channel fastest ---------------
print("scales, alpha_q[ofm] = 256 + ofm for the first 8 output channels")
alpha = np.ones((64, 1, 1, 1), np.uint16)
alpha[:8, 0, 0, 0] = 256 + np.arange(8)
ps = layout.pack_scales(FusedLayerWeights(trits, alpha, np.zeros(64, np.int32), -15))
dump(ps.payload, width=16, limit=1)
print()

# -- biases: little-endian int32 in output-channel order ----------------------
print("biases [-1, 2, -3, ...]")
bias = np.array([-1, 2, -3, 400, -50000, 6, -7, 8] + [0] * 56, np.int32)
pb = layout.pack_bias(FusedLayerWeights(trits, alpha, bias, -15))
dump(pb.payload, width=16, limit=2)
print()

# -- partials: raw 32-bit accumulators, row-major -----------------------------
print("partials, acc[o,y,x] = 1000000*o + 10*y + x on shape (2,1,2)")
acc = AccTensor(np.array([[[0, 1]], [[1000000, 1000001]]], np.int32), -7, -15)
pp = layout.pack_partials(acc)
dump(pp.payload, width=16, limit=1)
print()

# -- what one layer actually streams -------------------------------------------
class Shape:
    kind = "conv"
    ifm, ofm, h, w = 64, 64, 56, 56
    kh = kw = 1
    stride, pad = 1, 0

plan = layout.lsu_plan(Shape())
print("fetch plan for a 1x1 64->64 conv on 56x56:")
for name in ("ifm", "weight", "scale", "bias"):
    print(f"  read {name:7s} {getattr(plan, name + '_bytes'):>8} bytes")
print(f"  write out  {plan.write_bytes:>8} bytes")
print(f"  {plan.total_read_bytes} read bytes over 4 channels + 1 write channel")
