"""Dynamic fixed point from first principles.

A tensor is stored as int8 plus ONE shared power-of-two exponent, so the
hardware only ever moves bytes and shift amounts around.  This script
encodes a float vector, narrows a fake accumulator under each rounding
mode, and walks the exponent through two layers.
"""

import numpy as np

from ternsim import dfp
from ternsim.dfp import AccTensor, RoundingMode

rng = np.random.default_rng(7)

# -- encoding --------------------------------------------------------------
x = rng.normal(scale=0.35, size=8)
from ternsim.quantizer import quantize_activations
q = quantize_activations(x)
print("floats:   ", np.array2string(x, precision=4))
print("int8 code:", q.data)
print(f"exponent:  {q.exp}  (step size {2.0 ** q.exp:.6f})")
print("decoded:  ", np.array2string(q.data * 2.0 ** q.exp, precision=4))
err = np.abs(q.data * 2.0 ** q.exp - x).max()
print(f"worst abs error {err:.6f} vs half step {2.0 ** (q.exp - 1):.6f}")
print()

# -- narrowing a 32-bit accumulator back to 8 bits --------------------------
# the shift comes from the leading-zero count of the largest magnitude
for v in (100, 1000, 100000):
    s = dfp.compute_shift(v)
    print(f"max |acc| = {v:6d}  ->  right shift {s}  ({v} >> {s} = {v >> s})")
print()

acc = AccTensor(np.array([[[1000, -500, 12, 7]]], dtype=np.int32),
                act_exp=-7, wt_exp=-8)
for mode in RoundingMode:
    out = dfp.downconvert_tensor(acc, mode=mode)
    print(f"{mode.name:>14}: {out.data.ravel()}  exp {out.exp}")
print("value 7 under ROUND_AND_BIAS: dropped bits are 11, so 0 becomes 1")
print()

# -- exponent chaining -------------------------------------------------------
e = -7
for i, (wt_exp, shift) in enumerate([(-15, 3), (-12, 2), (-14, 4)]):
    e = dfp.propagate_exponent(e, wt_exp, shift)
    print(f"after layer {i}: activation exponent {e}")
print()

# -- adding tensors that carry different exponents ---------------------------
v, e = dfp.dfp_add(10, 3, 12, 1)
print(f"10*2^3 + 12*2^1 = {v}*2^{e}  (the smaller exponent operand is")
print("pre-shifted right, so the 12 contributes only 3 at scale 2^3)")
v, e = dfp.dfp_add(127, 0, 127, 0)
print(f"127 + 127 at one scale saturates: {v}*2^{e}")
