"""Turning one FP convolution layer into accelerator form.

Batch-norm folds into the weights first.  The channel axis then splits
into disjoint 64-wide blocks per (output channel, kernel position); each
block gets its own ternary pattern {-1, 0, +1} and magnitude scale, and
one layer-wide exponent makes every scale a 16-bit integer.
"""

import numpy as np

from ternsim import quantizer
from ternsim.quantizer import BnParams

rng = np.random.default_rng(21)
ofm, ifm, k = 4, 128, 3

w = rng.normal(scale=0.05, size=(ofm, ifm, k, k))
bn = BnParams(mean=rng.normal(size=ofm), std=rng.uniform(0.5, 2.0, ofm),
              scale=rng.uniform(0.5, 2.0, ofm), shift=rng.normal(size=ofm))

# -- fold batch norm ---------------------------------------------------------
fused = quantizer.fuse_bn(w, bn)
bias = quantizer.fused_bias(bn)
print(f"weight tensor {w.shape}, |w| mean {np.abs(w).mean():.4f}")
print(f"after folding: |w| mean {np.abs(fused).mean():.4f}, "
      f"bias range [{bias.min():+.3f}, {bias.max():+.3f}]")
print()

# -- one block under the microscope ------------------------------------------
blk = fused[0, :64, 1, 1]
trits, alpha = quantizer.ternarize_block(blk)
thresh = 0.7 * np.abs(blk).mean()
kept = np.abs(blk) > thresh
print(f"block of 64 weights: threshold 0.7*mean|w| = {thresh:.4f}")
print(f"kept {kept.sum()}/64 weights, scale alpha = {alpha:.4f}")
print("trits:", "".join({-1: "-", 0: ".", 1: "+"}[t] for t in trits))
print()

# -- the whole layer -----------------------------------------------------------
ql = quantizer.fgq_quantize_layer(w, bn, act_exp=-7)
groups = ql.trits.shape[1] // ql.block
print(f"quantized layer: trits {ql.trits.shape} (output channels pad to 64),")
print(f"  {groups} blocks per kernel position, scales {ql.alpha_q.shape} uint16,")
print(f"  shared weight exponent {ql.wt_exp}")
live = ql.alpha_q[ql.alpha_q > 0]
print(f"  integer scales span [{live.min()}, {live.max()}], "
      f"largest uses {int(live.max()).bit_length()} of 16 bits")
print(f"  bias (accumulator scale, int32): {ql.bias_q[:ofm]}")
print()

# -- how faithful are the integer scales --------------------------------------
a_fp = []
for o in range(ofm):
    for g in range(groups):
        for ky in range(k):
            for kx in range(k):
                _, a = quantizer.ternarize_block(
                    fused[o, g * 64:(g + 1) * 64, ky, kx])
                a_fp.append(a)
a_fp = np.array(a_fp)
a_int = (ql.alpha_q[:ofm].astype(float) * 2.0 ** ql.wt_exp).ravel()
rel = np.abs(a_int - a_fp)[a_fp > 0] / a_fp[a_fp > 0]
print(f"scale quantization: worst relative error {rel.max():.2e} "
      f"(half an lsb of a 14..16-bit mantissa)")
