"""Ternary block quantization with batch-norm fusion.

Convolution weights are folded through their batch-norm scale, split into
disjoint blocks of 64 along the input-channel axis, and each block is
reduced to {-1, 0, +1} codes plus one positive scale.  All block scales of
a layer share a single power-of-two exponent and are stored as unsigned
16-bit integers; the fused bias is stored as a signed 32-bit integer at the
accumulator scale 2**(act_exp + wt_exp).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import dfp

# Input channels per ternary block; one scale is shared inside a block.
BLOCK = 64

ALPHA_BITS = 16
ALPHA_MAX = (1 << ALPHA_BITS) - 1

# Fraction of the mean magnitude used as the ternarization threshold.
THRESHOLD_FRACTION = 0.7

BIAS_MIN = -(1 << 31)
BIAS_MAX = (1 << 31) - 1


class InvalidBnParamsError(ValueError):
    """Batch-norm parameters are malformed (shape mismatch or std <= 0)."""


@dataclass
class BnParams:
    """Per-output-channel batch-norm statistics and affine terms.

    The normalization computed downstream of a convolution is
    scale * (y - mean) / std + shift, all vectors of length ofm.
    """

    mean: np.ndarray
    std: np.ndarray
    scale: np.ndarray
    shift: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.asarray(self.std, dtype=np.float64)
        self.scale = np.asarray(self.scale, dtype=np.float64)
        self.shift = np.asarray(self.shift, dtype=np.float64)
        n = self.mean.shape
        if not (self.std.shape == n and self.scale.shape == n and self.shift.shape == n):
            raise InvalidBnParamsError("batch-norm vectors must share one shape")


@dataclass
class TernaryBlock:
    """One block of sign codes plus its quantized scale."""

    trits: np.ndarray
    alpha_q: int

    def __post_init__(self):
        self.trits = np.asarray(self.trits)
        if self.trits.dtype != np.int8:
            raise ValueError("trits must be int8")
        vals = np.unique(self.trits)
        if not np.all(np.isin(vals, (-1, 0, 1))):
            raise ValueError("trits must lie in {-1, 0, +1}")
        if not 0 <= int(self.alpha_q) <= ALPHA_MAX:
            raise ValueError(f"alpha_q {self.alpha_q} outside [0, {ALPHA_MAX}]")
        if int(self.alpha_q) == 0 and np.any(self.trits != 0):
            raise ValueError("alpha_q must be positive when any trit is nonzero")


@dataclass
class FusedLayerWeights:
    """A convolution layer after fusion and ternary quantization.

    trits    int8 (ofm, ifm_padded, kh, kw), values in {-1, 0, +1}
    alpha_q  uint16 (ofm, ifm_groups, kh, kw), one scale per block
    bias_q   int32 (ofm,), at accumulator scale 2**(act_exp + wt_exp)
    wt_exp   power-of-two exponent shared by every block scale
    block    input channels per block

    Block (o, g) at kernel pixel (ky, kx) covers input channels
    [g*block, (g+1)*block).  Both channel axes are zero-padded to multiples
    of 64 so the tensor maps directly onto the packed memory formats.
    """

    trits: np.ndarray
    alpha_q: np.ndarray
    bias_q: np.ndarray
    wt_exp: int
    block: int = BLOCK

    def __post_init__(self):
        self.trits = np.asarray(self.trits)
        self.alpha_q = np.asarray(self.alpha_q)
        self.bias_q = np.asarray(self.bias_q)
        if self.trits.dtype != np.int8 or self.trits.ndim != 4:
            raise ValueError("trits must be int8 with shape (ofm, ifm, kh, kw)")
        if self.alpha_q.dtype != np.uint16:
            raise ValueError("alpha_q must be uint16")
        if self.bias_q.dtype != np.int32:
            raise ValueError("bias_q must be int32")
        ofm, ifm, kh, kw = self.trits.shape
        if ifm % self.block != 0:
            raise ValueError(f"ifm {ifm} not a multiple of block {self.block}")
        groups = ifm // self.block
        if self.alpha_q.shape != (ofm, groups, kh, kw):
            raise ValueError(f"alpha_q shape {self.alpha_q.shape} != {(ofm, groups, kh, kw)}")
        if self.bias_q.shape != (ofm,):
            raise ValueError(f"bias_q shape {self.bias_q.shape} != ({ofm},)")
        if not np.all(np.isin(np.unique(self.trits), (-1, 0, 1))):
            raise ValueError("trits must lie in {-1, 0, +1}")
        # A block with surviving weights must carry a nonzero scale.
        live = self.trits.reshape(ofm, groups, self.block, kh, kw).any(axis=2)
        if np.any(live & (self.alpha_q == 0)):
            raise ValueError("alpha_q must be positive wherever a block has nonzero trits")

    @property
    def ofm(self) -> int:
        return self.trits.shape[0]

    @property
    def ifm_padded(self) -> int:
        return self.trits.shape[1]

    @property
    def ifm_groups(self) -> int:
        return self.trits.shape[1] // self.block

    @property
    def kh(self) -> int:
        return self.trits.shape[2]

    @property
    def kw(self) -> int:
        return self.trits.shape[3]

    def block_at(self, ofm: int, ky: int, kx: int, group: int) -> TernaryBlock:
        lo = group * self.block
        return TernaryBlock(self.trits[ofm, lo:lo + self.block, ky, kx].copy(),
                            int(self.alpha_q[ofm, group, ky, kx]))


def fuse_bn(w: np.ndarray, bn: BnParams) -> np.ndarray:
    """Fold the batch-norm scale into the weights: w * (scale/std) per ofm.

    Applying a convolution with the folded weights and then adding
    fused_bias(bn) reproduces scale * (conv - mean) / std + shift exactly
    in FP arithmetic.
    """
    w = np.asarray(w, dtype=np.float64)
    if bn.mean.shape != (w.shape[0],):
        raise InvalidBnParamsError(
            f"batch-norm length {bn.mean.shape} does not match ofm {w.shape[0]}")
    if np.any(bn.std <= 0.0):
        raise InvalidBnParamsError("std must be strictly positive")
    return w * (bn.scale / bn.std)[:, None, None, None]


def fused_bias(bn: BnParams) -> np.ndarray:
    """Bias absorbing the batch-norm offset: shift - scale * mean / std."""
    if np.any(bn.std <= 0.0):
        raise InvalidBnParamsError("std must be strictly positive")
    return bn.shift - bn.scale * bn.mean / bn.std


def ternarize_block(w: np.ndarray) -> tuple[np.ndarray, float]:
    """Reduce one weight block to sign codes and a scale.

    The threshold is 0.7 * mean(|w|); entries strictly above it keep their
    sign, the rest drop to 0.  The scale is the mean magnitude of the
    survivors, or 0.0 when nothing survives (e.g. an all-zero block).
    """
    w = np.asarray(w, dtype=np.float64).ravel()
    mags = np.abs(w)
    thresh = THRESHOLD_FRACTION * float(np.mean(mags)) if w.size else 0.0
    keep = mags > thresh
    trits = np.where(keep, np.sign(w), 0.0).astype(np.int8)
    alpha = float(np.mean(mags[keep])) if np.any(keep) else 0.0
    return trits, alpha


def quantize_alpha(alphas: np.ndarray) -> tuple[np.ndarray, int]:
    """Map non-negative FP block scales to uint16 under one shared exponent.

    The exponent is chosen so the largest scale lands in [2**15, 2**16),
    the largest representable magnitude; every scale is then rounded
    (half-to-even) at that step.  All-zero input yields exponent 0.
    """
    alphas = np.asarray(alphas, dtype=np.float64)
    if alphas.size and np.any(alphas < 0.0):
        raise ValueError("block scales must be non-negative")
    if alphas.size == 0 or not np.any(alphas > 0.0):
        return np.zeros(alphas.shape, dtype=np.uint16), 0
    frac, ex = math.frexp(float(np.max(alphas)))  # max = frac * 2**ex, frac in [0.5, 1)
    wt_exp = ex - ALPHA_BITS
    q = np.rint(alphas * 2.0 ** -wt_exp)
    if np.max(q) > ALPHA_MAX:  # frac within half an lsb of 1.0 rounds past 16 bits
        wt_exp += 1
        q = np.rint(alphas * 2.0 ** -wt_exp)
    return q.astype(np.uint16), wt_exp


def quantize_activations(x: np.ndarray, shared_exp: int | None = None) -> dfp.DfpTensor:
    """Encode an FP tensor as int8 with one shared power-of-two exponent.

    When shared_exp is None it is chosen so max|x| lands in [64, 128), the
    top half of the 8-bit magnitude range; pass an explicit exponent to
    reuse a calibration scale.  Values round half-to-even and saturate.
    """
    x = np.asarray(x, dtype=np.float64)
    if shared_exp is None:
        m = float(np.max(np.abs(x))) if x.size else 0.0
        if m == 0.0:
            shared_exp = 0
        else:
            frac, ex = math.frexp(m)
            shared_exp = ex - (dfp.DATA_BITS - 1)
    q = np.rint(x * 2.0 ** -int(shared_exp))
    q = np.clip(q, dfp.DATA_MIN, dfp.DATA_MAX).astype(np.int8)
    return dfp.DfpTensor(q, int(shared_exp))


def quantize_bias(bias_fp: np.ndarray, act_exp: int, wt_exp: int) -> np.ndarray:
    """Quantize an FP bias vector at the accumulator scale 2**(act_exp+wt_exp)."""
    q = np.rint(np.asarray(bias_fp, dtype=np.float64) * 2.0 ** -(int(act_exp) + int(wt_exp)))
    return np.clip(q, BIAS_MIN, BIAS_MAX).astype(np.int32)


def _pad_channels(w: np.ndarray, multiple: int, axis: int) -> np.ndarray:
    size = w.shape[axis]
    pad = (-size) % multiple
    if pad == 0:
        return w
    widths = [(0, 0)] * w.ndim
    widths[axis] = (0, pad)
    return np.pad(w, widths)


def fgq_quantize_layer(w: np.ndarray, bn: BnParams | None = None,
                       n: int = BLOCK, act_exp: int = 0) -> FusedLayerWeights:
    """Fuse, partition and ternarize one convolution layer.

    w is FP with shape (ofm, ifm, kh, kw).  Batch-norm (when given) is
    folded in first.  The input-channel axis is zero-padded to a multiple
    of n and split into disjoint blocks of n per (ofm, ky, kx); each block
    is ternarized independently, then a single layer-wide exponent is
    chosen for all block scales.  The output-channel axis is zero-padded
    to a multiple of 64 so the result maps directly onto packed memory.

    act_exp is the calibration exponent of this layer's input activations;
    the fused bias is quantized at the accumulator scale it implies.
    """
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 4:
        raise ValueError("weights must have shape (ofm, ifm, kh, kw)")
    if n <= 0:
        raise ValueError("block size must be positive")
    if bn is not None:
        w = fuse_bn(w, bn)
        bias_fp = fused_bias(bn)
    else:
        bias_fp = np.zeros(w.shape[0], dtype=np.float64)

    w = _pad_channels(w, n, axis=1)
    w = _pad_channels(w, 64, axis=0)
    bias_fp = np.pad(bias_fp, (0, w.shape[0] - bias_fp.shape[0]))
    ofm, ifm, kh, kw = w.shape
    groups = ifm // n

    trits = np.zeros((ofm, ifm, kh, kw), dtype=np.int8)
    alphas = np.zeros((ofm, groups, kh, kw), dtype=np.float64)
    for o in range(ofm):
        for ky in range(kh):
            for kx in range(kw):
                for g in range(groups):
                    lo = g * n
                    t, a = ternarize_block(w[o, lo:lo + n, ky, kx])
                    trits[o, lo:lo + n, ky, kx] = t
                    alphas[o, g, ky, kx] = a

    alpha_q, wt_exp = quantize_alpha(alphas)
    # A tiny scale can round to 0 under the layer-wide exponent while its
    # block still has live trits; clamp to the smallest representable step.
    live = trits.reshape(ofm, groups, n, kh, kw).any(axis=2)
    alpha_q = np.where(live & (alpha_q == 0), np.uint16(1), alpha_q)

    bias_q = quantize_bias(bias_fp, act_exp, wt_exp)
    return FusedLayerWeights(trits, alpha_q, bias_q, wt_exp, block=n)
