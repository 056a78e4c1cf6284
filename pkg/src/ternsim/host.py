"""Host-side execution of a network's first and last layers.

The stem convolution, pooling and the classifier run on the CPU in 8-bit by
8-bit integer arithmetic with 32-bit accumulation, reusing the same
down-conversion and exponent rules as the accelerator core.  Only the
classifier keeps its 32-bit accumulators, which are decoded straight to
floating point as the softmax inputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import dfp, layout, quantizer
from .dfp import AccTensor, DfpTensor, RoundingMode

_SIGN32 = 1 << 31
_MASK32 = (1 << 32) - 1


def _wrap32(a: np.ndarray) -> np.ndarray:
    return (((a + _SIGN32) & _MASK32) - _SIGN32).astype(np.int32)


@dataclass
class HostConvWeights:
    """8-bit conv weights with one shared exponent, bias at accumulator scale."""

    w_q: np.ndarray          # int8 (ofm, ifm, kh, kw)
    w_exp: int
    bias_q: np.ndarray       # int32 (ofm,)

    def __post_init__(self):
        if self.w_q.dtype != np.int8 or self.w_q.ndim != 4:
            raise ValueError("host conv weights must be int8 (ofm, ifm, kh, kw)")
        if self.bias_q.dtype != np.int32:
            raise ValueError("host conv bias must be int32")


@dataclass
class HostFcWeights:
    w_q: np.ndarray          # int8 (out_features, in_features)
    w_exp: int
    bias_q: np.ndarray       # int32 (out_features,)

    def __post_init__(self):
        if self.w_q.dtype != np.int8 or self.w_q.ndim != 2:
            raise ValueError("host fc weights must be int8 (out, in)")
        if self.bias_q.dtype != np.int32:
            raise ValueError("host fc bias must be int32")


def quantize_host_conv(w_fp: np.ndarray, bn: quantizer.BnParams | None,
                       act_exp: int) -> HostConvWeights:
    """Fuse batch-norm and quantize a host conv to 8-bit weights."""
    w_fp = np.asarray(w_fp, dtype=np.float64)
    if bn is not None:
        w_fp = quantizer.fuse_bn(w_fp, bn)
        bias_fp = quantizer.fused_bias(bn)
    else:
        bias_fp = np.zeros(w_fp.shape[0])
    wq = quantizer.quantize_activations(w_fp)
    bias_q = quantizer.quantize_bias(bias_fp, act_exp, wq.exp)
    return HostConvWeights(wq.data, wq.exp, bias_q)


def quantize_host_fc(w_fp: np.ndarray, bias_fp: np.ndarray,
                     act_exp: int) -> HostFcWeights:
    wq = quantizer.quantize_activations(np.asarray(w_fp, dtype=np.float64))
    bias_q = quantizer.quantize_bias(np.asarray(bias_fp, dtype=np.float64),
                                     act_exp, wq.exp)
    return HostFcWeights(wq.data, wq.exp, bias_q)


def run_host_conv(x: DfpTensor, hw: HostConvWeights, stride: int, pad: int,
                  relu: bool, mode: RoundingMode = dfp.DEFAULT_MODE) -> DfpTensor:
    """int8 x int8 convolution, 32-bit accumulation, shared down-convert."""
    c, h, w = x.data.shape
    ofm, ifm, kh, kw = hw.w_q.shape
    if ifm != c:
        raise dfp.ShapeError(f"host conv expects {ifm} channels, got {c}")
    oh, ow = layout.out_dims(h, w, kh, kw, stride, pad)
    xp = np.zeros((c, h + 2 * pad, w + 2 * pad), dtype=np.int64)
    xp[:, pad:pad + h, pad:pad + w] = x.data
    acc = np.repeat(hw.bias_q.astype(np.int64)[:, None], oh * ow, axis=1)
    wk = hw.w_q.astype(np.int64)
    for ky in range(kh):
        for kx in range(kw):
            win = xp[:, ky:ky + oh * stride:stride,
                     kx:kx + ow * stride:stride].reshape(c, oh * ow)
            acc = _wrap32(acc + wk[:, :, ky, kx] @ win).astype(np.int64)
    acc_t = AccTensor(acc.reshape(ofm, oh, ow).astype(np.int32), x.exp, hw.w_exp)
    return dfp.downconvert_tensor(acc_t, relu=relu, mode=mode)


def run_maxpool(x: DfpTensor, kernel: int, stride: int, pad: int = 0) -> DfpTensor:
    """Max over each window; padding cells never win.  Exponent unchanged."""
    c, h, w = x.data.shape
    oh, ow = layout.out_dims(h, w, kernel, kernel, stride, pad)
    xp = np.full((c, h + 2 * pad, w + 2 * pad), dfp.DATA_MIN, dtype=np.int8)
    xp[:, pad:pad + h, pad:pad + w] = x.data
    out = np.full((c, oh, ow), dfp.DATA_MIN, dtype=np.int8)
    for ky in range(kernel):
        for kx in range(kernel):
            win = xp[:, ky:ky + oh * stride:stride, kx:kx + ow * stride:stride]
            out = np.maximum(out, win)
    return DfpTensor(out, x.exp)


def run_avgpool_global(x: DfpTensor, mode: RoundingMode = dfp.DEFAULT_MODE) -> DfpTensor:
    """Global average pool as an 8-bit uniform-weight convolution.

    1/(h*w) is quantized to int8 with its own exponent so the operation
    stays 8-8 with 32-bit accumulation like everything else on the host.
    """
    c, h, w = x.data.shape
    recip = quantizer.quantize_activations(np.array([1.0 / (h * w)]))
    total = x.data.astype(np.int64).sum(axis=(1, 2), keepdims=True)
    acc = _wrap32(total * int(recip.data[0]))
    acc_t = AccTensor(acc.astype(np.int32), x.exp, recip.exp)
    return dfp.downconvert_tensor(acc_t, relu=False, mode=mode)


def run_fc(x: DfpTensor, hw: HostFcWeights) -> tuple[np.ndarray, AccTensor]:
    """Fully connected classifier; returns FP-decoded logits and raw accs.

    The 32-bit accumulators are decoded directly (no down-conversion) so
    the softmax inputs keep full accumulator precision.
    """
    flat = x.data.reshape(-1).astype(np.int64)
    if flat.shape[0] != hw.w_q.shape[1]:
        raise dfp.ShapeError(
            f"fc expects {hw.w_q.shape[1]} inputs, got {flat.shape[0]}")
    acc = _wrap32(hw.w_q.astype(np.int64) @ flat + hw.bias_q.astype(np.int64))
    acc_t = AccTensor(acc.astype(np.int32), x.exp, hw.w_exp)
    return acc_t.decode(), acc_t


def softmax(logits: np.ndarray) -> np.ndarray:
    e = np.exp(logits - np.max(logits))
    return e / e.sum()
