"""Independent reference implementations used to cross-check the engine.

Deliberately naive: explicit loops over every output element and lane with
plain integer (or float64) accumulation, narrowed to 32-bit two's
complement only at the very end.  No code is shared with the engine or the
narrowing rules beyond primitive array types, so a defect on either side
shows up as a divergence instead of cancelling out.

The loop kernels are compiled with numba when it is available; the
uncompiled functions are kept as a fallback and are bit-identical, just
slow.
"""

from __future__ import annotations

import numpy as np

try:
    from numba import njit
except ImportError:  # pragma: no cover - numba is a declared dependency
    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]
        return lambda f: f

_WRAP = 1 << 32
_SIGN = 1 << 31


@njit(cache=True)
def _ternary_conv_kernel(x, trits, alpha, bias, oh, ow, stride, pad, block):
    ofm = trits.shape[0]
    chans = trits.shape[1]
    kh = trits.shape[2]
    kw = trits.shape[3]
    h = x.shape[1]
    w = x.shape[2]
    groups = chans // block
    out = np.zeros((ofm, oh, ow), dtype=np.int64)
    for o in range(ofm):
        for oy in range(oh):
            for ox in range(ow):
                total = bias[o]
                for ky in range(kh):
                    for kx in range(kw):
                        iy = oy * stride + ky - pad
                        ix = ox * stride + kx - pad
                        if iy < 0 or iy >= h or ix < 0 or ix >= w:
                            continue  # zero padding contributes nothing
                        for g in range(groups):
                            d = np.int64(0)
                            for lane in range(block):
                                c = g * block + lane
                                t = trits[o, c, ky, kx]
                                if t == 1:
                                    d += x[c, iy, ix]
                                elif t == -1:
                                    d -= x[c, iy, ix]
                            total += d * alpha[o, g, ky, kx]
                out[o, oy, ox] = total
    return out


@njit(cache=True)
def _fp_conv_kernel(x, w, stride, pad):
    ofm = w.shape[0]
    chans = w.shape[1]
    kh = w.shape[2]
    kw = w.shape[3]
    h = x.shape[1]
    ww = x.shape[2]
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (ww + 2 * pad - kw) // stride + 1
    out = np.zeros((ofm, oh, ow), dtype=np.float64)
    for o in range(ofm):
        for oy in range(oh):
            for ox in range(ow):
                total = 0.0
                for c in range(chans):
                    for ky in range(kh):
                        for kx in range(kw):
                            iy = oy * stride + ky - pad
                            ix = ox * stride + kx - pad
                            if iy < 0 or iy >= h or ix < 0 or ix >= ww:
                                continue
                            total += x[c, iy, ix] * w[o, c, ky, kx]
                out[o, oy, ox] = total
    return out


def ref_ternary_conv(x: np.ndarray, w, desc) -> np.ndarray:
    """Reference accumulator image of one ternary convolution.

    x is int8 (channels, h, w); w carries trits/alpha_q/bias_q; desc is
    duck-typed with stride and pad.  Accumulation runs at full precision
    and the result wraps to int32 once at the end, so any mid-stream
    wrap-around in the unit under test is visible as a value difference
    only if it actually changed the 32-bit outcome.
    """
    oh, ow = _ref_out_dims(x.shape[1], x.shape[2], w.kh, w.kw, desc.stride, desc.pad)
    acc = _ternary_conv_kernel(
        x.astype(np.int64),
        w.trits.astype(np.int64),
        w.alpha_q.astype(np.int64),
        w.bias_q.astype(np.int64),
        oh, ow, desc.stride, desc.pad, w.block,
    )
    return wrap_int32(acc)


def ref_fp_conv_bn(x: np.ndarray, w: np.ndarray, bn, stride: int = 1,
                   pad: int = 0) -> np.ndarray:
    """Float64 convolution followed by unfused batch-norm.

    Computes scale * (conv(x, w) - mean) / std + shift directly, the
    reference against which weight fusion is checked.
    """
    conv = _fp_conv_kernel(np.asarray(x, dtype=np.float64),
                           np.asarray(w, dtype=np.float64), stride, pad)
    if bn is None:
        return conv
    return (bn.scale[:, None, None] * (conv - bn.mean[:, None, None])
            / bn.std[:, None, None] + bn.shift[:, None, None])


def wrap_int32(a: np.ndarray) -> np.ndarray:
    """Two's complement narrowing of arbitrary integers to int32."""
    return (((np.asarray(a, dtype=np.int64) + _SIGN) % _WRAP) - _SIGN).astype(np.int32)


# Rounding codes for the reference narrowing stage.  Plain ints on purpose:
# this module must not import the unit under test.
REF_TRUNCATE = 0
REF_HALF_UP = 1
REF_ROUND_BIAS = 2


@njit(cache=True)
def _downconvert_kernel(acc, relu, mode):
    n = acc.size
    work = acc.copy()
    if relu:
        for i in range(n):
            if work[i] < 0:
                work[i] = 0
    mx = np.int64(0)
    for i in range(n):
        m = work[i]
        if m < 0:
            m = -m
        if m > mx:
            mx = m
    bits = 0
    while mx > 0:
        mx >>= 1
        bits += 1
    shift = bits - 7
    if shift < 0:
        shift = 0
    out = np.empty(n, dtype=np.int8)
    for i in range(n):
        v = work[i]
        neg = v < 0
        m = -v if neg else v
        q = m >> shift
        if mode == 1 and shift >= 1:
            q += (m >> (shift - 1)) & 1
        elif mode == 2 and shift >= 2:
            if ((m >> (shift - 1)) & 1) == 1 and ((m >> (shift - 2)) & 1) == 1:
                q += 1
        if neg:
            r = -q
            if r < -128:
                r = -128
        else:
            r = q
            if r > 127:
                r = 127
        out[i] = r
    return out, shift


def ref_downconvert(acc: np.ndarray, relu: bool = False,
                    mode: int = REF_ROUND_BIAS) -> tuple[np.ndarray, int]:
    """Naive 32-to-8-bit narrowing: (int8 tensor, right-shift amount).

    Negatives are zeroed before the magnitude scan when relu is set; the
    shift is the smallest that fits the largest magnitude in 7 bits.
    """
    flat = np.ascontiguousarray(acc, dtype=np.int64).ravel()
    out, shift = _downconvert_kernel(flat, relu, mode)
    return out.reshape(np.asarray(acc).shape), int(shift)


@njit(cache=True)
def _eltwise_kernel(a, b, shift_a, shift_b, relu):
    n = a.size
    out = np.empty(n, dtype=np.int8)
    for i in range(n):
        s = (a[i] >> shift_a) + (b[i] >> shift_b)
        if s > 127:
            s = 127
        if s < -128:
            s = -128
        if relu and s < 0:
            s = 0
        out[i] = s
    return out


def ref_eltwise_add(a: np.ndarray, a_exp: int, b: np.ndarray, b_exp: int,
                    relu: bool = False) -> tuple[np.ndarray, int]:
    """Naive exponent-aligned saturating 8-bit add: (int8 tensor, exp).

    The operand with the smaller exponent is shifted right arithmetically
    to the larger one before adding.
    """
    exp = max(a_exp, b_exp)
    flat = _eltwise_kernel(np.ascontiguousarray(a, dtype=np.int64).ravel(),
                           np.ascontiguousarray(b, dtype=np.int64).ravel(),
                           exp - a_exp, exp - b_exp, relu)
    return flat.reshape(np.asarray(a).shape), exp


@njit(cache=True)
def _pack_act_kernel(x):
    chans = x.shape[0]
    h = x.shape[1]
    w = x.shape[2]
    groups = chans // 64
    out = np.empty(groups * h * w * 64, dtype=np.uint8)
    i = 0
    for g in range(groups):
        for y in range(h):
            for xx in range(w):
                for lane in range(64):
                    out[i] = np.uint8(x[g * 64 + lane, y, xx] & 0xFF)
                    i += 1
    return out


def ref_pack_activations(x: np.ndarray) -> bytes:
    """Naive 64-lane activation packing, lane by lane."""
    if x.shape[0] % 64:
        raise ValueError("channel count must be a multiple of 64")
    return _pack_act_kernel(np.ascontiguousarray(x, dtype=np.int64)).tobytes()


def _ref_out_dims(h, w, kh, kw, stride, pad):
    return max((h + 2 * pad - kh) // stride + 1, 0), max((w + 2 * pad - kw) // stride + 1, 0)
