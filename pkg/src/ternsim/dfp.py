"""Dynamic fixed point (DFP) arithmetic for the 8-bit inference datapath.

A DFP tensor is a block of int8 values sharing one signed 8-bit power-of-two
exponent.  Layer outputs are produced in 32-bit accumulators and narrowed
back to 8 bits with a data-driven right shift: the shift is the position of
the highest set bit of the largest magnitude above bit 6, so the largest
value always lands in the top half of the 7-bit magnitude range.  The shift
amount is absorbed into the shared exponent, which then propagates to the
next layer as act_exp + wt_exp + shift.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

# Datapath widths.  Accumulators are 32-bit two's complement; stored
# activations are int8 with a shared signed 8-bit exponent.
ACC_BITS = 32
DATA_BITS = 8
DATA_MIN = -128
DATA_MAX = 127
EXP_MIN = -128
EXP_MAX = 127

# Narrowing keeps a 7-bit magnitude.
_MAG_BITS = DATA_BITS - 1


class RoundingMode(enum.Enum):
    """Handling of the bits shifted out during down-conversion."""

    TRUNCATE = "truncate"
    ROUND_HALF_UP = "round-half-up"
    ROUND_AND_BIAS = "round-and-bias"


# Hardware default: increment the shifted magnitude only when the two most
# significant shifted-out bits are both 1.
DEFAULT_MODE = RoundingMode.ROUND_AND_BIAS


class ExponentOverflowError(OverflowError):
    """A shared exponent left the signed 8-bit range."""


class ShapeError(ValueError):
    """Tensor operands disagree in shape or dtype."""


@dataclass
class DfpTensor:
    """int8 values plus one shared power-of-two exponent.

    Element i decodes to data[i] * 2**exp.
    """

    data: np.ndarray
    exp: int

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.dtype != np.int8:
            raise ShapeError(f"DfpTensor data must be int8, got {self.data.dtype}")
        if not EXP_MIN <= int(self.exp) <= EXP_MAX:
            raise ExponentOverflowError(
                f"shared exponent {self.exp} outside [{EXP_MIN}, {EXP_MAX}]")
        self.exp = int(self.exp)

    def decode(self) -> np.ndarray:
        """Float64 view of the stored values."""
        return self.data.astype(np.float64) * 2.0 ** self.exp


@dataclass
class AccTensor:
    """32-bit accumulator block prior to down-conversion.

    Element i represents data[i] * 2**(act_exp + wt_exp): the product of an
    int8 activation tensor at act_exp with integer weight scales at wt_exp.
    """

    data: np.ndarray
    act_exp: int
    wt_exp: int

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.dtype != np.int32:
            raise ShapeError(f"AccTensor data must be int32, got {self.data.dtype}")

    def decode(self) -> np.ndarray:
        return self.data.astype(np.float64) * 2.0 ** (self.act_exp + self.wt_exp)


def lzc32(x: int) -> int:
    """Leading zero count of x in a 32-bit field.  lzc32(0) == 32."""
    x = int(x)
    if not 0 <= x < (1 << 32):
        raise ValueError(f"lzc32 input {x} outside the unsigned 32-bit range")
    return 32 - x.bit_length()


def compute_shift(max_abs: int) -> int:
    """Right shift that fits |max| into 7 magnitude bits.

    Equals max(0, (32 - lzc32(max_abs)) - 7), i.e. how far the highest set
    bit of max_abs sits above bit 6.  Minimal by construction: when the
    shift is nonzero the shifted maximum still occupies all 7 bits.
    """
    if max_abs < 0:
        raise ValueError("max_abs must be non-negative")
    return max(0, (32 - lzc32(max_abs)) - _MAG_BITS)


def downconvert_scalar(value: int, shift: int,
                       mode: RoundingMode = DEFAULT_MODE) -> int:
    """Narrow one accumulator value to int8 by a magnitude right shift.

    The shift operates on |value|; the sign is reapplied afterwards and the
    result saturates to [-128, 127].  ROUND_AND_BIAS increments the shifted
    magnitude only when the two most significant shifted-out bits (round
    bit, then bias bit below it) are both 1; with shift == 1 there is no
    bias bit, which counts as 0, so no increment ever happens.
    ROUND_HALF_UP increments on the round bit alone.  shift == 0 reduces to
    plain saturation for every mode.
    """
    if shift < 0:
        raise ValueError("shift must be non-negative")
    value = int(value)
    mag = abs(value)
    out = mag >> shift
    if shift >= 1 and mode is not RoundingMode.TRUNCATE:
        round_bit = (mag >> (shift - 1)) & 1
        bias_bit = (mag >> (shift - 2)) & 1 if shift >= 2 else 0
        if mode is RoundingMode.ROUND_HALF_UP:
            out += round_bit
        elif round_bit and bias_bit:
            out += 1
    if value < 0:
        out = -out
    return max(DATA_MIN, min(DATA_MAX, out))


def downconvert_tensor(acc: AccTensor, relu: bool = False,
                       mode: RoundingMode = DEFAULT_MODE) -> DfpTensor:
    """Narrow a whole accumulator block with one tensor-wide shift.

    ReLU (when requested) zeroes negatives BEFORE the magnitude scan, so
    the shift is derived only from values that survive.  Every element is
    then shifted by the same amount as downconvert_scalar would apply, and
    the shared output exponent becomes act_exp + wt_exp + shift.
    """
    wide = acc.data.astype(np.int64)
    if relu:
        wide = np.maximum(wide, 0)
    max_abs = int(np.max(np.abs(wide))) if wide.size else 0
    shift = compute_shift(max_abs)
    mag = np.abs(wide)
    out = mag >> shift
    if shift >= 1 and mode is not RoundingMode.TRUNCATE:
        round_bit = (mag >> (shift - 1)) & 1
        if mode is RoundingMode.ROUND_HALF_UP:
            out = out + round_bit
        else:
            if shift >= 2:
                bias_bit = (mag >> (shift - 2)) & 1
            else:
                bias_bit = np.zeros_like(round_bit)
            out = out + (round_bit & bias_bit)
    out = np.where(wide < 0, -out, out)
    out = np.clip(out, DATA_MIN, DATA_MAX).astype(np.int8)
    exp = propagate_exponent(acc.act_exp, acc.wt_exp, shift)
    return DfpTensor(out, exp)


def propagate_exponent(act_exp: int, wt_exp: int, shift: int) -> int:
    """Shared exponent handed to the next layer: act_exp + wt_exp + shift.

    Raises ExponentOverflowError outside the signed 8-bit register range
    rather than wrapping; a wrapped exponent would silently rescale the
    whole network by 2**256.
    """
    exp = int(act_exp) + int(wt_exp) + int(shift)
    if not EXP_MIN <= exp <= EXP_MAX:
        raise ExponentOverflowError(f"exponent {exp} outside [{EXP_MIN}, {EXP_MAX}]")
    return exp


def dfp_add(a: int, a_exp: int, b: int, b_exp: int) -> tuple[int, int]:
    """Add two int8 values that carry different shared exponents.

    The operand with the smaller exponent is arithmetic-right-shifted by
    the exponent difference so both sit at the coarser scale.  The sum
    saturates to [-128, 127] and carries exponent max(a_exp, b_exp).
    """
    a = int(a)
    b = int(b)
    if a_exp < b_exp:
        a >>= b_exp - a_exp
    elif b_exp < a_exp:
        b >>= a_exp - b_exp
    s = a + b
    s = max(DATA_MIN, min(DATA_MAX, s))
    return s, max(a_exp, b_exp)
