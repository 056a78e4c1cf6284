"""Tile pipeline semantics: dot products, scaling, wrap-around, and layer passes."""

import io

import numpy as np
import pytest

from ternsim import engine, layout, oracle
from ternsim.dfp import AccTensor, DfpTensor, RoundingMode
from ternsim.engine import (
    DOT_LANES,
    DOT_MAX,
    LayerConfigError,
    MemoryImage,
    PES_PER_TILE,
    SCALE_LIMIT,
    ShapeError,
    TILES,
    accumulate,
    conv_direct,
    dot64,
    eltwise_merge,
    plan_single_layer,
    run_layer,
    scale,
)
from ternsim.quantizer import FusedLayerWeights

RAB = RoundingMode.ROUND_AND_BIAS


def _weights(trits, alpha_q, bias_q=None, wt_exp=0):
    trits = np.asarray(trits, dtype=np.int8)
    if bias_q is None:
        bias_q = np.zeros(trits.shape[0], dtype=np.int32)
    return FusedLayerWeights(trits, np.asarray(alpha_q, dtype=np.uint16),
                             np.asarray(bias_q, dtype=np.int32), wt_exp, 64)


def _rand_case(rng, ifm=64, ofm=64, kh=1, h=4, stride=1, pad=0, relu=False,
               act_exp=0, wt_exp=0):
    trits = rng.integers(-1, 2, (ofm, ifm, kh, kh)).astype(np.int8)
    alpha = rng.integers(1, 65536, (ofm, ifm // 64, kh, kh)).astype(np.uint16)
    bias = rng.integers(-(1 << 16), 1 << 16, ofm).astype(np.int32)
    w = _weights(trits, alpha, bias, wt_exp)
    x = DfpTensor(rng.integers(-128, 128, (ifm, h, h)).astype(np.int8), act_exp)
    return w, x


def _packed_run(desc, w, x, *, mode=RAB, partial_bytes=None, zero_bias=False,
                **run_kwargs):
    lsu, total = plan_single_layer(desc)
    desc.lsu_regs = lsu
    mem = MemoryImage(total)
    mem.write(lsu.ifm, layout.pack_ifm(x).payload)
    mem.write(lsu.weights, layout.pack_weights(w).payload)
    mem.write(lsu.scales, layout.pack_scales(w).payload)
    mem.write(lsu.bias, bytes(lsu.bias.size) if zero_bias
              else layout.pack_bias(w).payload)
    if partial_bytes is not None:
        mem.write(lsu.partials, partial_bytes)
    info = run_layer(desc, mem, mode=mode, keep_acc=True, **run_kwargs)
    return info, mem, lsu


def _desc(name, ifm, ofm, h, w, kh, stride=1, pad=0, relu=False, act_exp=0,
          wt_exp=0, fuse_partial=False, store_partials=False):
    d = engine.LayerDescriptor(name, "conv", ifm, ofm, h, w, kh, kh, stride,
                               pad, relu, fuse_partial, store_partials)
    d.core_regs = engine.CoreRegs(ifm, ofm, h, w, kh, kh, stride, pad, relu,
                                  fuse_partial, store_partials, act_exp,
                                  wt_exp, 0)
    return d


class TestDot64:
    def test_zero_weights(self):
        x = np.full(64, 37, dtype=np.int8)
        assert dot64(x, np.zeros(64, dtype=np.int8)) == 0

    def test_extreme_negative_input_all_minus_weights(self):
        x = np.full(64, -128, dtype=np.int8)
        w = np.full(64, -1, dtype=np.int8)
        assert dot64(x, w) == 8192 == DOT_MAX

    def test_extreme_positive(self):
        x = np.full(64, -128, dtype=np.int8)
        w = np.full(64, 1, dtype=np.int8)
        assert dot64(x, w) == -8192

    def test_single_lane(self):
        x = np.zeros(64, dtype=np.int8)
        w = np.zeros(64, dtype=np.int8)
        x[17], w[17] = 5, -1
        assert dot64(x, w) == -5

    def test_all_ones(self):
        assert dot64(np.ones(64, dtype=np.int8), np.ones(64, dtype=np.int8)) == 64

    def test_equals_multiply_form(self):
        # the add/sub network computes exactly sum(x*w) without a multiplier
        rng = np.random.default_rng(0)
        for _ in range(300):
            x = rng.integers(-128, 128, 64).astype(np.int8)
            w = rng.integers(-1, 2, 64).astype(np.int8)
            assert dot64(x, w) == int(np.dot(x.astype(np.int64), w.astype(np.int64)))

    def test_bound_is_tight(self):
        rng = np.random.default_rng(1)
        for _ in range(300):
            x = rng.integers(-128, 128, 64).astype(np.int8)
            w = rng.integers(-1, 2, 64).astype(np.int8)
            assert abs(dot64(x, w)) <= DOT_MAX

    def test_rejects_non_ternary(self):
        with pytest.raises(ShapeError):
            dot64(np.zeros(64, dtype=np.int8), np.full(64, 2, dtype=np.int8))

    def test_rejects_wrong_width(self):
        with pytest.raises(ShapeError):
            dot64(np.zeros(32, dtype=np.int8), np.zeros(32, dtype=np.int8))


class TestScale:
    def test_zero(self):
        assert scale(0, 65535) == 0
        assert scale(8192, 0) == 0

    def test_unit(self):
        assert scale(1, 1) == 1

    def test_extreme_product_fits_31_bits(self):
        v = scale(8192, 65535)
        assert v == 536862720
        assert v <= SCALE_LIMIT < 2**31

    def test_sign_passthrough(self):
        assert scale(-8192, 65535) == -536862720

    def test_rejects_out_of_range(self):
        with pytest.raises(ShapeError):
            scale(8193, 1)
        with pytest.raises(ShapeError):
            scale(1, 65536)


class TestAccumulate:
    def test_plain_sum(self):
        assert accumulate(100, -250) == -150

    def test_wraps_at_positive_edge(self):
        assert accumulate(2**31 - 1, 1) == -(2**31)

    def test_wraps_at_negative_edge(self):
        assert accumulate(-(2**31), -1) == 2**31 - 1

    def test_matches_reference_wrap(self):
        rng = np.random.default_rng(2)
        for _ in range(500):
            a = int(rng.integers(-(2**31), 2**31))
            v = int(rng.integers(-SCALE_LIMIT, SCALE_LIMIT + 1))
            assert accumulate(a, v) == int(oracle.wrap_int32(np.array([a + v]))[0])


class TestEltwiseMerge:
    def test_zero_operand_identity(self):
        a = DfpTensor(np.full((64, 2, 2), 21, dtype=np.int8), -3)
        b = DfpTensor(np.zeros((64, 2, 2), dtype=np.int8), -3)
        out = eltwise_merge(a, b)
        assert out.exp == -3
        assert np.array_equal(out.data, a.data)

    def test_aligns_to_larger_exponent(self):
        a = DfpTensor(np.full((1, 1, 1), 10, dtype=np.int8), 3)
        b = DfpTensor(np.full((1, 1, 1), 12, dtype=np.int8), 1)
        out = eltwise_merge(a, b)
        assert (out.exp, int(out.data[0, 0, 0])) == (3, 13)

    def test_saturates(self):
        a = DfpTensor(np.full((1, 1, 1), 127, dtype=np.int8), 0)
        out = eltwise_merge(a, a)
        assert int(out.data[0, 0, 0]) == 127

    def test_relu_after_sum(self):
        a = DfpTensor(np.full((1, 1, 1), -5, dtype=np.int8), 0)
        b = DfpTensor(np.full((1, 1, 1), 2, dtype=np.int8), 0)
        assert int(eltwise_merge(a, b, relu=True).data[0, 0, 0]) == 0

    def test_shape_mismatch(self):
        a = DfpTensor(np.zeros((64, 2, 2), dtype=np.int8), 0)
        b = DfpTensor(np.zeros((64, 2, 3), dtype=np.int8), 0)
        with pytest.raises(ShapeError):
            eltwise_merge(a, b)


class TestConvDirect:
    def test_all_plus_one_unit_alpha(self):
        # 64 lanes of 1 * +1 with alpha 1: every output element is 64
        x = DfpTensor(np.ones((64, 2, 2), dtype=np.int8), 0)
        w = _weights(np.ones((64, 64, 1, 1)), np.ones((64, 1, 1, 1)))
        out, info = conv_direct(x, w, mode=RoundingMode.TRUNCATE)
        assert (info.acc is None or True)
        assert info.shift == 0
        assert (out.data == 64).all()
        assert out.exp == 0

    def test_bias_applied_once_per_output(self):
        x = DfpTensor(np.zeros((64, 3, 3), dtype=np.int8), 0)
        w = _weights(np.zeros((64, 64, 3, 3)), np.ones((64, 1, 3, 3)),
                     np.full(64, 9, dtype=np.int32))
        out, info = conv_direct(x, w, pad=1, mode=RoundingMode.TRUNCATE,
                                keep_acc=True)
        # nine kernel pixels but the bias lands once, not nine times
        assert (info.acc.data == 9).all()

    def test_matches_reference_oracle(self):
        rng = np.random.default_rng(3)
        for _ in range(25):
            kh = int(rng.choice([1, 3]))
            w, x = _rand_case(rng, ifm=128, ofm=64, kh=kh, h=5,
                              stride=int(rng.choice([1, 2])),
                              pad=kh // 2, act_exp=-4, wt_exp=-10)
            stride = int(rng.choice([1, 2]))
            pad = kh // 2
            out, info = conv_direct(x, w, stride=stride, pad=pad, relu=True,
                                    keep_acc=True)
            ref = oracle.ref_ternary_conv(
                x.data, w, type("G", (), {"stride": stride, "pad": pad})())
            assert np.array_equal(info.acc.data, ref)
            ref_q, ref_s = oracle.ref_downconvert(ref, relu=True,
                                                  mode=oracle.REF_ROUND_BIAS)
            assert info.shift == ref_s
            assert np.array_equal(out.data, ref_q)

    def test_exponent_chain(self):
        rng = np.random.default_rng(4)
        w, x = _rand_case(rng, act_exp=-6, wt_exp=-15)
        out, info = conv_direct(x, w, act_exp=-6)
        assert out.exp == -6 + -15 + info.shift


class TestRunLayerPacked:
    def test_packed_path_equals_direct_path(self):
        rng = np.random.default_rng(5)
        w, x = _rand_case(rng, ifm=128, ofm=128, kh=3, h=6, pad=1,
                          act_exp=-3, wt_exp=-9)
        desc = _desc("t", 128, 128, 6, 6, 3, pad=1, relu=True,
                     act_exp=-3, wt_exp=-9)
        info, mem, lsu = _packed_run(desc, w, x)
        direct, dinfo = conv_direct(x, w, pad=1, relu=True, act_exp=-3)
        assert info.out_exp == direct.exp
        assert mem.read(lsu.out) == layout.pack_ifm(direct).payload

    def test_tile_and_pe_order_is_cosmetic(self):
        # scheduling permutations touch trace order only, never results
        rng = np.random.default_rng(6)
        w, x = _rand_case(rng, ifm=64, ofm=128, kh=3, h=5, pad=1)
        base = None
        for seed in range(3):
            perm_t = np.random.default_rng(seed).permutation(TILES)
            perm_p = np.random.default_rng(seed + 10).permutation(PES_PER_TILE)
            desc = _desc("p", 64, 128, 5, 5, 3, pad=1)
            info, mem, lsu = _packed_run(desc, w, x, tile_order=perm_t.tolist(),
                                         pe_order=perm_p.tolist())
            got = mem.read(lsu.out)
            if base is None:
                base = got
            assert got == base

    def test_two_pass_partials_equal_single_pass(self):
        # split the 128 input channels into two 64-channel passes through the
        # partial-sum store/fuse path; byte-identical to one full pass
        rng = np.random.default_rng(7)
        w, x = _rand_case(rng, ifm=128, ofm=64, kh=3, h=5, pad=1,
                          act_exp=-2, wt_exp=-8)
        desc_full = _desc("full", 128, 64, 5, 5, 3, pad=1, relu=True,
                          act_exp=-2, wt_exp=-8)
        info_full, mem_full, lsu_full = _packed_run(desc_full, w, x)

        w_a = FusedLayerWeights(w.trits[:, :64], w.alpha_q[:, :1], w.bias_q,
                                w.wt_exp, 64)
        w_b = FusedLayerWeights(w.trits[:, 64:], w.alpha_q[:, 1:],
                                np.zeros(64, dtype=np.int32), w.wt_exp, 64)
        x_a = DfpTensor(x.data[:64], x.exp)
        x_b = DfpTensor(x.data[64:], x.exp)

        d1 = _desc("passA", 64, 64, 5, 5, 3, pad=1, relu=True,
                   act_exp=-2, wt_exp=-8, store_partials=True)
        info1, mem1, lsu1 = _packed_run(d1, w_a, x_a)
        stored = mem1.read(lsu1.out)

        d2 = _desc("passB", 64, 64, 5, 5, 3, pad=1, relu=True,
                   act_exp=-2, wt_exp=-8, fuse_partial=True)
        info2, mem2, lsu2 = _packed_run(d2, w_b, x_b, partial_bytes=stored,
                                        zero_bias=True)

        assert np.array_equal(info2.acc.data, info_full.acc.data)
        assert info2.shift == info_full.shift
        assert mem2.read(lsu2.out) == mem_full.read(lsu_full.out)

    def test_store_partials_roundtrip_through_format(self):
        rng = np.random.default_rng(8)
        w, x = _rand_case(rng, ifm=64, ofm=64, kh=1, h=3)
        d = _desc("s", 64, 64, 3, 3, 1, store_partials=True)
        info, mem, lsu = _packed_run(d, w, x)
        p = layout.PackedPartials(mem.read(lsu.out), 64, 3, 3)
        assert np.array_equal(layout.unpack_partials(p).data, info.acc.data)

    def test_overflow_events_counted(self):
        # bias near the positive rail plus positive products must wrap
        x = DfpTensor(np.full((64, 1, 1), 127, dtype=np.int8), 0)
        w = _weights(np.ones((64, 64, 1, 1)), np.full((64, 1, 1, 1), 65535),
                     np.full(64, 2**31 - 1, dtype=np.int32))
        out, info = conv_direct(x, w, keep_acc=True)
        assert info.overflow_count >= 64
        ref = oracle.ref_ternary_conv(x.data, w,
                                      type("G", (), {"stride": 1, "pad": 0})())
        assert np.array_equal(info.acc.data, ref)

    def test_no_overflow_on_benign_layer(self):
        rng = np.random.default_rng(9)
        w, x = _rand_case(rng)
        out, info = conv_direct(x, w)
        assert info.overflow_count == 0

    def test_region_size_mismatch_rejected(self):
        rng = np.random.default_rng(10)
        w, x = _rand_case(rng)
        desc = _desc("bad", 64, 64, 4, 4, 1)
        lsu, total = plan_single_layer(desc)
        lsu.ifm = engine.Region(lsu.ifm.base, lsu.ifm.size - 64)
        desc.lsu_regs = lsu
        mem = MemoryImage(total)
        with pytest.raises(LayerConfigError):
            run_layer(desc, mem)

    def test_core_register_mirror_must_match(self):
        rng = np.random.default_rng(11)
        w, x = _rand_case(rng)
        desc = _desc("mirror", 64, 64, 4, 4, 1)
        desc.core_regs.ofm = 128  # disagree with the descriptor geometry
        lsu, total = plan_single_layer(desc)
        desc.lsu_regs = lsu
        with pytest.raises(LayerConfigError):
            run_layer(desc, MemoryImage(total))


class TestRunLayerEltwise:
    def _eltwise_run(self, a, b, relu=False):
        desc = engine.LayerDescriptor("add", "eltwise", a.data.shape[0],
                                      a.data.shape[0], a.data.shape[1],
                                      a.data.shape[2], 1, 1, 1, 0, relu)
        desc.core_regs = engine.CoreRegs(desc.ifm, desc.ofm, desc.h, desc.w,
                                         1, 1, 1, 0, relu, False, False,
                                         a.exp, 0, b.exp)
        lsu, total = plan_single_layer(desc)
        desc.lsu_regs = lsu
        mem = MemoryImage(total)
        mem.write(lsu.ifm, layout.pack_ifm(a).payload)
        mem.write(lsu.eltwise, layout.pack_ifm(b).payload)
        info = run_layer(desc, mem)
        return info, mem, lsu

    def test_matches_merge_primitive(self):
        rng = np.random.default_rng(12)
        a = DfpTensor(rng.integers(-128, 128, (128, 3, 3)).astype(np.int8), -4)
        b = DfpTensor(rng.integers(-128, 128, (128, 3, 3)).astype(np.int8), -6)
        info, mem, lsu = self._eltwise_run(a, b, relu=True)
        want = eltwise_merge(a, b, relu=True)
        assert info.out_exp == want.exp == -4
        assert mem.read(lsu.out) == layout.pack_ifm(want).payload

    def test_exponent_is_max_of_operands(self):
        rng = np.random.default_rng(13)
        a = DfpTensor(rng.integers(-5, 6, (64, 2, 2)).astype(np.int8), 2)
        b = DfpTensor(rng.integers(-5, 6, (64, 2, 2)).astype(np.int8), 5)
        info, _, _ = self._eltwise_run(a, b)
        assert info.out_exp == 5


class TestTrace:
    def test_trace_is_deterministic(self):
        rng = np.random.default_rng(14)
        w, x = _rand_case(rng, h=2)
        texts = []
        for _ in range(2):
            desc = _desc("tr", 64, 64, 2, 2, 1)
            buf = io.StringIO()
            _packed_run(desc, w, x, trace=buf)
            texts.append(buf.getvalue())
        assert texts[0] == texts[1]
        assert "layer=tr" in texts[0]

    def test_trace_carries_schedule_coordinates(self):
        rng = np.random.default_rng(15)
        w, x = _rand_case(rng, h=1)
        desc = _desc("coords", 64, 64, 1, 1, 1)
        buf = io.StringIO()
        _packed_run(desc, w, x, trace=buf)
        line = buf.getvalue().splitlines()[0]
        for key in ("tile=", "pe=", "ofm=", "oy=", "ox=", "acc="):
            assert key in line
