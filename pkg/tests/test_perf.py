"""Roofline throughput model: exact cycle formulas and published rate targets."""

import math

import pytest

from ternsim import perf
from ternsim.graph import NodeSpec, build_resnet50
from ternsim.perf import (
    PIPELINE_DEPTH,
    PRESETS,
    REFERENCE_TOPS,
    TileConfig,
    layer_cycles,
    network_perf,
    peak_tops,
)

ARRIA = PRESETS["arria10"]
STRATIX = PRESETS["stratix10"]


def _conv(ifm=64, ofm=64, k=3, h=56, stride=1, pad=None, name="n"):
    pad = k // 2 if pad is None else pad
    return NodeSpec(name, "conv", ["input"], ofm=ofm, kh=k, kw=k, stride=stride,
                    pad=pad, ifm=ifm, h=h, w=h)


class TestPeakRates:
    def test_mac_array_width(self):
        assert ARRIA.mac_per_cycle == 16384

    def test_published_frequency_points(self):
        assert peak_tops(ARRIA, 200.0) == pytest.approx(6.5536, abs=0)
        assert peak_tops(ARRIA, 300.0) == pytest.approx(9.8304, abs=0)
        assert peak_tops(ARRIA, 400.0) == pytest.approx(13.1072, abs=0)

    def test_peak_scales_linearly_with_clock(self):
        assert peak_tops(ARRIA, 400.0) == pytest.approx(2 * peak_tops(ARRIA, 200.0))

    def test_large_part_projection(self):
        assert STRATIX.mac_per_cycle == 256 * 4 * 64
        assert peak_tops(STRATIX) == pytest.approx(76.0, abs=0.5)

    def test_projection_efficiency(self):
        assert peak_tops(STRATIX) / STRATIX.power_watts == pytest.approx(0.78, abs=0.01)

    def test_reference_silicon_points(self):
        assert REFERENCE_TOPS[("arria10", 200.0)] == 5.0
        assert REFERENCE_TOPS[("arria10", 400.0)] == 10.0


class TestLayerCycles:
    def test_full_width_3x3_layer(self):
        # 64->64 3x3 on 56x56: 1 ofm group x 1 ifm group x 9 pixels x 784
        row = layer_cycles(_conv(), ARRIA, bandwidth=False)
        assert row.compute_cycles == 7056
        assert row.cycles == 7056 + PIPELINE_DEPTH
        assert row.macs == 115_605_504
        assert row.macs == row.compute_cycles * ARRIA.mac_per_cycle

    def test_minimal_layer_is_fill_dominated(self):
        row = layer_cycles(_conv(k=1, h=1), ARRIA, bandwidth=False)
        assert row.compute_cycles == 1
        assert row.cycles == 1 + PIPELINE_DEPTH

    def test_cycles_never_beat_the_array_width(self):
        g = build_resnet50()
        for n in g.conv_nodes():
            row = layer_cycles(n, ARRIA, bandwidth=False)
            assert row.cycles >= math.ceil(row.macs / ARRIA.mac_per_cycle)

    def test_bandwidth_bound_is_monotone(self):
        for n in build_resnet50().accel_nodes():
            on = layer_cycles(n, ARRIA, bandwidth=True)
            off = layer_cycles(n, ARRIA, bandwidth=False)
            assert on.cycles >= off.cycles
            assert off.bandwidth_cycles == 0

    def test_bandwidth_cycles_from_fetch_plan(self):
        from ternsim import layout

        n = _conv(ifm=256, ofm=512, k=1, h=14, pad=0)
        row = layer_cycles(n, ARRIA, bandwidth=True)
        plan = layout.lsu_plan(n)
        assert row.bandwidth_cycles == -(-plan.total_read_bytes // 256)

    def test_eltwise_rides_the_write_path(self):
        n = NodeSpec("add", "eltwise", ["a", "b"], ofm=256, ifm=256, h=56, w=56)
        row = layer_cycles(n, ARRIA, bandwidth=False)
        assert row.kind == "eltwise"
        assert row.compute_cycles == 0 and row.cycles == 0
        row_bw = layer_cycles(n, ARRIA, bandwidth=True)
        assert row_bw.cycles > 0
        assert row_bw.macs == 0

    def test_partial_tile_rounding(self):
        # 128 output channels on a 64-tile array: two serial passes
        a = layer_cycles(_conv(ofm=64, k=1, h=8), ARRIA, bandwidth=False)
        b = layer_cycles(_conv(ofm=128, k=1, h=8), ARRIA, bandwidth=False)
        assert b.compute_cycles == 2 * a.compute_cycles

    def test_utilization_bounded(self):
        for n in build_resnet50().conv_nodes():
            row = layer_cycles(n, ARRIA, bandwidth=False)
            assert 0.0 < row.utilization <= 1.0


class TestNetworkPerf:
    def test_resnet_mac_census(self):
        rep = network_perf(build_resnet50(), ARRIA, bandwidth=False)
        assert rep.total_macs == 3_737_911_296
        assert rep.host_macs == 120_061_952
        frac = rep.host_macs / (rep.total_macs + rep.host_macs)
        assert 0.025 < frac < 0.035  # stem and classifier stay a small slice

    def test_ideal_throughput_band(self):
        rep = network_perf(build_resnet50(), ARRIA, bandwidth=False)
        assert rep.total_cycles == 231_920
        assert 6.0 <= rep.effective_tops <= peak_tops(ARRIA)
        assert rep.utilization == pytest.approx(0.9837, abs=0.0005)

    def test_bandwidth_model_costs_cycles(self):
        off = network_perf(build_resnet50(), ARRIA, bandwidth=False)
        on = network_perf(build_resnet50(), ARRIA, bandwidth=True)
        assert on.total_cycles > off.total_cycles
        assert on.effective_tops < off.effective_tops
        assert on.effective_tops > 5.0

    def test_throughput_linear_in_frequency(self):
        lo = network_perf(build_resnet50(), ARRIA, bandwidth=False, freq_mhz=200.0)
        hi = network_perf(build_resnet50(), ARRIA, bandwidth=False, freq_mhz=400.0)
        assert hi.effective_tops == pytest.approx(2 * lo.effective_tops)
        assert hi.total_cycles == lo.total_cycles

    def test_images_per_second(self):
        rep = network_perf(build_resnet50(), ARRIA, bandwidth=False)
        want = 200e6 / rep.total_cycles
        assert rep.images_per_second == pytest.approx(want)
        assert rep.images_per_second == pytest.approx(862.4, abs=0.5)

    def test_reference_point_attached_for_known_board(self):
        rep = network_perf(build_resnet50(), ARRIA, bandwidth=False)
        assert rep.reference_tops == 5.0
        rep400 = network_perf(build_resnet50(), ARRIA, bandwidth=False, freq_mhz=400.0)
        assert rep400.reference_tops == 10.0
        rep_s = network_perf(build_resnet50(), STRATIX, bandwidth=False)
        assert rep_s.reference_tops is None

    def test_power_gives_efficiency(self):
        rep = network_perf(build_resnet50(), STRATIX, bandwidth=False,
                           power_watts=97.4)
        assert rep.tops_per_watt == pytest.approx(0.7805, abs=0.001)

    def test_wide_layers_keep_the_array_busy(self):
        rep = network_perf(build_resnet50(), ARRIA, bandwidth=False)
        for row in rep.layers:
            if row.kind != "conv":
                continue
            node = build_resnet50().nodes[row.name]
            if node.oh in (56, 28, 14):
                assert 0.9 < row.utilization <= 1.0

    def test_host_layers_reported_not_cycled(self):
        rep = network_perf(build_resnet50(), ARRIA, bandwidth=False)
        ids = [name for name, _, _ in rep.host_layers]
        assert "conv1" in ids and "fc" in ids
        assert len(rep.host_layers) == 5

    def test_summary_mentions_measured_silicon(self):
        rep = network_perf(build_resnet50(), ARRIA, bandwidth=False)
        text = rep.summary()
        assert "measured silicon" in text
        assert "5 TOP/s" in text

    def test_csv_has_a_row_per_layer_plus_totals(self):
        rep = network_perf(build_resnet50(), ARRIA, bandwidth=False)
        lines = rep.to_csv().strip().splitlines()
        assert lines[0].startswith("layer,kind,macs")
        assert len(lines) == 1 + 68 + 1  # header + accel rows + totals
        assert lines[-1].startswith("total")


class TestCustomGeometry:
    def test_quarter_array(self):
        cfg = TileConfig(tiles=16, pes_per_tile=4, dot_width=64, freq_mhz=100.0)
        assert cfg.mac_per_cycle == 4096
        row = layer_cycles(_conv(ofm=64, k=1, h=8), cfg, bandwidth=False)
        # 64 ofm over 16 tiles: four passes
        assert row.compute_cycles == 4 * 16

    def test_frequency_override_trumps_config(self):
        rep = network_perf(build_resnet50(), ARRIA, bandwidth=False, freq_mhz=300.0)
        assert rep.freq_mhz == 300.0
        assert rep.peak == pytest.approx(9.8304)
