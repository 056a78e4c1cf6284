"""Analytical cycle and throughput model of the tile array and LSU.

Per layer, compute cycles follow the schedule shape exactly (output
group x input group x kernel pixel outer loops, 4 pixels per tile per
cycle) and bandwidth cycles follow the fetch plan over 4x64-byte read
channels; the layer takes the larger of the two plus the pipeline fill.
Elementwise merges ride the write-back path of the producing layers, so
they cost no compute cycles; their traffic still shows up when the
bandwidth model is on.

This is a roofline, not a stall simulator: measured silicon for the
64-tile configuration reaches 5 TOP/s at 200 MHz on the full residual
network where the ideal model reports ~6.4, the gap being memory stalls
and host transfer that have no published timings.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

PIPELINE_DEPTH = 20


@dataclass(frozen=True)
class TileConfig:
    """Array geometry and clock for one accelerator build."""

    tiles: int = 64
    pes_per_tile: int = 4
    dot_width: int = 64
    freq_mhz: float = 200.0
    power_watts: float | None = None

    @property
    def mac_per_cycle(self) -> int:
        return self.tiles * self.pes_per_tile * self.dot_width


PRESETS = {
    "arria10": TileConfig(64, 4, 64, 200.0),
    # Larger-part projection: sized to the published headline throughput,
    # with the power figure back-derived from the efficiency headline.
    "stratix10": TileConfig(256, 4, 64, 580.0, power_watts=97.4),
}

# Measured silicon reference points (board, MHz) -> TOP/s on the full
# residual network, for printing next to the ideal-model projection.
REFERENCE_TOPS = {("arria10", 200.0): 5.0, ("arria10", 400.0): 10.0}


def peak_tops(cfg: TileConfig, freq_mhz: float | None = None) -> float:
    f = cfg.freq_mhz if freq_mhz is None else freq_mhz
    return 2.0 * cfg.mac_per_cycle * f * 1e6 / 1e12


def _ceil_div(a: int, b: int) -> int:
    return -(-a // b)


@dataclass
class LayerPerf:
    name: str
    kind: str
    macs: int
    compute_cycles: int
    bandwidth_cycles: int
    cycles: int
    effective_tops: float
    utilization: float | None


def layer_cycles(node, cfg: TileConfig, *, bandwidth: bool = True,
                 freq_mhz: float | None = None) -> LayerPerf:
    """Cycle cost of one accelerator layer (duck-typed geometry).

    Returns the full per-layer row; .cycles is the roofline number.
    """
    from . import layout  # local import keeps this module numpy-free

    f = (cfg.freq_mhz if freq_mhz is None else freq_mhz) * 1e6
    plan = layout.lsu_plan(node)
    bw = _ceil_div(plan.total_read_bytes,
                   layout.READ_CHANNELS * layout.CHANNEL_BYTES) if bandwidth else 0
    if node.kind == "eltwise":
        cycles = bw
        return LayerPerf(node.id if hasattr(node, "id") else getattr(node, "name", "?"),
                         "eltwise", 0, 0, bw, cycles, 0.0, None)
    oh, ow = layout.out_dims(node.h, node.w, node.kh, node.kw, node.stride, node.pad)
    compute = (_ceil_div(node.ofm, cfg.tiles) * _ceil_div(node.ifm, cfg.dot_width)
               * node.kh * node.kw * _ceil_div(oh * ow, cfg.pes_per_tile))
    cycles = max(compute, bw) + PIPELINE_DEPTH
    macs = node.ofm * node.ifm * node.kh * node.kw * oh * ow
    eff = 2.0 * macs / (cycles / f) / 1e12 if cycles else 0.0
    util = macs / (cycles * cfg.mac_per_cycle) if cycles else None
    name = node.id if hasattr(node, "id") else getattr(node, "name", "?")
    return LayerPerf(name, "conv", macs, compute, bw, cycles, eff, util)


@dataclass
class PerfReport:
    """Network-level roofline summary plus per-layer rows."""

    config: TileConfig
    freq_mhz: float
    bandwidth: bool
    layers: list[LayerPerf] = field(default_factory=list)
    host_layers: list[tuple[str, str, int]] = field(default_factory=list)
    total_macs: int = 0
    host_macs: int = 0
    total_cycles: int = 0
    effective_tops: float = 0.0
    utilization: float = 0.0
    images_per_second: float = 0.0
    peak: float = 0.0
    tops_per_watt: float | None = None
    reference_tops: float | None = None

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("layer,kind,macs,compute_cycles,bandwidth_cycles,cycles,"
                  "effective_tops,utilization\n")
        for r in self.layers:
            util = "" if r.utilization is None else f"{r.utilization:.6f}"
            buf.write(f"{r.name},{r.kind},{r.macs},{r.compute_cycles},"
                      f"{r.bandwidth_cycles},{r.cycles},{r.effective_tops:.6f},{util}\n")
        buf.write(f"total,network,{self.total_macs},,,{self.total_cycles},"
                  f"{self.effective_tops:.6f},{self.utilization:.6f}\n")
        return buf.getvalue()

    def summary(self) -> str:
        lines = [
            f"config: {self.config.tiles} tiles x {self.config.pes_per_tile} PEs "
            f"x dot-{self.config.dot_width} @ {self.freq_mhz:g} MHz "
            f"({self.config.mac_per_cycle} MAC/cycle)",
            f"bandwidth model: {'on' if self.bandwidth else 'off (ideal)'}",
            f"accelerator MACs: {self.total_macs} "
            f"(+{self.host_macs} on host, "
            f"{100.0 * self.host_macs / max(1, self.total_macs + self.host_macs):.1f}%)",
            f"cycles/image: {self.total_cycles}",
            f"peak: {self.peak:.4f} TOP/s",
            f"effective: {self.effective_tops:.4f} TOP/s "
            f"(utilization {self.utilization:.3f})",
            f"images/s: {self.images_per_second:.1f}",
        ]
        if self.tops_per_watt is not None:
            lines.append(f"efficiency: {self.tops_per_watt:.4f} TOP/s/W")
        if self.reference_tops is not None:
            lines.append(
                f"measured silicon reference for this configuration: "
                f"{self.reference_tops:g} TOP/s (ideal model excludes memory "
                f"stalls and host transfer)")
        return "\n".join(lines)


def network_perf(g, cfg: TileConfig, *, freq_mhz: float | None = None,
                 power_watts: float | None = None, bandwidth: bool = True,
                 board: str | None = None) -> PerfReport:
    """Roofline totals for one image through a network graph.

    Host layers contribute no cycles; their MAC counts are tallied so the
    report shows the fraction of work the accelerator never sees.
    """
    f = cfg.freq_mhz if freq_mhz is None else freq_mhz
    power = cfg.power_watts if power_watts is None else power_watts
    rep = PerfReport(cfg, f, bandwidth, peak=peak_tops(cfg, f))
    for nid in g.schedule():
        node = g.nodes[nid]
        if node.kind in ("conv", "eltwise"):
            row = layer_cycles(node, cfg, bandwidth=bandwidth, freq_mhz=f)
            rep.layers.append(row)
            rep.total_macs += row.macs
            rep.total_cycles += row.cycles
        else:
            macs = 0
            if node.kind == "host_conv":
                macs = node.ofm * node.ifm * node.kh * node.kw * node.oh * node.ow
            elif node.kind == "host_fc":
                macs = node.ofm * node.ifm
            rep.host_layers.append((nid, node.kind, macs))
            rep.host_macs += macs
    if rep.total_cycles:
        seconds = rep.total_cycles / (f * 1e6)
        rep.effective_tops = 2.0 * rep.total_macs / seconds / 1e12
        rep.images_per_second = 1.0 / seconds
    rep.utilization = rep.effective_tops / rep.peak if rep.peak else 0.0
    if power:
        rep.tops_per_watt = rep.peak / power
    if board is None:
        board = next((n for n, c in PRESETS.items()
                      if (c.tiles, c.pes_per_tile, c.dot_width) ==
                      (cfg.tiles, cfg.pes_per_tile, cfg.dot_width)), None)
    rep.reference_tops = REFERENCE_TOPS.get((board, f))
    return rep
