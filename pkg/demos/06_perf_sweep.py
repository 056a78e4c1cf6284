"""Roofline throughput projections for the full 50-layer network.

Per-layer cycle counts come from the array geometry; the network report
rolls them up into effective TOP/s, utilization, and images per second,
with and without the memory-traffic ceiling.
"""

from ternsim import graph, perf

g = graph.build_resnet50()
kinds = [n.kind for n in g.nodes.values()]
print(f"network: {kinds.count('conv')} accelerator convs, "
      f"{kinds.count('eltwise')} skip merges, "
      f"{sum(k.startswith('host') for k in kinds)} host layers")
print()

cfg = perf.PRESETS["arria10"]
print(f"mid-range preset: {cfg.tiles} tiles x {cfg.pes_per_tile} PEs x "
      f"dot-{cfg.dot_width} = {cfg.mac_per_cycle} MAC/cycle")
for mhz in (200.0, 300.0, 400.0):
    print(f"  peak at {mhz:3.0f} MHz: {perf.peak_tops(cfg, freq_mhz=mhz):.4f} TOP/s")
print()

# -- the busiest and laziest layers -------------------------------------------
rep = perf.network_perf(g, cfg, bandwidth=False)
rows = [r for r in rep.layers if r.kind == "conv"]
rows.sort(key=lambda r: r.utilization)
print("per-layer utilization (ideal, no bandwidth ceiling):")
print("  worst five:")
for r in rows[:5]:
    n = g.nodes[r.name]
    print(f"    {r.name:12s} {n.ifm:4d}->{n.ofm:4d} on {n.oh:2d}x{n.ow:<2d} "
          f"k{n.kh}  util {r.utilization:.3f}")
print("  best:")
r = rows[-1]
n = g.nodes[r.name]
print(f"    {r.name:12s} {n.ifm:4d}->{n.ofm:4d} on {n.oh:2d}x{n.ow:<2d} "
      f"k{n.kh}  util {r.utilization:.3f}")
print()

# -- roll-up with and without the traffic model --------------------------------
for bw in (False, True):
    rep = perf.network_perf(g, cfg, bandwidth=bw)
    tag = "with" if bw else "without"
    print(f"{tag} bandwidth ceiling: {rep.total_cycles} cycles, "
          f"{rep.effective_tops:.4f} TOP/s, {rep.images_per_second:.1f} img/s")
print()

print(perf.network_perf(g, cfg, bandwidth=False).summary())
print()

# -- a bigger array --------------------------------------------------------------
big = perf.PRESETS["stratix10"]
rep = perf.network_perf(g, big, bandwidth=False, power_watts=97.4)
print(f"large preset: {big.tiles} tiles at {big.freq_mhz:.0f} MHz -> "
      f"{perf.peak_tops(big):.1f} TOP/s peak, {rep.tops_per_watt:.3f} TOP/s/W")
