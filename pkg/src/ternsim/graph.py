"""Network graphs: construction, scheduling, memory planning and execution.

A graph is a DAG of layer nodes.  Convolutions and elementwise merges run
on the accelerator through packed memory images; the stem, pooling and
classifier run on the host path.  Branches are serialized: the skip side
of a merge executes completely before the main side, then the merge.

Activation traffic flows through a small pool of equal-sized regions, two
of them ping-ponging between consecutive layers while a third holds the
skip tensor that must outlive the main branch.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import dfp, engine, host, layout, quantizer
from .dfp import DfpTensor
from .engine import LayerDescriptor, CoreRegs, LsuRegs, MemoryImage, Region

INPUT = "input"

ACCEL_KINDS = ("conv", "eltwise")
HOST_KINDS = ("host_conv", "host_maxpool", "host_avgpool", "host_fc", "host_softmax")


class GraphError(ValueError):
    """Malformed network graph."""


class AllocationError(ValueError):
    """Memory regions overlap or the activation pool ran out."""


@dataclass
class NodeSpec:
    """One layer node.  Shape fields are filled by build_graph."""

    id: str
    kind: str
    inputs: list[str]
    ofm: int = 0
    kh: int = 1
    kw: int = 1
    stride: int = 1
    pad: int = 0
    relu: bool = False
    ifm: int = 0
    h: int = 0
    w: int = 0
    oh: int = 0
    ow: int = 0


@dataclass
class NetworkGraph:
    name: str
    input_shape: tuple[int, int, int]
    nodes: dict[str, NodeSpec]
    output: str

    def schedule(self) -> list[str]:
        """Topological order; a merge's first input (the skip side) and its
        whole subtree are scheduled before the second input's subtree."""
        order: list[str] = []
        seen: set[str] = set()

        def visit(nid: str, stack: frozenset):
            if nid == INPUT or nid in seen:
                return
            if nid in stack:
                raise GraphError(f"cycle through node {nid!r}")
            node = self.nodes.get(nid)
            if node is None:
                raise GraphError(f"unknown node {nid!r}")
            for p in node.inputs:
                visit(p, stack | {nid})
            seen.add(nid)
            order.append(nid)

        visit(self.output, frozenset())
        if len(order) != len(self.nodes):
            dangling = sorted(set(self.nodes) - seen)
            raise GraphError(f"nodes unreachable from output: {dangling}")
        return order

    def accel_nodes(self) -> list[NodeSpec]:
        return [n for n in self.nodes.values() if n.kind in ACCEL_KINDS]

    def conv_nodes(self) -> list[NodeSpec]:
        return [n for n in self.nodes.values() if n.kind == "conv"]

    def host_nodes(self) -> list[NodeSpec]:
        return [n for n in self.nodes.values() if n.kind in HOST_KINDS]


def build_graph(name: str, input_shape, nodes: list[NodeSpec],
                output: str | None = None) -> NetworkGraph:
    """Wire up nodes, infer every shape, and validate the result."""
    table = {}
    for n in nodes:
        if n.id in table or n.id == INPUT:
            raise GraphError(f"duplicate node id {n.id!r}")
        table[n.id] = n
    g = NetworkGraph(name, tuple(input_shape), table, output or nodes[-1].id)
    if g.output not in table:
        raise GraphError(f"output node {g.output!r} does not exist")
    for nid in g.schedule():
        _infer_shapes(g, table[nid])
    _validate_graph(g)
    return g


def _shape_of(g: NetworkGraph, edge: str) -> tuple[int, int, int]:
    if edge == INPUT:
        return g.input_shape
    n = g.nodes[edge]
    return n.ofm, n.oh, n.ow


def _infer_shapes(g: NetworkGraph, node: NodeSpec):
    want = {"conv": 1, "host_conv": 1, "eltwise": 2, "host_maxpool": 1,
            "host_avgpool": 1, "host_fc": 1, "host_softmax": 1}.get(node.kind)
    if want is None:
        raise GraphError(f"node {node.id!r} has unknown kind {node.kind!r}")
    if len(node.inputs) != want:
        raise GraphError(f"node {node.id!r} needs {want} input(s), has {len(node.inputs)}")
    c, h, w = _shape_of(g, node.inputs[0])
    if node.kind in ("conv", "host_conv"):
        node.ifm, node.h, node.w = c, h, w
        node.oh, node.ow = layout.out_dims(h, w, node.kh, node.kw, node.stride, node.pad)
    elif node.kind == "eltwise":
        c2, h2, w2 = _shape_of(g, node.inputs[1])
        if (c, h, w) != (c2, h2, w2):
            raise GraphError(f"eltwise {node.id!r} operands differ: "
                             f"{(c, h, w)} vs {(c2, h2, w2)}")
        node.ifm = node.ofm = c
        node.h = node.oh = h
        node.w = node.ow = w
        node.kh = node.kw = node.stride = 1
        node.pad = 0
    elif node.kind == "host_maxpool":
        node.ifm = node.ofm = c
        node.h, node.w = h, w
        node.oh, node.ow = layout.out_dims(h, w, node.kh, node.kw, node.stride, node.pad)
    elif node.kind == "host_avgpool":
        node.ifm = node.ofm = c
        node.h, node.w = h, w
        node.kh, node.kw = h, w
        node.oh = node.ow = 1
    elif node.kind == "host_fc":
        node.ifm = c * h * w
        node.h, node.w = h, w
        node.oh = node.ow = 1
    elif node.kind == "host_softmax":
        node.ifm = node.ofm = c
        node.h, node.w = h, w
        node.oh, node.ow = h, w


def _validate_graph(g: NetworkGraph):
    for node in g.nodes.values():
        if node.kind in ("conv", "host_conv") and (node.kh < 1 or node.kw < 1
                                                   or node.stride < 1 or node.pad < 0):
            raise GraphError(f"node {node.id!r} has bad kernel geometry")
        if node.kind == "conv":
            if node.ifm % 64 or node.ofm % 64 or node.ifm <= 0 or node.ofm <= 0:
                raise GraphError(f"accelerator conv {node.id!r} needs channel "
                                 f"counts in multiples of 64, has {node.ifm}->{node.ofm}")
        if node.kind == "eltwise" and node.ofm % 64:
            raise GraphError(f"eltwise {node.id!r} needs channels in multiples of 64")


# ---------------------------------------------------------------------------
# builders
# ---------------------------------------------------------------------------

def _scaled_channels(c: int, scale: int) -> int:
    """Divide by scale, then round up to the next multiple of 64 (floor 64)."""
    c = -(-c // scale)
    return max(64, -(-c // 64) * 64)


def build_resnet50(channel_scale: int = 1, image_size: int = 224) -> NetworkGraph:
    """Classic 16-module bottleneck residual network, 3-4-6-3 stages.

    The stem conv, both pools and the classifier run on the host; all 52
    remaining convolutions (3 per module plus 4 stage projections) and the
    16 merges run on the accelerator.  Downsampling strides sit on the
    first 1x1 of a stage's leading module and on its projection.
    channel_scale in {1, 2, 4} shrinks channel counts for desk-scale runs
    while keeping every accelerator channel count a multiple of 64.
    """
    if channel_scale not in (1, 2, 4):
        raise GraphError("channel_scale must be 1, 2 or 4")
    nodes: list[NodeSpec] = []
    nodes.append(NodeSpec("conv1", "host_conv", [INPUT], ofm=64, kh=7, kw=7,
                          stride=2, pad=3, relu=True))
    nodes.append(NodeSpec("pool1", "host_maxpool", ["conv1"], kh=3, kw=3,
                          stride=2, pad=1))
    entry = "pool1"
    stages = [(1, 3, 64, 256, 1), (2, 4, 128, 512, 2),
              (3, 6, 256, 1024, 2), (4, 3, 512, 2048, 2)]
    for idx, blocks, mid, out, stride in stages:
        mid = _scaled_channels(mid, channel_scale)
        out = _scaled_channels(out, channel_scale)
        for b in range(blocks):
            tag = f"s{idx}b{b}"
            s = stride if b == 0 else 1
            if b == 0:
                nodes.append(NodeSpec(f"{tag}_proj", "conv", [entry], ofm=out,
                                      kh=1, kw=1, stride=s))
                left = f"{tag}_proj"
            else:
                left = entry
            nodes.append(NodeSpec(f"{tag}_c1", "conv", [entry], ofm=mid,
                                  kh=1, kw=1, stride=s, relu=True))
            nodes.append(NodeSpec(f"{tag}_c2", "conv", [f"{tag}_c1"], ofm=mid,
                                  kh=3, kw=3, stride=1, pad=1, relu=True))
            nodes.append(NodeSpec(f"{tag}_c3", "conv", [f"{tag}_c2"], ofm=out,
                                  kh=1, kw=1, stride=1))
            nodes.append(NodeSpec(f"{tag}_add", "eltwise",
                                  [left, f"{tag}_c3"], relu=True))
            entry = f"{tag}_add"
    nodes.append(NodeSpec("pool5", "host_avgpool", [entry]))
    nodes.append(NodeSpec("fc", "host_fc", ["pool5"], ofm=1000))
    nodes.append(NodeSpec("softmax", "host_softmax", ["fc"]))
    return build_graph(f"resnet50_x{channel_scale}", (3, image_size, image_size),
                       nodes, "softmax")


def build_toy_residual(blocks: int = 2, channels: int = 64, mid: int = 64,
                       out: int = 128, spatial: int = 8) -> NetworkGraph:
    """Small residual network for desk-scale end-to-end checks.

    Accelerator-only: each module is 1x1 -> 3x3 -> 1x1 with a skip, the
    first module projecting channels up to `out`.
    """
    nodes: list[NodeSpec] = []
    entry = INPUT
    for b in range(blocks):
        tag = f"rm{b}"
        if b == 0 and channels != out:
            nodes.append(NodeSpec(f"{tag}_proj", "conv", [entry], ofm=out, kh=1, kw=1))
            left = f"{tag}_proj"
        else:
            left = entry
        nodes.append(NodeSpec(f"{tag}_c1", "conv", [entry], ofm=mid, kh=1, kw=1,
                              relu=True))
        nodes.append(NodeSpec(f"{tag}_c2", "conv", [f"{tag}_c1"], ofm=mid, kh=3,
                              kw=3, pad=1, relu=True))
        nodes.append(NodeSpec(f"{tag}_c3", "conv", [f"{tag}_c2"], ofm=out, kh=1, kw=1))
        nodes.append(NodeSpec(f"{tag}_add", "eltwise", [left, f"{tag}_c3"], relu=True))
        entry = f"{tag}_add"
    return build_graph("toy_residual", (channels, spatial, spatial), nodes, entry)


# ---------------------------------------------------------------------------
# JSON descriptor
# ---------------------------------------------------------------------------

def graph_to_json(g: NetworkGraph) -> dict:
    return {
        "name": g.name,
        "input": {"channels": g.input_shape[0], "height": g.input_shape[1],
                  "width": g.input_shape[2]},
        "output": g.output,
        "nodes": [
            {"id": n.id, "kind": n.kind, "inputs": list(n.inputs), "ofm": n.ofm,
             "kh": n.kh, "kw": n.kw, "stride": n.stride, "pad": n.pad,
             "relu": n.relu, "ifm": n.ifm, "h": n.h, "w": n.w,
             "oh": n.oh, "ow": n.ow}
            for n in (g.nodes[nid] for nid in g.schedule())
        ],
    }


def graph_from_json(doc: dict) -> NetworkGraph:
    try:
        shape = (doc["input"]["channels"], doc["input"]["height"], doc["input"]["width"])
        nodes = [NodeSpec(d["id"], d["kind"], list(d["inputs"]), ofm=d.get("ofm", 0),
                          kh=d.get("kh", 1), kw=d.get("kw", 1),
                          stride=d.get("stride", 1), pad=d.get("pad", 0),
                          relu=d.get("relu", False))
                 for d in doc["nodes"]]
        g = build_graph(doc["name"], shape, nodes, doc.get("output"))
    except (KeyError, TypeError) as e:
        raise GraphError(f"bad network descriptor: {e}") from e
    for d in doc["nodes"]:  # stored shapes, when present, must agree
        n = g.nodes[d["id"]]
        for key in ("ifm", "h", "w", "oh", "ow"):
            if key in d and d[key] != getattr(n, key):
                raise GraphError(f"node {n.id!r}: descriptor {key}={d[key]} "
                                 f"but inference gives {getattr(n, key)}")
    return g


def save_graph(g: NetworkGraph, path: str):
    with open(path, "w") as f:
        json.dump(graph_to_json(g), f, indent=2)


def load_graph(path: str) -> NetworkGraph:
    with open(path) as f:
        return graph_from_json(json.load(f))


# ---------------------------------------------------------------------------
# memory planning and register programming
# ---------------------------------------------------------------------------

@dataclass
class MemoryPlan:
    """Static sections plus a pooled assignment of activation regions."""

    total_bytes: int
    static: dict[str, dict[str, Region]]
    act_regions: list[Region]
    act_size: int
    edge_region: dict[str, int]

    def region_for(self, edge: str, nbytes: int) -> Region:
        pool = self.act_regions[self.edge_region[edge]]
        if nbytes > pool.size:
            raise AllocationError(f"edge {edge!r} needs {nbytes}B, region has {pool.size}B")
        return Region(pool.base, nbytes)


def _packed_act_bytes(channels: int, h: int, w: int) -> int:
    return -(-channels // 64) * h * w * layout.IFM_WORD_BYTES


def plan_memory(g: NetworkGraph, act_pool: int = 3) -> MemoryPlan:
    """Assign every weight section and activation edge a byte region.

    Weight, scale and bias sections are static.  Activation edges cycle
    through `act_pool` equal regions; an edge's region is reused only after
    its last consumer has run.  The graph output's region is never reused.
    """
    sched = g.schedule()
    off = 0
    static: dict[str, dict[str, Region]] = {}
    for nid in sched:
        node = g.nodes[nid]
        if node.kind != "conv":
            continue
        plan = layout.lsu_plan(node)
        static[nid] = {
            "weights": Region(off, plan.weight_bytes),
            "scales": Region(off + plan.weight_bytes, plan.scale_bytes),
            "bias": Region(off + plan.weight_bytes + plan.scale_bytes, plan.bias_bytes),
        }
        off += plan.weight_bytes + plan.scale_bytes + plan.bias_bytes

    def needs_region(edge: str) -> bool:
        producer_accel = edge != INPUT and g.nodes[edge].kind in ACCEL_KINDS
        consumer_accel = any(edge in n.inputs and n.kind in ACCEL_KINDS
                             for n in g.nodes.values())
        return producer_accel or consumer_accel

    edges = [e for e in [INPUT, *sched] if needs_region(e)]
    if not edges:
        return MemoryPlan(off, static, [], 0, {})
    act_size = max(_packed_act_bytes(*_shape_of(g, e)) for e in edges)
    regions = [Region(off + i * act_size, act_size) for i in range(act_pool)]
    total = off + act_pool * act_size

    remaining = {e: sum(n.inputs.count(e) for n in g.nodes.values()) for e in edges}
    holders: list[str | None] = [None] * act_pool
    edge_region: dict[str, int] = {}

    def alloc(owner: str) -> int:
        for i, h in enumerate(holders):
            if h is None:
                holders[i] = owner
                return i
        raise AllocationError(
            f"activation pool of {act_pool} regions exhausted at {owner!r}")

    if INPUT in remaining:
        edge_region[INPUT] = alloc(INPUT)
    for nid in sched:
        node = g.nodes[nid]
        for p in node.inputs:
            if p in remaining:
                remaining[p] -= 1
        if nid in remaining:
            edge_region[nid] = alloc(nid)
        for p in set(node.inputs):
            if p in edge_region and remaining.get(p) == 0 and p != g.output:
                holders[edge_region[p]] = None

    _check_disjoint(static, regions)
    return MemoryPlan(total, static, regions, act_size, edge_region)


def _check_disjoint(static, act_regions):
    flat = [r for secs in static.values() for r in secs.values()] + list(act_regions)
    flat = sorted(flat, key=lambda r: r.base)
    for a, b in zip(flat, flat[1:]):
        if a.overlaps(b):
            raise AllocationError(f"regions overlap: [{a.base},{a.end}) and [{b.base},{b.end})")


def program_registers(node: NodeSpec, regions: dict[str, Region], *,
                      act_exp: int = 0, wt_exp: int = 0, ew_exp: int = 0,
                      fuse_partial: bool = False,
                      store_partials: bool = False) -> LayerDescriptor:
    """Build a fully programmed descriptor for one accelerator node.

    regions maps role names (ifm, weights, scales, bias, out, eltwise,
    partials) to byte regions; sizes must match the fetch plan exactly and
    regions must not overlap.
    """
    if node.kind not in ACCEL_KINDS:
        raise GraphError(f"cannot program host node {node.id!r}")
    desc = LayerDescriptor(node.id, node.kind, node.ifm, node.ofm, node.h, node.w,
                           node.kh, node.kw, node.stride, node.pad, node.relu,
                           fuse_partial, store_partials)
    desc.core_regs = CoreRegs(node.ifm, node.ofm, node.h, node.w, node.kh, node.kw,
                              node.stride, node.pad, node.relu, fuse_partial,
                              store_partials, act_exp, wt_exp, ew_exp)
    desc.lsu_regs = LsuRegs(ifm=regions["ifm"], out=regions["out"],
                            weights=regions.get("weights"),
                            scales=regions.get("scales"),
                            bias=regions.get("bias"),
                            partials=regions.get("partials"),
                            eltwise=regions.get("eltwise"))
    named = desc.lsu_regs.regions()
    for i, (na, ra) in enumerate(named):
        for nb, rb in named[i + 1:]:
            if ra.overlaps(rb):
                raise AllocationError(
                    f"layer {node.id!r}: {na} region overlaps {nb} region")
    plan = layout.lsu_plan(desc)
    checks = [("ifm", plan.ifm_bytes)]
    if node.kind == "conv":
        checks += [("weights", plan.weight_bytes), ("scales", plan.scale_bytes),
                   ("bias", plan.bias_bytes),
                   ("out", plan.write_bytes * (4 if store_partials else 1))]
    else:
        checks += [("eltwise", plan.eltwise_bytes), ("out", plan.write_bytes)]
    by_name = dict(named)
    for name, want in checks:
        got = by_name.get(name)
        if got is None or got.size != want:
            raise AllocationError(f"layer {node.id!r}: {name} region must hold "
                                  f"{want}B, has {getattr(got, 'size', None)}")
    return desc


# ---------------------------------------------------------------------------
# quantized model container and calibration
# ---------------------------------------------------------------------------

@dataclass
class FpConvLayer:
    """FP weights plus optional batch-norm for a conv (accel or host)."""

    w: np.ndarray
    bn: quantizer.BnParams | None = None


@dataclass
class FpFcLayer:
    w: np.ndarray
    bias: np.ndarray


@dataclass
class FpModel:
    """Floating-point network: a graph plus per-node parameters."""

    graph: NetworkGraph
    layers: dict[str, FpConvLayer | FpFcLayer] = field(default_factory=dict)


@dataclass
class QuantLayer:
    weights: quantizer.FusedLayerWeights
    act_exp: int


@dataclass
class QuantizedModel:
    """Everything needed to run inference: graph, packed weights, exponents."""

    graph: NetworkGraph
    input_exp: int
    block: int
    layers: dict[str, QuantLayer] = field(default_factory=dict)
    host_layers: dict[str, host.HostConvWeights | host.HostFcWeights] = field(default_factory=dict)
    calib_exps: dict[str, int] = field(default_factory=dict)


def quantize_network(fp: FpModel, calib: np.ndarray, block: int = 64,
                     mode: dfp.RoundingMode = dfp.DEFAULT_MODE) -> QuantizedModel:
    """Quantize a network layer by layer along a calibration pass.

    Each layer's bias scale needs its input exponent, which only exists
    after the previous layer has produced its calibration output, so
    quantization and a forward pass are interleaved in schedule order.
    """
    g = fp.graph
    if block != 64 and g.accel_nodes():
        raise GraphError("accelerator graphs require the 64-lane block size")
    x0 = quantizer.quantize_activations(np.asarray(calib, dtype=np.float64))
    if x0.data.shape != g.input_shape:
        raise GraphError(f"calibration shape {x0.data.shape} != {g.input_shape}")
    model = QuantizedModel(g, x0.exp, block, calib_exps={INPUT: x0.exp})
    values: dict[str, object] = {INPUT: x0}
    for nid in g.schedule():
        node = g.nodes[nid]
        xin = values[node.inputs[0]]
        if node.kind == "conv":
            lw = _fp_layer(fp, nid, FpConvLayer)
            qw = quantizer.fgq_quantize_layer(lw.w, lw.bn, n=block, act_exp=xin.exp)
            model.layers[nid] = QuantLayer(qw, xin.exp)
            out, _ = engine.conv_direct(xin, qw, stride=node.stride, pad=node.pad,
                                        relu=node.relu, mode=mode)
        elif node.kind == "eltwise":
            out = engine.eltwise_merge(values[node.inputs[0]],
                                       values[node.inputs[1]], relu=node.relu)
        elif node.kind == "host_conv":
            lw = _fp_layer(fp, nid, FpConvLayer)
            hw = host.quantize_host_conv(lw.w, lw.bn, act_exp=xin.exp)
            model.host_layers[nid] = hw
            out = host.run_host_conv(xin, hw, node.stride, node.pad, node.relu, mode)
        elif node.kind == "host_maxpool":
            out = host.run_maxpool(xin, node.kh, node.stride, node.pad)
        elif node.kind == "host_avgpool":
            out = host.run_avgpool_global(xin, mode)
        elif node.kind == "host_fc":
            lw = _fp_layer(fp, nid, FpFcLayer)
            hw = host.quantize_host_fc(lw.w, lw.bias, act_exp=xin.exp)
            model.host_layers[nid] = hw
            out, _ = host.run_fc(xin, hw)
        elif node.kind == "host_softmax":
            out = host.softmax(np.asarray(xin, dtype=np.float64))
        values[nid] = out
        model.calib_exps[nid] = out.exp if isinstance(out, DfpTensor) else None
    return model


def _fp_layer(fp: FpModel, nid: str, want):
    lw = fp.layers.get(nid)
    if not isinstance(lw, want):
        raise GraphError(f"model has no {want.__name__} parameters for node {nid!r}")
    return lw


# ---------------------------------------------------------------------------
# execution
# ---------------------------------------------------------------------------

@dataclass
class ExecutionResult:
    logits: np.ndarray | None
    probs: np.ndarray | None
    output: DfpTensor | None
    exps: dict[str, int | None]
    overflow_count: int
    captures: dict[str, DfpTensor] | None = None


def execute(model: QuantizedModel, image: np.ndarray, *,
            mode: dfp.RoundingMode = dfp.DEFAULT_MODE, capture: bool = False,
            trace=None, act_pool: int = 3) -> ExecutionResult:
    """Run one image through the quantized network.

    The input is encoded at the calibration exponent (a fixed input scale
    is what the register programming assumed).  Accelerator layers move
    packed bytes through one MemoryImage; host layers run on arrays.  The
    runtime exponent chain is threaded into each descriptor as it is
    programmed, exactly as the control logic reloads registers per layer.
    """
    g = model.graph
    plan = plan_memory(g, act_pool)
    mem = MemoryImage(plan.total_bytes)
    for nid, ql in model.layers.items():
        secs = plan.static[nid]
        mem.write(secs["weights"], layout.pack_weights(ql.weights).payload)
        mem.write(secs["scales"], layout.pack_scales(ql.weights).payload)
        mem.write(secs["bias"], layout.pack_bias(ql.weights).payload)

    x0 = quantizer.quantize_activations(np.asarray(image, dtype=np.float64),
                                        shared_exp=model.input_exp)
    if x0.data.shape != g.input_shape:
        raise GraphError(f"input shape {x0.data.shape} != {g.input_shape}")
    values: dict[str, object] = {INPUT: x0}
    exps: dict[str, int | None] = {INPUT: x0.exp}
    overflow = 0
    captures: dict[str, DfpTensor] = {}

    def stage(edge: str):
        # Pack a host-produced (or input) tensor for accelerator consumption.
        val = values[edge]
        if edge in plan.edge_region and isinstance(val, DfpTensor):
            packed = layout.pack_ifm(val)
            mem.write(plan.region_for(edge, len(packed.payload)), packed.payload)

    if INPUT in plan.edge_region:
        stage(INPUT)

    for nid in g.schedule():
        node = g.nodes[nid]
        if node.kind in ACCEL_KINDS:
            regions = {"ifm": plan.region_for(
                node.inputs[0], _packed_act_bytes(*_shape_of(g, node.inputs[0])))}
            lsu = layout.lsu_plan(node)
            out_region = plan.region_for(nid, lsu.write_bytes)
            regions["out"] = out_region
            kwargs = {"act_exp": exps[node.inputs[0]]}
            if node.kind == "conv":
                regions.update(plan.static[nid])
                kwargs["wt_exp"] = model.layers[nid].weights.wt_exp
            else:
                regions["eltwise"] = plan.region_for(
                    node.inputs[1], _packed_act_bytes(*_shape_of(g, node.inputs[1])))
                kwargs["ew_exp"] = exps[node.inputs[1]]
            desc = program_registers(node, regions, **kwargs)
            info = engine.run_layer(desc, mem, mode=mode, trace=trace)
            overflow += info.overflow_count
            values[nid] = info.out
            exps[nid] = info.out_exp
        else:
            xin = values[node.inputs[0]]
            if node.kind == "host_conv":
                out = host.run_host_conv(xin, model.host_layers[nid], node.stride,
                                         node.pad, node.relu, mode)
            elif node.kind == "host_maxpool":
                out = host.run_maxpool(xin, node.kh, node.stride, node.pad)
            elif node.kind == "host_avgpool":
                out = host.run_avgpool_global(xin, mode)
            elif node.kind == "host_fc":
                out, _ = host.run_fc(xin, model.host_layers[nid])
            elif node.kind == "host_softmax":
                out = host.softmax(np.asarray(xin, dtype=np.float64))
            values[nid] = out
            exps[nid] = out.exp if isinstance(out, DfpTensor) else None
            stage(nid)
        if capture and isinstance(values[nid], DfpTensor):
            captures[nid] = values[nid]

    final = values[g.output]
    logits = None
    probs = None
    out_tensor = final if isinstance(final, DfpTensor) else None
    for nid, node in g.nodes.items():
        if node.kind == "host_fc":
            logits = np.asarray(values[nid])
        if node.kind == "host_softmax":
            probs = np.asarray(values[nid])
    return ExecutionResult(logits, probs, out_tensor, exps, overflow,
                           captures if capture else None)
