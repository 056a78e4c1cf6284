"""Model container files.

Two little-endian formats share a 12-byte header: 4-byte magic, u32
version, u32 byte length of an embedded JSON descriptor that immediately
follows.  Array payloads follow the descriptor back to back, row-major,
in descriptor order.

* ``TFP1`` holds a floating-point model: the network descriptor plus one
  float32 array per parameter.
* ``TQM1`` holds a quantized model: per-layer weight, scale and bias
  sections packed exactly as the accelerator fetches them, plus raw
  int8/int32 arrays for the host-side layers.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from . import host, layout, quantizer
from .graph import (FpConvLayer, FpFcLayer, FpModel, NetworkGraph,
                    QuantLayer, QuantizedModel, graph_from_json, graph_to_json)

FP_MAGIC = b"TFP1"
QUANT_MAGIC = b"TQM1"
FORMAT_VERSION = 1


class FormatError(ValueError):
    """File is not a valid model container."""


def _pack_header(magic: bytes, doc: dict) -> bytes:
    blob = json.dumps(doc, sort_keys=True).encode()
    return magic + struct.pack("<II", FORMAT_VERSION, len(blob)) + blob


def _read_header(data: bytes, magic: bytes) -> tuple[dict, int]:
    if len(data) < 12 or data[:4] != magic:
        raise FormatError(f"not a {magic.decode()} file")
    version, jlen = struct.unpack_from("<II", data, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported version {version}")
    end = 12 + jlen
    if end > len(data):
        raise FormatError("truncated descriptor")
    try:
        doc = json.loads(data[12:end])
    except ValueError as e:
        raise FormatError(f"bad descriptor JSON: {e}") from e
    return doc, end


def _take(data: bytes, off: int, nbytes: int) -> tuple[bytes, int]:
    if off + nbytes > len(data):
        raise FormatError(f"payload truncated at byte {off}")
    return data[off:off + nbytes], off + nbytes


# ---------------------------------------------------------------------------
# floating-point models
# ---------------------------------------------------------------------------

def save_fp_model(model: FpModel, path: str):
    g = model.graph
    entries = []
    payload = bytearray()
    for nid in g.schedule():
        node = g.nodes[nid]
        lw = model.layers.get(nid)
        if node.kind in ("conv", "host_conv"):
            if not isinstance(lw, FpConvLayer):
                raise FormatError(f"node {nid!r} has no conv parameters")
            arrays = [("w", lw.w)]
            if lw.bn is not None:
                arrays += [("bn_mean", lw.bn.mean), ("bn_std", lw.bn.std),
                           ("bn_scale", lw.bn.scale), ("bn_shift", lw.bn.shift)]
        elif node.kind == "host_fc":
            if not isinstance(lw, FpFcLayer):
                raise FormatError(f"node {nid!r} has no fc parameters")
            arrays = [("w", lw.w), ("bias", lw.bias)]
        else:
            continue
        rec = {"id": nid, "arrays": []}
        for name, a in arrays:
            a = np.ascontiguousarray(a, dtype="<f4")
            rec["arrays"].append({"name": name, "shape": list(a.shape)})
            payload += a.tobytes()
        entries.append(rec)
    doc = {"graph": graph_to_json(g), "layers": entries}
    with open(path, "wb") as f:
        f.write(_pack_header(FP_MAGIC, doc) + bytes(payload))


def load_fp_model(path: str) -> FpModel:
    with open(path, "rb") as f:
        data = f.read()
    doc, off = _read_header(data, FP_MAGIC)
    try:
        g = graph_from_json(doc["graph"])
        records = doc["layers"]
    except KeyError as e:
        raise FormatError(f"descriptor missing {e}") from e
    model = FpModel(g)
    for rec in records:
        nid = rec["id"]
        if nid not in g.nodes:
            raise FormatError(f"parameters for unknown node {nid!r}")
        arrs = {}
        for spec in rec["arrays"]:
            shape = tuple(int(s) for s in spec["shape"])
            n = int(np.prod(shape)) if shape else 1
            raw, off = _take(data, off, 4 * n)
            arrs[spec["name"]] = (np.frombuffer(raw, dtype="<f4")
                                  .reshape(shape).astype(np.float64))
        kind = g.nodes[nid].kind
        if kind in ("conv", "host_conv"):
            bn = None
            if "bn_mean" in arrs:
                bn = quantizer.BnParams(arrs["bn_mean"], arrs["bn_std"],
                                        arrs["bn_scale"], arrs["bn_shift"])
            model.layers[nid] = FpConvLayer(arrs["w"], bn)
        elif kind == "host_fc":
            model.layers[nid] = FpFcLayer(arrs["w"], arrs["bias"])
        else:
            raise FormatError(f"node {nid!r} of kind {kind!r} takes no parameters")
    if off != len(data):
        raise FormatError(f"{len(data) - off} trailing bytes")
    return model


# ---------------------------------------------------------------------------
# quantized models
# ---------------------------------------------------------------------------

def save_quantized(model: QuantizedModel, path: str):
    g = model.graph
    recs = []
    payload = bytearray()
    for nid in g.schedule():
        if nid in model.layers:
            ql = model.layers[nid]
            pw = layout.pack_weights(ql.weights)
            ps = layout.pack_scales(ql.weights)
            pb = layout.pack_bias(ql.weights)
            recs.append({"id": nid, "kind": "conv", "wt_exp": ql.weights.wt_exp,
                         "act_exp": ql.act_exp,
                         "weight_bytes": len(pw.payload),
                         "scale_bytes": len(ps.payload),
                         "bias_bytes": len(pb.payload)})
            payload += pw.payload + ps.payload + pb.payload
        elif nid in model.host_layers:
            hw = model.host_layers[nid]
            if isinstance(hw, host.HostConvWeights):
                recs.append({"id": nid, "kind": "host_conv", "w_exp": hw.w_exp,
                             "w_shape": list(hw.w_q.shape)})
                payload += hw.w_q.astype("<i1").tobytes()
                payload += hw.bias_q.astype("<i4").tobytes()
            else:
                recs.append({"id": nid, "kind": "host_fc", "w_exp": hw.w_exp,
                             "w_shape": list(hw.w_q.shape)})
                payload += hw.w_q.astype("<i1").tobytes()
                payload += hw.bias_q.astype("<i4").tobytes()
    doc = {"graph": graph_to_json(g), "input_exp": model.input_exp,
           "block": model.block, "calib_exps": model.calib_exps, "layers": recs}
    with open(path, "wb") as f:
        f.write(_pack_header(QUANT_MAGIC, doc) + bytes(payload))


def load_quantized(path: str) -> QuantizedModel:
    with open(path, "rb") as f:
        data = f.read()
    doc, off = _read_header(data, QUANT_MAGIC)
    try:
        g = graph_from_json(doc["graph"])
        model = QuantizedModel(g, int(doc["input_exp"]), int(doc["block"]),
                               calib_exps=dict(doc.get("calib_exps", {})))
        records = doc["layers"]
    except KeyError as e:
        raise FormatError(f"descriptor missing {e}") from e
    for rec in records:
        nid = rec["id"]
        node = g.nodes.get(nid)
        if node is None:
            raise FormatError(f"parameters for unknown node {nid!r}")
        if rec["kind"] == "conv":
            og, ig = -(-node.ofm // 64), -(-node.ifm // 64)
            raw_w, off = _take(data, off, rec["weight_bytes"])
            raw_s, off = _take(data, off, rec["scale_bytes"])
            raw_b, off = _take(data, off, rec["bias_bytes"])
            trits = layout.unpack_weights(
                layout.PackedWeights(raw_w, og, ig, node.kh, node.kw))
            alpha = layout.unpack_scales(
                layout.PackedScales(raw_s, og * 64, ig, node.kh, node.kw,
                                    rec["wt_exp"]))
            bias = layout.unpack_bias(layout.PackedBias(raw_b, og * 64))
            weights = quantizer.FusedLayerWeights(trits, alpha, bias,
                                                  rec["wt_exp"], block=64)
            model.layers[nid] = QuantLayer(weights, int(rec["act_exp"]))
        elif rec["kind"] in ("host_conv", "host_fc"):
            shape = tuple(int(s) for s in rec["w_shape"])
            n = int(np.prod(shape))
            raw_w, off = _take(data, off, n)
            w_q = np.frombuffer(raw_w, dtype="<i1").reshape(shape).astype(np.int8)
            raw_b, off = _take(data, off, 4 * shape[0])
            bias_q = np.frombuffer(raw_b, dtype="<i4").astype(np.int32)
            cls = (host.HostConvWeights if rec["kind"] == "host_conv"
                   else host.HostFcWeights)
            model.host_layers[nid] = cls(w_q, int(rec["w_exp"]), bias_q)
        else:
            raise FormatError(f"unknown layer record kind {rec['kind']!r}")
    if off != len(data):
        raise FormatError(f"{len(data) - off} trailing bytes")
    return model


# ---------------------------------------------------------------------------
# synthetic models
# ---------------------------------------------------------------------------

def random_fp_model(g: NetworkGraph, seed: int = 0) -> FpModel:
    """Gaussian weights with near-identity batch norm for every layer.

    Convolutions get fan-in scaled weights so activation magnitudes stay
    well conditioned through deep stacks; the dynamic exponents absorb the
    remaining drift.
    """
    rng = np.random.default_rng(seed)
    model = FpModel(g)
    for node in g.nodes.values():
        if node.kind in ("conv", "host_conv"):
            fan_in = node.ifm * node.kh * node.kw
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in),
                           (node.ofm, node.ifm, node.kh, node.kw))
            bn = quantizer.BnParams(
                mean=rng.normal(0.0, 0.05, node.ofm),
                std=rng.uniform(0.8, 1.25, node.ofm),
                scale=rng.uniform(0.9, 1.1, node.ofm),
                shift=rng.normal(0.0, 0.05, node.ofm))
            model.layers[node.id] = FpConvLayer(w, bn)
        elif node.kind == "host_fc":
            w = rng.normal(0.0, np.sqrt(1.0 / node.ifm), (node.ofm, node.ifm))
            bias = rng.normal(0.0, 0.01, node.ofm)
            model.layers[node.id] = FpFcLayer(w, bias)
    return model
