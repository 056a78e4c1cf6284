"""Binary model containers: round trips and defensive parsing."""

import numpy as np
import pytest

from ternsim import graph, model_io
from ternsim.model_io import (
    FP_MAGIC,
    FORMAT_VERSION,
    FormatError,
    QUANT_MAGIC,
    load_fp_model,
    load_quantized,
    random_fp_model,
    save_fp_model,
    save_quantized,
)


@pytest.fixture
def toy():
    g = graph.build_toy_residual()
    fp = random_fp_model(g, seed=11)
    rng = np.random.default_rng(12)
    qm = graph.quantize_network(fp, rng.normal(size=(64, 8, 8)))
    return g, fp, qm, rng


class TestFpContainer:
    def test_round_trip(self, toy, tmp_path):
        g, fp, _, _ = toy
        p = tmp_path / "m.tfp"
        save_fp_model(fp, str(p))
        back = load_fp_model(str(p))
        assert back.graph.schedule() == g.schedule()
        for lid, layer in fp.layers.items():
            bl = back.layers[lid]
            assert np.array_equal(bl.w, layer.w.astype(np.float32).astype(np.float64))
            if layer.bn is not None:
                for f in ("mean", "std", "scale", "shift"):
                    assert np.array_equal(
                        getattr(bl.bn, f),
                        getattr(layer.bn, f).astype(np.float32).astype(np.float64))

    def test_reload_quantizes_identically(self, toy, tmp_path):
        g, fp, _, rng = toy
        p = tmp_path / "m.tfp"
        save_fp_model(fp, str(p))
        back = load_fp_model(str(p))
        calib = np.random.default_rng(12).normal(size=(64, 8, 8))
        q1 = graph.quantize_network(fp, calib)
        # float32 storage is part of the contract: quantize the stored model
        q2 = graph.quantize_network(back, calib)
        for lid in q1.layers:
            assert np.array_equal(q1.layers[lid].weights.trits,
                                  q2.layers[lid].weights.trits)

    def test_bad_magic(self, toy, tmp_path):
        _, fp, _, _ = toy
        p = tmp_path / "m.tfp"
        save_fp_model(fp, str(p))
        blob = bytearray(p.read_bytes())
        blob[:4] = b"XXXX"
        p.write_bytes(bytes(blob))
        with pytest.raises(FormatError):
            load_fp_model(str(p))

    def test_bad_version(self, toy, tmp_path):
        _, fp, _, _ = toy
        p = tmp_path / "m.tfp"
        save_fp_model(fp, str(p))
        blob = bytearray(p.read_bytes())
        blob[4] = FORMAT_VERSION + 1
        p.write_bytes(bytes(blob))
        with pytest.raises(FormatError):
            load_fp_model(str(p))

    def test_truncated_payload(self, toy, tmp_path):
        _, fp, _, _ = toy
        p = tmp_path / "m.tfp"
        save_fp_model(fp, str(p))
        p.write_bytes(p.read_bytes()[:-16])
        with pytest.raises(FormatError):
            load_fp_model(str(p))

    def test_trailing_garbage(self, toy, tmp_path):
        _, fp, _, _ = toy
        p = tmp_path / "m.tfp"
        save_fp_model(fp, str(p))
        p.write_bytes(p.read_bytes() + b"\x00" * 8)
        with pytest.raises(FormatError):
            load_fp_model(str(p))

    def test_wrong_container_kind(self, toy, tmp_path):
        _, _, qm, _ = toy
        p = tmp_path / "m.tqm"
        save_quantized(qm, str(p))
        with pytest.raises(FormatError):
            load_fp_model(str(p))


class TestQuantContainer:
    def test_round_trip_bit_exact(self, toy, tmp_path):
        g, _, qm, _ = toy
        p = tmp_path / "m.tqm"
        save_quantized(qm, str(p))
        back = load_quantized(str(p))
        assert back.input_exp == qm.input_exp
        assert back.block == qm.block
        for lid, layer in qm.layers.items():
            bl = back.layers[lid]
            assert bl.act_exp == layer.act_exp
            assert bl.weights.wt_exp == layer.weights.wt_exp
            assert np.array_equal(bl.weights.trits, layer.weights.trits)
            assert np.array_equal(bl.weights.alpha_q, layer.weights.alpha_q)
            assert np.array_equal(bl.weights.bias_q, layer.weights.bias_q)

    def test_reloaded_model_executes_identically(self, toy, tmp_path):
        g, _, qm, _ = toy
        p = tmp_path / "m.tqm"
        save_quantized(qm, str(p))
        back = load_quantized(str(p))
        img = np.random.default_rng(13).normal(size=(64, 8, 8))
        r1 = graph.execute(qm, img)
        r2 = graph.execute(back, img)
        assert np.array_equal(r1.output.data, r2.output.data)
        assert r1.exps == r2.exps

    def test_host_layers_survive(self, tmp_path):
        nodes = [
            graph.NodeSpec("stem", "host_conv", ["input"], ofm=64, kh=3, kw=3,
                           stride=1, pad=1, relu=True),
            graph.NodeSpec("body", "conv", ["stem"], ofm=64, kh=1, kw=1, relu=True),
            graph.NodeSpec("pool", "host_avgpool", ["body"]),
            graph.NodeSpec("fc", "host_fc", ["pool"], ofm=10),
            graph.NodeSpec("sm", "host_softmax", ["fc"]),
        ]
        g = graph.build_graph("mixed", (3, 8, 8), nodes)
        fp = random_fp_model(g, seed=20)
        rng = np.random.default_rng(21)
        qm = graph.quantize_network(fp, rng.normal(size=(3, 8, 8)))
        p = tmp_path / "m.tqm"
        save_quantized(qm, str(p))
        back = load_quantized(str(p))
        img = rng.normal(size=(3, 8, 8))
        r1, r2 = graph.execute(qm, img), graph.execute(back, img)
        assert np.array_equal(r1.logits, r2.logits)

    def test_magic_pair_differs(self):
        assert FP_MAGIC != QUANT_MAGIC
        assert len(FP_MAGIC) == len(QUANT_MAGIC) == 4

    def test_corrupt_descriptor_rejected(self, toy, tmp_path):
        _, _, qm, _ = toy
        p = tmp_path / "m.tqm"
        save_quantized(qm, str(p))
        blob = bytearray(p.read_bytes())
        import struct
        (jlen,) = struct.unpack_from("<I", blob, 8)
        blob[12:12 + jlen] = b"{" * jlen
        p.write_bytes(bytes(blob))
        with pytest.raises(FormatError):
            load_quantized(str(p))


class TestRandomFpModel:
    def test_seed_determinism(self):
        g = graph.build_toy_residual()
        a = random_fp_model(g, seed=7)
        b = random_fp_model(g, seed=7)
        for lid in a.layers:
            assert np.array_equal(a.layers[lid].w, b.layers[lid].w)

    def test_layers_cover_parametered_nodes(self):
        g = graph.build_resnet50()
        m = random_fp_model(g, seed=1)
        want = {n.id for n in g.nodes.values()
                if n.kind in ("conv", "host_conv", "host_fc")}
        assert set(m.layers) == want

    def test_bn_stds_are_positive(self):
        g = graph.build_toy_residual()
        m = random_fp_model(g, seed=2)
        for layer in m.layers.values():
            if layer.bn is not None:
                assert (layer.bn.std > 0).all()
