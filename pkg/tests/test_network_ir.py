import json

import jsonschema
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from besovnet.classifier_lab import build_gate_gFn
from besovnet.network_calculus import cnn_sum_to_resnet, mlp_to_cnn
from besovnet.network_ir import (
    CnnNetwork,
    ConvResNet,
    DocumentError,
    Envelope,
    MlpNetwork,
    audit,
    deserialize,
    dumps,
    eval_cnn,
    eval_mlp,
    eval_resnet,
    load_schema,
    loads,
    serialize,
)
from besovnet.suites import random_cnn, random_mlp
from besovnet.tensor_core import BiasMatrix, ConvFilter, ConvLayer, ShapeError


def straight_line_mlp(net, x):
    """Oracle: the textbook forward pass written out with plain numpy."""
    h = np.asarray(x, dtype=np.float64)
    for i, (W, b) in enumerate(zip(net.weights, net.biases)):
        h = W @ h + b
        if i < net.depth - 1:
            h = np.maximum(h, 0.0)
    return h


class TestEvalMlp:
    def test_identity(self):
        net = MlpNetwork([np.eye(3)], [np.zeros(3)])
        np.testing.assert_array_equal(eval_mlp(net, [1.0, -2.0, 3.0]), [1.0, -2.0, 3.0])

    def test_clip_gate_at_five(self):
        assert eval_mlp(build_gate_gFn(2.0), [5.0]) == 2.0

    def test_random_against_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(10):
            net = random_mlp(rng, 4, 2, 6)
            for x in rng.standard_normal((20, 4)):
                assert eval_mlp(net, x) == pytest.approx(straight_line_mlp(net, x)[0], abs=1e-12)

    def test_dimension_mismatch(self):
        with pytest.raises(ShapeError):
            eval_mlp(MlpNetwork([np.eye(3)], [np.zeros(3)]), [1.0, 2.0])


class TestEvalCnn:
    def test_zero_readout(self):
        rng = np.random.default_rng(1)
        f = random_cnn(rng, 4, 2, 3, 2)
        g = CnnNetwork(f.layers, readout=np.zeros_like(f.readout), readout_bias=0.0)
        np.testing.assert_array_equal(eval_cnn(g, rng.standard_normal((10, 4))), 0.0)

    def test_matches_mlp_after_conversion(self):
        rng = np.random.default_rng(2)
        mlp = random_mlp(rng, 5, 3, 6)
        x = rng.uniform(-1, 1, (100, 5))
        np.testing.assert_allclose(eval_cnn(mlp_to_cnn(mlp, 5, 2), x), eval_mlp(mlp, x), atol=1e-9)

    def test_identity_filter_readout_first_entry(self):
        ro = np.zeros((3, 1))
        ro[0, 0] = 2.5
        net = CnnNetwork([ConvLayer(ConvFilter(np.ones((1, 1, 1))), BiasMatrix.zeros(3, 1))], readout=ro)
        assert eval_cnn(net, [-1.0, 4.0, 4.0]) == 0.0
        assert eval_cnn(net, [3.0, 4.0, 4.0]) == 7.5

    def test_first_row_flag_rejects_lower_rows(self):
        ro = np.zeros((2, 1))
        ro[1, 0] = 1.0
        with pytest.raises(ValueError):
            CnnNetwork([ConvLayer(ConvFilter(np.ones((1, 1, 1))), BiasMatrix.zeros(2, 1))], readout=ro,
                       first_row_only=True)

    def test_dimension_mismatch(self):
        f = random_cnn(np.random.default_rng(3), 4, 1, 2, 1)
        with pytest.raises(ShapeError):
            eval_cnn(f, np.ones(3))


class TestEvalResnet:
    def test_no_blocks_reads_input(self):
        ro = np.zeros((3, 2))
        ro[0, 0] = 1.0
        net = ConvResNet(3, 2, [], ro)
        assert eval_resnet(net, [0.7, 1.0, 2.0]) == 0.7

    def test_sum_of_two_cnns(self):
        rng = np.random.default_rng(4)
        f1, f2 = random_cnn(rng, 4, 2, 3, 2), random_cnn(rng, 4, 3, 3, 2)
        x = rng.standard_normal((50, 4))
        np.testing.assert_allclose(eval_resnet(cnn_sum_to_resnet([f1, f2]), x), eval_cnn(f1, x) + eval_cnn(f2, x),
                                   atol=1e-12)

    def test_zeroed_block_is_pure_skip(self):
        blk = [ConvLayer(ConvFilter(np.zeros((2, 1, 2)) + 0.0), BiasMatrix.zeros(3, 2))]
        ro = np.zeros((3, 2))
        ro[:, 0] = [1.0, 2.0, 3.0]
        net = ConvResNet(3, 2, [blk], ro)
        assert eval_resnet(net, [1.0, 1.0, 1.0]) == 6.0

    def test_block_channel_mismatch(self):
        blk = [ConvLayer(ConvFilter(np.ones((3, 1, 2))), BiasMatrix.zeros(3, 3))]
        with pytest.raises(ShapeError):
            ConvResNet(3, 2, [blk], np.zeros((3, 2)))


class TestAudit:
    def test_passes_own_envelope(self):
        f = random_cnn(np.random.default_rng(5), 4, 3, 4, 2)
        assert audit(f).passed

    def test_field_wise_verdicts(self):
        f = random_cnn(np.random.default_rng(6), 4, 3, 4, 2)
        rep = audit(f, Envelope(L=1, J=100, K=4, kappa1=100.0, kappa2=100.0))
        assert not rep.passed
        assert rep.failures() == ["L"]

    def test_resnet_block_count(self):
        rng = np.random.default_rng(7)
        net = cnn_sum_to_resnet([random_cnn(rng, 3, 2, 2, 2) for _ in range(3)])
        rep = audit(net)
        assert rep.measured["M"] == 3 and rep.passed


class TestDocuments:
    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**31))
    def test_round_trip_cnn(self, seed):
        rng = np.random.default_rng(seed)
        f = random_cnn(rng, int(rng.integers(1, 6)), int(rng.integers(1, 4)), 4, 1)
        g = loads(dumps(f))
        x = rng.standard_normal((10, f.D))
        np.testing.assert_array_equal(eval_cnn(g, x), eval_cnn(f, x))
        assert dumps(g) == dumps(f)

    def test_round_trip_mlp_and_resnet(self):
        rng = np.random.default_rng(8)
        mlp = random_mlp(rng, 3, 3, 5)
        np.testing.assert_array_equal(eval_mlp(loads(dumps(mlp)), np.ones((2, 3))), eval_mlp(mlp, np.ones((2, 3))))
        res = cnn_sum_to_resnet([random_cnn(rng, 3, 2, 2, 2) for _ in range(2)])
        x = rng.standard_normal((5, 3))
        np.testing.assert_array_equal(eval_resnet(loads(dumps(res)), x), eval_resnet(res, x))

    def test_documents_validate_against_schema(self):
        rng = np.random.default_rng(9)
        doc = serialize(cnn_sum_to_resnet([random_cnn(rng, 3, 2, 2, 2)]))
        jsonschema.validate(json.loads(json.dumps(doc)), load_schema())

    def test_malformed_document(self):
        doc = serialize(random_cnn(np.random.default_rng(10), 3, 1, 2, 1))
        doc["kind"] = "transformer"
        with pytest.raises(DocumentError):
            deserialize(doc)
