import json

import numpy as np
import pytest

from enerflow.errors import GraphFormatError, MissingInput, ShapeMismatch
from enerflow.graph import (
    EdgeRef,
    Graph,
    GraphBuilder,
    Node,
    OpKind,
    TensorShape,
    canonical_hash,
    equivalent,
    execute,
    graph_from_json,
    graph_to_json,
    infer_shapes,
    load_graph,
    save_graph,
    signatures,
    validate,
)
from enerflow.models import random_graph


def _rng(seed=0):
    return np.random.default_rng(seed)


def identity_graph(dims=(1, 3, 8, 8)):
    b = GraphBuilder()
    x = b.input("x", dims)
    b.output(b.identity(x))
    return b.build()


def conv_graph(weight, stride=(1, 1), padding=(0, 0), act=False, dims=(1, 3, 8, 8)):
    b = GraphBuilder()
    x = b.input("x", dims)
    b.output(b.conv2d(x, weight, stride=stride, padding=padding, has_activation=act))
    return b.build()


# ---------------------------------------------------------------------------
# Shape inference
# ---------------------------------------------------------------------------

class TestInferShapes:
    def test_identity_preserves_shape(self):
        g = identity_graph()
        shapes = infer_shapes(g)
        out = g.outputs[0]
        assert shapes[out.node][out.port].dims == (1, 3, 8, 8)

    def test_conv_same_padding(self):
        g = conv_graph(_rng().standard_normal((16, 3, 3, 3)), padding=(1, 1))
        out = g.outputs[0]
        assert infer_shapes(g)[out.node][out.port].dims == (1, 16, 8, 8)

    def test_conv_stride_arithmetic(self):
        g = conv_graph(_rng().standard_normal((4, 3, 3, 3)), stride=(2, 2), padding=(1, 1))
        out = g.outputs[0]
        assert infer_shapes(g)[out.node][out.port].dims == (1, 4, 4, 4)

    def test_add_shape_mismatch(self):
        b = GraphBuilder()
        x = b.input("x", (1, 3, 8, 8))
        y = b.input("y", (1, 4, 8, 8))
        b.output(b.add(x, y))
        g = b.build(check=False)
        with pytest.raises(ShapeMismatch):
            infer_shapes(g)

    def test_split_output_ports(self):
        b = GraphBuilder()
        x = b.input("x", (1, 5, 4, 4))
        p0, p1 = b.split(x, (2, 3), axis=1)
        b.output(p0, p1)
        g = b.build()
        shapes = infer_shapes(g)[p0.node]
        assert [s.dims for s in shapes] == [(1, 2, 4, 4), (1, 3, 4, 4)]


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------

class TestValidate:
    def test_valid_conv_chain(self):
        rng = _rng()
        b = GraphBuilder()
        x = b.input("x", (1, 3, 8, 8))
        c1 = b.conv2d(x, rng.standard_normal((4, 3, 3, 3)), padding=(1, 1))
        c2 = b.conv2d(c1, rng.standard_normal((4, 4, 1, 1)))
        b.output(c2)
        assert validate(b.build(check=False)) == []

    def test_cycle_detected(self):
        nodes = {
            0: Node(0, OpKind.RELU, (EdgeRef(1),)),
            1: Node(1, OpKind.RELU, (EdgeRef(0),)),
        }
        g = Graph(nodes, (("x", TensorShape((1, 2))),), (EdgeRef(0),))
        assert any("cycle" in v for v in validate(g))

    def test_dangling_output_reference(self):
        b = GraphBuilder()
        x = b.input("x", (1, 3, 8, 8))
        b.output(EdgeRef(99))
        g = b.build(check=False)
        assert any("99" in v for v in validate(g))

    def test_dead_node_flagged(self):
        b = GraphBuilder()
        x = b.input("x", (1, 3, 8, 8))
        b.relu(x)  # never consumed, never an output
        b.output(b.identity(x))
        g = b.build(check=False)
        assert any("not reachable" in v for v in validate(g))

    def test_bad_arity(self):
        g = Graph(
            {0: Node(0, OpKind.INPUT, (), {"name": "x"}),
             1: Node(1, OpKind.ADD, (EdgeRef(0),))},
            (("x", TensorShape((1, 2))),),
            (EdgeRef(1),),
        )
        assert any("expects 2 inputs" in v for v in validate(g))


# ---------------------------------------------------------------------------
# Signatures
# ---------------------------------------------------------------------------

class TestSignature:
    def test_weights_excluded(self):
        rng = _rng()
        w1 = rng.standard_normal((4, 3, 3, 3))
        w2 = rng.standard_normal((4, 3, 3, 3))
        g1 = conv_graph(w1, padding=(1, 1))
        g2 = conv_graph(w2, padding=(1, 1))
        s1 = signatures(g1)[g1.outputs[0].node]
        s2 = signatures(g2)[g2.outputs[0].node]
        assert s1 == s2 and s1.text == s2.text

    def test_serialization_deterministic(self):
        g = conv_graph(_rng().standard_normal((4, 3, 3, 3)), padding=(1, 1))
        nid = g.outputs[0].node
        assert signatures(g)[nid].text == signatures(g)[nid].text
        assert signatures(g)[nid].text.encode() == signatures(g)[nid].text.encode()

    def test_activation_flag_changes_signature(self):
        w = _rng().standard_normal((4, 3, 3, 3))
        s1 = signatures(conv_graph(w, padding=(1, 1), act=True))[1]
        s2 = signatures(conv_graph(w, padding=(1, 1), act=False))[1]
        assert s1 != s2

    def test_input_shape_changes_signature(self):
        w = _rng().standard_normal((4, 3, 3, 3))
        s1 = signatures(conv_graph(w, padding=(1, 1), dims=(1, 3, 8, 8)))[1]
        s2 = signatures(conv_graph(w, padding=(1, 1), dims=(1, 3, 16, 16)))[1]
        assert s1 != s2


# ---------------------------------------------------------------------------
# Canonical hashing
# ---------------------------------------------------------------------------

def relabel(g: Graph, offset: int = 100) -> Graph:
    """Shift every node id by `offset` (an id permutation)."""
    mapping = {nid: nid + offset for nid in g.nodes}
    nodes = {
        mapping[nid]: Node(
            mapping[nid], node.kind,
            tuple(EdgeRef(mapping[r.node], r.port) for r in node.inputs),
            node.params, node.weights,
        )
        for nid, node in g.nodes.items()
    }
    outputs = tuple(EdgeRef(mapping[r.node], r.port) for r in g.outputs)
    return Graph(nodes, g.inputs, outputs)


def reverse_ids(g: Graph) -> Graph:
    """Reverse the id order (a non-monotone permutation)."""
    ids = sorted(g.nodes)
    mapping = dict(zip(ids, reversed(ids)))
    nodes = {
        mapping[nid]: Node(
            mapping[nid], node.kind,
            tuple(EdgeRef(mapping[r.node], r.port) for r in node.inputs),
            node.params, node.weights,
        )
        for nid, node in g.nodes.items()
    }
    outputs = tuple(EdgeRef(mapping[r.node], r.port) for r in g.outputs)
    return Graph(nodes, g.inputs, outputs)


class TestCanonicalHash:
    def test_relabeling_invariance_property(self):
        for seed in range(100):
            g = random_graph(seed)
            h = canonical_hash(g)
            assert canonical_hash(relabel(g)) == h, f"seed {seed} (shift)"
            assert canonical_hash(reverse_ids(g)) == h, f"seed {seed} (reverse)"

    def test_no_modification_same_digest(self):
        g = random_graph(3)
        assert canonical_hash(g) == canonical_hash(g)

    def test_weight_change_changes_digest(self):
        rng = _rng()
        w = rng.standard_normal((4, 3, 3, 3))
        g1 = conv_graph(w, padding=(1, 1))
        g2 = conv_graph(w + 1e-3, padding=(1, 1))
        assert canonical_hash(g1) != canonical_hash(g2)

    def test_collision_census_1000_graphs(self):
        digests = {}
        for seed in range(1000):
            g = random_graph(seed, max_ops=8)
            digests.setdefault(canonical_hash(g), []).append(seed)
        collisions = {h: s for h, s in digests.items() if len(s) > 1}
        assert not collisions, f"hash collisions: {collisions}"


# ---------------------------------------------------------------------------
# Interpreter
# ---------------------------------------------------------------------------

class TestExecute:
    def test_identity_bit_exact(self):
        g = identity_graph()
        x = _rng().standard_normal((1, 3, 8, 8))
        out = execute(g, {"x": x})["out0"]
        assert np.array_equal(out, x)

    def test_relu_zeroes_negatives(self):
        b = GraphBuilder()
        x = b.input("x", (1, 1, 1, 3))
        b.output(b.relu(x))
        g = b.build()
        out = execute(g, {"x": np.array([[[[-1.0, 0.0, 2.0]]]])})["out0"]
        assert out.tolist() == [[[[0.0, 0.0, 2.0]]]]

    def test_identity_convolution(self):
        # 1x1 kernel, one in/out channel, weight 1.0: output equals input
        g = conv_graph(np.ones((1, 1, 1, 1)), dims=(1, 1, 5, 5))
        x = _rng().standard_normal((1, 1, 5, 5))
        assert np.allclose(execute(g, {"x": x})["out0"], x, rtol=0, atol=1e-15)

    def test_conv_against_direct_loops(self):
        rng = _rng(5)
        w = rng.standard_normal((3, 2, 3, 3))
        bias = rng.standard_normal(3)
        b = GraphBuilder()
        x = b.input("x", (1, 2, 6, 6))
        b.output(b.conv2d(x, w, bias=bias, stride=(2, 2), padding=(1, 1)))
        g = b.build()
        xv = rng.standard_normal((1, 2, 6, 6))
        got = execute(g, {"x": xv})["out0"]
        # independent oracle: straightforward quadruple loop
        xp = np.pad(xv, ((0, 0), (0, 0), (1, 1), (1, 1)))
        want = np.zeros_like(got)
        for o in range(3):
            for i_ in range(got.shape[2]):
                for j in range(got.shape[3]):
                    patch = xp[0, :, i_ * 2:i_ * 2 + 3, j * 2:j * 2 + 3]
                    want[0, o, i_, j] = np.sum(patch * w[o]) + bias[o]
        assert np.allclose(got, want, rtol=1e-12, atol=1e-12)

    def test_pooling_against_direct_loops(self):
        rng = _rng(6)
        xv = rng.standard_normal((1, 2, 4, 4))
        for kind in ("maxpool", "avgpool"):
            b = GraphBuilder()
            x = b.input("x", (1, 2, 4, 4))
            op = b.maxpool if kind == "maxpool" else b.avgpool
            b.output(op(x, kernel=(2, 2), stride=(2, 2)))
            g = b.build()
            got = execute(g, {"x": xv})["out0"]
            for c in range(2):
                for i_ in range(2):
                    for j in range(2):
                        window = xv[0, c, 2 * i_:2 * i_ + 2, 2 * j:2 * j + 2]
                        want = window.max() if kind == "maxpool" else window.mean()
                        assert got[0, c, i_, j] == pytest.approx(want, rel=1e-12)

    def test_matmul(self):
        rng = _rng(7)
        w = rng.standard_normal((4, 3))
        b = GraphBuilder()
        x = b.input("x", (2, 4))
        b.output(b.matmul(x, w))
        g = b.build()
        xv = rng.standard_normal((2, 4))
        assert np.allclose(execute(g, {"x": xv})["out0"], xv @ w)

    def test_missing_input(self):
        g = identity_graph()
        with pytest.raises(MissingInput):
            execute(g, {})

    def test_wrong_input_shape(self):
        g = identity_graph()
        with pytest.raises(ShapeMismatch):
            execute(g, {"x": np.zeros((1, 3, 4, 4))})

    def test_deterministic(self):
        g = random_graph(11)
        feeds = {name: _rng(1).standard_normal(s.dims) for name, s in g.inputs}
        o1 = execute(g, feeds)
        o2 = execute(g, feeds)
        for key in o1:
            assert np.array_equal(o1[key], o2[key])


# ---------------------------------------------------------------------------
# Equivalence
# ---------------------------------------------------------------------------

class TestEquivalent:
    def test_graph_equivalent_to_itself(self):
        g = random_graph(2)
        assert equivalent(g, g, 10, 1e-4)

    def test_relu_not_identity(self):
        assert not equivalent(
            identity_graph(),
            _relu_graph(),
            10, 1e-4,
        )

    def test_fused_activation_equivalent(self):
        rng = _rng(3)
        w = rng.standard_normal((4, 3, 3, 3))
        b = GraphBuilder()
        x = b.input("x", (1, 3, 8, 8))
        b.output(b.relu(b.conv2d(x, w, padding=(1, 1))))
        unfused = b.build()
        fused = conv_graph(w, padding=(1, 1), act=True)
        assert equivalent(unfused, fused, 50, 1e-4)


def _relu_graph(dims=(1, 3, 8, 8)):
    b = GraphBuilder()
    x = b.input("x", dims)
    b.output(b.relu(x))
    return b.build()


# ---------------------------------------------------------------------------
# JSON round trip
# ---------------------------------------------------------------------------

class TestJson:
    def test_round_trip_preserves_hash(self, tmp_path):
        for seed in range(10):
            g = random_graph(seed)
            path = tmp_path / f"g{seed}.json"
            save_graph(g, path)
            assert canonical_hash(load_graph(path)) == canonical_hash(g)

    def test_unknown_kind_rejected_with_id(self):
        doc = {
            "inputs": [{"name": "x", "shape": [1, 2]}],
            "nodes": [{"id": 7, "kind": "softmax", "params": {}, "inputs": []}],
            "outputs": [7],
        }
        with pytest.raises(GraphFormatError, match="node 7.*softmax"):
            graph_from_json(doc)

    def test_negative_id_rejected(self):
        doc = {"inputs": [], "nodes": [{"id": -1, "kind": "relu", "inputs": []}], "outputs": []}
        with pytest.raises(GraphFormatError):
            graph_from_json(doc)

    def test_base64_weights(self):
        import base64
        w = np.arange(4, dtype=np.float64).reshape(1, 1, 2, 2) + 1.0
        doc = {
            "inputs": [{"name": "x", "shape": [1, 1, 2, 2]}],
            "nodes": [
                {"id": 0, "kind": "input", "params": {"name": "x"}, "inputs": []},
                {"id": 1, "kind": "conv2d",
                 "params": {"out_channels": 1, "kernel": [2, 2], "stride": [1, 1],
                            "padding": [0, 0], "has_activation": False},
                 "inputs": [0],
                 "weights": {"weight": {"b64": base64.b64encode(w.tobytes()).decode(),
                                        "shape": [1, 1, 2, 2]}}},
            ],
            "outputs": [1],
        }
        g = graph_from_json(doc)
        assert validate(g) == []
        assert np.array_equal(g.nodes[1].weights["weight"], w)

    def test_byte_identical_serialization(self, tmp_path):
        g = random_graph(4)
        p1, p2 = tmp_path / "a.json", tmp_path / "b.json"
        save_graph(g, p1)
        save_graph(g, p2)
        assert p1.read_bytes() == p2.read_bytes()


class TestTensorShape:
    def test_rejects_zero_dim(self):
        with pytest.raises(ValueError):
            TensorShape((1, 0, 3))

    def test_rejects_rank_zero(self):
        with pytest.raises(ValueError):
            TensorShape(())
