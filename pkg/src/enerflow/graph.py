"""Computation-graph IR: a DAG of tensor operators with typed edges.

Tensors use a channels-first layout (batch, channels, height, width for
4-D data). Graphs are immutable after construction; every operation in
this module is a pure function, so graphs are safe to share across
threads. The interpreter (`execute`) uses double precision and exists to
*test* that graph rewrites preserve semantics, not to be fast.
"""

from __future__ import annotations

import base64
import hashlib
import heapq
import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Mapping

import numpy as np

from .errors import GraphFormatError, MissingInput, ShapeMismatch


class OpKind(str, Enum):
    INPUT = "input"
    CONV2D = "conv2d"
    MATMUL = "matmul"
    RELU = "relu"
    ADD = "add"
    CONCAT = "concat"
    SPLIT = "split"
    MAXPOOL = "maxpool"
    AVGPOOL = "avgpool"
    BATCHNORM = "batchnorm"
    IDENTITY = "identity"


# arity per kind; None means variadic (>= 2)
_ARITY: dict[OpKind, int | None] = {
    OpKind.INPUT: 0,
    OpKind.CONV2D: 1,
    OpKind.MATMUL: 1,
    OpKind.RELU: 1,
    OpKind.ADD: 2,
    OpKind.CONCAT: None,
    OpKind.SPLIT: 1,
    OpKind.MAXPOOL: 1,
    OpKind.AVGPOOL: 1,
    OpKind.BATCHNORM: 1,
    OpKind.IDENTITY: 1,
}


@dataclass(frozen=True)
class TensorShape:
    """Shape of one tensor edge; every dim >= 1, rank >= 1."""

    dims: tuple[int, ...]

    def __post_init__(self):
        if not isinstance(self.dims, tuple):
            object.__setattr__(self, "dims", tuple(self.dims))
        if len(self.dims) < 1:
            raise ValueError("tensor rank must be >= 1")
        if any(not isinstance(d, int) or d < 1 for d in self.dims):
            raise ValueError(f"tensor dims must be positive integers, got {self.dims}")

    @property
    def rank(self) -> int:
        return len(self.dims)

    @property
    def numel(self) -> int:
        n = 1
        for d in self.dims:
            n *= d
        return n

    def __str__(self) -> str:
        return "x".join(str(d) for d in self.dims)


def shape(*dims: int) -> TensorShape:
    return TensorShape(tuple(dims))


@dataclass(frozen=True)
class EdgeRef:
    """Reference to one output tensor of a node (port 0 unless multi-output)."""

    node: int
    port: int = 0


@dataclass(frozen=True, eq=False)
class Node:
    """One operator. `params` are structural hyperparameters; `weights` are
    inline constant arrays (float64) that do not enter the node signature."""

    id: int
    kind: OpKind
    inputs: tuple[EdgeRef, ...] = ()
    params: Mapping[str, Any] = field(default_factory=dict)
    weights: Mapping[str, np.ndarray] = field(default_factory=dict)

    def n_outputs(self) -> int:
        if self.kind is OpKind.SPLIT:
            return len(self.params["sizes"])
        return 1


@dataclass(frozen=True, eq=False)
class Graph:
    """Operator DAG with named input tensors and ordered output edges."""

    nodes: dict[int, Node]
    inputs: tuple[tuple[str, TensorShape], ...]
    outputs: tuple[EdgeRef, ...]

    def node(self, node_id: int) -> Node:
        return self.nodes[node_id]

    def node_ids(self) -> list[int]:
        return sorted(self.nodes)

    def compute_nodes(self) -> list[Node]:
        """All operator nodes, excluding graph-input placeholders."""
        return [self.nodes[i] for i in sorted(self.nodes) if self.nodes[i].kind is not OpKind.INPUT]

    def input_shape(self, name: str) -> TensorShape | None:
        for n, s in self.inputs:
            if n == name:
                return s
        return None


def consumers(g: Graph) -> dict[EdgeRef, list[tuple[int, int]]]:
    """Map each edge to the (node id, input index) pairs that consume it."""
    out: dict[EdgeRef, list[tuple[int, int]]] = {}
    for nid in sorted(g.nodes):
        for idx, ref in enumerate(g.nodes[nid].inputs):
            out.setdefault(ref, []).append((nid, idx))
    return out


def topological_order(g: Graph) -> list[int]:
    """Node ids in topological order, ties broken by ascending id.

    Raises ValueError on cycles or dangling edge references; call
    `validate` first if the graph is untrusted.
    """
    indeg = {nid: 0 for nid in g.nodes}
    succ: dict[int, list[int]] = {nid: [] for nid in g.nodes}
    for nid, node in g.nodes.items():
        for ref in node.inputs:
            if ref.node not in g.nodes:
                raise ValueError(f"node {nid} references missing node {ref.node}")
            succ[ref.node].append(nid)
            indeg[nid] += 1
    ready = [nid for nid in sorted(g.nodes) if indeg[nid] == 0]
    heapq.heapify(ready)
    order: list[int] = []
    while ready:
        nid = heapq.heappop(ready)
        order.append(nid)
        for s in succ[nid]:
            indeg[s] -= 1
            if indeg[s] == 0:
                heapq.heappush(ready, s)
    if len(order) != len(g.nodes):
        raise ValueError("cycle detected")
    return order


def _pair(value) -> tuple[int, int]:
    a, b = value
    return int(a), int(b)


def _node_output_shapes(node: Node, in_shapes: list[TensorShape], g: Graph) -> tuple[TensorShape, ...]:
    """Output shapes of one node given its input shapes (standard semantics)."""
    k = node.kind
    if k is OpKind.INPUT:
        declared = g.input_shape(node.params["name"])
        if declared is None:
            raise ShapeMismatch(node.id, f"unknown graph input {node.params['name']!r}")
        return (declared,)

    if k is OpKind.CONV2D:
        (s,) = in_shapes
        if s.rank != 4:
            raise ShapeMismatch(node.id, f"conv2d expects rank-4 input, got {s}")
        b, c, h, w = s.dims
        oc = node.params["out_channels"]
        kh, kw = _pair(node.params["kernel"])
        sh, sw = _pair(node.params["stride"])
        ph, pw = _pair(node.params["padding"])
        weight = node.weights.get("weight")
        if weight is not None and weight.shape != (oc, c, kh, kw):
            raise ShapeMismatch(
                node.id, f"conv2d weight shape {weight.shape} != ({oc}, {c}, {kh}, {kw})"
            )
        bias = node.weights.get("bias")
        if bias is not None and bias.shape != (oc,):
            raise ShapeMismatch(node.id, f"conv2d bias shape {bias.shape} != ({oc},)")
        if h + 2 * ph < kh or w + 2 * pw < kw:
            raise ShapeMismatch(node.id, f"conv2d kernel {kh}x{kw} larger than padded input {s}")
        oh = (h + 2 * ph - kh) // sh + 1
        ow = (w + 2 * pw - kw) // sw + 1
        return (shape(b, oc, oh, ow),)

    if k is OpKind.MATMUL:
        (s,) = in_shapes
        if s.rank != 2:
            raise ShapeMismatch(node.id, f"matmul expects rank-2 input, got {s}")
        b, f = s.dims
        weight = node.weights.get("weight")
        out_f = node.params["out_features"]
        if weight is not None and weight.shape != (f, out_f):
            raise ShapeMismatch(node.id, f"matmul weight shape {weight.shape} != ({f}, {out_f})")
        return (shape(b, out_f),)

    if k in (OpKind.RELU, OpKind.IDENTITY):
        return (in_shapes[0],)

    if k is OpKind.BATCHNORM:
        (s,) = in_shapes
        if s.rank < 2:
            raise ShapeMismatch(node.id, f"batchnorm expects rank >= 2, got {s}")
        c = s.dims[1]
        for key in ("scale", "shift"):
            arr = node.weights.get(key)
            if arr is not None and arr.shape != (c,):
                raise ShapeMismatch(node.id, f"batchnorm {key} shape {arr.shape} != ({c},)")
        return (s,)

    if k is OpKind.ADD:
        a, b = in_shapes
        if a != b:
            raise ShapeMismatch(node.id, f"add inputs differ: {a} vs {b}")
        return (a,)

    if k is OpKind.CONCAT:
        axis = node.params["axis"]
        first = in_shapes[0]
        if not 0 <= axis < first.rank:
            raise ShapeMismatch(node.id, f"concat axis {axis} out of range for {first}")
        total = 0
        for s in in_shapes:
            if s.rank != first.rank:
                raise ShapeMismatch(node.id, f"concat rank mismatch: {first} vs {s}")
            for d in range(first.rank):
                if d != axis and s.dims[d] != first.dims[d]:
                    raise ShapeMismatch(node.id, f"concat inputs differ off-axis: {first} vs {s}")
            total += s.dims[axis]
        dims = list(first.dims)
        dims[axis] = total
        return (TensorShape(tuple(dims)),)

    if k is OpKind.SPLIT:
        (s,) = in_shapes
        axis = node.params["axis"]
        sizes = tuple(int(x) for x in node.params["sizes"])
        if not 0 <= axis < s.rank:
            raise ShapeMismatch(node.id, f"split axis {axis} out of range for {s}")
        if sum(sizes) != s.dims[axis]:
            raise ShapeMismatch(node.id, f"split sizes {sizes} do not sum to dim {s.dims[axis]}")
        outs = []
        for sz in sizes:
            dims = list(s.dims)
            dims[axis] = sz
            outs.append(TensorShape(tuple(dims)))
        return tuple(outs)

    if k in (OpKind.MAXPOOL, OpKind.AVGPOOL):
        (s,) = in_shapes
        if s.rank != 4:
            raise ShapeMismatch(node.id, f"pool expects rank-4 input, got {s}")
        b, c, h, w = s.dims
        kh, kw = _pair(node.params["kernel"])
        sh, sw = _pair(node.params["stride"])
        ph, pw = _pair(node.params["padding"])
        if ph >= kh or pw >= kw:
            raise ShapeMismatch(node.id, f"pool padding ({ph},{pw}) must be < kernel ({kh},{kw})")
        if h + 2 * ph < kh or w + 2 * pw < kw:
            raise ShapeMismatch(node.id, f"pool kernel {kh}x{kw} larger than padded input {s}")
        oh = (h + 2 * ph - kh) // sh + 1
        ow = (w + 2 * pw - kw) // sw + 1
        return (shape(b, c, oh, ow),)

    raise ShapeMismatch(node.id, f"unhandled kind {k}")


def infer_shapes(g: Graph) -> dict[int, tuple[TensorShape, ...]]:
    """Output shape(s) of every node.

    Single-output nodes map to a 1-tuple; Split maps to one shape per part.
    Raises ShapeMismatch on the first dimensionally incompatible node.
    """
    shapes: dict[int, tuple[TensorShape, ...]] = {}
    for nid in topological_order(g):
        node = g.nodes[nid]
        ins = []
        for ref in node.inputs:
            producer = shapes[ref.node]
            if ref.port >= len(producer):
                raise ShapeMismatch(nid, f"reference to missing output port {ref.port} of node {ref.node}")
            ins.append(producer[ref.port])
        shapes[nid] = _node_output_shapes(node, ins, g)
    return shapes


_REQUIRED_PARAMS: dict[OpKind, tuple[str, ...]] = {
    OpKind.INPUT: ("name",),
    OpKind.CONV2D: ("out_channels", "kernel", "stride", "padding", "has_activation"),
    OpKind.MATMUL: ("out_features",),
    OpKind.CONCAT: ("axis",),
    OpKind.SPLIT: ("axis", "sizes"),
    OpKind.MAXPOOL: ("kernel", "stride", "padding"),
    OpKind.AVGPOOL: ("kernel", "stride", "padding"),
}

_REQUIRED_WEIGHTS: dict[OpKind, tuple[str, ...]] = {
    OpKind.CONV2D: ("weight",),
    OpKind.MATMUL: ("weight",),
    OpKind.BATCHNORM: ("scale", "shift"),
}


def validate(g: Graph) -> list[str]:
    """Check all graph invariants; returns a list of violations (empty = ok)."""
    issues: list[str] = []

    names = [n for n, _ in g.inputs]
    if len(set(names)) != len(names):
        issues.append("duplicate graph input names")

    for nid, node in g.nodes.items():
        if nid != node.id:
            issues.append(f"node key {nid} != node id {node.id}")
        arity = _ARITY.get(node.kind)
        if arity is None and node.kind is OpKind.CONCAT:
            if len(node.inputs) < 2:
                issues.append(f"node {nid}: concat needs >= 2 inputs")
        elif arity is not None and len(node.inputs) != arity:
            issues.append(f"node {nid}: {node.kind.value} expects {arity} inputs, has {len(node.inputs)}")
        for p in _REQUIRED_PARAMS.get(node.kind, ()):
            if p not in node.params:
                issues.append(f"node {nid}: missing param {p!r}")
        for wname in _REQUIRED_WEIGHTS.get(node.kind, ()):
            if wname not in node.weights:
                issues.append(f"node {nid}: missing weight {wname!r}")
        for ref in node.inputs:
            if ref.node not in g.nodes:
                issues.append(f"node {nid}: dangling reference to node {ref.node}")
            elif not 0 <= ref.port < g.nodes[ref.node].n_outputs():
                issues.append(f"node {nid}: bad port {ref.port} on node {ref.node}")
        if node.kind is OpKind.CONV2D:
            for p in ("out_channels",):
                if p in node.params and node.params[p] < 1:
                    issues.append(f"node {nid}: {p} must be >= 1")
            for p in ("kernel", "stride"):
                if p in node.params and any(v < 1 for v in node.params[p]):
                    issues.append(f"node {nid}: {p} entries must be >= 1")
            if "padding" in node.params and any(v < 0 for v in node.params["padding"]):
                issues.append(f"node {nid}: padding entries must be >= 0")
        if node.kind is OpKind.SPLIT and "sizes" in node.params:
            if any(s < 1 for s in node.params["sizes"]):
                issues.append(f"node {nid}: split sizes must be >= 1")
    if issues:
        return issues

    for ref in g.outputs:
        if ref.node not in g.nodes:
            issues.append(f"output references missing node {ref.node}")
        elif not 0 <= ref.port < g.nodes[ref.node].n_outputs():
            issues.append(f"output references bad port {ref.port} of node {ref.node}")
    if not g.outputs:
        issues.append("graph has no outputs")
    if issues:
        return issues

    try:
        topological_order(g)
    except ValueError as exc:
        return issues + [str(exc)]

    try:
        infer_shapes(g)
    except ShapeMismatch as exc:
        issues.append(f"shape inference failed: {exc}")
        return issues

    # every node must be reachable from some output
    reached: set[int] = set()
    stack = [ref.node for ref in g.outputs]
    while stack:
        nid = stack.pop()
        if nid in reached:
            continue
        reached.add(nid)
        stack.extend(ref.node for ref in g.nodes[nid].inputs)
    dead = sorted(set(g.nodes) - reached)
    for nid in dead:
        issues.append(f"node {nid} is not reachable from any output")

    for nid, node in g.nodes.items():
        if node.kind is OpKind.INPUT and g.input_shape(node.params["name"]) is None:
            issues.append(f"node {nid}: input name {node.params['name']!r} not declared")

    return issues


# ---------------------------------------------------------------------------
# Node signatures
# ---------------------------------------------------------------------------

def _render_value(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return "x".join(str(int(x)) for x in v)
    if isinstance(v, int):
        return str(v)
    return str(v)


@dataclass(frozen=True)
class NodeSignature:
    """Structural identity of a node: kind, input shapes and hyperparameters.

    Excludes weight values and the node id, so parameter-identical nodes in
    different graphs share one signature (and one set of cost measurements).
    """

    kind: str
    input_shapes: tuple[tuple[int, ...], ...]
    params: tuple[tuple[str, Any], ...]

    @property
    def text(self) -> str:
        parts = [self.kind]
        if self.input_shapes:
            parts.append("in=" + ",".join("x".join(str(d) for d in s) for s in self.input_shapes))
        for key, value in self.params:
            parts.append(f"{key}={_render_value(value)}")
        return "|".join(parts)

    def __str__(self) -> str:
        return self.text

    def param(self, key: str, default=None):
        for k, v in self.params:
            if k == key:
                return v
        return default


_SIG_PARAM_KEYS: dict[OpKind, tuple[str, ...]] = {
    OpKind.CONV2D: ("has_activation", "kernel", "out_channels", "padding", "stride"),
    OpKind.MATMUL: ("out_features",),
    OpKind.CONCAT: ("axis",),
    OpKind.SPLIT: ("axis", "sizes"),
    OpKind.MAXPOOL: ("kernel", "padding", "stride"),
    OpKind.AVGPOOL: ("kernel", "padding", "stride"),
}


def _canon_param(value: Any) -> Any:
    if isinstance(value, bool):
        return value
    if isinstance(value, (tuple, list)):
        return tuple(int(x) for x in value)
    if isinstance(value, int):
        return int(value)
    return value


def signature_for(node: Node, in_shapes: list[TensorShape], g: Graph) -> NodeSignature:
    if node.kind is OpKind.INPUT:
        declared = g.input_shape(node.params["name"])
        params: tuple[tuple[str, Any], ...] = (("shape", declared.dims),)
        return NodeSignature(node.kind.value, (), params)
    keys = _SIG_PARAM_KEYS.get(node.kind, ())
    params = tuple((k, _canon_param(node.params[k])) for k in keys)
    return NodeSignature(node.kind.value, tuple(s.dims for s in in_shapes), params)


def signatures(g: Graph) -> dict[int, NodeSignature]:
    """Signatures of every node (one shape-inference pass)."""
    shapes = infer_shapes(g)
    out: dict[int, NodeSignature] = {}
    for nid in sorted(g.nodes):
        node = g.nodes[nid]
        ins = [shapes[ref.node][ref.port] for ref in node.inputs]
        out[nid] = signature_for(node, ins, g)
    return out


def signature(node: Node, g: Graph) -> NodeSignature:
    """Signature of one node; propagates ShapeMismatch from inference."""
    return signatures(g)[node.id]


# ---------------------------------------------------------------------------
# Canonical hashing
# ---------------------------------------------------------------------------

def _weight_digest(node: Node) -> bytes:
    h = hashlib.blake2b(digest_size=16)
    for key in sorted(node.weights):
        arr = np.ascontiguousarray(node.weights[key], dtype=np.float64)
        h.update(key.encode())
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.digest()


def canonical_hash(g: Graph) -> int:
    """64-bit structural digest, invariant under node-id relabeling.

    Each node's key is derived only from its signature, weights, input
    names and producer keys, never from ids. The graph digest combines the
    ordered input declarations, the ordered output keys and the multiset of
    node keys (so duplicated-but-reachable subgraphs still change it).
    """
    sigs = signatures(g)
    keys: dict[int, bytes] = {}
    for nid in topological_order(g):
        node = g.nodes[nid]
        h = hashlib.blake2b(digest_size=16)
        h.update(sigs[nid].text.encode())
        if node.kind is OpKind.INPUT:
            h.update(node.params["name"].encode())
        h.update(_weight_digest(node))
        for ref in node.inputs:
            h.update(keys[ref.node])
            h.update(ref.port.to_bytes(2, "big"))
        keys[nid] = h.digest()
    top = hashlib.blake2b(digest_size=8)
    for name, s in g.inputs:
        top.update(f"{name}={s};".encode())
    for ref in g.outputs:
        top.update(keys[ref.node])
        top.update(ref.port.to_bytes(2, "big"))
    for k in sorted(keys.values()):
        top.update(k)
    return int.from_bytes(top.digest(), "big")


# ---------------------------------------------------------------------------
# Reference interpreter
# ---------------------------------------------------------------------------

def _conv2d(x, weight, bias, stride, padding, act):
    kh, kw = weight.shape[2], weight.shape[3]
    sh, sw = stride
    ph, pw = padding
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::sh, ::sw, :, :]
    out = np.einsum("bcxykl,ockl->boxy", win, weight, optimize=True)
    if bias is not None:
        out = out + bias[None, :, None, None]
    if act:
        out = np.maximum(out, 0.0)
    return out


def _pool(x, kernel, stride, padding, reduce_fn, pad_value):
    kh, kw = kernel
    sh, sw = stride
    ph, pw = padding
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)), constant_values=pad_value)
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::sh, ::sw, :, :]
    return reduce_fn(win, axis=(-2, -1))


def _eval_node(node: Node, args: list[np.ndarray], feeds: Mapping[str, np.ndarray]) -> tuple[np.ndarray, ...]:
    k = node.kind
    if k is OpKind.INPUT:
        return (feeds[node.params["name"]],)
    if k is OpKind.CONV2D:
        return (
            _conv2d(
                args[0],
                node.weights["weight"],
                node.weights.get("bias"),
                _pair(node.params["stride"]),
                _pair(node.params["padding"]),
                bool(node.params["has_activation"]),
            ),
        )
    if k is OpKind.MATMUL:
        return (args[0] @ node.weights["weight"],)
    if k is OpKind.RELU:
        return (np.maximum(args[0], 0.0),)
    if k is OpKind.ADD:
        return (args[0] + args[1],)
    if k is OpKind.CONCAT:
        return (np.concatenate(args, axis=node.params["axis"]),)
    if k is OpKind.SPLIT:
        sizes = list(node.params["sizes"])
        cuts = np.cumsum(sizes)[:-1]
        return tuple(np.split(args[0], cuts, axis=node.params["axis"]))
    if k is OpKind.MAXPOOL:
        return (_pool(args[0], _pair(node.params["kernel"]), _pair(node.params["stride"]),
                      _pair(node.params["padding"]), np.max, -np.inf),)
    if k is OpKind.AVGPOOL:
        # zero padding counts toward the average (count_include_pad semantics)
        return (_pool(args[0], _pair(node.params["kernel"]), _pair(node.params["stride"]),
                      _pair(node.params["padding"]), np.mean, 0.0),)
    if k is OpKind.BATCHNORM:
        scale = node.weights["scale"]
        shift = node.weights["shift"]
        expand = (1, -1) + (1,) * (args[0].ndim - 2)
        return (args[0] * scale.reshape(expand) + shift.reshape(expand),)
    if k is OpKind.IDENTITY:
        return (args[0],)
    raise ShapeMismatch(node.id, f"unhandled kind {k}")


def execute(g: Graph, feeds: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Run the graph on named input tensors with reference float64 semantics.

    Returns outputs keyed "out0", "out1", ... in graph output order.
    """
    declared = dict(g.inputs)
    for name in feeds:
        if name not in declared:
            raise MissingInput(name, "unknown input tensor")
    cast: dict[str, np.ndarray] = {}
    for name, s in g.inputs:
        if name not in feeds:
            raise MissingInput(name)
        arr = np.asarray(feeds[name], dtype=np.float64)
        if arr.shape != s.dims:
            raise ShapeMismatch(-1, f"input {name!r} has shape {arr.shape}, declared {s}")
        cast[name] = arr

    values: dict[tuple[int, int], np.ndarray] = {}
    for nid in topological_order(g):
        node = g.nodes[nid]
        args = [values[(ref.node, ref.port)] for ref in node.inputs]
        outs = _eval_node(node, args, cast)
        for port, arr in enumerate(outs):
            values[(nid, port)] = arr
    return {f"out{i}": values[(ref.node, ref.port)] for i, ref in enumerate(g.outputs)}


def equivalent(g1: Graph, g2: Graph, trials: int = 50, tol: float = 1e-4, seed: int = 0) -> bool:
    """Randomized semantic-equivalence check (a sound refuter, not a prover).

    Feeds `trials` standard-normal inputs to both graphs and compares all
    outputs elementwise at relative tolerance `tol`. A False answer proves
    inequivalence; True only means no counterexample was found.
    """
    if list(g1.inputs) != list(g2.inputs):
        return False
    if len(g1.outputs) != len(g2.outputs):
        return False
    rng = np.random.default_rng(seed)
    for _ in range(trials):
        feeds = {name: rng.standard_normal(s.dims) for name, s in g1.inputs}
        o1 = execute(g1, feeds)
        o2 = execute(g2, feeds)
        for key in o1:
            if o1[key].shape != o2[key].shape:
                return False
            if not np.allclose(o1[key], o2[key], rtol=tol, atol=1e-12):
                return False
    return True


# ---------------------------------------------------------------------------
# Builder
# ---------------------------------------------------------------------------

class GraphBuilder:
    """Incremental graph construction with automatic id allocation."""

    def __init__(self):
        self._nodes: dict[int, Node] = {}
        self._inputs: list[tuple[str, TensorShape]] = []
        self._outputs: list[EdgeRef] = []
        self._next_id = 0

    def _add(self, kind: OpKind, inputs: tuple[EdgeRef, ...], params: dict, weights: dict) -> int:
        nid = self._next_id
        self._next_id += 1
        self._nodes[nid] = Node(nid, kind, inputs, params, weights)
        return nid

    def input(self, name: str, dims: tuple[int, ...]) -> EdgeRef:
        self._inputs.append((name, TensorShape(tuple(dims))))
        nid = self._add(OpKind.INPUT, (), {"name": name}, {})
        return EdgeRef(nid)

    def conv2d(self, x: EdgeRef, weight: np.ndarray, bias: np.ndarray | None = None,
               stride=(1, 1), padding=(0, 0), has_activation: bool = False) -> EdgeRef:
        weight = np.asarray(weight, dtype=np.float64)
        params = {
            "out_channels": int(weight.shape[0]),
            "kernel": (int(weight.shape[2]), int(weight.shape[3])),
            "stride": _pair(stride),
            "padding": _pair(padding),
            "has_activation": bool(has_activation),
        }
        weights = {"weight": weight}
        if bias is not None:
            weights["bias"] = np.asarray(bias, dtype=np.float64)
        return EdgeRef(self._add(OpKind.CONV2D, (x,), params, weights))

    def matmul(self, x: EdgeRef, weight: np.ndarray) -> EdgeRef:
        weight = np.asarray(weight, dtype=np.float64)
        params = {"out_features": int(weight.shape[1])}
        return EdgeRef(self._add(OpKind.MATMUL, (x,), params, {"weight": weight}))

    def relu(self, x: EdgeRef) -> EdgeRef:
        return EdgeRef(self._add(OpKind.RELU, (x,), {}, {}))

    def add(self, x: EdgeRef, y: EdgeRef) -> EdgeRef:
        return EdgeRef(self._add(OpKind.ADD, (x, y), {}, {}))

    def identity(self, x: EdgeRef) -> EdgeRef:
        return EdgeRef(self._add(OpKind.IDENTITY, (x,), {}, {}))

    def batchnorm(self, x: EdgeRef, scale: np.ndarray, shift: np.ndarray) -> EdgeRef:
        weights = {
            "scale": np.asarray(scale, dtype=np.float64),
            "shift": np.asarray(shift, dtype=np.float64),
        }
        return EdgeRef(self._add(OpKind.BATCHNORM, (x,), {}, weights))

    def concat(self, xs: list[EdgeRef], axis: int = 1) -> EdgeRef:
        return EdgeRef(self._add(OpKind.CONCAT, tuple(xs), {"axis": int(axis)}, {}))

    def split(self, x: EdgeRef, sizes: tuple[int, ...], axis: int = 1) -> tuple[EdgeRef, ...]:
        nid = self._add(OpKind.SPLIT, (x,), {"axis": int(axis), "sizes": tuple(int(s) for s in sizes)}, {})
        return tuple(EdgeRef(nid, p) for p in range(len(sizes)))

    def maxpool(self, x: EdgeRef, kernel=(2, 2), stride=(2, 2), padding=(0, 0)) -> EdgeRef:
        params = {"kernel": _pair(kernel), "stride": _pair(stride), "padding": _pair(padding)}
        return EdgeRef(self._add(OpKind.MAXPOOL, (x,), params, {}))

    def avgpool(self, x: EdgeRef, kernel=(2, 2), stride=(2, 2), padding=(0, 0)) -> EdgeRef:
        params = {"kernel": _pair(kernel), "stride": _pair(stride), "padding": _pair(padding)}
        return EdgeRef(self._add(OpKind.AVGPOOL, (x,), params, {}))

    def output(self, *refs: EdgeRef) -> None:
        self._outputs.extend(refs)

    def build(self, check: bool = True) -> Graph:
        g = Graph(dict(self._nodes), tuple(self._inputs), tuple(self._outputs))
        if check:
            issues = validate(g)
            if issues:
                raise GraphFormatError("invalid graph: " + "; ".join(issues))
        return g


# ---------------------------------------------------------------------------
# JSON serialization
# ---------------------------------------------------------------------------

_TUPLE_PARAMS = {"kernel", "stride", "padding", "sizes", "shape"}


def _ref_to_json(ref: EdgeRef):
    return ref.node if ref.port == 0 else [ref.node, ref.port]


def _ref_from_json(obj, where: str) -> EdgeRef:
    if isinstance(obj, bool):
        raise GraphFormatError(f"{where}: bad edge reference {obj!r}")
    if isinstance(obj, int):
        return EdgeRef(obj)
    if isinstance(obj, list) and len(obj) == 2 and all(isinstance(x, int) for x in obj):
        return EdgeRef(obj[0], obj[1])
    raise GraphFormatError(f"{where}: bad edge reference {obj!r}")


def graph_to_json(g: Graph) -> dict:
    nodes = []
    for nid in sorted(g.nodes):
        node = g.nodes[nid]
        entry: dict[str, Any] = {
            "id": nid,
            "kind": node.kind.value,
            "params": {k: (list(v) if isinstance(v, tuple) else v) for k, v in sorted(node.params.items())},
            "inputs": [_ref_to_json(r) for r in node.inputs],
        }
        if node.weights:
            entry["weights"] = {k: np.asarray(v, dtype=np.float64).tolist()
                                for k, v in sorted(node.weights.items())}
        nodes.append(entry)
    return {
        "inputs": [{"name": n, "shape": list(s.dims)} for n, s in g.inputs],
        "nodes": nodes,
        "outputs": [_ref_to_json(r) for r in g.outputs],
    }


def _weights_from_json(obj, nid: int) -> dict[str, np.ndarray]:
    out = {}
    for key, value in obj.items():
        if isinstance(value, dict):
            try:
                raw = base64.b64decode(value["b64"])
                arr = np.frombuffer(raw, dtype=np.float64).reshape(value["shape"]).copy()
            except (KeyError, ValueError) as exc:
                raise GraphFormatError(f"node {nid}: bad base64 weight {key!r}: {exc}") from exc
        else:
            try:
                arr = np.asarray(value, dtype=np.float64)
            except (TypeError, ValueError) as exc:
                raise GraphFormatError(f"node {nid}: bad weight array {key!r}: {exc}") from exc
        out[key] = arr
    return out


def graph_from_json(obj: dict) -> Graph:
    """Parse the on-disk graph schema; raises GraphFormatError on violations,
    always naming the offending node id when one exists."""
    if not isinstance(obj, dict):
        raise GraphFormatError("graph document must be a JSON object")
    try:
        inputs = tuple(
            (str(e["name"]), TensorShape(tuple(int(d) for d in e["shape"])))
            for e in obj.get("inputs", [])
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise GraphFormatError(f"bad graph inputs: {exc}") from exc

    kinds = {k.value: k for k in OpKind}
    nodes: dict[int, Node] = {}
    for entry in obj.get("nodes", []):
        nid = entry.get("id")
        if not isinstance(nid, int) or nid < 0:
            raise GraphFormatError(f"bad node id {nid!r} (must be a non-negative integer)")
        if nid in nodes:
            raise GraphFormatError(f"node {nid}: duplicate id")
        kind_name = entry.get("kind")
        if kind_name not in kinds:
            raise GraphFormatError(f"node {nid}: unknown kind {kind_name!r}")
        raw_params = entry.get("params", {})
        params: dict[str, Any] = {}
        for key, value in raw_params.items():
            if key in _TUPLE_PARAMS and isinstance(value, list):
                params[key] = tuple(int(x) for x in value)
            else:
                params[key] = value
        refs = tuple(_ref_from_json(r, f"node {nid}") for r in entry.get("inputs", []))
        weights = _weights_from_json(entry.get("weights", {}), nid)
        nodes[nid] = Node(nid, kinds[kind_name], refs, params, weights)

    outputs = tuple(_ref_from_json(r, "outputs") for r in obj.get("outputs", []))
    return Graph(nodes, inputs, outputs)


def save_graph(g: Graph, path) -> None:
    with open(path, "w") as fh:
        json.dump(graph_to_json(g), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_graph(path) -> Graph:
    with open(path) as fh:
        try:
            obj = json.load(fh)
        except json.JSONDecodeError as exc:
            raise GraphFormatError(f"{path}: not valid JSON: {exc}") from exc
    return graph_from_json(obj)
