"""Equivalence-preserving substitution rules and neighbor generation.

Each rule pairs a structural matcher with a constructive rewriter. Rules
never mutate their input graph; `apply` returns a fresh graph that must
pass `validate` and produce identical outputs on all inputs (checked by
randomized interpreter comparison in the test suite, not assumed).

The catalog is deliberately closed under inverses (fuse/split pairs), so
the induced rewrite space contains both shrinking and growing moves and
is not a lattice that collapses to a single fixpoint.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import InvalidSite
from .graph import (
    EdgeRef,
    Graph,
    Node,
    OpKind,
    canonical_hash,
    consumers,
)


@dataclass(frozen=True)
class MatchSite:
    """Injective binding from pattern-node names to graph node ids."""

    binding: tuple[tuple[str, int], ...]

    @classmethod
    def of(cls, **names: int) -> "MatchSite":
        return cls(tuple(sorted(names.items())))

    def __getitem__(self, name: str) -> int:
        for key, value in self.binding:
            if key == name:
                return value
        raise KeyError(name)


@dataclass(frozen=True)
class SubstitutionRule:
    """Named rewrite: `matcher` lists every site, `rewriter` applies one."""

    name: str
    matcher: Callable[[Graph], list[MatchSite]]
    rewriter: Callable[[Graph, MatchSite], Graph]
    shrinking: bool  # never increases the node count

    def __repr__(self):
        return f"SubstitutionRule({self.name!r})"


def match_rule(rule: SubstitutionRule, g: Graph) -> list[MatchSite]:
    """All match sites of `rule` in `g`, in deterministic ascending-id order."""
    return rule.matcher(g)


def apply(rule: SubstitutionRule, g: Graph, site: MatchSite) -> Graph:
    """Rewrite `g` at `site`; returns a new graph, the input is untouched."""
    if site not in rule.matcher(g):
        raise InvalidSite(f"{rule.name}: site {site.binding} does not match this graph")
    return rule.rewriter(g, site)


def neighbors(g: Graph, rules: list[SubstitutionRule]) -> list[Graph]:
    """Every one-step rewrite of `g`, deduplicated by canonical hash.

    Order is deterministic: rule order, then site order; the first graph
    producing a given hash wins.
    """
    seen: set[int] = set()
    out: list[Graph] = []
    for rule in rules:
        for site in rule.matcher(g):
            candidate = rule.rewriter(g, site)
            digest = canonical_hash(candidate)
            if digest in seen:
                continue
            seen.add(digest)
            out.append(candidate)
    return out


# ---------------------------------------------------------------------------
# Rewrite plumbing
# ---------------------------------------------------------------------------

def _remap_ref(ref: EdgeRef, mapping: dict[EdgeRef, EdgeRef]) -> EdgeRef:
    return mapping.get(ref, ref)


def _rebuild(g: Graph, *, drop: set[int], new_nodes: list[Node],
             remap: dict[EdgeRef, EdgeRef]) -> Graph:
    """New graph with `drop` removed, `new_nodes` added and every edge
    reference translated through `remap`; unreachable nodes are pruned."""
    nodes: dict[int, Node] = {}
    for nid, node in g.nodes.items():
        if nid in drop:
            continue
        nodes[nid] = Node(
            nid, node.kind,
            tuple(_remap_ref(r, remap) for r in node.inputs),
            node.params, node.weights,
        )
    for node in new_nodes:
        nodes[node.id] = node
    outputs = tuple(_remap_ref(r, remap) for r in g.outputs)

    reached: set[int] = set()
    stack = [r.node for r in outputs]
    while stack:
        nid = stack.pop()
        if nid in reached:
            continue
        reached.add(nid)
        stack.extend(r.node for r in nodes[nid].inputs)
    nodes = {nid: n for nid, n in nodes.items() if nid in reached}
    return Graph(nodes, g.inputs, outputs)


def _fresh_ids(g: Graph, count: int) -> list[int]:
    start = max(g.nodes) + 1 if g.nodes else 0
    return list(range(start, start + count))


def _sole_consumer(g: Graph, cons, ref: EdgeRef) -> int | None:
    """Id of the single consumer of `ref`, or None if the edge feeds more
    than one consumer or is also a graph output."""
    uses = cons.get(ref, [])
    if len(uses) != 1 or ref in g.outputs:
        return None
    return uses[0][0]


# ---------------------------------------------------------------------------
# R1: fuse conv + relu  /  R1': split fused activation back out
# ---------------------------------------------------------------------------

def _match_fuse_conv_relu(g: Graph) -> list[MatchSite]:
    cons = consumers(g)
    sites = []
    for nid in sorted(g.nodes):
        node = g.nodes[nid]
        if node.kind is not OpKind.RELU:
            continue
        src = node.inputs[0]
        producer = g.nodes[src.node]
        if producer.kind is not OpKind.CONV2D or producer.params["has_activation"]:
            continue
        if _sole_consumer(g, cons, src) != nid:
            continue
        sites.append(MatchSite.of(conv=src.node, relu=nid))
    return sites


def _rewrite_fuse_conv_relu(g: Graph, site: MatchSite) -> Graph:
    conv = g.nodes[site["conv"]]
    relu_id = site["relu"]
    fused = Node(conv.id, OpKind.CONV2D, conv.inputs,
                 {**conv.params, "has_activation": True}, conv.weights)
    remap = {EdgeRef(relu_id): EdgeRef(conv.id)}
    return _rebuild(g, drop={conv.id, relu_id}, new_nodes=[fused], remap=remap)


def _match_split_conv_activation(g: Graph) -> list[MatchSite]:
    return [
        MatchSite.of(conv=nid)
        for nid in sorted(g.nodes)
        if g.nodes[nid].kind is OpKind.CONV2D and g.nodes[nid].params["has_activation"]
    ]


def _rewrite_split_conv_activation(g: Graph, site: MatchSite) -> Graph:
    conv = g.nodes[site["conv"]]
    (relu_id,) = _fresh_ids(g, 1)
    bare = Node(conv.id, OpKind.CONV2D, conv.inputs,
                {**conv.params, "has_activation": False}, conv.weights)
    # new nodes are exempt from remapping, so the relu keeps feeding off the
    # bare conv while every old consumer of the conv moves to the relu
    relu = Node(relu_id, OpKind.RELU, (EdgeRef(conv.id),), {}, {})
    remap = {EdgeRef(conv.id): EdgeRef(relu_id)}
    return _rebuild(g, drop={conv.id}, new_nodes=[bare, relu], remap=remap)


# ---------------------------------------------------------------------------
# R2: merge two parallel same-shape convs  /  R2': split a merged conv
# ---------------------------------------------------------------------------

_CONV_MERGE_KEYS = ("kernel", "stride", "padding", "has_activation")


def _match_merge_parallel_convs(g: Graph) -> list[MatchSite]:
    by_source: dict[EdgeRef, list[int]] = {}
    for nid in sorted(g.nodes):
        node = g.nodes[nid]
        if node.kind is OpKind.CONV2D:
            by_source.setdefault(node.inputs[0], []).append(nid)
    sites = []
    for src in sorted(by_source, key=lambda r: (r.node, r.port)):
        group = by_source[src]
        for i, a in enumerate(group):
            for b in group[i + 1:]:
                pa, pb = g.nodes[a].params, g.nodes[b].params
                if all(pa[k] == pb[k] for k in _CONV_MERGE_KEYS):
                    sites.append(MatchSite.of(left=a, right=b))
    sites.sort(key=lambda s: s.binding)
    return sites


def _conv_bias(node: Node) -> np.ndarray:
    bias = node.weights.get("bias")
    if bias is None:
        return np.zeros(node.params["out_channels"], dtype=np.float64)
    return bias


def _rewrite_merge_parallel_convs(g: Graph, site: MatchSite) -> Graph:
    left = g.nodes[site["left"]]
    right = g.nodes[site["right"]]
    oc_l = left.params["out_channels"]
    oc_r = right.params["out_channels"]
    merged_id, split_id = _fresh_ids(g, 2)
    weight = np.concatenate([left.weights["weight"], right.weights["weight"]], axis=0)
    bias = np.concatenate([_conv_bias(left), _conv_bias(right)])
    merged = Node(merged_id, OpKind.CONV2D, left.inputs,
                  {**left.params, "out_channels": oc_l + oc_r},
                  {"weight": weight, "bias": bias})
    split = Node(split_id, OpKind.SPLIT, (EdgeRef(merged_id),),
                 {"axis": 1, "sizes": (oc_l, oc_r)}, {})
    remap = {
        EdgeRef(left.id): EdgeRef(split_id, 0),
        EdgeRef(right.id): EdgeRef(split_id, 1),
    }
    return _rebuild(g, drop={left.id, right.id}, new_nodes=[merged, split], remap=remap)


def _match_split_merged_conv(g: Graph) -> list[MatchSite]:
    cons = consumers(g)
    sites = []
    for nid in sorted(g.nodes):
        node = g.nodes[nid]
        if node.kind is not OpKind.SPLIT:
            continue
        if node.params["axis"] != 1 or len(node.params["sizes"]) != 2:
            continue
        src = node.inputs[0]
        producer = g.nodes[src.node]
        if producer.kind is not OpKind.CONV2D:
            continue
        if _sole_consumer(g, cons, src) != nid:
            continue
        sites.append(MatchSite.of(conv=src.node, split=nid))
    return sites


def _rewrite_split_merged_conv(g: Graph, site: MatchSite) -> Graph:
    conv = g.nodes[site["conv"]]
    split = g.nodes[site["split"]]
    s0, s1 = split.params["sizes"]
    left_id, right_id = _fresh_ids(g, 2)
    weight = conv.weights["weight"]
    bias = _conv_bias(conv)
    left = Node(left_id, OpKind.CONV2D, conv.inputs,
                {**conv.params, "out_channels": int(s0)},
                {"weight": weight[:s0].copy(), "bias": bias[:s0].copy()})
    right = Node(right_id, OpKind.CONV2D, conv.inputs,
                 {**conv.params, "out_channels": int(s1)},
                 {"weight": weight[s0:].copy(), "bias": bias[s0:].copy()})
    remap = {
        EdgeRef(split.id, 0): EdgeRef(left_id),
        EdgeRef(split.id, 1): EdgeRef(right_id),
    }
    return _rebuild(g, drop={conv.id, split.id}, new_nodes=[left, right], remap=remap)


# ---------------------------------------------------------------------------
# R3: fold identity
# ---------------------------------------------------------------------------

def _match_fold_identity(g: Graph) -> list[MatchSite]:
    return [MatchSite.of(identity=nid) for nid in sorted(g.nodes)
            if g.nodes[nid].kind is OpKind.IDENTITY]


def _rewrite_fold_identity(g: Graph, site: MatchSite) -> Graph:
    node = g.nodes[site["identity"]]
    remap = {EdgeRef(node.id): node.inputs[0]}
    return _rebuild(g, drop={node.id}, new_nodes=[], remap=remap)


# ---------------------------------------------------------------------------
# R4: fuse conv + batchnorm (scale/shift folding into weights)
# ---------------------------------------------------------------------------

def _match_fuse_conv_batchnorm(g: Graph) -> list[MatchSite]:
    cons = consumers(g)
    sites = []
    for nid in sorted(g.nodes):
        node = g.nodes[nid]
        if node.kind is not OpKind.BATCHNORM:
            continue
        src = node.inputs[0]
        producer = g.nodes[src.node]
        # an activation between conv and batchnorm blocks affine folding
        if producer.kind is not OpKind.CONV2D or producer.params["has_activation"]:
            continue
        if _sole_consumer(g, cons, src) != nid:
            continue
        sites.append(MatchSite.of(conv=src.node, bn=nid))
    return sites


def _rewrite_fuse_conv_batchnorm(g: Graph, site: MatchSite) -> Graph:
    conv = g.nodes[site["conv"]]
    bn = g.nodes[site["bn"]]
    scale = bn.weights["scale"]
    shift = bn.weights["shift"]
    weight = conv.weights["weight"] * scale[:, None, None, None]
    bias = _conv_bias(conv) * scale + shift
    fused = Node(conv.id, OpKind.CONV2D, conv.inputs, conv.params,
                 {"weight": weight, "bias": bias})
    remap = {EdgeRef(bn.id): EdgeRef(conv.id)}
    return _rebuild(g, drop={conv.id, bn.id}, new_nodes=[fused], remap=remap)


# ---------------------------------------------------------------------------
# Catalog
# ---------------------------------------------------------------------------

def default_rules() -> list[SubstitutionRule]:
    """The built-in rule catalog, in deterministic application order."""
    return [
        SubstitutionRule("fuse-conv-relu", _match_fuse_conv_relu,
                         _rewrite_fuse_conv_relu, shrinking=True),
        SubstitutionRule("split-conv-activation", _match_split_conv_activation,
                         _rewrite_split_conv_activation, shrinking=False),
        SubstitutionRule("merge-parallel-convs", _match_merge_parallel_convs,
                         _rewrite_merge_parallel_convs, shrinking=True),
        SubstitutionRule("split-merged-conv", _match_split_merged_conv,
                         _rewrite_split_merged_conv, shrinking=False),
        SubstitutionRule("fold-identity", _match_fold_identity,
                         _rewrite_fold_identity, shrinking=True),
        SubstitutionRule("fuse-conv-batchnorm", _match_fuse_conv_batchnorm,
                         _rewrite_fuse_conv_batchnorm, shrinking=True),
    ]


def select_rules(spec: str) -> list[SubstitutionRule]:
    """Resolve a CLI rule-set spec: `all`, `none`, `fusion-only`, or a
    comma-separated list of rule names."""
    catalog = default_rules()
    if spec == "all":
        return catalog
    if spec == "none":
        return []
    if spec == "fusion-only":
        return [r for r in catalog if r.shrinking]
    by_name = {r.name: r for r in catalog}
    chosen = []
    for name in spec.split(","):
        name = name.strip()
        if name not in by_name:
            known = ", ".join(sorted(by_name))
            raise ValueError(f"unknown rule {name!r} (known: {known})")
        chosen.append(by_name[name])
    return chosen
