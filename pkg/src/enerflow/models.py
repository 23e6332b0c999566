"""Deterministic demo graphs, the worked micro-example, and random graphs.

Everything here is seed-driven: the same name and seed always produce a
byte-identical graph, which the CLI's `gen` command and the test suite
both rely on.
"""

from __future__ import annotations

import numpy as np

from .cost import CostDatabase, CostRecord
from .graph import EdgeRef, Graph, GraphBuilder, signatures
from .rules import SubstitutionRule, apply, default_rules, match_rule


def _conv_w(rng, oc: int, ic: int, kh: int, kw: int) -> np.ndarray:
    return rng.standard_normal((oc, ic, kh, kw)) / np.sqrt(ic * kh * kw)


# ---------------------------------------------------------------------------
# The three-convolution micro-example and its measured cost table
# ---------------------------------------------------------------------------

# (time ms, power W, energy J per 1000 inferences) per algorithm label;
# a missing label means the algorithm is not applicable to that node.
MICROBENCH_COSTS: dict[str, dict[str, tuple[float, float, float]]] = {
    "conv1": {"a": (0.0195, 144.5, 2.81), "b": (0.0209, 84.0, 1.75)},
    "conv2": {"a": (0.00941, 58.0, 0.545), "b": (0.0175, 47.0, 0.822)},
    "conv3": {"a": (0.165, 190.8, 31.4), "b": (0.146, 116.0, 16.9), "c": (0.083, 144.0, 11.9)},
}


def microbench_graph() -> Graph:
    """Three chained convolutions with pairwise-distinct signatures."""
    rng = np.random.default_rng(12)
    b = GraphBuilder()
    x = b.input("x", (1, 3, 16, 16))
    c1 = b.conv2d(x, _conv_w(rng, 8, 3, 3, 3), padding=(1, 1))
    c2 = b.conv2d(c1, _conv_w(rng, 8, 8, 1, 1))
    c3 = b.conv2d(c2, _conv_w(rng, 16, 8, 3, 3), stride=(2, 2), padding=(1, 1))
    b.output(c3)
    return b.build()


def microbench_signatures() -> dict[str, str]:
    """Row name ("conv1"...) -> signature text of that node in microbench_graph."""
    g = microbench_graph()
    sigs = signatures(g)
    convs = [n.id for n in g.compute_nodes()]
    return {f"conv{i + 1}": sigs[nid].text for i, nid in enumerate(convs)}


def microbench_database() -> CostDatabase:
    """The bundled measurement table as a cost database.

    Stored power is energy/time rather than the separately measured power
    column (the two disagree by under 0.5%), so that derived energies
    reproduce the table's energy figures exactly.
    """
    sig_of = microbench_signatures()
    db = CostDatabase()
    for row, algs in MICROBENCH_COSTS.items():
        for label, (time_ms, _power, energy) in sorted(algs.items()):
            alg = ord(label) - ord("a")
            db.add(sig_of[row], alg, CostRecord(time_ms=time_ms, power_w=energy / time_ms))
    return db


# ---------------------------------------------------------------------------
# Toy evaluation models
# ---------------------------------------------------------------------------

def chain_graph(n: int, seed: int = 0) -> Graph:
    """conv -> relu repeated `n` times (2n compute nodes)."""
    if n < 1:
        raise ValueError("chain length must be >= 1")
    rng = np.random.default_rng(seed)
    b = GraphBuilder()
    x = b.input("x", (1, 3, 8, 8))
    cur, ch = x, 3
    for _ in range(n):
        cur = b.conv2d(cur, _conv_w(rng, 4, ch, 3, 3), padding=(1, 1))
        cur = b.relu(cur)
        ch = 4
    b.output(cur)
    return b.build()


def toy_squeeze(seed: int = 0) -> Graph:
    """Fire-module-like graph: squeeze conv, parallel expand convs (two of
    them mergeable), concat, head conv and pooling. ~11 compute nodes."""
    rng = np.random.default_rng(seed)
    b = GraphBuilder()
    x = b.input("x", (1, 3, 16, 16))
    squeeze = b.conv2d(x, _conv_w(rng, 4, 3, 1, 1), has_activation=True)
    e1 = b.relu(b.conv2d(squeeze, _conv_w(rng, 6, 4, 3, 3), padding=(1, 1)))
    e2 = b.relu(b.conv2d(squeeze, _conv_w(rng, 6, 4, 3, 3), padding=(1, 1)))
    e3 = b.relu(b.conv2d(squeeze, _conv_w(rng, 4, 4, 1, 1)))
    merged = b.concat([e1, e2, e3], axis=1)
    head = b.relu(b.conv2d(merged, _conv_w(rng, 8, 16, 3, 3), padding=(1, 1)))
    pooled = b.maxpool(head, kernel=(2, 2), stride=(2, 2))
    b.output(pooled)
    return b.build()


def toy_resnet(seed: int = 0) -> Graph:
    """Residual block with batchnorms, a skip connection and an identity
    node. ~10 compute nodes."""
    rng = np.random.default_rng(seed)
    b = GraphBuilder()
    x = b.input("x", (1, 3, 8, 8))
    stem = b.conv2d(x, _conv_w(rng, 4, 3, 3, 3), padding=(1, 1))
    c1 = b.conv2d(stem, _conv_w(rng, 4, 4, 3, 3), padding=(1, 1))
    bn1 = b.batchnorm(c1, rng.uniform(0.5, 1.5, 4), rng.standard_normal(4))
    r1 = b.relu(bn1)
    c2 = b.conv2d(r1, _conv_w(rng, 4, 4, 3, 3), padding=(1, 1))
    bn2 = b.batchnorm(c2, rng.uniform(0.5, 1.5, 4), rng.standard_normal(4))
    skip = b.add(stem, bn2)
    r2 = b.relu(skip)
    tail = b.identity(r2)
    pooled = b.avgpool(tail, kernel=(2, 2), stride=(2, 2))
    b.output(pooled)
    return b.build()


# ---------------------------------------------------------------------------
# Checked-in search instances
# ---------------------------------------------------------------------------

def valley_instance() -> tuple[Graph, CostDatabase, list[SubstitutionRule]]:
    """Three-graph chain whose middle graph is the most expensive.

    g0 holds one fused conv and one conv+relu pair; fusing the pair gives
    g1 (two identical fused convs), merging those gives g2. The hand-built
    costs make energy(g1) > energy(g0) > energy(g2), so a greedy outer
    search (alpha=1) stops at g0 while a relaxed one crosses the valley.
    """
    rng = np.random.default_rng(7)
    b = GraphBuilder()
    x = b.input("x", (1, 2, 4, 4))
    fused = b.conv2d(x, _conv_w(rng, 2, 2, 3, 3), padding=(1, 1), has_activation=True)
    bare = b.conv2d(x, _conv_w(rng, 2, 2, 3, 3), padding=(1, 1))
    after = b.relu(bare)
    b.output(fused, after)
    g0 = b.build()

    sigs = signatures(g0)
    sig_fused = sigs[fused.node].text
    sig_bare = sigs[bare.node].text
    sig_relu = sigs[after.node].text

    # signatures that only exist after the two rewrites
    rules = [r for r in default_rules() if r.name in ("fuse-conv-relu", "merge-parallel-convs")]
    g1 = apply(rules[0], g0, match_rule(rules[0], g0)[0])
    g2 = apply(rules[1], g1, match_rule(rules[1], g1)[0])
    sigs2 = signatures(g2)
    by_kind = {g2.nodes[nid].kind.value: sigs2[nid].text for nid in g2.nodes}
    sig_merged = by_kind["conv2d"]
    sig_split = by_kind["split"]

    # energies: g0 = 2.5+1+1 = 4.5, g1 = 2*2.5 = 5, g2 = 1.5+0.5 = 2
    db = CostDatabase()
    db.add(sig_fused, 0, CostRecord(time_ms=1.0, power_w=2.5))
    db.add(sig_bare, 0, CostRecord(time_ms=1.0, power_w=1.0))
    db.add(sig_relu, 0, CostRecord(time_ms=1.0, power_w=1.0))
    db.add(sig_merged, 0, CostRecord(time_ms=1.0, power_w=1.5))
    db.add(sig_split, 0, CostRecord(time_ms=1.0, power_w=0.5))
    return g0, db, rules


def coordinated_witness() -> tuple[Graph, CostDatabase]:
    """Two-node instance where only a coordinated two-node move improves a
    ratio-bearing objective.

    Under product(0.5) the start point (0, 0) is a strict single-move local
    optimum (both single swaps raise E*T) while the joint swap to (1, 1)
    lowers it, so a radius-1 sweep stalls strictly above the brute-force
    optimum and a radius-2 sweep matches it.
    """
    b = GraphBuilder()
    x = b.input("x", (1, 2, 4, 4))
    r = b.relu(x)
    i = b.identity(r)
    b.output(i)
    g = b.build()
    sigs = signatures(g)
    sig_relu = sigs[r.node].text
    sig_id = sigs[i.node].text

    db = CostDatabase()
    # node 1 (relu): (t=5, e=9.95) vs (t=995, e=0.0501)
    db.add(sig_relu, 0, CostRecord(time_ms=5.0, power_w=9.95 / 5.0))
    db.add(sig_relu, 1, CostRecord(time_ms=995.0, power_w=0.0501 / 995.0))
    # node 2 (identity): (t=5, e=0.05) vs (t=5.2, e=0.031)
    db.add(sig_id, 0, CostRecord(time_ms=5.0, power_w=0.05 / 5.0))
    db.add(sig_id, 1, CostRecord(time_ms=5.2, power_w=0.031 / 5.2))
    return g, db


# ---------------------------------------------------------------------------
# Seeded random graphs (test corpus generator)
# ---------------------------------------------------------------------------

def random_graph(seed: int, ops: int | None = None, max_ops: int = 8) -> Graph:
    """Random valid graph with `ops` compute nodes (or 3..max_ops if None).

    Biased toward structures the rewrite rules can act on: conv+relu
    chains, parallel convs with shared input, conv+batchnorm pairs and
    identity nodes.
    """
    rng = np.random.default_rng(seed)
    target = int(ops) if ops is not None else int(rng.integers(3, max_ops + 1))
    b = GraphBuilder()
    c0 = int(rng.choice([2, 3]))
    hw = int(rng.choice([4, 6, 8]))
    x = b.input("x", (1, c0, hw, hw))

    # live edges with their shapes; consumed edges are removed so leaves
    # become graph outputs
    live: list[tuple[EdgeRef, tuple[int, int, int, int]]] = [(x, (1, c0, hw, hw))]
    added = 0

    def take(idx: int) -> tuple[EdgeRef, tuple[int, int, int, int]]:
        return live.pop(idx)

    def budget() -> int:
        return target - added

    while budget() > 0:
        moves = ["conv", "relu", "identity", "batchnorm"]
        weights = [0.30, 0.12, 0.08, 0.12]
        if budget() >= 2:
            moves += ["conv_relu", "parallel_convs", "conv_bn"]
            weights += [0.16, 0.14, 0.10]
        if budget() >= 1 and len(live) >= 2:
            moves += ["add", "concat"]
            weights += [0.10, 0.06]
        if budget() >= 1 and any(s[1] >= 2 for _, s in live):
            moves += ["split"]
            weights += [0.04]
        if budget() >= 1 and any(s[2] >= 2 and s[3] >= 2 for _, s in live):
            moves += ["pool"]
            weights += [0.06]
        probs = np.asarray(weights) / sum(weights)
        move = str(rng.choice(moves, p=probs))

        if move in ("conv", "conv_relu", "conv_bn", "parallel_convs"):
            idx = int(rng.integers(len(live)))
            ref, (n, c, h, w) = live[idx]
            k = int(rng.choice([1, 3]))
            if k > min(h, w):
                k = 1
            pad = int(rng.integers(0, 2)) if k == 3 else 0
            oc = int(rng.integers(2, 6))
            act = bool(rng.integers(0, 2)) if move == "conv" else False
            take(idx)
            out = b.conv2d(ref, _conv_w(rng, oc, c, k, k), padding=(pad, pad),
                           has_activation=act)
            oh = h + 2 * pad - k + 1
            ow = w + 2 * pad - k + 1
            if move == "conv_relu":
                out = b.relu(out)
                added += 1
            elif move == "conv_bn":
                out = b.batchnorm(out, rng.uniform(0.5, 1.5, oc), rng.standard_normal(oc))
                added += 1
            elif move == "parallel_convs":
                out2 = b.conv2d(ref, _conv_w(rng, oc, c, k, k), padding=(pad, pad),
                                has_activation=act)
                live.append((out2, (n, oc, oh, ow)))
                added += 1
            live.append((out, (n, oc, oh, ow)))
            added += 1
        elif move in ("relu", "identity"):
            idx = int(rng.integers(len(live)))
            ref, s = take(idx)
            out = b.relu(ref) if move == "relu" else b.identity(ref)
            live.append((out, s))
            added += 1
        elif move == "batchnorm":
            idx = int(rng.integers(len(live)))
            ref, s = take(idx)
            out = b.batchnorm(ref, rng.uniform(0.5, 1.5, s[1]), rng.standard_normal(s[1]))
            live.append((out, s))
            added += 1
        elif move == "add":
            shapes: dict[tuple, list[int]] = {}
            for i, (_, s) in enumerate(live):
                shapes.setdefault(s, []).append(i)
            candidates = [idxs for idxs in shapes.values() if len(idxs) >= 2]
            if not candidates:
                continue
            pick = candidates[int(rng.integers(len(candidates)))]
            j, i = pick[1], pick[0]
            rj, s = take(j)
            ri, _ = take(i)
            live.append((b.add(ri, rj), s))
            added += 1
        elif move == "concat":
            groups: dict[tuple, list[int]] = {}
            for i, (_, s) in enumerate(live):
                groups.setdefault((s[0], s[2], s[3]), []).append(i)
            candidates = [idxs for idxs in groups.values() if len(idxs) >= 2]
            if not candidates:
                continue
            pick = candidates[int(rng.integers(len(candidates)))]
            j, i = pick[1], pick[0]
            rj, sj = take(j)
            ri, si = take(i)
            out = b.concat([ri, rj], axis=1)
            live.append((out, (si[0], si[1] + sj[1], si[2], si[3])))
            added += 1
        elif move == "split":
            options = [i for i, (_, s) in enumerate(live) if s[1] >= 2]
            idx = options[int(rng.integers(len(options)))]
            ref, (n, c, h, w) = take(idx)
            c1 = int(rng.integers(1, c))
            p0, p1 = b.split(ref, (c1, c - c1), axis=1)
            live.append((p0, (n, c1, h, w)))
            live.append((p1, (n, c - c1, h, w)))
            added += 1
        elif move == "pool":
            options = [i for i, (_, s) in enumerate(live) if s[2] >= 2 and s[3] >= 2]
            idx = options[int(rng.integers(len(options)))]
            ref, (n, c, h, w) = take(idx)
            pool = b.maxpool if rng.integers(0, 2) else b.avgpool
            out = pool(ref, kernel=(2, 2), stride=(2, 2))
            live.append((out, (n, c, h // 2, w // 2)))
            added += 1

    b.output(*[ref for ref, _ in live])
    return b.build()


# ---------------------------------------------------------------------------
# Name-driven generation (CLI `gen`)
# ---------------------------------------------------------------------------

GENERATOR_NAMES = ("chain:N", "toy-squeeze", "toy-resnet", "microbench")


def generate(name: str, seed: int = 0) -> Graph:
    """Build a named demo graph; raises ValueError for unknown names."""
    if name == "toy-squeeze":
        return toy_squeeze(seed)
    if name == "toy-resnet":
        return toy_resnet(seed)
    if name == "microbench":
        return microbench_graph()
    if name.startswith("chain:"):
        try:
            n = int(name.split(":", 1)[1])
        except ValueError:
            raise ValueError(f"bad chain length in {name!r}") from None
        return chain_graph(n, seed)
    raise ValueError(f"unknown model name {name!r} (known: {', '.join(GENERATOR_NAMES)})")
