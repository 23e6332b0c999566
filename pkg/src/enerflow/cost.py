"""Additive cost model and the cost-function algebra.

Units follow one convention everywhere: per-node inference time in
milliseconds, average power in Watts, and energy in Joules per 1000
inferences. With those units, energy = time_ms * power_w holds exactly,
and graph-level power is the energy/time ratio of the summed model.

Graph-level time and energy are sums over *compute* nodes (operator
nodes; graph-input placeholder nodes carry no cost). Power at the graph
level is derived: energy / time.
"""

from __future__ import annotations

import string
from dataclasses import dataclass

import numpy as np

from .errors import DomainMismatch, MissingEntry, NotApplicable
from .graph import Graph, signatures

# an algorithm assignment: node id -> algorithm id (compute nodes only)
Assignment = dict[int, int]


def alg_label(alg: int) -> str:
    """Display label for an algorithm id: 0 -> "a", 1 -> "b", ..."""
    if 0 <= alg < 26:
        return string.ascii_lowercase[alg]
    return f"alg{alg}"


@dataclass(frozen=True)
class CostRecord:
    """Measured cost of one (node signature, algorithm) pair."""

    time_ms: float
    power_w: float

    def __post_init__(self):
        if not self.time_ms > 0:
            raise ValueError(f"time_ms must be > 0, got {self.time_ms}")
        if not self.power_w > 0:
            raise ValueError(f"power_w must be > 0, got {self.power_w}")

    @property
    def energy(self) -> float:
        """Joules per 1000 inferences (= time_ms * power_w)."""
        return self.time_ms * self.power_w


class CostDatabase:
    """In-memory store of per-(signature, algorithm) cost records.

    Applicability is implied by record presence: a (sig, alg) pair without
    a record is inapplicable, mirroring the "-" cells of a measurement
    table. A signature with no records at all is simply unprofiled.
    """

    def __init__(self):
        self._by_sig: dict[str, dict[int, CostRecord]] = {}
        self._count = 0

    def __len__(self) -> int:
        return self._count

    def add(self, sig: str, alg: int, record: CostRecord) -> None:
        bucket = self._by_sig.setdefault(sig, {})
        if int(alg) not in bucket:
            self._count += 1
        bucket[int(alg)] = record

    def has_signature(self, sig: str) -> bool:
        return sig in self._by_sig

    def signatures(self) -> set[str]:
        return set(self._by_sig)

    def algorithms(self, sig: str) -> list[int]:
        """Applicable algorithm ids for `sig`, ascending; [] if unprofiled."""
        return sorted(self._by_sig.get(sig, ()))

    def lookup(self, sig: str, alg: int) -> CostRecord:
        try:
            return self._by_sig[sig][int(alg)]
        except KeyError:
            raise NotApplicable(sig, alg) from None

    def records(self) -> dict[tuple[str, int], CostRecord]:
        return {(sig, alg): rec for sig, bucket in self._by_sig.items()
                for alg, rec in bucket.items()}

    def record_set(self) -> set[tuple[str, int, float, float]]:
        return {(sig, alg, rec.time_ms, rec.power_w)
                for sig, bucket in self._by_sig.items() for alg, rec in bucket.items()}


def lookup(db: CostDatabase, sig: str, alg: int) -> CostRecord:
    """Stored record for (sig, alg); raises NotApplicable when absent."""
    return db.lookup(sig, alg)


def distance(a1: Assignment, a2: Assignment) -> int:
    """Number of nodes mapped to different algorithms."""
    if set(a1) != set(a2):
        raise DomainMismatch("assignments cover different node-id sets")
    return sum(1 for nid in a1 if a1[nid] != a2[nid])


def _record_for(db: CostDatabase, sig: str, alg: int) -> CostRecord:
    try:
        return db.lookup(sig, alg)
    except NotApplicable:
        if not db.has_signature(sig):
            raise MissingEntry(sig, alg) from None
        raise


def node_cost_table(g: Graph, db: CostDatabase) -> dict[int, tuple[str, list[tuple[int, float, float]]]]:
    """Per compute node: (signature text, [(alg, time, energy), ...] ascending).

    Raises MissingEntry for any unprofiled signature.
    """
    sigs = signatures(g)
    table: dict[int, tuple[str, list[tuple[int, float, float]]]] = {}
    for node in g.compute_nodes():
        sig = sigs[node.id].text
        algs = db.algorithms(sig)
        if not algs:
            raise MissingEntry(sig)
        rows = [(alg, db.lookup(sig, alg).time_ms, db.lookup(sig, alg).energy) for alg in algs]
        table[node.id] = (sig, rows)
    return table


def _totals(g: Graph, a: Assignment, db: CostDatabase) -> tuple[float, float]:
    sigs = signatures(g)
    t_total = 0.0
    e_total = 0.0
    for node in g.compute_nodes():
        if node.id not in a:
            raise DomainMismatch(f"assignment missing node {node.id}")
        rec = _record_for(db, sigs[node.id].text, a[node.id])
        t_total += rec.time_ms
        e_total += rec.energy
    return t_total, e_total


def model_time(g: Graph, a: Assignment, db: CostDatabase) -> float:
    """Modeled inference time in ms: sum of per-node times."""
    return _totals(g, a, db)[0]


def model_energy(g: Graph, a: Assignment, db: CostDatabase) -> float:
    """Modeled energy in J per 1000 inferences: sum of per-node energies."""
    return _totals(g, a, db)[1]


def model_power(g: Graph, a: Assignment, db: CostDatabase) -> float:
    """Modeled average power in Watts: energy / time."""
    t, e = _totals(g, a, db)
    if t <= 0:
        raise ValueError("model_power undefined for zero total time")
    return e / t


# ---------------------------------------------------------------------------
# Cost functions
# ---------------------------------------------------------------------------

_KINDS = ("time", "energy", "power", "linear", "product", "mix")


@dataclass(frozen=True)
class CostFunction:
    """Scalarization of modeled (time, energy, power).

    `linear`: w*(E/E_ref) + (1-w)*(T/T_ref); at refs=1, linear(1) is pure
    energy and linear(0) pure time. `product`: (E/E_ref)^w * (T/T_ref)^(1-w).
    `power`: the E/T ratio. `mix`: ct*(T/T_ref) + ce*(E/E_ref) + cp*(P/P_ref).
    References default to 1.0, meaning no normalization.
    """

    kind: str
    w: float = 0.5
    mix_weights: tuple[float, float, float] = (0.0, 0.0, 0.0)  # (time, energy, power)
    t_ref: float = 1.0
    e_ref: float = 1.0
    p_ref: float = 1.0

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"unknown cost-function kind {self.kind!r}")
        if self.kind in ("linear", "product") and not 0.0 <= self.w <= 1.0:
            raise ValueError(f"weight w must be in [0, 1], got {self.w}")
        if min(self.t_ref, self.e_ref, self.p_ref) <= 0:
            raise ValueError("normalization references must be > 0")

    # -- constructors -------------------------------------------------------

    @classmethod
    def time(cls) -> "CostFunction":
        return cls("time")

    @classmethod
    def energy(cls) -> "CostFunction":
        return cls("energy")

    @classmethod
    def power(cls) -> "CostFunction":
        return cls("power")

    @classmethod
    def linear(cls, w: float) -> "CostFunction":
        return cls("linear", w=float(w))

    @classmethod
    def product(cls, w: float) -> "CostFunction":
        return cls("product", w=float(w))

    @classmethod
    def mix(cls, time: float = 0.0, energy: float = 0.0, power: float = 0.0) -> "CostFunction":
        if time < 0 or energy < 0 or power < 0 or time + energy + power <= 0:
            raise ValueError("mix weights must be >= 0 and not all zero")
        return cls("mix", mix_weights=(float(time), float(energy), float(power)))

    def with_refs(self, t_ref: float, e_ref: float, p_ref: float) -> "CostFunction":
        return CostFunction(self.kind, self.w, self.mix_weights,
                            float(t_ref), float(e_ref), float(p_ref))

    # -- evaluation ---------------------------------------------------------

    def from_totals(self, time_ms: float, energy: float) -> float:
        """Cost from aggregate modeled time and energy (power is derived).

        A zero-time aggregate (graph with no compute nodes) has power 0,
        keeping the scalarization total.
        """
        t = time_ms / self.t_ref
        e = energy / self.e_ref
        if self.kind == "time":
            return time_ms
        if self.kind == "energy":
            return energy
        if self.kind == "power":
            return energy / time_ms if np.any(time_ms) else time_ms * 0.0
        if self.kind == "linear":
            return self.w * e + (1.0 - self.w) * t
        if self.kind == "product":
            return e ** self.w * t ** (1.0 - self.w)
        ct, ce, cp = self.mix_weights
        p = (energy / time_ms if np.any(time_ms) else time_ms * 0.0) / self.p_ref
        return ct * t + ce * e + cp * p

    def describe(self) -> str:
        if self.kind == "linear":
            base = f"linear(w={self.w:g})"
        elif self.kind == "product":
            base = f"product(w={self.w:g})"
        elif self.kind == "mix":
            ct, ce, cp = self.mix_weights
            parts = []
            if ct:
                parts.append(f"{ct:g}*time")
            if ce:
                parts.append(f"{ce:g}*energy")
            if cp:
                parts.append(f"{cp:g}*power")
            base = "+".join(parts)
        else:
            base = self.kind
        if (self.t_ref, self.e_ref, self.p_ref) != (1.0, 1.0, 1.0):
            base += f" [T_ref={self.t_ref:.6g} ms, E_ref={self.e_ref:.6g} J/1000, P_ref={self.p_ref:.6g} W]"
        return base


def eval_cost(f: CostFunction, g: Graph, a: Assignment, db: CostDatabase) -> float:
    """Cost of (g, a) under `f`; strictly positive on non-empty graphs."""
    t, e = _totals(g, a, db)
    return f.from_totals(t, e)


def normalization_refs(g: Graph, db: CostDatabase) -> tuple[float, float, float]:
    """(T_ref, E_ref, P_ref) for `g`: the per-metric optima over assignments.

    Because time and energy are per-node sums, the minimum over assignments
    is the sum of per-node minima (exactly what the assignment search finds
    for a single-metric objective). P_ref is defined as E_ref / T_ref.
    """
    table = node_cost_table(g, db)
    if not table:
        raise ValueError("normalization references undefined for a graph with no compute nodes")
    t_ref = sum(min(t for _, t, _ in rows) for _, rows in table.values())
    e_ref = sum(min(e for _, _, e in rows) for _, rows in table.values())
    return t_ref, e_ref, e_ref / t_ref
