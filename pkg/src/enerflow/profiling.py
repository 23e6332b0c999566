"""Cost-record production and persistence.

Two profiler modes exist. Synthetic mode deterministically fabricates
records from a node's estimated arithmetic volume plus a keyed
pseudo-random stream, so desk-scale runs are reproducible and exhibit the
qualitative structure real hardware shows (bigger nodes cost more; the
fastest algorithm is frequently, but not always, the hungriest). External
mode shells out to a user-supplied measurement command once per
(node, algorithm) pair; the command owns warmup and sampling policy.

Records are memoized by node signature: a signature already present in
the database is never profiled again, even across graphs.
"""

from __future__ import annotations

import hashlib
import json
import os
import shlex
import subprocess
import tempfile
from dataclasses import dataclass

from .cost import CostDatabase, CostRecord, alg_label
from .errors import CommandFailed, ParseError, ProfileError
from .graph import Graph, NodeSignature, OpKind, signatures

# candidate algorithm ids per operator kind (the universe a profiler probes)
CANDIDATE_ALG_COUNTS: dict[str, int] = {
    OpKind.CONV2D.value: 4,
    OpKind.MATMUL.value: 3,
    OpKind.MAXPOOL.value: 2,
    OpKind.AVGPOOL.value: 2,
    OpKind.RELU.value: 2,
    OpKind.ADD.value: 2,
    OpKind.BATCHNORM.value: 2,
    OpKind.CONCAT.value: 2,
    OpKind.SPLIT.value: 1,
    OpKind.IDENTITY.value: 1,
}


def candidate_algorithms(kind: str) -> list[int]:
    return list(range(CANDIDATE_ALG_COUNTS.get(kind, 1)))


@dataclass(frozen=True)
class SyntheticProfiler:
    seed: int


@dataclass(frozen=True)
class ExternalProfiler:
    """Command template with `{spec}` (node-spec file path) and `{alg}`
    placeholders, run once per (signature, algorithm) pair."""

    command: str


ProfilerSpec = SyntheticProfiler | ExternalProfiler


def _conv_out_hw(dims, kernel, stride, padding) -> tuple[int, int]:
    _, _, h, w = dims
    kh, kw = kernel
    sh, sw = stride
    ph, pw = padding
    return (h + 2 * ph - kh) // sh + 1, (w + 2 * pw - kw) // sw + 1


def estimated_flops(sig: NodeSignature) -> float:
    """Rough arithmetic volume of a node, used to scale synthetic costs."""
    if sig.kind == OpKind.INPUT.value:
        return 0.0
    in_elems = sum(_prod(s) for s in sig.input_shapes)
    if sig.kind == OpKind.CONV2D.value:
        b, c = sig.input_shapes[0][0], sig.input_shapes[0][1]
        kh, kw = sig.param("kernel")
        oh, ow = _conv_out_hw(sig.input_shapes[0], sig.param("kernel"),
                              sig.param("stride"), sig.param("padding"))
        return 2.0 * b * sig.param("out_channels") * oh * ow * c * kh * kw
    if sig.kind == OpKind.MATMUL.value:
        b, f = sig.input_shapes[0]
        return 2.0 * b * f * sig.param("out_features")
    if sig.kind in (OpKind.MAXPOOL.value, OpKind.AVGPOOL.value):
        b, c = sig.input_shapes[0][0], sig.input_shapes[0][1]
        kh, kw = sig.param("kernel")
        oh, ow = _conv_out_hw(sig.input_shapes[0], sig.param("kernel"),
                              sig.param("stride"), sig.param("padding"))
        return float(b * c * oh * ow * kh * kw)
    # elementwise and data-movement kinds
    return float(in_elems)


def _prod(dims) -> int:
    n = 1
    for d in dims:
        n *= d
    return n


def _unit(seed: int, *parts) -> float:
    """Deterministic uniform draw in [0, 1) keyed by seed and parts."""
    key = (seed % 2**64).to_bytes(8, "little")
    data = "|".join(str(p) for p in parts).encode()
    digest = hashlib.blake2b(data, key=key, digest_size=8).digest()
    return int.from_bytes(digest, "big") / 2.0**64


# time = 1e-6 * flops^0.9 * alg_mult * sig_jitter + per-alg overhead (ms).
# alg_mult is keyed per (kind, alg) and sig_jitter per (sig, alg); the
# jitter band is tight enough that scaling a node up always raises its time.
_TIME_SCALE = 1e-6
_FLOPS_EXP = 0.9
_MULT_LO, _MULT_HI = 0.7, 1.6
_JITTER_LO, _JITTER_HI = 0.8, 1.25
_OVERHEAD_LO, _OVERHEAD_HI = 0.001, 0.01
_POWER_LO, _POWER_HI = 40.0, 200.0
_INAPPLICABLE_P = 0.2


def synthetic_algorithms(sig: NodeSignature, seed: int) -> list[int]:
    """Applicable algorithm ids for `sig` at this seed (never empty)."""
    candidates = candidate_algorithms(sig.kind)
    draws = {alg: _unit(seed, sig.text, alg, "applicable") for alg in candidates}
    applicable = [alg for alg in candidates if draws[alg] >= _INAPPLICABLE_P]
    if not applicable:
        applicable = [max(candidates, key=lambda alg: draws[alg])]
    return applicable


def synthetic_profile(sig: NodeSignature, alg: int, seed: int) -> CostRecord | None:
    """Deterministic fabricated record, or None when `alg` is inapplicable."""
    if alg not in candidate_algorithms(sig.kind):
        return None
    if alg not in synthetic_algorithms(sig, seed):
        return None
    mult = _MULT_LO + (_MULT_HI - _MULT_LO) * _unit(seed, sig.kind, alg, "mult")
    jitter = _JITTER_LO + (_JITTER_HI - _JITTER_LO) * _unit(seed, sig.text, alg, "jitter")
    overhead = _OVERHEAD_LO + (_OVERHEAD_HI - _OVERHEAD_LO) * _unit(seed, sig.kind, alg, "overhead")
    time_ms = _TIME_SCALE * estimated_flops(sig) ** _FLOPS_EXP * mult * jitter + overhead

    # faster algorithms usually (not always) draw more power
    speed = min(1.0, max(0.0, (_MULT_HI * _JITTER_HI - mult * jitter) / (_MULT_HI * _JITTER_HI - _MULT_LO * _JITTER_LO)))
    noise = _unit(seed, sig.text, alg, "power")
    frac = 0.55 * speed + 0.45 * noise
    power_w = _POWER_LO + (_POWER_HI - _POWER_LO) * frac
    return CostRecord(time_ms=time_ms, power_w=power_w)


# ---------------------------------------------------------------------------
# External measurement protocol
# ---------------------------------------------------------------------------

def _node_spec_payload(sig: NodeSignature, alg: int) -> dict:
    payload: dict = {
        "kind": sig.kind,
        "input_shapes": [list(s) for s in sig.input_shapes],
        "alg": int(alg),
    }
    for key, value in sig.params:
        payload[key] = list(value) if isinstance(value, tuple) else value
    return payload


def measure_external(profiler: ExternalProfiler, sig: NodeSignature, alg: int) -> CostRecord | None:
    """Run the measurement command for one (signature, algorithm) pair.

    Writes a node-spec JSON file, substitutes `{spec}` and `{alg}` into the
    command template, and parses a single JSON object from stdout:
    {"time_ms": float, "power_w": float} or {"not_applicable": true}.
    """
    with tempfile.NamedTemporaryFile("w", suffix=".json", delete=False) as fh:
        json.dump(_node_spec_payload(sig, alg), fh)
        spec_path = fh.name
    try:
        cmd = profiler.command.format(spec=spec_path, alg=alg)
        proc = subprocess.run(shlex.split(cmd), capture_output=True, text=True)
        if proc.returncode != 0:
            raise CommandFailed(proc.returncode, proc.stderr)
        try:
            result = json.loads(proc.stdout)
        except json.JSONDecodeError as exc:
            raise ParseError(f"measurement output is not JSON: {exc}") from exc
        if not isinstance(result, dict):
            raise ParseError("measurement output must be a JSON object")
        if result.get("not_applicable"):
            return None
        try:
            record = CostRecord(float(result["time_ms"]), float(result["power_w"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"bad measurement output {result!r}: {exc}") from exc
        return record
    finally:
        os.unlink(spec_path)


def profile_pair(profiler: ProfilerSpec, sig: NodeSignature, alg: int) -> CostRecord | None:
    if isinstance(profiler, SyntheticProfiler):
        return synthetic_profile(sig, alg, profiler.seed)
    if isinstance(profiler, ExternalProfiler):
        return measure_external(profiler, sig, alg)
    raise TypeError(f"not a profiler spec: {profiler!r}")


# ---------------------------------------------------------------------------
# Database-filling and persistence
# ---------------------------------------------------------------------------

def ensure_profiled(g: Graph, db: CostDatabase, profiler: ProfilerSpec,
                    append_path: str | None = None) -> int:
    """Profile every not-yet-covered node signature of `g` into `db`.

    Signatures already present are left untouched (nodes with the same
    parameters are measured once, ever). Returns the number of new records;
    when `append_path` is given, each new record is appended to that file
    as it is produced, so partial progress survives a crash.
    """
    new_records = 0
    todo: list[str] = []
    seen: set[str] = set()
    sigs = signatures(g)
    for node in g.compute_nodes():
        text = sigs[node.id].text
        if text not in seen:
            seen.add(text)
            if not db.has_signature(text):
                todo.append(text)
    by_text = {sigs[n.id].text: sigs[n.id] for n in g.compute_nodes()}

    appender = open(append_path, "a") if append_path else None
    try:
        for text in todo:
            sig = by_text[text]
            produced = 0
            for alg in candidate_algorithms(sig.kind):
                record = profile_pair(profiler, sig, alg)
                if record is None:
                    continue
                db.add(text, alg, record)
                produced += 1
                new_records += 1
                if appender:
                    appender.write(_record_line(text, alg, record) + "\n")
                    appender.flush()
            if produced == 0:
                raise ProfileError(f"no applicable algorithm for signature {text!r}")
    finally:
        if appender:
            appender.close()
    return new_records


def _record_line(sig: str, alg: int, record: CostRecord) -> str:
    return json.dumps(
        {"sig": sig, "alg": int(alg), "alg_label": alg_label(alg),
         "time_ms": record.time_ms, "power_w": record.power_w},
        sort_keys=True,
    )


def persist(db: CostDatabase, path) -> None:
    """Write the whole database as JSON Lines, sorted by (sig, alg)."""
    entries = db.records()
    with open(path, "w") as fh:
        for sig, alg in sorted(entries):
            fh.write(_record_line(sig, alg, entries[(sig, alg)]) + "\n")


def load(path) -> CostDatabase:
    """Load a JSON Lines cost database; last write wins on duplicate keys.

    Raises ParseError (with the line number) for malformed lines or
    non-positive time/power values.
    """
    db = CostDatabase()
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"not valid JSON: {exc}", path=str(path), line=lineno) from exc
            try:
                sig = obj["sig"]
                alg = int(obj["alg"])
                record = CostRecord(float(obj["time_ms"]), float(obj["power_w"]))
            except (KeyError, TypeError, ValueError) as exc:
                raise ParseError(f"bad record: {exc}", path=str(path), line=lineno) from exc
            if not isinstance(sig, str) or alg < 0:
                raise ParseError("bad record: sig must be a string and alg >= 0",
                                 path=str(path), line=lineno)
            db.add(sig, alg, record)
    return db
