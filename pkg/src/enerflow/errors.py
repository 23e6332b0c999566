"""Exception types shared across the package."""


class EnerflowError(Exception):
    """Base class for all errors raised by this package."""


class ShapeMismatch(EnerflowError):
    """An operator's inputs are dimensionally incompatible."""

    def __init__(self, node_id: int, reason: str):
        super().__init__(f"node {node_id}: {reason}")
        self.node_id = node_id
        self.reason = reason


class MissingInput(EnerflowError):
    """A named graph input was not supplied (or an unknown name was)."""

    def __init__(self, name: str, reason: str = "missing input tensor"):
        super().__init__(f"{reason}: {name!r}")
        self.name = name


class GraphFormatError(EnerflowError):
    """A graph file or object violates the on-disk schema."""


class InvalidSite(EnerflowError):
    """A rewrite site no longer matches the graph it was taken from."""


class DomainMismatch(EnerflowError):
    """Two algorithm assignments do not cover the same node-id set."""


class NotApplicable(EnerflowError):
    """The requested algorithm is not applicable to this node signature."""

    def __init__(self, sig: str, alg: int):
        super().__init__(f"algorithm {alg} not applicable to signature {sig!r}")
        self.sig = sig
        self.alg = alg


class MissingEntry(EnerflowError):
    """No cost entry for this signature; profiling is required first."""

    def __init__(self, sig: str, alg: int | None = None):
        detail = f"signature {sig!r}" if alg is None else f"({sig!r}, alg {alg})"
        super().__init__(f"no cost entry for {detail}; run the profiler")
        self.sig = sig
        self.alg = alg


class SpaceTooLarge(EnerflowError):
    """An exhaustive enumeration exceeded its configured bound."""


class InfeasibleConstraint(EnerflowError):
    """No reachable graph/assignment satisfies the hard constraint."""

    def __init__(self, best_time_ms: float):
        super().__init__(
            f"time bound infeasible; best achievable time is {best_time_ms:.6g} ms"
        )
        self.best_time_ms = best_time_ms


class CommandFailed(EnerflowError):
    """An external measurement command exited non-zero."""

    def __init__(self, returncode: int, stderr: str):
        excerpt = stderr.strip().splitlines()
        excerpt = excerpt[-1] if excerpt else ""
        super().__init__(f"measurement command failed (exit {returncode}): {excerpt}")
        self.returncode = returncode
        self.stderr = stderr


class ParseError(EnerflowError):
    """Malformed persisted data (cost database line or profiler output)."""

    def __init__(self, reason: str, path: str | None = None, line: int | None = None):
        where = ""
        if path is not None:
            where = f"{path}:"
        if line is not None:
            where += f"{line}: "
        elif path is not None:
            where += " "
        super().__init__(f"{where}{reason}")
        self.path = path
        self.line = line
        self.reason = reason


class ProfileError(EnerflowError):
    """Profiling produced no applicable algorithm for a signature."""
