import os

import pytest

from enerflow.cost import CostDatabase
from enerflow.graph import Graph
from enerflow.models import random_graph
from enerflow.profiling import SyntheticProfiler, ensure_profiled

DATA_DIR = os.path.join(os.path.dirname(__file__), "data")


@pytest.fixture
def data_dir() -> str:
    return DATA_DIR


def synthetic_instance(seed: int, ops: int | None = None, max_ops: int = 8) -> tuple[Graph, CostDatabase]:
    """Random graph plus a fully profiled synthetic cost database."""
    g = random_graph(seed, ops=ops, max_ops=max_ops)
    db = CostDatabase()
    ensure_profiled(g, db, SyntheticProfiler(seed))
    return g, db
