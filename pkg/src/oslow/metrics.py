"""Ordering-quality metrics and run aggregation."""
from __future__ import annotations

import csv
import io
import json
import math
from collections import defaultdict
from dataclasses import asdict, dataclass
from typing import Iterable, Sequence

import numpy as np


def _edges(dag) -> list[tuple[int, int]]:
    return [tuple(e) for e in getattr(dag, "edges", dag)]


def cbc(ordering: Sequence[int], dag) -> float:
    """Causal backward count: fraction of true edges the ordering puts backward.

    ``dag`` is a :class:`~oslow.scm_bench.DagSpec` or an iterable of
    ``(parent, child)`` pairs.
    """
    edges = _edges(dag)
    if not edges:
        raise ValueError("CBC is undefined for a graph without edges")
    rank = {v: i for i, v in enumerate(ordering)}
    backward = sum(rank[i] > rank[j] for i, j in edges)
    return backward / len(edges)


def is_valid_ordering(ordering: Sequence[int], dag) -> bool:
    """True when every edge points forward (vacuously true without edges)."""
    edges = _edges(dag)
    if not edges:
        return True
    return cbc(ordering, edges) == 0.0


@dataclass
class MetricRecord:
    dataset_id: str
    method: str
    seed: int
    cbc: float | None
    valid: bool
    family: str = ""
    proxy_final: float = float("nan")
    wall_time_s: float = 0.0
    vacuous: bool = False
    error: str | None = None

    def __post_init__(self):
        if self.cbc is not None and not 0.0 <= self.cbc <= 1.0:
            raise ValueError("cbc must lie in [0, 1]")

    def to_dict(self) -> dict:
        out = asdict(self)
        if isinstance(out["proxy_final"], float) and not math.isfinite(out["proxy_final"]):
            out["proxy_final"] = None
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "MetricRecord":
        data = dict(data)
        if data.get("proxy_final") is None:
            data["proxy_final"] = float("nan")
        return cls(**data)


@dataclass
class AggregateRow:
    method: str
    family: str
    mean: float
    std: float
    n: int


def aggregate(records: Iterable[MetricRecord]) -> list[AggregateRow]:
    """Mean and sample std (n - 1) of CBC per (method, family).

    Records without a CBC (empty graphs, failed runs) are left out. A group of
    one reports std 0.
    """
    groups: dict[tuple[str, str], list[float]] = defaultdict(list)
    for r in records:
        if r.cbc is None or r.error:
            continue
        groups[(r.method, r.family)].append(r.cbc)
    rows = []
    for (method, family), vals in sorted(groups.items()):
        arr = np.asarray(vals)
        std = float(arr.std(ddof=1)) if len(arr) > 1 else 0.0
        rows.append(AggregateRow(method, family, float(arr.mean()), std, len(arr)))
    return rows


def aggregate_csv(rows: Sequence[AggregateRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["method", "family", "mean", "std", "n"])
    for r in rows:
        writer.writerow([r.method, r.family, f"{r.mean:.6f}", f"{r.std:.6f}", r.n])
    return buf.getvalue()


def aggregate_json(rows: Sequence[AggregateRow]) -> str:
    return json.dumps([asdict(r) for r in rows], indent=2)
