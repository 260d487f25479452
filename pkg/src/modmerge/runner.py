"""Execute a MergePlan against opened checkpoints."""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Mapping

import numpy as np

from . import merge_methods as mm
from .checkpoint_io import Tensor, TensorIndex, read_tensor
from .config import COPY, Directive, MergePlan

__all__ = ["InvariantError", "TensorRecord", "RunReport", "execute_directive", "run_plan"]


class InvariantError(RuntimeError):
    """An internal consistency check failed; indicates a bug, not bad input."""


@dataclass(frozen=True)
class TensorRecord:
    name: str
    method: str
    parameters: Mapping[str, Any]
    element_count: int
    fraction_from_theta1: float | None = None

    def to_dict(self) -> dict[str, Any]:
        d = {
            "name": self.name,
            "method": self.method,
            "parameters": dict(self.parameters),
            "element_count": self.element_count,
        }
        if self.fraction_from_theta1 is not None:
            d["fraction_from_theta1"] = self.fraction_from_theta1
        return d


@dataclass
class RunReport:
    merge_method: str
    records: list[TensorRecord] = field(default_factory=list)
    wall_time: float = 0.0

    def totals(self) -> dict[str, Any]:
        by_method: dict[str, int] = {}
        for r in self.records:
            by_method[r.method] = by_method.get(r.method, 0) + 1
        return {
            "tensors": len(self.records),
            "elements": sum(r.element_count for r in self.records),
            "by_method": dict(sorted(by_method.items())),
        }

    def to_dict(self) -> dict[str, Any]:
        return {
            "merge_method": self.merge_method,
            "totals": self.totals(),
            "wall_time_s": round(self.wall_time, 6),
            "records": [r.to_dict() for r in self.records],
        }


def execute_directive(d: Directive, indices: Mapping[str, TensorIndex]) -> tuple[Tensor, TensorRecord]:
    def load(src: str) -> Tensor:
        return read_tensor(indices[src], d.tensor_name)

    p = d.params
    fraction = None
    if d.method == COPY:
        out = load(d.sources["base"])
    elif d.method == "mod":
        t1, t2 = load(d.sources["theta1"]), load(d.sources["theta2"])
        out = mm.merge_mod(t1, t2, p["alpha"])
        fraction = float(np.count_nonzero(mm.mod_selection_mask(t1, p["alpha"]))) / max(t1.numel, 1)
    elif d.method == "linear":
        out = mm.merge_linear([load(s) for s in d.sources["models"]], p["weights"])
    elif d.method == "slerp":
        out = mm.merge_slerp(load(d.sources["theta1"]), load(d.sources["theta2"]), p["t"])
    elif d.method == "task_arithmetic":
        base = load(d.sources["base"])
        out = mm.merge_task_arithmetic(base, [load(s) for s in d.sources["experts"]], p["weights"])
    elif d.method == "ties":
        base = load(d.sources["base"])
        experts = [load(s) for s in d.sources["experts"]]
        out = mm.merge_ties(base, experts, p["densities"], p["weights"], p["normalize"])
    elif d.method == "dare_ties":
        base = load(d.sources["base"])
        experts = [load(s) for s in d.sources["experts"]]
        out = mm.merge_dare_ties(base, experts, p["densities"], p["weights"], p["seed"])
    else:
        raise InvariantError(f"{d.tensor_name}: unknown method {d.method!r} in plan")

    out = Tensor(d.tensor_name, out.values)
    if not np.all(np.isfinite(out.values)):
        raise InvariantError(f"{d.tensor_name}: {d.method} produced non-finite values")
    if fraction is not None and not 0.0 <= fraction <= 1.0:
        raise InvariantError(f"{d.tensor_name}: fraction {fraction} outside [0, 1]")
    return out, TensorRecord(d.tensor_name, d.method, dict(p), out.numel, fraction)


def run_plan(plan: MergePlan, indices: Mapping[str, TensorIndex], threads: int = 1) -> tuple[list[Tensor], RunReport]:
    """Merge every directive; results come back in plan order whatever ``threads`` is."""
    if threads < 1:
        raise ValueError(f"threads must be >= 1, got {threads}")
    start = time.perf_counter()
    if threads == 1:
        results = [execute_directive(d, indices) for d in plan.directives]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(lambda d: execute_directive(d, indices), plan.directives))
    report = RunReport(plan.merge_method, [r for _, r in results], time.perf_counter() - start)
    if len(report.records) != len(plan.directives):
        raise InvariantError("report record count differs from plan directive count")
    return [t for t, _ in results], report
