"""Ground-truth probability change and its aggregation."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import torch

DIST_TOL = 1e-6


def _check_dist(p: torch.Tensor, name: str):
    s = p.sum(dim=-1)
    if not bool(torch.all((s - 1.0).abs() <= DIST_TOL)):
        raise ValueError(f"{name} is not a probability distribution (row sums {s.flatten()[:4].tolist()}...)")


def compute_pc(perturbed: torch.Tensor, base: torch.Tensor, gt) -> torch.Tensor | float:
    """Perturbed minus base probability of the ground-truth token.

    Works on single distributions (``gt`` an int, returns a float) or on
    batches ``(B, V)`` with ``gt`` of shape ``(B,)`` (returns a tensor).
    """
    perturbed = torch.as_tensor(perturbed, dtype=torch.float64)
    base = torch.as_tensor(base, dtype=torch.float64)
    if perturbed.shape != base.shape:
        raise ValueError(f"shape mismatch {tuple(perturbed.shape)} vs {tuple(base.shape)}")
    _check_dist(perturbed, "perturbed")
    _check_dist(base, "base")
    V = base.shape[-1]
    gt_t = torch.as_tensor(gt, dtype=torch.long)
    if bool(((gt_t < 0) | (gt_t >= V)).any()):
        raise ValueError(f"ground-truth token {gt} outside vocabulary of size {V}")
    if base.dim() == 1:
        return float(perturbed[int(gt_t)] - base[int(gt_t)])
    idx = gt_t.view(-1, 1)
    return (perturbed.gather(-1, idx) - base.gather(-1, idx)).squeeze(-1)


def mean_pc(values) -> float:
    """Unweighted mean with compensated summation (order independent to ~1e-16)."""
    vals = [float(v) for v in (values.tolist() if isinstance(values, torch.Tensor) else values)]
    if not vals:
        raise ValueError("mean over an empty batch")
    return math.fsum(vals) / len(vals)


@dataclass
class WindowResult:
    window: str
    start: int
    mean_pc: float
    n: int


@dataclass
class PerturbationResult:
    recipe: str
    task: str
    seed: int
    rows: list[WindowResult] = field(default_factory=list)
    condition: str = ""

    def add(self, window: str, start: int, values) -> WindowResult:
        vals = values.tolist() if isinstance(values, torch.Tensor) else list(values)
        row = WindowResult(window, start, mean_pc(vals), len(vals))
        if not -1.0 <= row.mean_pc <= 1.0:
            raise ValueError(f"P_C {row.mean_pc} outside [-1, 1]")
        if self.rows and self.rows[0].n != row.n:
            raise ValueError("sample counts differ across windows of one sweep")
        self.rows.append(row)
        return row

    def values(self) -> list[float]:
        return [r.mean_pc for r in self.rows]

    def records(self) -> list[dict]:
        return [
            {"recipe": self.recipe, "task": self.task, "window": r.window, "mean_pc": r.mean_pc, "n": r.n}
            for r in self.rows
        ]

    def to_json(self) -> str:
        return json.dumps(self.records(), indent=2)
