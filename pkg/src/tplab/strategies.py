"""Pathway-guided efficiency strategies and their cost accounting.

Three schedules, each confined to a band of depth given as fractions of the
layer count:

* ``s1_query_last_frame`` - query tokens may read visual tokens of the last
  frame only (instruction and query sources stay visible).
* ``s2_no_inter_frame`` - visual tokens stop attending to visual tokens of
  other frames.
* ``s3_kv_frame_exit`` - visual keys/values are never retained in the cache,
  so no token at those layers can read them.
"""

from __future__ import annotations

import csv
import io
import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from .interventions import (
    InterventionSpec,
    KnockoutSpec,
    blocked_pairs,
    knockout,
    prepare,
    run_distribution,
)
from .model import KVCache, TokenLayout, TransformerLab
from .tasks import SyntheticSample, batch_tensors, evaluate, task_layout

STRATEGIES = ("baseline", "s1_query_last_frame", "s2_no_inter_frame", "s3_kv_frame_exit")
DEFAULT_BANDS = {
    "baseline": (0.0, 0.0),
    "s1_query_last_frame": (10 / 28, 20 / 28),
    "s2_no_inter_frame": (20 / 28, 28 / 28),
    "s3_kv_frame_exit": (20 / 28, 28 / 28),
}
CSV_COLUMNS = ("strategy", "accuracy", "mean_pc", "flops", "kv_bytes_peak")


def _nearest(x: float) -> int:
    # round half up; Python's round() would send 2.5 to 2
    return int(math.floor(x + 0.5))


@dataclass(frozen=True)
class StrategySchedule:
    strategy: str
    band: tuple[float, float] | None = None
    block_within_frame: bool = False

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        band = DEFAULT_BANDS[self.strategy] if self.band is None else tuple(float(b) for b in self.band)
        lo, hi = band
        if not 0.0 <= lo <= hi <= 1.0:
            raise ValueError(f"band {band} must satisfy 0 <= lo <= hi <= 1")
        object.__setattr__(self, "band", band)

    def resolve(self, n_layers: int) -> tuple[int, ...]:
        if self.strategy == "baseline":
            return ()
        lo, hi = self.band
        return tuple(range(_nearest(lo * n_layers), _nearest(hi * n_layers)))


def _s1_specs(layout: TokenLayout) -> tuple[KnockoutSpec, ...]:
    early = set(layout.visual) - set(layout.frames[-1])
    return (KnockoutSpec(layout.query, early),)


def _s2_specs(layout: TokenLayout, within: bool) -> tuple[KnockoutSpec, ...]:
    visual = set(layout.visual)
    specs = []
    for fr in layout.frames:
        # with ``within`` a token keeps only its own key among visual tokens
        others = visual - set(fr)
        specs.append(KnockoutSpec(fr, others))
        if within:
            specs += [KnockoutSpec({i}, set(fr) - {i}) for i in fr]
    return tuple(specs)


def eviction_equivalent_knockout(layout: TokenLayout, layers: Sequence[int]) -> InterventionSpec:
    """Dense-attention twin of visual KV eviction: nobody reads visual tokens at ``layers``."""
    return knockout(KnockoutSpec(range(layout.total_len), layout.visual), layers, label="kv_exit_equivalent")


@dataclass
class StrategyRun:
    """A configured strategy: knockout specs and/or a cache eviction policy."""

    model: TransformerLab
    layout: TokenLayout
    schedule: StrategySchedule
    layers: tuple[int, ...]
    specs: tuple[InterventionSpec, ...] = ()
    evict: dict[int, frozenset[int]] = field(default_factory=dict)
    last_cache: KVCache | None = None

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        """Logits of a single batch; the cache is kept for cost accounting."""
        prep = prepare(self.specs, self.layout, torch.as_tensor(tokens), self.model.config.n_layers)
        cache = self.model.new_cache(self.evict or None)
        with torch.no_grad():
            logits = self.model(prep.tokens, self.layout, prep.ids, prep.hooks, cache).logits
        self.last_cache = cache
        return logits

    def distribution(self, tokens: torch.Tensor) -> torch.Tensor:
        return run_distribution(self.model, self.layout, torch.as_tensor(tokens), self.specs, evict=self.evict or None)

    def allowed_pairs(self, layer: int) -> np.ndarray:
        """Boolean ``(n, n)`` matrix of (query, key) pairs that are scored at ``layer``."""
        n = self.layout.total_len
        allowed = np.tril(np.ones((n, n), dtype=bool))
        kos = [ko for s in self.specs if s.kind == "knockout" and (s.layers is None or layer in s.layers) for ko in s.knockout]
        if kos:
            allowed &= ~blocked_pairs(kos, n)
        gone = self.evict.get(layer)
        if gone:
            allowed[:, sorted(gone)] = False
        return allowed


def apply_strategy(model: TransformerLab, schedule: StrategySchedule, layout: TokenLayout | None = None) -> StrategyRun:
    layout = task_layout(model.config) if layout is None else layout
    if layout.n_frames < 1:
        raise ValueError("strategies need a layout with at least one frame")
    layers = schedule.resolve(model.config.n_layers)
    run = StrategyRun(model, layout, schedule, layers)
    if schedule.strategy == "baseline":
        return run
    if not layers:
        warnings.warn(f"{schedule.strategy}: band {schedule.band} selects no layers; running unmodified", stacklevel=2)
        return run
    if schedule.strategy == "s1_query_last_frame":
        run.specs = (knockout(_s1_specs(layout), layers, label=schedule.strategy),)
    elif schedule.strategy == "s2_no_inter_frame":
        run.specs = (knockout(_s2_specs(layout, schedule.block_within_frame), layers, label=schedule.strategy),)
    else:
        visual = frozenset(layout.visual)
        run.evict = {l: visual for l in layers}
    return run


@dataclass
class LayerCost:
    layer: int
    pairs: int
    flops: int
    kv_bytes: int


@dataclass
class CostReport:
    attention_flops: int
    kv_bytes_peak: int
    per_layer: list[LayerCost]


def account_costs(run: StrategyRun) -> CostReport:
    """Score FLOPs (``2 * d_model`` per scored pair) and retained cache bytes, per sequence.

    Requires a completed forward pass: KV bytes are read from the cache's
    liveness flags. The cache only grows during a pass, so its final size is
    the peak.
    """
    if run.last_cache is None:
        raise ValueError("account_costs needs a completed run; call forward() first")
    d = run.model.config.d_model
    rows = []
    for l in range(run.model.config.n_layers):
        pairs = int(run.allowed_pairs(l).sum())
        rows.append(LayerCost(l, pairs, 2 * d * pairs, run.last_cache.nbytes(l)))
    return CostReport(sum(r.flops for r in rows), sum(r.kv_bytes for r in rows), rows)


@dataclass
class BenchmarkRow:
    strategy: str
    accuracy: float
    mean_pc: float
    flops: int
    kv_bytes_peak: int


def benchmark_strategies(
    model: TransformerLab,
    data: Sequence[SyntheticSample],
    schedules: Sequence[StrategySchedule] | None = None,
) -> list[BenchmarkRow]:
    """Accuracy, mean P_C against the unmodified model, and costs per strategy."""
    schedules = [StrategySchedule(s) for s in STRATEGIES] if schedules is None else list(schedules)
    layout = task_layout(model.config)
    tokens, _ = batch_tensors(data[:1])
    rows = []
    for sched in schedules:
        run = apply_strategy(model, sched, layout)
        report = evaluate(model, data, run.specs, run.evict or None)
        run.forward(tokens)
        cost = account_costs(run)
        rows.append(BenchmarkRow(sched.strategy, report.accuracy, report.mean_pc, cost.attention_flops, cost.kv_bytes_peak))
    return rows


def benchmark_csv(rows: Sequence[BenchmarkRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in rows:
        w.writerow([r.strategy, repr(float(r.accuracy)), repr(float(r.mean_pc)), r.flops, r.kv_bytes_peak])
    return buf.getvalue()
