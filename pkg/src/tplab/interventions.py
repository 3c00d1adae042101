"""Perturbations: PE edits, attention knockout masks, frame reversal, layer sweeps."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np
import torch

from .metrics import PerturbationResult, compute_pc
from .model import (
    HookPoint,
    PositionIds,
    PreRotary,
    TokenLayout,
    TransformerLab,
    assign_position_ids,
    next_token_distribution,
    reverse_temporal,
    shuffle_segment,
)
from .numerics import NEG_INF

INTERVENTION_KINDS = ("remove_pe", "shuffle_pe", "reverse_pe", "reverse_frames", "knockout")
SPATIOTEMPORAL_KINDS = ("corresponding_area", "previous_frame", "corresponding_area_prev")


class KnockoutError(ValueError):
    pass


def _frozen(xs) -> frozenset[int]:
    return frozenset(int(x) for x in xs)


@dataclass(frozen=True)
class KnockoutSpec:
    """Block attention from every target to every (causally visible) source."""

    targets: frozenset[int]
    sources: frozenset[int]
    layers: frozenset[int] | None = None

    def __post_init__(self):
        object.__setattr__(self, "targets", _frozen(self.targets))
        object.__setattr__(self, "sources", _frozen(self.sources))
        if self.layers is not None:
            object.__setattr__(self, "layers", _frozen(self.layers))

    def pairs(self) -> set[tuple[int, int]]:
        return {(i, j) for i in self.targets for j in self.sources if j <= i}


Knockout = KnockoutSpec | Sequence[KnockoutSpec]


def _as_specs(spec: Knockout) -> tuple[KnockoutSpec, ...]:
    return (spec,) if isinstance(spec, KnockoutSpec) else tuple(spec)


def blocked_pairs(spec: Knockout, total_len: int) -> np.ndarray:
    """Boolean ``(n, n)`` matrix of the pairs the knockout removes (``j <= i`` only)."""
    blocked = np.zeros((total_len, total_len), dtype=bool)
    for s in _as_specs(spec):
        if not s.targets or not s.sources:
            continue
        bad = [x for x in s.targets | s.sources if not 0 <= x < total_len]
        if bad:
            raise KnockoutError(f"knockout indices {sorted(bad)[:5]} outside [0, {total_len})")
        t = np.fromiter(sorted(s.targets), dtype=np.int64)
        src = np.fromiter(sorted(s.sources), dtype=np.int64)
        blocked[np.ix_(t, src)] = True
    return np.tril(blocked)


def build_knockout_mask(spec: Knockout, total_len: int) -> torch.Tensor:
    """Additive mask with -inf on blocked (target, source) pairs, to be added to the causal mask."""
    blocked = blocked_pairs(spec, total_len)
    visible = np.tril(np.ones((total_len, total_len), dtype=bool)) & ~blocked
    dead = np.flatnonzero(~visible.any(axis=1))
    if dead.size:
        raise KnockoutError(f"knockout leaves token {int(dead[0])} with nothing to attend to (rows {dead.tolist()[:8]})")
    mask = torch.zeros(total_len, total_len, dtype=torch.float64)
    return mask.masked_fill(torch.from_numpy(blocked), NEG_INF)


def final_token_knockout(layout: TokenLayout, source_segment: str) -> KnockoutSpec:
    if source_segment not in ("query", "video"):
        raise ValueError("source_segment must be 'query' or 'video'")
    last = layout.last
    sources = set(layout.segment(source_segment)) - {last}
    return KnockoutSpec({last}, sources)


def frame_to_query_knockout(layout: TokenLayout) -> KnockoutSpec:
    return KnockoutSpec(layout.query, layout.visual)


def inter_frame_knockout(layout: TokenLayout) -> tuple[KnockoutSpec, ...]:
    if layout.n_frames < 2:
        raise KnockoutError("inter-frame knockout needs at least two frames")
    specs = []
    for k in range(1, layout.n_frames):
        earlier = range(layout.frames[0].start, layout.frames[k].start)
        specs.append(KnockoutSpec(layout.frames[k], earlier))
    return tuple(specs)


def single_frame_restriction(layout: TokenLayout, keep_frame: int) -> KnockoutSpec:
    if not 0 <= keep_frame < layout.n_frames:
        raise KnockoutError(f"keep_frame {keep_frame} outside [0, {layout.n_frames})")
    sources = set(layout.visual) - set(layout.frames[keep_frame])
    return KnockoutSpec(layout.query, sources)


def spatiotemporal_config(layout: TokenLayout, kind: str, radius: int = 1) -> tuple[KnockoutSpec, ...]:
    """Restrict each visual token's access to tokens of *earlier frames*.

    Within-frame attention and all text attention are left alone.
    """
    if kind not in SPATIOTEMPORAL_KINDS:
        raise ValueError(f"kind must be one of {SPATIOTEMPORAL_KINDS}")
    if radius < 0:
        raise ValueError("radius must be >= 0")
    specs = []
    for i in layout.visual:
        k, h, w = layout.cell_of(i)
        blocked = []
        for j in range(layout.visual.start, layout.frames[k].start):
            k2, h2, w2 = layout.cell_of(j)
            near = abs(h - h2) <= radius and abs(w - w2) <= radius
            if kind == "corresponding_area":
                ok = near
            elif kind == "previous_frame":
                ok = k2 == k - 1
            else:
                ok = near and k2 == k - 1
            if not ok:
                blocked.append(j)
        if blocked:
            specs.append(KnockoutSpec({i}, blocked))
    return tuple(specs)


@dataclass(frozen=True)
class InterventionSpec:
    kind: str
    layers: frozenset[int] | None = None
    knockout: tuple[KnockoutSpec, ...] = ()
    segment: str | None = None
    seed: int | None = None
    label: str = ""

    def __post_init__(self):
        if self.kind not in INTERVENTION_KINDS:
            raise ValueError(f"intervention kind must be one of {INTERVENTION_KINDS}, got {self.kind!r}")
        if self.layers is not None:
            object.__setattr__(self, "layers", _frozen(self.layers))
        object.__setattr__(self, "knockout", _as_specs(self.knockout))
        if self.kind == "shuffle_pe" and (self.segment not in ("video", "query") or self.seed is None):
            raise ValueError("shuffle_pe needs segment in {video, query} and a seed")

    def at_layers(self, layers: Iterable[int]) -> "InterventionSpec":
        return replace(self, layers=_frozen(layers))


def knockout(spec: Knockout, layers: Iterable[int] | None = None, label: str = "knockout") -> InterventionSpec:
    return InterventionSpec("knockout", None if layers is None else _frozen(layers), _as_specs(spec), label=label)


def remove_pe_at_layer(layer: int, n_layers: int | None = None) -> InterventionSpec:
    if layer < 0 or (n_layers is not None and layer >= n_layers):
        raise ValueError(f"layer {layer} outside the model")
    return InterventionSpec("remove_pe", frozenset({layer}), label=f"remove_pe@{layer}")


def shuffle_pe(segment: str, seed: int, layers: Iterable[int] | None = (0,)) -> InterventionSpec:
    return InterventionSpec(
        "shuffle_pe", None if layers is None else _frozen(layers), segment=segment, seed=seed, label=f"shuffle_{segment}"
    )


def reverse_pe(layers: Iterable[int] | None = None) -> InterventionSpec:
    return InterventionSpec("reverse_pe", None if layers is None else _frozen(layers), label="reverse_pe")


def reverse_frames_spec() -> InterventionSpec:
    return InterventionSpec("reverse_frames", label="reverse_frames")


def reverse_frames(tokens, layout: TokenLayout):
    """Reverse the order of the frame blocks along the last axis."""
    if isinstance(tokens, torch.Tensor):
        idx = torch.from_numpy(frame_reversal_index(layout))
        return tokens.index_select(-1, idx)
    arr = np.asarray(tokens)
    out = arr[..., frame_reversal_index(layout)]
    return out.tolist() if isinstance(tokens, list) else out


def frame_reversal_index(layout: TokenLayout) -> np.ndarray:
    index = np.arange(layout.total_len)
    T = layout.n_frames
    for k, fr in enumerate(layout.frames):
        src = layout.frames[T - 1 - k]
        index[fr.start:fr.stop] = np.arange(src.start, src.stop)
    return index


def compose_reversal(frames_reversed: bool, pe_reversed: bool) -> tuple[InterventionSpec, ...]:
    """``(True, False)`` is "reverse order", ``(False, True)`` is "reverse PE"."""
    specs = []
    if frames_reversed:
        specs.append(reverse_frames_spec())
    if pe_reversed:
        specs.append(reverse_pe())
    return tuple(specs)


def _knockout_hook(mask: torch.Tensor):
    def fn(scores, ctx):
        sub = mask.index_select(0, ctx.query_positions).index_select(1, ctx.key_positions)
        return scores + sub.to(scores.dtype)

    return fn


def _replace_ids(new_ids):
    def fn(pre: PreRotary, ctx):
        return PreRotary(pre.q, pre.k, None if pre.ids is None else new_ids)

    return fn


def _drop_ids(pre: PreRotary, ctx):
    return PreRotary(pre.q, pre.k, None)


@dataclass
class Prepared:
    tokens: torch.Tensor
    ids: PositionIds
    hooks: list[HookPoint] = field(default_factory=list)


def prepare(
    specs: Sequence[InterventionSpec],
    layout: TokenLayout,
    tokens: torch.Tensor,
    n_layers: int,
    ids: PositionIds | None = None,
) -> Prepared:
    """Turn intervention specs into (tokens, position ids, hooks) for one forward pass."""
    ids = assign_position_ids(layout) if ids is None else ids
    all_layers = range(n_layers)
    hooks: list[HookPoint] = []
    knockouts: dict[int, list[KnockoutSpec]] = {}
    for spec in specs:
        layers = sorted(spec.layers) if spec.layers is not None else None
        if spec.kind == "reverse_frames":
            tokens = reverse_frames(tokens, layout)
        elif spec.kind == "reverse_pe":
            if layers is None:
                ids = reverse_temporal(ids, layout)
            else:
                rev = reverse_temporal(ids, layout)
                hooks += [HookPoint(l, "pre_pe", _replace_ids(rev)) for l in layers]
        elif spec.kind == "shuffle_pe":
            shuffled = shuffle_segment(ids, layout, spec.segment, spec.seed)
            hooks += [HookPoint(l, "pre_pe", _replace_ids(shuffled)) for l in (all_layers if layers is None else layers)]
        elif spec.kind == "remove_pe":
            hooks += [HookPoint(l, "pre_pe", _drop_ids) for l in (all_layers if layers is None else layers)]
        else:
            for ko in spec.knockout:
                ko_layers = layers if layers is not None else (sorted(ko.layers) if ko.layers is not None else all_layers)
                for l in ko_layers:
                    knockouts.setdefault(l, []).append(ko)
    for l in sorted(knockouts):
        hooks.append(HookPoint(l, "post_scores", _knockout_hook(build_knockout_mask(knockouts[l], layout.total_len))))
    return Prepared(tokens, ids, hooks)


def run_distribution(
    model: TransformerLab,
    layout: TokenLayout,
    tokens: torch.Tensor,
    specs: Sequence[InterventionSpec] = (),
    ids: PositionIds | None = None,
    batch: int = 512,
    evict: dict | None = None,
) -> torch.Tensor:
    """Next-token distribution at the final position for each row of ``tokens``."""
    prep = prepare(specs, layout, tokens, model.config.n_layers, ids)
    out = []
    with torch.no_grad():
        for s in range(0, prep.tokens.shape[0], batch):
            chunk = prep.tokens[s:s + batch]
            cache = model.new_cache(evict) if evict else None
            logits = model(chunk, layout, prep.ids, prep.hooks, cache).logits[:, -1, :]
            out.append(next_token_distribution(logits))
    return torch.cat(out)


@dataclass
class BaseRun:
    """Unperturbed reference for P_C: a batch of inputs and its base distributions.

    ``base_specs`` defines the reference condition itself (e.g. reversed input)
    and is applied to every perturbed run as well.
    """

    model: TransformerLab
    layout: TokenLayout
    tokens: torch.Tensor
    gt: torch.Tensor
    base_specs: tuple[InterventionSpec, ...] = ()
    probs: torch.Tensor | None = None

    def __post_init__(self):
        self.tokens = torch.as_tensor(self.tokens, dtype=torch.long)
        self.gt = torch.as_tensor(self.gt, dtype=torch.long)
        self.base_specs = tuple(self.base_specs)
        if self.probs is None:
            self.probs = self.distribution(())

    def distribution(self, specs: Sequence[InterventionSpec]) -> torch.Tensor:
        return run_distribution(self.model, self.layout, self.tokens, self.base_specs + tuple(specs))

    def pc(self, specs: Sequence[InterventionSpec]) -> torch.Tensor:
        return compute_pc(self.distribution(specs), self.probs, self.gt)


@dataclass(frozen=True)
class WindowSweep:
    window_k: int = 5
    stride: int = 1

    def windows(self, n_layers: int) -> list[range]:
        if self.window_k < 1 or self.stride < 1:
            raise ValueError("window_k and stride must be positive")
        if self.window_k > n_layers:
            raise ValueError(f"window of {self.window_k} layers does not fit a {n_layers}-layer model")
        return [range(s, s + self.window_k) for s in range(0, n_layers - self.window_k + 1, self.stride)]


def sweep_layers(
    base: BaseRun,
    spec: InterventionSpec | Sequence[InterventionSpec],
    sweep: WindowSweep,
    recipe: str = "",
    task: str = "",
    seed: int = 0,
    condition: str = "",
) -> PerturbationResult:
    """One mean P_C per layer window; the specs' own layer sets are replaced by each window."""
    specs = (spec,) if isinstance(spec, InterventionSpec) else tuple(spec)
    result = PerturbationResult(recipe, task, seed, condition=condition)
    for win in sweep.windows(base.model.config.n_layers):
        windowed = [s.at_layers(win) for s in specs]
        result.add(f"{win.start}-{win.stop - 1}", win.start, base.pc(windowed))
    return result
