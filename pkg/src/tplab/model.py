"""Decoder-only transformer over an instruction / frames / query token layout."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
from torch import nn

from .numerics import (
    NEG_INF,
    FullyMaskedRowError,
    Rng,
    layer_norm,
    masked_softmax,
    matmul,
)

PE_MODES = ("none", "rotary_1d", "rotary_3d")
HOOK_SITES = ("pre_pe", "post_scores", "post_attention")
SEGMENTS = ("instruction", "video", "query")

CHECKPOINT_MAGIC = b"TPLAB01"


class LayoutError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 6
    d_model: int = 64
    n_heads: int = 4
    d_head: int = 16
    ffn_mult: int = 4
    pe_mode: str = "rotary_3d"
    vocab_size: int = 64
    frame_grid: tuple[int, int, int] = (4, 4, 4)
    rope_base: float = 10000.0

    def __post_init__(self):
        object.__setattr__(self, "frame_grid", tuple(int(x) for x in self.frame_grid))
        if self.pe_mode not in PE_MODES:
            raise ValueError(f"pe_mode must be one of {PE_MODES}, got {self.pe_mode!r}")
        if self.d_model != self.n_heads * self.d_head:
            raise ValueError(f"d_model {self.d_model} != n_heads {self.n_heads} x d_head {self.d_head}")
        if self.pe_mode == "rotary_1d" and self.d_head % 2:
            raise ValueError("rotary_1d needs an even d_head")
        if self.pe_mode == "rotary_3d" and self.d_head % 8:
            raise ValueError("rotary_3d needs d_head divisible by 8 (bands d/2, d/4, d/4, each even)")
        if min(self.frame_grid) < 1 or len(self.frame_grid) != 3:
            raise ValueError(f"bad frame_grid {self.frame_grid}")
        if min(self.n_layers, self.n_heads, self.d_head, self.ffn_mult, self.vocab_size) < 1:
            raise ValueError("all sizes must be positive")

    @property
    def d_ffn(self) -> int:
        return self.d_model * self.ffn_mult

    def bands(self) -> tuple[int, int, int]:
        """Head dimensions driven by the (t, h, w) axes under rotary_3d."""
        return self.d_head // 2, self.d_head // 4, self.d_head // 4

    def to_dict(self) -> dict:
        d = asdict(self)
        d["frame_grid"] = list(self.frame_grid)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**{**d, "frame_grid": tuple(d["frame_grid"])})


@dataclass(frozen=True)
class TokenLayout:
    instruction: range
    frames: tuple[range, ...]
    query: range
    grid: tuple[int, int, int]

    @property
    def total_len(self) -> int:
        return self.query.stop

    @property
    def n_frames(self) -> int:
        return len(self.frames)

    @property
    def frame_len(self) -> int:
        return self.grid[1] * self.grid[2]

    @property
    def visual(self) -> range:
        return range(self.frames[0].start, self.frames[-1].stop)

    @property
    def last(self) -> int:
        return self.total_len - 1

    def segment(self, name: str) -> range:
        if name == "instruction":
            return self.instruction
        if name in ("video", "visual"):
            return self.visual
        if name == "query":
            return self.query
        raise ValueError(f"unknown segment {name!r}; expected one of {SEGMENTS}")

    def frame_of(self, index: int) -> int | None:
        if index not in self.visual:
            return None
        return (index - self.visual.start) // self.frame_len

    def cell_of(self, index: int) -> tuple[int, int, int]:
        """(frame, row, col) of a visual token."""
        k = self.frame_of(index)
        if k is None:
            raise LayoutError(f"token {index} is not visual")
        off = index - self.frames[k].start
        return k, off // self.grid[2], off % self.grid[2]

    def index_of(self, frame: int, row: int, col: int) -> int:
        return self.frames[frame].start + row * self.grid[2] + col


def build_layout(config: ModelConfig, instruction_len: int, query_len: int) -> TokenLayout:
    T, H, W = config.frame_grid
    if instruction_len < 1 or query_len < 1:
        raise LayoutError(f"segments must be non-empty (instruction={instruction_len}, query={query_len})")
    per_frame = H * W
    start = instruction_len
    frames = tuple(range(start + k * per_frame, start + (k + 1) * per_frame) for k in range(T))
    q0 = start + T * per_frame
    return TokenLayout(
        instruction=range(0, instruction_len),
        frames=frames,
        query=range(q0, q0 + query_len),
        grid=(T, H, W),
    )


@dataclass(frozen=True, eq=False)
class PositionIds:
    """Per-token (t, h, w) coordinates plus the 1-D position used by rotary_1d.

    Under rotary_1d a token's single position is ``seq``; the 3-D coordinates
    drive rotary_3d.
    """

    t: np.ndarray
    h: np.ndarray
    w: np.ndarray
    seq: np.ndarray

    def __len__(self) -> int:
        return len(self.t)

    def __eq__(self, other) -> bool:
        if not isinstance(other, PositionIds):
            return NotImplemented
        return all(np.array_equal(getattr(self, f), getattr(other, f)) for f in ("t", "h", "w", "seq"))

    def __hash__(self):
        return hash(tuple(np.concatenate([self.t, self.h, self.w, self.seq]).tolist()))

    def permuted(self, index: np.ndarray) -> "PositionIds":
        """New ids where token ``i`` takes the coordinates of token ``index[i]``."""
        return PositionIds(self.t[index], self.h[index], self.w[index], self.seq[index])


def _default_ids(layout: TokenLayout) -> PositionIds:
    n = layout.total_len
    T, H, W = layout.grid
    t = np.zeros(n, dtype=np.int64)
    h = np.zeros(n, dtype=np.int64)
    w = np.zeros(n, dtype=np.int64)
    for i in layout.instruction:
        t[i] = h[i] = w[i] = i
    base = len(layout.instruction)
    for k, fr in enumerate(layout.frames):
        for off, i in enumerate(fr):
            t[i] = base + k
            h[i] = base + off // W
            w[i] = base + off % W
    # text after the video resumes one past the largest video coordinate
    q0 = base + max(T, H, W)
    for j, i in enumerate(layout.query):
        t[i] = h[i] = w[i] = q0 + j
    return PositionIds(t, h, w, np.arange(n, dtype=np.int64))


def reverse_temporal(ids: PositionIds, layout: TokenLayout) -> PositionIds:
    """Frame k takes the temporal (and 1-D) positions of frame T-1-k; text is untouched."""
    t = ids.t.copy()
    seq = ids.seq.copy()
    T = layout.n_frames
    for k, fr in enumerate(layout.frames):
        src = layout.frames[T - 1 - k]
        t[fr.start:fr.stop] = ids.t[src.start:src.stop]
        seq[fr.start:fr.stop] = ids.seq[src.start:src.stop]
    return PositionIds(t, ids.h.copy(), ids.w.copy(), seq)


def shuffle_segment(ids: PositionIds, layout: TokenLayout, segment: str, seed: int) -> PositionIds:
    seg = layout.segment(segment)
    perm = Rng(seed).child("shuffle", segment).permutation(len(seg))
    index = np.arange(len(ids))
    index[seg.start:seg.stop] = seg.start + perm
    return ids.permuted(index)


def assign_position_ids(
    layout: TokenLayout,
    scheme: str = "default",
    segment: str | None = None,
    seed: int | None = None,
) -> PositionIds:
    ids = _default_ids(layout)
    if scheme == "default":
        return ids
    if scheme == "reversed_temporal":
        return reverse_temporal(ids, layout)
    if scheme == "shuffled":
        if segment not in ("video", "query") or seed is None:
            raise ValueError("shuffled position ids need segment in {video, query} and a seed")
        return shuffle_segment(ids, layout, segment, seed)
    raise ValueError(f"unknown position-id scheme {scheme!r}")


@dataclass(frozen=True)
class RotaryTable:
    """cos/sin factors for a set of tokens, laid out for a global half split."""

    cos: torch.Tensor
    sin: torch.Tensor

    def apply(self, x: torch.Tensor) -> torch.Tensor:
        half = x.shape[-1] // 2
        rotated = torch.cat([-x[..., half:], x[..., :half]], dim=-1)
        return x * self.cos.to(x.dtype) + rotated * self.sin.to(x.dtype)


def rotary_table(
    ids: PositionIds,
    mode: str,
    d_head: int,
    positions: Sequence[int] | np.ndarray | None = None,
    base: float = 10000.0,
) -> RotaryTable:
    """Rotation factors; dimension ``i`` is paired with ``i + d_head/2``.

    rotary_3d splits the ``d_head/2`` pairs into bands of ``d_head/4`` (t),
    ``d_head/8`` (h) and ``d_head/8`` (w) pairs, i.e. 8/4/4 dimensions for a
    16-dim head. Each band has its own inverse-frequency ladder
    ``base^(-2j/band_dims)``.
    """
    sel = slice(None) if positions is None else np.asarray(positions, dtype=np.int64)
    if mode == "rotary_1d":
        bands = [(ids.seq, d_head // 2)]
    elif mode == "rotary_3d":
        bands = [(ids.t, d_head // 4), (ids.h, d_head // 8), (ids.w, d_head // 8)]
    else:
        raise ValueError(f"no rotary table for pe mode {mode!r}")
    angles = []
    for coord, pairs in bands:
        inv_freq = base ** (-torch.arange(pairs, dtype=torch.float64) / pairs)
        pos = torch.from_numpy(np.ascontiguousarray(coord[sel])).to(torch.float64)
        angles.append(pos.unsqueeze(-1) * inv_freq)
    ang = torch.cat(angles, dim=-1)
    ang = torch.cat([ang, ang], dim=-1)
    return RotaryTable(ang.cos(), ang.sin())


def apply_pe(
    x: torch.Tensor,
    ids: PositionIds | None,
    mode: str,
    positions: Sequence[int] | np.ndarray | None = None,
    base: float = 10000.0,
) -> torch.Tensor:
    """Rotate the last axis of ``x`` (one head's queries or keys) by token position.

    ``x`` is ``(..., n, d_head)``; ``positions`` selects which tokens of ``ids``
    the ``n`` rows belong to (all of them by default).
    """
    if mode == "none" or ids is None:
        return x
    if mode not in PE_MODES:
        raise ValueError(f"unknown pe mode {mode!r}")
    return rotary_table(ids, mode, x.shape[-1], positions, base).apply(x)


@dataclass(frozen=True)
class HookPoint:
    """Callback ``fn(value, ctx) -> value | None`` run at one site of one layer.

    Sites: ``pre_pe`` sees a :class:`PreRotary` (queries, keys, and the position
    ids about to be applied; ids ``None`` disables PE at that layer);
    ``post_scores`` sees the masked score tensor ``(B, heads, n_q, n_k)`` right
    before softmax; ``post_attention`` sees the attention weights. Returning
    ``None`` leaves the value unchanged.
    """

    layer: int
    site: str
    callback: Callable

    def __post_init__(self):
        if self.site not in HOOK_SITES:
            raise ValueError(f"hook site must be one of {HOOK_SITES}, got {self.site!r}")


@dataclass
class PreRotary:
    q: torch.Tensor
    k: torch.Tensor
    ids: PositionIds | None


@dataclass(frozen=True)
class HookContext:
    layer: int
    site: str
    query_positions: torch.Tensor
    key_positions: torch.Tensor
    layout: TokenLayout


class KVCache:
    """Per-layer keys/values of live tokens, with a segment-and-layer eviction policy.

    ``evict`` maps a layer to token positions that are never retained at that
    layer: their keys/values are dropped on write, so no later query at that
    layer can score against them. Byte figures are per sequence.
    """

    def __init__(
        self,
        n_layers: int,
        d_model: int,
        bytes_per_value: int = 4,
        evict: dict[int, Iterable[int]] | None = None,
    ):
        self.n_layers = n_layers
        self.d_model = d_model
        self.bytes_per_value = bytes_per_value
        self.policy = {int(l): frozenset(int(p) for p in ps) for l, ps in (evict or {}).items()}
        self.keys: list[torch.Tensor | None] = [None] * n_layers
        self.values: list[torch.Tensor | None] = [None] * n_layers
        self.positions = [torch.zeros(0, dtype=torch.long) for _ in range(n_layers)]
        self.length = 0
        self.eviction_log: list[tuple[int, int]] = []

    @classmethod
    def for_model(cls, model: "TransformerLab", evict=None) -> "KVCache":
        bpv = torch.finfo(model.param_dtype).bits // 8
        return cls(model.config.n_layers, model.config.d_model, bpv, evict)

    def write(self, layer: int, positions: torch.Tensor, k: torch.Tensor, v: torch.Tensor):
        """Append a chunk's keys/values ``(B, heads, n, d_head)`` and return the live set."""
        banned = self.policy.get(layer)
        if banned:
            drop = torch.tensor([int(p) in banned for p in positions.tolist()], dtype=torch.bool)
            for p in positions[drop].tolist():
                self.eviction_log.append((layer, p))
            keep = ~drop
            positions, k, v = positions[keep], k[..., keep, :], v[..., keep, :]
        if self.keys[layer] is None:
            self.keys[layer], self.values[layer] = k, v
        else:
            self.keys[layer] = torch.cat([self.keys[layer], k], dim=-2)
            self.values[layer] = torch.cat([self.values[layer], v], dim=-2)
        self.positions[layer] = torch.cat([self.positions[layer], positions])
        return self.keys[layer], self.values[layer], self.positions[layer]

    def evict(self, layer: int, positions: Iterable[int]):
        gone = set(int(p) for p in positions)
        have = self.positions[layer]
        keep = torch.tensor([int(p) not in gone for p in have.tolist()], dtype=torch.bool)
        for p in have[~keep].tolist():
            self.eviction_log.append((layer, p))
        self.positions[layer] = have[keep]
        if self.keys[layer] is not None:
            self.keys[layer] = self.keys[layer][..., keep, :]
            self.values[layer] = self.values[layer][..., keep, :]

    def live(self, layer: int) -> np.ndarray:
        """Liveness flag per processed token at ``layer``."""
        flags = np.zeros(self.length, dtype=bool)
        flags[self.positions[layer].numpy()] = True
        return flags

    def live_count(self, layer: int) -> int:
        return int(self.positions[layer].numel())

    def nbytes(self, layer: int) -> int:
        return self.live_count(layer) * 2 * self.d_model * self.bytes_per_value

    def total_bytes(self) -> int:
        return sum(self.nbytes(l) for l in range(self.n_layers))


@dataclass
class ForwardOutput:
    logits: torch.Tensor
    activations: dict = field(default_factory=dict)


class Block(nn.Module):
    def __init__(self, config: ModelConfig, rng: Rng, dtype: torch.dtype):
        super().__init__()
        D, F = config.d_model, config.d_ffn
        resid_scale = 1.0 / math.sqrt(2 * config.n_layers)

        def p(shape, std):
            return nn.Parameter(torch.tensor(rng.normal(std, shape), dtype=dtype))

        def const(shape, value):
            return nn.Parameter(torch.full(shape, value, dtype=dtype))

        self.ln1_g, self.ln1_b = const((D,), 1.0), const((D,), 0.0)
        self.wq = p((D, D), D**-0.5)
        self.wk = p((D, D), D**-0.5)
        self.wv = p((D, D), D**-0.5)
        self.wo = p((D, D), D**-0.5 * resid_scale)
        self.ln2_g, self.ln2_b = const((D,), 1.0), const((D,), 0.0)
        self.w1 = p((D, F), D**-0.5)
        self.b1 = const((F,), 0.0)
        self.w2 = p((F, D), F**-0.5 * resid_scale)
        self.b2 = const((D,), 0.0)


class TransformerLab(nn.Module):
    """Pre-norm decoder with rotary PE, hook sites and a KV cache.

    Weights are stored at ``param_dtype`` (float32 by default); activations are
    computed at ``compute_dtype`` (float64 by default). Cached keys/values are
    rounded to ``param_dtype`` on every path, cached or not, so both paths see
    identical numbers.
    """

    def __init__(self, config: ModelConfig, seed: int = 0, dtype: torch.dtype = torch.float32):
        super().__init__()
        self.config = config
        self.seed = seed
        self.param_dtype = dtype
        self.compute_dtype = torch.float64
        rng = Rng(seed).child("init")
        D, V = config.d_model, config.vocab_size
        self.embed = nn.Parameter(torch.tensor(rng.normal(1.0, (V, D)), dtype=dtype))
        self.blocks = nn.ModuleList(Block(config, rng, dtype) for _ in range(config.n_layers))
        self.lnf_g = nn.Parameter(torch.ones(D, dtype=dtype))
        self.lnf_b = nn.Parameter(torch.zeros(D, dtype=dtype))
        self.unembed = nn.Parameter(torch.tensor(rng.normal(D**-0.5, (D, V)), dtype=dtype))

    def layout(self, instruction_len: int, query_len: int) -> TokenLayout:
        return build_layout(self.config, instruction_len, query_len)

    def new_cache(self, evict=None) -> KVCache:
        return KVCache.for_model(self, evict)

    def forward(
        self,
        tokens: torch.Tensor,
        layout: TokenLayout,
        ids: PositionIds | None = None,
        hooks: Sequence[HookPoint] = (),
        cache: KVCache | None = None,
        record: Iterable = (),
    ) -> ForwardOutput:
        """Run a chunk of tokens.

        Without a cache the chunk is the whole sequence from position 0. With a
        cache the chunk continues at ``cache.length`` and the cache is extended.
        ``record`` lists sites (all layers) or ``(layer, site)`` pairs whose
        values are copied into ``activations``.
        """
        cfg = self.config
        cd = self.compute_dtype
        squeeze = tokens.dim() == 1
        if squeeze:
            tokens = tokens.unsqueeze(0)
        tokens = tokens.long()
        if tokens.numel() and (int(tokens.max()) >= cfg.vocab_size or int(tokens.min()) < 0):
            raise ValueError(f"token ids must lie in [0, {cfg.vocab_size})")
        if ids is None:
            ids = assign_position_ids(layout)
        if len(ids) != layout.total_len:
            raise LayoutError(f"position ids cover {len(ids)} tokens, layout has {layout.total_len}")
        if cache is None:
            cache = self.new_cache()
        start = cache.length
        B, n = tokens.shape
        if start + n > layout.total_len:
            raise LayoutError(f"chunk [{start}, {start + n}) runs past layout length {layout.total_len}")
        qpos = torch.arange(start, start + n)

        by_site: dict[tuple[int, str], list[HookPoint]] = {}
        for hp in hooks:
            if not 0 <= hp.layer < cfg.n_layers:
                raise ValueError(f"hook layer {hp.layer} outside [0, {cfg.n_layers})")
            by_site.setdefault((hp.layer, hp.site), []).append(hp)
        record = set(record)
        acts: dict = {}

        def wanted(layer, site):
            return site in record or (layer, site) in record

        H, dh = cfg.n_heads, cfg.d_head
        scale = 1.0 / math.sqrt(dh)
        tables: dict = {}  # id(PositionIds) -> (ids, table); ids kept alive so ids are not reused
        x = torch.nn.functional.embedding(tokens, self.embed).to(cd)
        for l, blk in enumerate(self.blocks):
            h = layer_norm(x, blk.ln1_g, blk.ln1_b, accum=cd)
            q = matmul(h, blk.wq, accum=cd).view(B, n, H, dh).transpose(1, 2)
            k = matmul(h, blk.wk, accum=cd).view(B, n, H, dh).transpose(1, 2)
            v = matmul(h, blk.wv, accum=cd).view(B, n, H, dh).transpose(1, 2)

            pre = PreRotary(q, k, ids if cfg.pe_mode != "none" else None)
            for hp in by_site.get((l, "pre_pe"), ()):
                ctx = HookContext(l, "pre_pe", qpos, qpos, layout)
                out = hp.callback(pre, ctx)
                if out is not None:
                    pre = out
            if wanted(l, "pre_pe"):
                acts[(l, "pre_pe")] = PreRotary(pre.q.detach().clone(), pre.k.detach().clone(), pre.ids)
            q, k = pre.q, pre.k
            if cfg.pe_mode != "none" and pre.ids is not None:
                key = id(pre.ids)
                if key not in tables:
                    tables[key] = (pre.ids, rotary_table(pre.ids, cfg.pe_mode, dh, qpos.numpy(), cfg.rope_base))
                table = tables[key][1]
                q, k = table.apply(q), table.apply(k)
            q = q * scale
            k = k.to(self.param_dtype).to(cd)
            v = v.to(self.param_dtype).to(cd)

            K, Vv, kpos = cache.write(l, qpos, k, v)
            scores = matmul(q, K.transpose(-1, -2), accum=cd)
            causal = torch.zeros(n, kpos.numel(), dtype=cd).masked_fill(
                kpos.unsqueeze(0) > qpos.unsqueeze(1), NEG_INF
            )
            scores = scores + causal
            for hp in by_site.get((l, "post_scores"), ()):
                out = hp.callback(scores, HookContext(l, "post_scores", qpos, kpos, layout))
                if out is not None:
                    scores = out
            if wanted(l, "post_scores"):
                acts[(l, "post_scores")] = scores.detach().clone()
            try:
                att = masked_softmax(scores, accum=cd)
            except FullyMaskedRowError as err:
                toks = [int(qpos[r]) for r in err.rows]
                raise FullyMaskedRowError(
                    f"layer {l}: token(s) {toks} have no attendable source after masking", toks
                ) from None
            for hp in by_site.get((l, "post_attention"), ()):
                out = hp.callback(att, HookContext(l, "post_attention", qpos, kpos, layout))
                if out is not None:
                    att = out
            if wanted(l, "post_attention"):
                acts[(l, "post_attention")] = (att.detach().clone(), kpos.clone())
            a = matmul(att, Vv, accum=cd).transpose(1, 2).reshape(B, n, cfg.d_model)
            x = x + matmul(a, blk.wo, accum=cd)
            h = layer_norm(x, blk.ln2_g, blk.ln2_b, accum=cd)
            f = torch.nn.functional.gelu(matmul(h, blk.w1, accum=cd) + blk.b1.to(cd))
            x = x + matmul(f, blk.w2, accum=cd) + blk.b2.to(cd)
        cache.length = start + n
        x = layer_norm(x, self.lnf_g, self.lnf_b, accum=cd)
        logits = matmul(x, self.unembed, accum=cd)
        if squeeze:
            logits = logits.squeeze(0)
        return ForwardOutput(logits, acts)

    def final_logits(self, tokens, layout, ids=None, hooks=(), cache=None) -> torch.Tensor:
        return self(tokens, layout, ids, hooks, cache).logits[..., -1, :]


def next_token_distribution(logits: torch.Tensor) -> torch.Tensor:
    """Softmax over the vocabulary (last axis), in float64."""
    return masked_softmax(logits.to(torch.float64))


def save_checkpoint(model: TransformerLab, path: str | Path, extra: dict | None = None):
    """Write ``TPLAB01`` + config block + little-endian float32 weight blocks."""
    header = {"format_version": 1, "config": model.config.to_dict(), "seed": model.seed, "extra": extra or {}}
    cfg_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    params = list(model.named_parameters())
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(cfg_bytes)))
        fh.write(cfg_bytes)
        fh.write(struct.pack("<I", len(params)))
        for name, p in params:
            nb = name.encode("utf-8")
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<B", p.dim()))
            fh.write(struct.pack(f"<{p.dim()}I", *p.shape))
            fh.write(p.detach().to(torch.float32).numpy().astype("<f4").tobytes())


def read_checkpoint_header(path: str | Path) -> dict:
    with open(path, "rb") as fh:
        if fh.read(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: not a TPLAB01 checkpoint")
        (n,) = struct.unpack("<I", fh.read(4))
        return json.loads(fh.read(n).decode("utf-8"))


def load_checkpoint(path: str | Path, expect: ModelConfig | None = None) -> tuple[TransformerLab, dict]:
    """Load a checkpoint; a config differing from ``expect`` is an error."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    try:
        return _read_checkpoint(path, expect)
    except (struct.error, json.JSONDecodeError, UnicodeDecodeError, KeyError, TypeError) as err:
        raise CheckpointError(f"{path}: corrupt checkpoint ({err})") from None


def _read_checkpoint(path: Path, expect: ModelConfig | None) -> tuple[TransformerLab, dict]:
    with open(path, "rb") as fh:
        if fh.read(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: bad magic, not a TPLAB01 checkpoint")
        (n,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(n).decode("utf-8"))
        if header.get("format_version") != 1:
            raise CheckpointError(f"{path}: unsupported format version {header.get('format_version')}")
        config = ModelConfig.from_dict(header["config"])
        if expect is not None and expect != config:
            raise CheckpointError(f"{path}: checkpoint config {config} does not match expected {expect}")
        model = TransformerLab(config, seed=header.get("seed", 0))
        params = dict(model.named_parameters())
        (count,) = struct.unpack("<I", fh.read(4))
        if count != len(params):
            raise CheckpointError(f"{path}: {count} weight blocks, model declares {len(params)}")
        with torch.no_grad():
            for name, p in params.items():
                (ln,) = struct.unpack("<H", fh.read(2))
                got = fh.read(ln).decode("utf-8")
                (nd,) = struct.unpack("<B", fh.read(1))
                shape = struct.unpack(f"<{nd}I", fh.read(4 * nd))
                if got != name or tuple(shape) != tuple(p.shape):
                    raise CheckpointError(f"{path}: block {got}{shape} does not match {name}{tuple(p.shape)}")
                size = int(np.prod(shape)) if nd else 1
                raw = fh.read(4 * size)
                if len(raw) != 4 * size:
                    raise CheckpointError(f"{path}: truncated weight block {name}")
                p.copy_(torch.from_numpy(np.frombuffer(raw, dtype="<f4").reshape(shape).copy()))
        if fh.read(1):
            raise CheckpointError(f"{path}: trailing bytes after weight blocks")
    return model, header
