"""Dense kernels the model is assembled from.

Matrices are plain ``torch.Tensor`` objects; leading batch dimensions are
allowed everywhere and the last two dimensions are the matrix. Storage is
whatever dtype the caller holds (float32 for weights), reductions run in
float64.
"""

from __future__ import annotations

import numpy as np
import torch

NEG_INF = float("-inf")
ACCUM_DTYPE = torch.float64


class ShapeError(ValueError):
    pass


class FullyMaskedRowError(ValueError):
    """Raised when a softmax row has no attendable entry.

    ``rows`` holds the offending row indices (within the last-but-one axis).
    """

    def __init__(self, message: str, rows=()):
        super().__init__(message)
        self.rows = tuple(int(r) for r in rows)


def _as_accum(x: torch.Tensor, dtype: torch.dtype = ACCUM_DTYPE) -> torch.Tensor:
    return x if x.dtype == dtype else x.to(dtype)


def matmul(
    a: torch.Tensor,
    b: torch.Tensor,
    out_dtype: torch.dtype | None = None,
    accum: torch.dtype = ACCUM_DTYPE,
) -> torch.Tensor:
    if a.dim() < 2 or b.dim() < 2:
        raise ShapeError(f"matmul needs matrices, got shapes {tuple(a.shape)} and {tuple(b.shape)}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(
            f"matmul dimension mismatch: {tuple(a.shape)} x {tuple(b.shape)} "
            f"(a.cols={a.shape[-1]} != b.rows={b.shape[-2]})"
        )
    out = _as_accum(a, accum) @ _as_accum(b, accum)
    return out if out_dtype is None else out.to(out_dtype)


def causal_mask(n_queries: int, n_keys: int | None = None, offset: int = 0) -> torch.Tensor:
    """Additive causal mask: query ``offset + r`` may see keys ``0 .. offset + r``."""
    n_keys = n_queries + offset if n_keys is None else n_keys
    q = torch.arange(n_queries).unsqueeze(1) + offset
    k = torch.arange(n_keys).unsqueeze(0)
    mask = torch.zeros(n_queries, n_keys, dtype=ACCUM_DTYPE)
    return mask.masked_fill(k > q, NEG_INF)


def masked_softmax(
    scores: torch.Tensor,
    mask: torch.Tensor | None = None,
    accum: torch.dtype = ACCUM_DTYPE,
) -> torch.Tensor:
    """Row softmax of ``scores + mask`` with row-max stabilisation.

    Entries whose combined score is -inf get exactly zero weight. A row with
    no finite entry raises :class:`FullyMaskedRowError`.
    """
    x = _as_accum(scores, accum)
    if mask is not None:
        try:
            fits = torch.broadcast_shapes(mask.shape, scores.shape) == scores.shape
        except RuntimeError:
            fits = False
        if not fits:
            raise ShapeError(f"mask shape {tuple(mask.shape)} does not fit scores {tuple(scores.shape)}")
        x = x + mask.to(x.dtype)
    if x.shape[-1] == 0:
        raise FullyMaskedRowError("softmax over an empty row")
    row_max = x.amax(dim=-1, keepdim=True)
    dead = torch.isneginf(row_max)
    if bool(dead.any()):
        rows = torch.nonzero(dead.squeeze(-1).reshape(-1, x.shape[-2]).any(dim=0)).flatten().tolist()
        raise FullyMaskedRowError(f"fully masked softmax row(s): {rows}", rows)
    # fused softmax subtracts the row max before exponentiating
    return torch.softmax(x, dim=-1)


def layer_norm(
    x: torch.Tensor,
    gain: torch.Tensor,
    bias: torch.Tensor,
    eps: float = 1e-5,
    accum: torch.dtype = ACCUM_DTYPE,
) -> torch.Tensor:
    if gain.shape[-1] != x.shape[-1] or bias.shape[-1] != x.shape[-1]:
        raise ShapeError(
            f"layer_norm: gain {tuple(gain.shape)} / bias {tuple(bias.shape)} vs features {x.shape[-1]}"
        )
    if eps <= 0:
        raise ValueError("eps must be positive")
    dtype = x.dtype
    x = _as_accum(x, accum)
    y = torch.nn.functional.layer_norm(
        x, x.shape[-1:], _as_accum(gain, accum), _as_accum(bias, accum), eps
    )
    return y.to(dtype)


def softmax(logits: torch.Tensor) -> torch.Tensor:
    return masked_softmax(logits)


class Rng:
    """Seeded generator (PCG64) shared by weight init, data and shuffles.

    PCG64 streams are specified bit-for-bit by numpy, so equal seeds give equal
    draws on every platform.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFF_FFFF_FFFF_FFFF
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def child(self, *key: int | str) -> "Rng":
        """Independent generator derived from this seed and ``key``."""
        words = [self.seed]
        for k in key:
            words.append(k if isinstance(k, int) else int.from_bytes(k.encode(), "little") % (1 << 63))
        ss = np.random.SeedSequence(words)
        child = Rng.__new__(Rng)
        child.seed = int(ss.generate_state(1, dtype=np.uint64)[0])
        child._gen = np.random.Generator(np.random.PCG64(ss))
        return child

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size=size)

    def random(self, size=None):
        return self._gen.random(size)

    def normal(self, scale=1.0, size=None):
        return self._gen.normal(0.0, scale, size)

    def permutation(self, n):
        return self._gen.permutation(n)

    def choice(self, a, size=None, replace=True):
        return self._gen.choice(a, size=size, replace=replace)

    def shuffle(self, x):
        self._gen.shuffle(x)
