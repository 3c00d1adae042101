import math
import struct

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from tplab.model import (
    CheckpointError,
    HookPoint,
    KVCache,
    LayoutError,
    ModelConfig,
    PositionIds,
    PreRotary,
    TransformerLab,
    apply_pe,
    assign_position_ids,
    build_layout,
    load_checkpoint,
    read_checkpoint_header,
    reverse_temporal,
    save_checkpoint,
)
from tplab.numerics import FullyMaskedRowError

SMALL = dict(n_layers=2, d_model=16, n_heads=2, d_head=8, vocab_size=16, frame_grid=(2, 2, 3))


def small(pe_mode="rotary_3d", **kw):
    cfg = ModelConfig(**{**SMALL, "pe_mode": pe_mode, **kw})
    return TransformerLab(cfg, seed=kw.get("n_layers", 2)), build_layout(cfg, 2, 3)


def tokens(n, batch=2, seed=0, vocab=16):
    return torch.from_numpy(np.random.default_rng(seed).integers(0, vocab, size=(batch, n)))


# ---------------------------------------------------------------- config and layout


def test_config_validation():
    with pytest.raises(ValueError, match="d_model"):
        ModelConfig(d_model=60)
    with pytest.raises(ValueError, match="rotary_3d"):
        ModelConfig(d_model=12, n_heads=1, d_head=12)
    with pytest.raises(ValueError, match="pe_mode"):
        ModelConfig(pe_mode="alibi")
    assert ModelConfig().bands() == (8, 4, 4)
    assert ModelConfig.from_dict(ModelConfig().to_dict()) == ModelConfig()


def test_layout_is_frame_major_then_row_major():
    cfg = ModelConfig(frame_grid=(3, 2, 4))
    lay = build_layout(cfg, 2, 5)
    assert lay.total_len == 2 + 3 * 8 + 5
    assert lay.frames[1] == range(10, 18)
    assert lay.index_of(1, 1, 2) == 2 + 8 + 4 + 2
    for i in lay.visual:
        assert lay.index_of(*lay.cell_of(i)) == i
    assert lay.frame_of(0) is None and lay.frame_of(25) == 2
    assert lay.segment("query") == range(26, 31) and lay.last == 30
    with pytest.raises(LayoutError):
        build_layout(cfg, 0, 1)
    with pytest.raises(LayoutError):
        lay.cell_of(0)


def test_default_position_ids():
    cfg = ModelConfig(frame_grid=(3, 2, 4))
    lay = build_layout(cfg, 2, 3)
    ids = assign_position_ids(lay)
    assert len(ids) == lay.total_len
    for i in lay.instruction:
        assert ids.t[i] == ids.h[i] == ids.w[i] == ids.seq[i] == i
    for i in lay.visual:
        k, r, c = lay.cell_of(i)
        assert (ids.t[i], ids.h[i], ids.w[i]) == (2 + k, 2 + r, 2 + c)
    q = [int(ids.t[i]) for i in lay.query]
    assert q == [6, 7, 8] and all(ids.t[i] == ids.h[i] == ids.w[i] for i in lay.query)
    assert ids.seq.tolist() == list(range(lay.total_len))


def test_reverse_temporal_swaps_frame_times_only():
    lay = build_layout(ModelConfig(frame_grid=(3, 2, 2)), 2, 2)
    ids = assign_position_ids(lay)
    rev = reverse_temporal(ids, lay)
    assert [int(rev.t[f.start]) for f in lay.frames] == [4, 3, 2]
    assert np.array_equal(rev.h, ids.h) and np.array_equal(rev.w, ids.w)
    assert reverse_temporal(rev, lay) == ids
    assert assign_position_ids(lay, "reversed_temporal") == rev


def test_shuffled_ids_are_seeded_and_confined_to_segment():
    lay = build_layout(ModelConfig(frame_grid=(2, 2, 2)), 2, 4)
    a = assign_position_ids(lay, "shuffled", "query", 3)
    assert a == assign_position_ids(lay, "shuffled", "query", 3)
    ids = assign_position_ids(lay)
    outside = [i for i in range(lay.total_len) if i not in lay.query]
    assert np.array_equal(a.t[outside], ids.t[outside])
    assert sorted(a.t[list(lay.query)]) == sorted(ids.t[list(lay.query)])
    with pytest.raises(ValueError):
        assign_position_ids(lay, "shuffled", "instruction", 3)


# ---------------------------------------------------------------- rotary


def rotate_oracle(x, angles):
    """Rotate pair (i, i + d/2) by angles[i] using explicit 2x2 rotations."""
    d = len(x)
    out = list(x)
    for i, a in enumerate(angles):
        c, s = math.cos(a), math.sin(a)
        u, v = x[i], x[i + d // 2]
        out[i], out[i + d // 2] = u * c - v * s, u * s + v * c
    return out


def one_token_ids(t, h=0, w=0, seq=None):
    arr = lambda v: np.array([v], dtype=np.int64)
    return PositionIds(arr(t), arr(h), arr(w), arr(t if seq is None else seq))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 500), st.integers(0, 500), st.integers(0, 500), st.integers(0, 1000))
def test_rotary_3d_matches_explicit_rotation(t, h, w, seed):
    d = 16
    x = np.random.default_rng(seed).normal(size=d)
    got = apply_pe(torch.from_numpy(x).view(1, d), one_token_ids(t, h, w), "rotary_3d")[0].tolist()
    freqs = lambda pairs: [10000.0 ** (-j / pairs) for j in range(pairs)]
    angles = [t * f for f in freqs(4)] + [h * f for f in freqs(2)] + [w * f for f in freqs(2)]
    assert got == pytest.approx(rotate_oracle(x.tolist(), angles), abs=1e-9)


def test_rotary_1d_uses_sequence_position_and_is_identity_at_zero():
    x = torch.randn(1, 8, dtype=torch.float64)
    assert torch.equal(apply_pe(x, one_token_ids(0), "rotary_1d"), x)
    got = apply_pe(x, one_token_ids(t=0, seq=3), "rotary_1d")[0].tolist()
    angles = [3 * 10000.0 ** (-j / 4) for j in range(4)]
    assert got == pytest.approx(rotate_oracle(x[0].tolist(), angles), abs=1e-12)


def test_pe_none_and_missing_ids_are_identity():
    x = torch.randn(3, 8)
    ids = PositionIds(*(np.arange(3) for _ in range(4)))
    assert apply_pe(x, ids, "none") is x
    assert apply_pe(x, None, "rotary_3d") is x


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 300), st.integers(0, 300), st.integers(-200, 200), st.integers(0, 1000))
def test_rotary_1d_scores_depend_on_offset_only(p1, p2, shift, seed):
    if min(p1 + shift, p2 + shift) < 0:
        shift = -min(p1, p2)
    rng = np.random.default_rng(seed)
    q, k = (torch.from_numpy(rng.normal(size=(1, 16))) for _ in range(2))

    def score(a, b):
        return float(apply_pe(q, one_token_ids(a), "rotary_1d") @ apply_pe(k, one_token_ids(b), "rotary_1d").T)

    assert score(p1 + shift, p2 + shift) == pytest.approx(score(p1, p2), abs=1e-5)


def test_rotary_3d_bands_are_driven_by_their_own_axis():
    x = torch.randn(1, 16, dtype=torch.float64)
    base = apply_pe(x, one_token_ids(0, 0, 0), "rotary_3d")
    moved_h = apply_pe(x, one_token_ids(0, 5, 0), "rotary_3d")
    changed = (moved_h != base)[0].nonzero().flatten().tolist()
    # h band: pairs 4..5 -> dims 4,5 and 12,13
    assert changed == [4, 5, 12, 13]
    moved_t = apply_pe(x, one_token_ids(5, 0, 0), "rotary_3d")
    assert (moved_t != base)[0].nonzero().flatten().tolist() == [0, 1, 2, 3, 8, 9, 10, 11]


def test_rotation_preserves_norm():
    x = torch.randn(5, 16, dtype=torch.float64)
    ids = PositionIds(*(np.arange(5) * 7 for _ in range(4)))
    assert torch.allclose(apply_pe(x, ids, "rotary_3d").norm(dim=-1), x.norm(dim=-1))


# ---------------------------------------------------------------- forward


def test_forward_shapes_and_vocab_check():
    m, lay = small()
    out = m(tokens(lay.total_len), lay).logits
    assert out.shape == (2, lay.total_len, 16) and out.dtype == torch.float64
    assert m(tokens(lay.total_len)[0], lay).logits.shape == (lay.total_len, 16)
    with pytest.raises(ValueError, match="token ids"):
        m(torch.full((1, lay.total_len), 16), lay)


@pytest.mark.parametrize("pe_mode", ["none", "rotary_1d", "rotary_3d"])
def test_causality(pe_mode):
    m, lay = small(pe_mode)
    x = tokens(lay.total_len, 1)[0]
    with torch.no_grad():
        ref = m(x, lay).logits
        for j in range(lay.total_len):
            y = x.clone()
            y[j] = (y[j] + 3) % 16
            assert torch.equal(m(y, lay).logits[:j], ref[:j])


@pytest.mark.parametrize("chunks", [[1] * 19, [5, 7, 7], [18, 1]])
def test_cache_matches_full_forward(chunks):
    m, lay = small()
    x = tokens(lay.total_len, 3, seed=4)
    with torch.no_grad():
        full = m(x, lay).logits
        cache = m.new_cache()
        parts, s = [], 0
        for c in chunks:
            parts.append(m(x[:, s:s + c], lay, cache=cache).logits)
            s += c
    assert (torch.cat(parts, 1) - full).abs().max() <= 1e-5
    assert cache.length == lay.total_len
    with pytest.raises(LayoutError):
        m(x[:, :1], lay, cache=cache)


def test_one_layer_no_pe_is_context_permutation_invariant():
    m, lay = small("none", n_layers=1)
    x = tokens(lay.total_len, 4, seed=5)
    perm = torch.cat([torch.randperm(lay.total_len - 1, generator=torch.Generator().manual_seed(0)), torch.tensor([lay.total_len - 1])])
    with torch.no_grad():
        a, b = m(x, lay).logits[:, -1], m(x[:, perm], lay).logits[:, -1]
    assert (a - b).abs().max() <= 1e-5


def test_two_layers_break_permutation_invariance():
    m, lay = small("none", n_layers=2)
    x = tokens(lay.total_len, 4, seed=5)
    perm = torch.cat([torch.arange(lay.total_len - 1).flip(0), torch.tensor([lay.total_len - 1])])
    with torch.no_grad():
        a, b = m(x, lay).logits[:, -1], m(x[:, perm], lay).logits[:, -1]
    assert (a - b).abs().max() > 1e-3


def test_same_seed_same_weights_and_outputs():
    a, lay = small()
    b, _ = small()
    x = tokens(lay.total_len)
    with torch.no_grad():
        assert m_bytes(a, x, lay) == m_bytes(b, x, lay)
    c = TransformerLab(a.config, seed=99)
    assert not torch.equal(c.embed, a.embed)


def m_bytes(m, x, lay):
    return m(x, lay).logits.numpy().tobytes()


def test_zero_hooks_and_noop_hooks_are_bit_identical():
    m, lay = small()
    x = tokens(lay.total_len)
    noop = [HookPoint(l, s, lambda v, ctx: None) for l in range(2) for s in ("pre_pe", "post_scores", "post_attention")]
    with torch.no_grad():
        assert m_bytes(m, x, lay) == m(x, lay, hooks=noop).logits.numpy().tobytes()


def test_pre_pe_hook_can_drop_position_ids():
    m, lay = small()
    x = tokens(lay.total_len)
    seen = []

    def drop(pre, ctx):
        seen.append((ctx.layer, pre.ids is not None))
        return PreRotary(pre.q, pre.k, None)

    with torch.no_grad():
        changed = m(x, lay, hooks=[HookPoint(0, "pre_pe", drop)]).logits
        m_none = TransformerLab(ModelConfig(**{**SMALL, "pe_mode": "none"}), seed=2)
        m_none.load_state_dict(m.state_dict())
        plain = m_none(x, lay).logits
    assert seen == [(0, True)]
    assert not torch.equal(changed, m(x, lay).logits)
    assert not torch.equal(changed, plain)  # layer 1 still rotates


def test_hook_site_validated():
    with pytest.raises(ValueError):
        HookPoint(0, "post_ffn", lambda v, c: v)


def test_fully_masked_row_reports_layer_and_token():
    m, lay = small()

    def kill(scores, ctx):
        scores = scores.clone()
        scores[..., 4, :] = float("-inf")
        return scores

    with pytest.raises(FullyMaskedRowError, match="layer 1") as info:
        m(tokens(lay.total_len), lay, hooks=[HookPoint(1, "post_scores", kill)])
    assert info.value.rows == (4,)


def test_record_collects_attention():
    m, lay = small()
    acts = m(tokens(lay.total_len), lay, record=[(1, "post_attention")]).activations
    att, kpos = acts[(1, "post_attention")]
    assert set(acts) == {(1, "post_attention")}
    assert torch.allclose(att.sum(-1), torch.ones(()).double())
    assert kpos.tolist() == list(range(lay.total_len))


# ---------------------------------------------------------------- cache


def test_kv_cache_accounting_and_eviction():
    m, lay = small()
    evict = {1: set(lay.visual)}
    cache = m.new_cache(evict)
    with torch.no_grad():
        m(tokens(lay.total_len), lay, cache=cache)
    n, v = lay.total_len, len(lay.visual)
    assert cache.live_count(0) == n and cache.live_count(1) == n - v
    assert cache.nbytes(1) == (n - v) * 2 * 16 * 4
    assert cache.total_bytes() == (2 * n - v) * 2 * 16 * 4
    assert sorted(p for l, p in cache.eviction_log) == list(lay.visual)
    assert cache.live(1).sum() == n - v and not cache.live(1)[lay.visual.start]
    cache.evict(0, [0, 1])
    assert cache.live_count(0) == n - 2 and cache.keys[0].shape[-2] == n - 2


def test_bytes_per_value_follows_parameter_dtype():
    cfg = ModelConfig(**SMALL)
    assert KVCache.for_model(TransformerLab(cfg, dtype=torch.float64)).bytes_per_value == 8
    assert KVCache.for_model(TransformerLab(cfg)).bytes_per_value == 4


# ---------------------------------------------------------------- checkpoints


def test_checkpoint_roundtrip(tmp_path):
    m, lay = small()
    p = tmp_path / "m.ckpt"
    save_checkpoint(m, p, {"task": "order"})
    raw = p.read_bytes()
    assert raw[:7] == b"TPLAB01"
    hdr_len = struct.unpack("<I", raw[7:11])[0]
    assert read_checkpoint_header(p)["extra"] == {"task": "order"}
    assert struct.unpack("<I", raw[11 + hdr_len:15 + hdr_len])[0] == len(list(m.parameters()))
    m2, header = load_checkpoint(p, expect=m.config)
    x = tokens(lay.total_len)
    with torch.no_grad():
        assert m_bytes(m, x, lay) == m_bytes(m2, x, lay)
    assert header["config"] == m.config.to_dict()


def test_checkpoint_errors(tmp_path):
    m, _ = small()
    p = tmp_path / "m.ckpt"
    save_checkpoint(m, p)
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "missing.ckpt")
    with pytest.raises(CheckpointError, match="does not match"):
        load_checkpoint(p, expect=ModelConfig(**{**SMALL, "n_layers": 3}))
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"NOTCKPT" + p.read_bytes()[7:])
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(bad)
    short = tmp_path / "short.ckpt"
    short.write_bytes(p.read_bytes()[:-10])
    with pytest.raises(CheckpointError):
        load_checkpoint(short)
    long = tmp_path / "long.ckpt"
    long.write_bytes(p.read_bytes() + b"\0")
    with pytest.raises(CheckpointError, match="trailing"):
        load_checkpoint(long)
    stub = tmp_path / "stub.ckpt"
    stub.write_bytes(b"TPLAB01\x05")
    with pytest.raises(CheckpointError):
        load_checkpoint(stub)
