import json
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from tplab.metrics import PerturbationResult, compute_pc, mean_pc


def dist(values):
    t = torch.tensor(values, dtype=torch.float64)
    return t / t.sum()


def test_pc_examples():
    base = torch.tensor([0.5, 0.5], dtype=torch.float64)
    pert = torch.tensor([0.8, 0.2], dtype=torch.float64)
    assert compute_pc(pert, base, 0) == pytest.approx(0.3)
    assert compute_pc(base, base, 1) == 0.0


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0.01, 10), min_size=2, max_size=8), st.integers(0, 10_000))
def test_pc_antisymmetric_and_bounded(weights, seed):
    rng = np.random.default_rng(seed)
    a = dist(weights)
    b = dist(rng.permutation(weights).tolist())
    g = int(rng.integers(len(weights)))
    assert compute_pc(a, b, g) == -compute_pc(b, a, g)
    assert -1.0 <= compute_pc(a, b, g) <= 1.0


def test_batched_pc_matches_per_sample():
    rng = np.random.default_rng(0)
    p = torch.softmax(torch.from_numpy(rng.normal(size=(5, 6))), -1)
    q = torch.softmax(torch.from_numpy(rng.normal(size=(5, 6))), -1)
    gt = torch.tensor([0, 1, 2, 3, 5])
    batched = compute_pc(p, q, gt)
    singles = [compute_pc(p[i], q[i], int(gt[i])) for i in range(5)]
    assert batched.tolist() == singles
    # mean is recomputed from raw distributions, not from any running total
    raw = [float(p[i, gt[i]]) - float(q[i, gt[i]]) for i in range(5)]
    assert mean_pc(batched) == pytest.approx(sum(raw) / 5, abs=1e-15)


def test_pc_rejects_bad_inputs():
    good = dist([1, 1, 1])
    with pytest.raises(ValueError, match="vocabulary"):
        compute_pc(good, good, 3)
    with pytest.raises(ValueError, match="vocabulary"):
        compute_pc(good, good, -1)
    with pytest.raises(ValueError, match="probability"):
        compute_pc(torch.tensor([0.5, 0.6, 0.0], dtype=torch.float64), good, 0)
    with pytest.raises(ValueError, match="shape"):
        compute_pc(dist([1, 1]), good, 0)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-1, 1), min_size=1, max_size=200), st.integers(0, 1000))
def test_mean_is_order_independent(values, seed):
    shuffled = list(np.random.default_rng(seed).permutation(values))
    assert abs(mean_pc(values) - mean_pc(shuffled)) <= 1e-9
    assert mean_pc(values) == pytest.approx(math.fsum(values) / len(values), abs=1e-15)


def test_mean_of_empty_batch_is_an_error():
    with pytest.raises(ValueError):
        mean_pc([])


def test_result_records_and_invariants():
    res = PerturbationResult("fig7_single_frame", "order", 3)
    res.add("0-1", 0, [0.1, -0.2])
    res.add("1-2", 1, torch.tensor([0.0, 0.0], dtype=torch.float64))
    assert res.values() == pytest.approx([-0.05, 0.0])
    recs = json.loads(res.to_json())
    assert recs[0] == {"recipe": "fig7_single_frame", "task": "order", "window": "0-1", "mean_pc": pytest.approx(-0.05), "n": 2}
    with pytest.raises(ValueError, match="sample counts"):
        res.add("2-3", 2, [0.0])
    with pytest.raises(ValueError, match="outside"):
        PerturbationResult("r", "t", 0).add("0-0", 0, [1.5])
