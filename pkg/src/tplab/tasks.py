"""Synthetic temporal tasks over symbol-grid "videos", a trainer and an evaluator.

Every sample is ``[instruction | T frames of H x W symbols | query]`` and is
answered by a single token predicted at the final position.

* ``direction`` - one object moves one cell per frame along a row or column,
  possibly entering or leaving the grid, and is visible in at least two
  frames; the answer is left/right/up/down.
* ``order`` - two event symbols appear in different frames (never the first)
  and then stay; each covers 1-3 cells so counting cells does not reveal
  which came first. The answer is the earlier symbol.
* ``yes_no`` - two event symbols each flash in one frame; the query asks
  "did X precede Y?". Reversing the frames flips the answer.
"""

from __future__ import annotations

import hashlib
import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from .interventions import InterventionSpec, run_distribution
from .metrics import compute_pc, mean_pc
from .model import ModelConfig, TokenLayout, TransformerLab, build_layout
from .numerics import Rng

KINDS = ("direction", "order", "yes_no")

INSTRUCTION = (1, 2)
BACKGROUND = tuple(range(3, 11))
OBJECTS = tuple(range(11, 15))
EVENTS = tuple(range(15, 23))
TASK_TOKEN = {"direction": 23, "order": 24, "yes_no": 25}
LEFT, RIGHT, UP, DOWN, YES, NO = 26, 27, 28, 29, 30, 31
NONE, ASK = 32, 33
VOCAB_USED = 34

ANSWERS = {
    "direction": (LEFT, RIGHT, UP, DOWN),
    "order": EVENTS,
    "yes_no": (YES, NO),
}
FLIPPED = {LEFT: RIGHT, RIGHT: LEFT, UP: DOWN, DOWN: UP, YES: NO, NO: YES}
TOKEN_NAMES = {LEFT: "left", RIGHT: "right", UP: "up", DOWN: "down", YES: "yes", NO: "no"}

INSTRUCTION_LEN = len(INSTRUCTION)
QUERY_LEN = 4
SPLITS = ("train", "eval")


class GridTooSmall(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"loss became {loss} at step {step}")
        self.step = step


def task_layout(config: ModelConfig) -> TokenLayout:
    return build_layout(config, INSTRUCTION_LEN, QUERY_LEN)


@dataclass(frozen=True, eq=False)
class SyntheticSample:
    kind: str
    frames: np.ndarray  # (T, H, W) symbol ids
    query: tuple[int, ...]
    answer: int
    instruction: tuple[int, ...] = INSTRUCTION

    def tokens(self) -> list[int]:
        return list(self.instruction) + self.frames.reshape(-1).tolist() + list(self.query)

    def __eq__(self, other):
        if not isinstance(other, SyntheticSample):
            return NotImplemented
        return (
            self.kind == other.kind
            and np.array_equal(self.frames, other.frames)
            and self.query == other.query
            and self.answer == other.answer
            and self.instruction == other.instruction
        )

    def reversed(self) -> "SyntheticSample":
        """Frames in reverse order, with the answer the reversed clip implies."""
        if self.kind == "order":
            raise ValueError("reversing an order sample turns appearances into disappearances; no label defined")
        return SyntheticSample(self.kind, self.frames[::-1].copy(), self.query, FLIPPED[self.answer], self.instruction)

    def to_record(self) -> dict:
        return {
            "kind": self.kind,
            "frames": self.frames.tolist(),
            "instruction": list(self.instruction),
            "query": list(self.query),
            "answer": int(self.answer),
        }

    @classmethod
    def from_record(cls, rec: dict) -> "SyntheticSample":
        return cls(
            rec["kind"],
            np.asarray(rec["frames"], dtype=np.int64),
            tuple(rec["query"]),
            int(rec["answer"]),
            tuple(rec.get("instruction", INSTRUCTION)),
        )


def _split_of(tokens: list[int]) -> str:
    digest = hashlib.blake2b(np.asarray(tokens, dtype=np.int64).tobytes(), digest_size=8).digest()
    return SPLITS[digest[0] & 1]


def _background(rng: Rng, grid) -> np.ndarray:
    T, H, W = grid
    still = rng.choice(BACKGROUND, size=(H, W))
    return np.repeat(still[None], T, axis=0).astype(np.int64)


def _direction(rng: Rng, grid, answer: int) -> SyntheticSample:
    T, H, W = grid
    frames = _background(rng, grid)
    obj = int(rng.choice(OBJECTS))
    horizontal = answer in (LEFT, RIGHT)
    step = 1 if answer in (RIGHT, DOWN) else -1
    length, across = (W, H) if horizontal else (H, W)
    # the object may enter or leave the grid but is visible in >= 2 frames
    starts = [p for p in range(-T, length + T)
              if sum(0 <= p + step * k < length for k in range(T)) >= 2]
    p0, lane = int(rng.choice(starts)), int(rng.integers(across))
    for k in range(T):
        p = p0 + step * k
        if 0 <= p < length:
            if horizontal:
                frames[k, lane, p] = obj
            else:
                frames[k, p, lane] = obj
    return SyntheticSample("direction", frames, (TASK_TOKEN["direction"], NONE, NONE, ASK), answer)


def _cells(rng: Rng, grid, n: int) -> list[tuple[int, int]]:
    _, H, W = grid
    flat = rng.choice(H * W, size=n, replace=False)
    return [(int(f) // W, int(f) % W) for f in flat]


def _order(rng: Rng, grid, answer: int) -> SyntheticSample:
    T = grid[0]
    frames = _background(rng, grid)
    later = int(rng.choice([e for e in EVENTS if e != answer]))
    a, b = sorted(int(x) for x in rng.choice(np.arange(1, T), size=2, replace=False))
    sizes = [int(x) for x in rng.integers(1, 4, size=2)]
    cells = _cells(rng, grid, sum(sizes))
    for sym, start, pts in ((answer, a, cells[: sizes[0]]), (later, b, cells[sizes[0]:])):
        for r, c in pts:
            frames[start:, r, c] = sym
    return SyntheticSample("order", frames, (TASK_TOKEN["order"], NONE, NONE, ASK), answer)


def _yes_no(rng: Rng, grid, answer: int) -> SyntheticSample:
    T = grid[0]
    frames = _background(rng, grid)
    x, y = (int(v) for v in rng.choice(EVENTS, size=2, replace=False))
    fx, fy = (int(v) for v in rng.choice(T, size=2, replace=False))
    if (fx < fy) != (answer == YES):
        fx, fy = fy, fx
    (rx, cx), (ry, cy) = _cells(rng, grid, 2)
    frames[fx, rx, cx] = x
    frames[fy, ry, cy] = y
    return SyntheticSample("yes_no", frames, (TASK_TOKEN["yes_no"], x, y, ASK), answer)


_MAKERS = {"direction": _direction, "order": _order, "yes_no": _yes_no}


def check_grid(kind: str, grid) -> None:
    T, H, W = grid
    if kind not in KINDS:
        raise ValueError(f"unknown task kind {kind!r}; expected one of {KINDS}")
    if kind == "direction" and (T < 2 or min(H, W) < 2):
        raise GridTooSmall("direction needs >= 2 frames and >= 2 cells along each motion axis")
    if kind == "order" and (T < 3 or H * W < 6):
        raise GridTooSmall("order needs >= 3 frames (events never start in frame 0) and >= 6 cells")
    if kind == "yes_no" and (T < 2 or H * W < 2):
        raise GridTooSmall("yes_no needs >= 2 frames and >= 2 cells")


def generate_dataset(kind: str, n: int, seed: int, grid=(4, 4, 4), split: str = "train") -> list[SyntheticSample]:
    """``n`` samples with answer classes balanced to within one.

    A sample belongs to exactly one split (decided by a hash of its tokens),
    so train and eval sets never share a sample.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if split not in SPLITS:
        raise ValueError(f"split must be one of {SPLITS}")
    grid = tuple(int(g) for g in grid)
    check_grid(kind, grid)
    rng = Rng(seed).child("dataset", kind, split)
    classes = list(ANSWERS[kind])
    order = rng.permutation(len(classes))
    make = _MAKERS[kind]
    out = []
    for i in range(n):
        answer = classes[int(order[i % len(classes)])]
        while True:
            s = make(rng, grid, answer)
            if _split_of(s.tokens()) == split:
                break
        out.append(s)
    perm = rng.permutation(n)
    return [out[int(i)] for i in perm]


def generate_mixed(n_per_kind: int, seed: int, grid=(4, 4, 4), split: str = "train", kinds=KINDS):
    data = []
    for k in kinds:
        data += generate_dataset(k, n_per_kind, seed, grid, split)
    perm = Rng(seed).child("mix", split).permutation(len(data))
    return [data[int(i)] for i in perm]


def save_jsonl(samples: Iterable[SyntheticSample], path: str | Path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for s in samples:
            fh.write(json.dumps(s.to_record(), separators=(",", ":")) + "\n")


def load_jsonl(path: str | Path) -> list[SyntheticSample]:
    with open(path, encoding="utf-8") as fh:
        return [SyntheticSample.from_record(json.loads(line)) for line in fh if line.strip()]


def batch_tensors(samples: Sequence[SyntheticSample]) -> tuple[torch.Tensor, torch.Tensor]:
    tokens = torch.tensor([s.tokens() for s in samples], dtype=torch.long)
    gt = torch.tensor([s.answer for s in samples], dtype=torch.long)
    return tokens, gt


@dataclass
class TrainConfig:
    steps: int = 3000
    batch_size: int = 16
    lr: float = 1e-3
    seed: int = 0
    optimizer: str = "adam"
    eval_size: int = 300
    warmup: int = 100
    weight_decay: float = 0.0
    grad_clip: float = 1.0
    target_accuracy: float | None = None
    check_every: int = 250
    fast_compute: bool = True


@dataclass
class TrainResult:
    losses: list[float]
    eval_accuracy: float | None
    steps_run: int
    seconds: float
    history: list[dict] = field(default_factory=list)


def _lr_at(step: int, cfg: TrainConfig) -> float:
    if cfg.optimizer != "adam":
        return cfg.lr
    if step < cfg.warmup:
        return cfg.lr * (step + 1) / cfg.warmup
    frac = (step - cfg.warmup) / max(1, cfg.steps - cfg.warmup)
    return cfg.lr * 0.5 * (1 + math.cos(math.pi * min(1.0, frac)))


def final_loss(model: TransformerLab, layout: TokenLayout, tokens: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    logits = model(tokens, layout).logits[:, -1, :]
    return torch.nn.functional.cross_entropy(logits.to(torch.float64), gt)


def train(
    model: TransformerLab,
    config: TrainConfig,
    data: Sequence[SyntheticSample],
    eval_data: Sequence[SyntheticSample] | None = None,
    log=None,
) -> TrainResult:
    """Cross-entropy on the answer token at the final position.

    With ``target_accuracy`` set, training stops at the first check where the
    eval accuracy of every task reaches it.
    """
    if not data:
        raise ValueError("training data is empty")
    layout = task_layout(model.config)
    tokens, gt = batch_tensors(data)
    rng = Rng(config.seed).child("batches")
    params = list(model.parameters())
    if config.optimizer == "adam":
        opt = torch.optim.AdamW(params, lr=config.lr, weight_decay=config.weight_decay)
    elif config.optimizer == "sgd":
        opt = torch.optim.SGD(params, lr=config.lr)
    else:
        raise ValueError(f"unknown optimizer {config.optimizer!r}")
    saved_cd = model.compute_dtype
    if config.fast_compute:
        model.compute_dtype = model.param_dtype
    losses: list[float] = []
    history: list[dict] = []
    t0 = time.perf_counter()
    step = 0
    try:
        model.train()
        for step in range(config.steps):
            for g in opt.param_groups:
                g["lr"] = _lr_at(step, config)
            idx = torch.from_numpy(rng.integers(0, len(data), size=config.batch_size))
            loss = final_loss(model, layout, tokens[idx], gt[idx])
            value = float(loss.detach())
            if not math.isfinite(value):
                raise TrainingDiverged(step, value)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            if config.grad_clip:
                torch.nn.utils.clip_grad_norm_(params, config.grad_clip)
            opt.step()
            losses.append(value)
            if eval_data is not None and config.target_accuracy is not None and (step + 1) % config.check_every == 0:
                model.compute_dtype = saved_cd
                accs = {k: r.accuracy for k, r in evaluate_by_kind(model, eval_data).items()}
                model.compute_dtype = model.param_dtype if config.fast_compute else saved_cd
                history.append({"step": step + 1, "loss": value, **accs})
                if log:
                    log(f"step {step + 1} loss {value:.4f} " + " ".join(f"{k}={v:.3f}" for k, v in accs.items()))
                if min(accs.values()) >= config.target_accuracy:
                    break
    finally:
        model.compute_dtype = saved_cd
        model.eval()
    seconds = time.perf_counter() - t0
    acc = None
    if eval_data is not None:
        acc = evaluate(model, eval_data).accuracy
    return TrainResult(losses, acc, len(losses), seconds, history)


@dataclass
class EvalReport:
    accuracy: float
    mean_gt_prob: float
    n: int
    mean_pc: float | None = None


def _answer_argmax(probs: torch.Tensor, kinds: Sequence[str]) -> torch.Tensor:
    out = torch.empty(probs.shape[0], dtype=torch.long)
    for i, k in enumerate(kinds):
        cands = torch.tensor(ANSWERS[k])
        out[i] = cands[int(torch.argmax(probs[i, cands]))]
    return out


def evaluate(
    model: TransformerLab,
    data: Sequence[SyntheticSample],
    interventions: Sequence[InterventionSpec] | None = None,
    evict: dict | None = None,
) -> EvalReport:
    """Accuracy (argmax over the task's answer tokens) and mean P(ground truth).

    With interventions, the report also carries mean P_C against the clean run.
    """
    layout = task_layout(model.config)
    tokens, gt = batch_tensors(data)
    kinds = [s.kind for s in data]
    clean = run_distribution(model, layout, tokens)
    probs = clean
    if interventions or evict:
        probs = run_distribution(model, layout, tokens, tuple(interventions or ()), evict=evict)
    pred = _answer_argmax(probs, kinds)
    acc = float((pred == gt).double().mean())
    p_gt = probs.gather(1, gt.view(-1, 1)).squeeze(1)
    report = EvalReport(acc, mean_pc(p_gt), len(data))
    if interventions is not None or evict:
        report.mean_pc = mean_pc(compute_pc(probs, clean, gt))
    return report


def evaluate_by_kind(model, data, interventions=None) -> dict[str, EvalReport]:
    kinds = sorted({s.kind for s in data}, key=KINDS.index)
    return {k: evaluate(model, [s for s in data if s.kind == k], interventions) for k in kinds}


def loss_gradients(model: TransformerLab, tokens: torch.Tensor, gt: torch.Tensor) -> dict[str, torch.Tensor]:
    """Gradients of the training loss, exactly as ``train`` computes them."""
    model.zero_grad(set_to_none=True)
    final_loss(model, task_layout(model.config), tokens, gt).backward()
    return {name: p.grad.detach().clone() for name, p in model.named_parameters()}


def gradient_check(seed: int = 0, eps: float = 1e-6, n: int = 4) -> float:
    """Largest relative error between backprop and central differences.

    Uses a float64 2-layer, d_model 8 model on 2x2x2 direction clips; every
    entry of every parameter is perturbed. Relative error is
    ``|a - b| / max(|a|, |b|, 1e-6)``.
    """
    cfg = ModelConfig(n_layers=2, d_model=8, n_heads=1, d_head=8, frame_grid=(2, 2, 2))
    model = TransformerLab(cfg, seed=seed, dtype=torch.float64)
    layout = task_layout(cfg)
    tokens, gt = batch_tensors(generate_dataset("direction", n, seed, grid=cfg.frame_grid))
    grads = loss_gradients(model, tokens, gt)
    worst = 0.0
    with torch.no_grad():
        for name, p in model.named_parameters():
            flat = p.view(-1)
            for i in range(flat.numel()):
                old = float(flat[i])
                flat[i] = old + eps
                up = float(final_loss(model, layout, tokens, gt))
                flat[i] = old - eps
                down = float(final_loss(model, layout, tokens, gt))
                flat[i] = old
                fd = (up - down) / (2 * eps)
                a = float(grads[name].view(-1)[i])
                worst = max(worst, abs(a - fd) / max(abs(a), abs(fd), 1e-6))
    return worst
