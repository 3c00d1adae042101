"""Command-line entry point: train, run experiment recipes, verify invariants.

Exit codes: 0 success, 1 failed verification or other error, 2 unknown
recipe/suite or bad arguments, 3 missing or mismatched checkpoint,
4 unwritable output path.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import torch

from .interventions import (
    BaseRun,
    KnockoutError,
    WindowSweep,
    compose_reversal,
    final_token_knockout,
    frame_to_query_knockout,
    inter_frame_knockout,
    knockout,
    remove_pe_at_layer,
    shuffle_pe,
    single_frame_restriction,
    spatiotemporal_config,
    sweep_layers,
    SPATIOTEMPORAL_KINDS,
)
from .metrics import PerturbationResult
from .model import CheckpointError, ModelConfig, TransformerLab, load_checkpoint, save_checkpoint
from .strategies import benchmark_csv, benchmark_strategies
from .tasks import KINDS, TrainConfig, batch_tensors, generate_dataset, generate_mixed, task_layout, train

EXIT_ERROR, EXIT_USAGE, EXIT_CHECKPOINT, EXIT_OUTPUT = 1, 2, 3, 4
PERTURBATION_COLUMNS = ("recipe", "task", "condition", "window", "start", "mean_pc", "n")

# config-file keys and their types; CLI flags of the same name override them
CONFIG_SCHEMA: dict[str, type] = {
    "task": str,
    "tasks": str,
    "seed": int,
    "eval_seed": int,
    "n_eval": int,
    "window": int,
    "radius": int,
    "steps": int,
    "batch_size": int,
    "lr": float,
    "n_train": int,
    "target_accuracy": float,
    "pe_mode": str,
    "n_layers": int,
    "d_model": int,
    "n_heads": int,
    "d_head": int,
}
DEFAULTS = {
    "task": "mixed",
    "seed": 0,
    "eval_seed": 1234,
    "n_eval": 200,
    "window": 2,
    "radius": 1,
    "steps": 5000,
    "batch_size": 16,
    "lr": 1e-3,
    "n_train": 8000,
    "target_accuracy": 0.99,
}
MODEL_KEYS = ("pe_mode", "n_layers", "d_model", "n_heads", "d_head")


class HarnessError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def read_config(path: str | Path) -> dict:
    """Flat ``key = value`` file; ``#`` starts a comment, unknown keys are errors."""
    out = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as err:
        raise HarnessError(f"cannot read config {path}: {err}", EXIT_USAGE) from None
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise HarnessError(f"{path}:{n}: expected key = value", EXIT_USAGE)
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in CONFIG_SCHEMA:
            raise HarnessError(f"{path}:{n}: unknown key {key!r}", EXIT_USAGE)
        try:
            out[key] = CONFIG_SCHEMA[key](value)
        except ValueError:
            raise HarnessError(f"{path}:{n}: bad value for {key}: {value!r}", EXIT_USAGE) from None
    return out


def merge_settings(args: argparse.Namespace) -> dict:
    settings = dict(DEFAULTS)
    if getattr(args, "config", None):
        settings.update(read_config(args.config))
    for key in CONFIG_SCHEMA:
        value = getattr(args, key, None)
        if value is not None:
            settings[key] = value
    return settings


# ---------------------------------------------------------------- training


def reference_training(task: str = "mixed", seed: int = 0, steps: int = 5000, settings: dict | None = None, log=None):
    """Train the toy model the recipes and acceptance checks run on.

    ``task`` is a task kind or ``mixed`` (all kinds interleaved). Training
    stops early once every task's held-out accuracy reaches the target.
    """
    s = dict(DEFAULTS, **(settings or {}))
    config = ModelConfig(**{k: s[k] for k in MODEL_KEYS if k in s})
    kinds = KINDS if task == "mixed" else (task,)
    if task != "mixed" and task not in KINDS:
        raise HarnessError(f"unknown task {task!r}; expected one of {KINDS + ('mixed',)}", EXIT_USAGE)
    model = TransformerLab(config, seed=seed)
    grid = config.frame_grid
    data = generate_mixed(s["n_train"], seed, grid, "train", kinds)
    held_out = generate_mixed(s["n_eval"], seed + 1, grid, "eval", kinds)
    cfg = TrainConfig(
        steps=steps, batch_size=s["batch_size"], lr=s["lr"], seed=seed, target_accuracy=s["target_accuracy"]
    )
    result = train(model, cfg, data, held_out, log=log)
    return model, result


# ---------------------------------------------------------------- recipes


@dataclass
class RecipeContext:
    model: TransformerLab
    settings: dict
    tasks: tuple[str, ...]
    _data: dict = field(default_factory=dict)

    @property
    def layout(self):
        return task_layout(self.model.config)

    @property
    def sweep(self) -> WindowSweep:
        return WindowSweep(self.settings["window"])

    def data(self, task: str):
        if task not in self._data:
            s = self.settings
            self._data[task] = generate_dataset(task, s["n_eval"], s["eval_seed"], self.model.config.frame_grid, "eval")
        return self._data[task]

    def base(self, task: str, base_specs=()) -> BaseRun:
        tokens, gt = batch_tensors(self.data(task))
        return BaseRun(self.model, self.layout, tokens, gt, tuple(base_specs))


Rows = list[dict]


def _rows(result: PerturbationResult, condition: str) -> Rows:
    return [
        {"recipe": result.recipe, "task": result.task, "condition": condition, "window": r.window,
         "start": r.start, "mean_pc": r.mean_pc, "n": r.n}
        for r in result.rows
    ]


def _sweep_rows(ctx: RecipeContext, recipe: str, task: str, base: BaseRun, condition: str, spec) -> Rows:
    res = sweep_layers(base, spec, ctx.sweep, recipe, task, ctx.settings["seed"], condition)
    return _rows(res, condition)


def _whole(recipe: str, task: str, condition: str, values) -> dict:
    res = PerturbationResult(recipe, task, 0)
    row = res.add("all", 0, values)
    return {"recipe": recipe, "task": task, "condition": condition, "window": "all", "start": 0,
            "mean_pc": row.mean_pc, "n": row.n}


def fig2_pe_removal(ctx: RecipeContext) -> Rows:
    rows = []
    for task in ctx.tasks:
        base = ctx.base(task)
        res = sweep_layers(base, remove_pe_at_layer(0), WindowSweep(1), "fig2_pe_removal", task, ctx.settings["seed"], "remove_pe")
        rows += _rows(res, "remove_pe")
    return rows


def fig3_pe_shuffle(ctx: RecipeContext) -> Rows:
    rows = []
    for task in ctx.tasks:
        base = ctx.base(task)
        for segment in ("video", "query"):
            spec = shuffle_pe(segment, ctx.settings["seed"], layers=(0,))
            rows.append(_whole("fig3_pe_shuffle", task, f"shuffle_{segment}", base.pc([spec])))
            rows[-1]["window"] = "0-0"
    return rows


def fig4_reverse(ctx: RecipeContext) -> Rows:
    rows = []
    for task in ctx.tasks:
        base = ctx.base(task)
        for condition, flags in (("reverse_pe", (False, True)), ("reverse_order", (True, False))):
            rows.append(_whole("fig4_reverse", task, condition, base.pc(compose_reversal(*flags))))
    return rows


def fig5_last_token(ctx: RecipeContext) -> Rows:
    rows = []
    for task in ctx.tasks:
        base = ctx.base(task)
        for segment in ("query", "video"):
            rows += _sweep_rows(ctx, "fig5_last_token", task, base, f"last_to_{segment}",
                                knockout(final_token_knockout(ctx.layout, segment)))
    return rows


def fig6_stage(ctx: RecipeContext) -> Rows:
    rows = []
    for task in ctx.tasks:
        base = ctx.base(task)
        rows += _sweep_rows(ctx, "fig6_stage", task, base, "frame_to_query", knockout(frame_to_query_knockout(ctx.layout)))
        rows += _sweep_rows(ctx, "fig6_stage", task, base, "inter_frame", knockout(inter_frame_knockout(ctx.layout)))
    return rows


def fig7_single_frame(ctx: RecipeContext) -> Rows:
    rows = []
    for task in ctx.tasks:
        base = ctx.base(task)
        for t in range(ctx.layout.n_frames):
            rows += _sweep_rows(ctx, "fig7_single_frame", task, base, f"frame_{t}",
                                knockout(single_frame_restriction(ctx.layout, t)))
    return rows


def fig8_causality_flip(ctx: RecipeContext) -> Rows:
    # P_C is measured against the original labels in every variant
    rows = []
    for variant, flags in (("original", None), ("reversed", (True, False)), ("reversed_pe", (True, True))):
        base = ctx.base("yes_no", compose_reversal(*flags) if flags else ())
        for t in range(ctx.layout.n_frames):
            rows += _sweep_rows(ctx, "fig8_causality_flip", "yes_no", base, f"{variant}:frame_{t}",
                                knockout(single_frame_restriction(ctx.layout, t)))
    return rows


def fig9_spatiotemporal(ctx: RecipeContext) -> Rows:
    rows = []
    lay = ctx.layout
    last_only = knockout(single_frame_restriction(lay, lay.n_frames - 1), label="query_last_frame")
    for task in ctx.tasks:
        base = ctx.base(task, (last_only,))
        for kind in SPATIOTEMPORAL_KINDS:
            rows += _sweep_rows(ctx, "fig9_spatiotemporal", task, base, kind,
                                knockout(spatiotemporal_config(lay, kind, ctx.settings["radius"])))
    return rows


def table2_strategies(ctx: RecipeContext):
    data = [s for task in ctx.tasks for s in ctx.data(task)]
    return benchmark_strategies(ctx.model, data)


RECIPES: dict[str, Callable] = {
    "fig2_pe_removal": fig2_pe_removal,
    "fig3_pe_shuffle": fig3_pe_shuffle,
    "fig4_reverse": fig4_reverse,
    "fig5_last_token": fig5_last_token,
    "fig6_stage": fig6_stage,
    "fig7_single_frame": fig7_single_frame,
    "fig8_causality_flip": fig8_causality_flip,
    "fig9_spatiotemporal": fig9_spatiotemporal,
    "table2_strategies": table2_strategies,
}


def rows_csv(rows: Rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(PERTURBATION_COLUMNS)
    for r in rows:
        w.writerow([repr(float(r[c])) if c == "mean_pc" else r[c] for c in PERTURBATION_COLUMNS])
    return buf.getvalue()


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _prepare_out_dir(out: str | Path) -> Path:
    out = Path(out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".tplab_write_probe"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as err:
        raise HarnessError(f"output path {out} is not writable: {err}", EXIT_OUTPUT) from None
    return out


def run_recipe(name: str, ckpt: str | Path, out: str | Path, settings: dict) -> tuple[Path, Path]:
    if name not in RECIPES:
        raise HarnessError(f"unknown recipe {name!r}; known: {', '.join(RECIPES)}", EXIT_USAGE)
    ckpt = Path(ckpt)
    try:
        model, header = load_checkpoint(ckpt)
    except (FileNotFoundError, CheckpointError) as err:
        raise HarnessError(str(err), EXIT_CHECKPOINT) from None
    # model keys given in the config file must agree with the checkpoint
    have = model.config.to_dict()
    clash = {k: (settings[k], have[k]) for k in MODEL_KEYS if k in settings and settings[k] != have[k]}
    if clash:
        raise HarnessError(f"{ckpt}: config mismatch (requested, checkpoint): {clash}", EXIT_CHECKPOINT)
    out = _prepare_out_dir(out)
    trained_on = header.get("extra", {}).get("task", "mixed")
    if settings.get("tasks"):
        tasks = tuple(t.strip() for t in settings["tasks"].split(",") if t.strip())
    else:
        tasks = KINDS if trained_on == "mixed" else (trained_on,)
    unknown = [t for t in tasks if t not in KINDS]
    if unknown:
        raise HarnessError(f"unknown task(s) {unknown}", EXIT_USAGE)
    ctx = RecipeContext(model, settings, tasks)
    try:
        result = RECIPES[name](ctx)
    except (ValueError, KnockoutError) as err:
        raise HarnessError(f"{name}: {err}", EXIT_ERROR) from None
    text = benchmark_csv(result) if name == "table2_strategies" else rows_csv(result)
    meta = {
        "recipe": name,
        "checkpoint_sha256": _sha256(ckpt),
        "model_config": model.config.to_dict(),
        "tasks": list(tasks),
        "settings": {k: settings[k] for k in sorted(settings)},
        "rows": text.count("\n") - 1,
    }
    csv_path, meta_path = out / f"{name}.csv", out / f"{name}.json"
    try:
        csv_path.write_bytes(text.encode("utf-8"))
        meta_path.write_bytes((json.dumps(meta, indent=2, sort_keys=True) + "\n").encode("utf-8"))
    except OSError as err:
        raise HarnessError(f"cannot write results to {out}: {err}", EXIT_OUTPUT) from None
    return csv_path, meta_path


# ---------------------------------------------------------------- CLI


def _set_threads():
    raw = os.environ.get("TPLAB_THREADS")
    if raw:
        try:
            n = int(raw)
        except ValueError:
            raise HarnessError(f"TPLAB_THREADS must be an integer, got {raw!r}", EXIT_USAGE) from None
        if n < 1:
            raise HarnessError("TPLAB_THREADS must be >= 1", EXIT_USAGE)
        torch.set_num_threads(n)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tplab", description="Temporal-pathway intervention lab on a toy video transformer.")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a toy model and write a checkpoint")
    t.add_argument("--task", help=f"one of {', '.join(KINDS)} or mixed (default mixed)")
    t.add_argument("--seed", type=int)
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--steps", type=int)
    t.add_argument("--batch-size", dest="batch_size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--pe-mode", dest="pe_mode", choices=("none", "rotary_1d", "rotary_3d"))
    t.add_argument("--config", help="flat key = value file; flags override it")

    r = sub.add_parser("run", help="run a named experiment recipe")
    r.add_argument("--recipe", required=True, help=", ".join(RECIPES))
    r.add_argument("--ckpt", required=True)
    r.add_argument("--out", required=True, help="output directory")
    r.add_argument("--seed", type=int)
    r.add_argument("--eval-seed", dest="eval_seed", type=int)
    r.add_argument("--n-eval", dest="n_eval", type=int)
    r.add_argument("--window", type=int)
    r.add_argument("--tasks", help="comma-separated task kinds")
    r.add_argument("--config")

    v = sub.add_parser("verify", help="run invariant suites")
    v.add_argument("--suite", default="all")
    return p


def _cmd_train(args) -> int:
    settings = merge_settings(args)
    out = Path(args.out)
    try:
        out.parent.mkdir(parents=True, exist_ok=True)
        with open(out, "ab"):
            pass
    except OSError as err:
        raise HarnessError(f"checkpoint path {out} is not writable: {err}", EXIT_OUTPUT) from None
    model, res = reference_training(settings["task"], settings["seed"], settings["steps"], settings, log=print)
    extra = {"task": settings["task"], "steps_run": res.steps_run, "eval_accuracy": res.eval_accuracy}
    save_checkpoint(model, out, extra)
    print(f"trained {res.steps_run} steps in {res.seconds:.1f}s; eval accuracy {res.eval_accuracy:.4f}; wrote {out}")
    return 0


def _cmd_run(args) -> int:
    settings = merge_settings(args)
    csv_path, meta_path = run_recipe(args.recipe, args.ckpt, args.out, settings)
    print(f"wrote {csv_path} and {meta_path}")
    return 0


def _cmd_verify(args) -> int:
    from .verify import SUITES, run_suite

    if args.suite not in SUITES:
        raise HarnessError(f"unknown suite {args.suite!r}; known: {', '.join(SUITES)}", EXIT_USAGE)
    results = run_suite(args.suite)
    for r in results:
        print(r.line())
    return 0 if all(r.ok for r in results) else EXIT_ERROR


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        _set_threads()
        return {"train": _cmd_train, "run": _cmd_run, "verify": _cmd_verify}[args.command](args)
    except HarnessError as err:
        print(f"tplab: error: {err}", file=sys.stderr)
        return err.code


if __name__ == "__main__":
    sys.exit(main())
