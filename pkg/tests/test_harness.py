import csv
import io
import json
import math

import pytest
import torch

from tplab.harness import (
    EXIT_CHECKPOINT,
    EXIT_OUTPUT,
    EXIT_USAGE,
    PERTURBATION_COLUMNS,
    RECIPES,
    HarnessError,
    build_parser,
    main,
    merge_settings,
    read_config,
    run_recipe,
)
from tplab.model import ModelConfig, TransformerLab, load_checkpoint, save_checkpoint
from tplab.strategies import CSV_COLUMNS

TINY = ModelConfig(n_layers=3, d_model=16, n_heads=2, d_head=8, frame_grid=(3, 2, 3))
FAST = ["--n-eval", "6", "--window", "1"]


@pytest.fixture(scope="module")
def ckpt(tmp_path_factory):
    path = tmp_path_factory.mktemp("ckpt") / "tiny.ckpt"
    save_checkpoint(TransformerLab(TINY, seed=3), path, {"task": "mixed"})
    return path


def run_cli(*argv):
    return main([str(a) for a in argv])


def test_config_file_parsing(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("# comment\nseed = 7\nlr = 0.01   # trailing\n\nwindow=3\n")
    assert read_config(p) == {"seed": 7, "lr": 0.01, "window": 3}
    p.write_text("colour = red\n")
    with pytest.raises(HarnessError, match="unknown key") as info:
        read_config(p)
    assert info.value.code == EXIT_USAGE
    p.write_text("seed = seven\n")
    with pytest.raises(HarnessError, match="bad value"):
        read_config(p)


def test_flags_override_config(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("seed = 7\nwindow = 3\n")
    args = build_parser().parse_args(["run", "--recipe", "fig2_pe_removal", "--ckpt", "x", "--out", "o", "--config", str(p), "--seed", "9"])
    s = merge_settings(args)
    assert s["seed"] == 9 and s["window"] == 3 and s["n_eval"] == 200


def test_exit_codes(tmp_path, ckpt, capsys):
    out = tmp_path / "o"
    assert run_cli("run", "--recipe", "fig99", "--ckpt", ckpt, "--out", out) == EXIT_USAGE
    assert run_cli("verify", "--suite", "nope") == EXIT_USAGE
    assert run_cli("frobnicate") == EXIT_USAGE
    assert run_cli("run", "--recipe", "fig4_reverse", "--ckpt", tmp_path / "missing.ckpt", "--out", out) == EXIT_CHECKPOINT
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(ckpt.read_bytes()[:40])
    assert run_cli("run", "--recipe", "fig4_reverse", "--ckpt", bad, "--out", out) == EXIT_CHECKPOINT
    cfg = tmp_path / "c.cfg"
    cfg.write_text("d_model = 32\n")
    assert run_cli("run", "--recipe", "fig4_reverse", "--ckpt", ckpt, "--out", out, "--config", cfg) == EXIT_CHECKPOINT
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert run_cli("run", "--recipe", "fig4_reverse", "--ckpt", ckpt, "--out", blocker / "sub", *FAST) == EXIT_OUTPUT
    assert run_cli("run", "--recipe", "fig4_reverse", "--ckpt", ckpt, "--out", out, "--tasks", "counting", *FAST) == EXIT_USAGE
    assert "error" in capsys.readouterr().err


@pytest.mark.parametrize("recipe", sorted(RECIPES))
def test_every_recipe_runs_and_reruns_byte_identically(recipe, ckpt, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run_cli("run", "--recipe", recipe, "--ckpt", ckpt, "--out", a, *FAST) == 0
    assert run_cli("run", "--recipe", recipe, "--ckpt", ckpt, "--out", b, *FAST) == 0
    for suffix in (".csv", ".json"):
        assert (a / f"{recipe}{suffix}").read_bytes() == (b / f"{recipe}{suffix}").read_bytes()
    raw = (a / f"{recipe}.csv").read_bytes()
    assert b"\r" not in raw
    rows = list(csv.DictReader(io.StringIO(raw.decode())))
    header = tuple(raw.decode().splitlines()[0].split(","))
    assert header == (CSV_COLUMNS if recipe == "table2_strategies" else PERTURBATION_COLUMNS)
    assert rows
    assert all(math.isfinite(float(r["mean_pc"])) for r in rows)
    meta = json.loads((a / f"{recipe}.json").read_text())
    assert meta["rows"] == len(rows) and meta["tasks"] == ["direction", "order", "yes_no"]
    assert meta["model_config"] == TINY.to_dict()


def test_fig4_conditions_and_window(ckpt, tmp_path):
    csv_path, _ = run_recipe("fig4_reverse", ckpt, tmp_path, {"n_eval": 6, "eval_seed": 1, "window": 1, "seed": 0, "radius": 1, "tasks": "order"})
    rows = list(csv.DictReader(io.StringIO(csv_path.read_text())))
    assert {r["condition"] for r in rows} == {"reverse_pe", "reverse_order"}
    assert all(r["window"] == "all" and r["task"] == "order" and r["n"] == "6" for r in rows)


def test_train_command_writes_a_loadable_checkpoint(tmp_path):
    cfg = tmp_path / "t.cfg"
    cfg.write_text("n_train = 32\nn_eval = 8\nn_layers = 1\nd_model = 16\nn_heads = 1\nd_head = 16\n")
    out = tmp_path / "m.ckpt"
    assert run_cli("train", "--out", out, "--steps", 2, "--task", "order", "--config", cfg) == 0
    model, header = load_checkpoint(out)
    assert model.config.n_layers == 1 and header["extra"]["task"] == "order"


def test_threads_env(monkeypatch):
    before = torch.get_num_threads()
    try:
        monkeypatch.setenv("TPLAB_THREADS", "1")
        assert run_cli("verify", "--suite", "nope") == EXIT_USAGE
        assert torch.get_num_threads() == 1
        monkeypatch.setenv("TPLAB_THREADS", "lots")
        assert run_cli("verify", "--suite", "structural") == EXIT_USAGE
    finally:
        torch.set_num_threads(before)
