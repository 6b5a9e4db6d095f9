from __future__ import annotations

import json
import shutil
from pathlib import Path

import pytest

from ctrlora.checkpoint import load_checkpoint
from ctrlora.cli import main
from ctrlora.scheduler import BudgetPlan

ROOT = Path(__file__).resolve().parents[1]
TINY = str(ROOT / "configs" / "tiny.yaml")
BLOCK = str(ROOT / "configs" / "tiny_transformer.yaml")


@pytest.fixture
def run(capsys):
    def _run(*argv):
        code = main([str(a) for a in argv])
        out, err = capsys.readouterr()
        return code, out, err

    return _run


def write_config(tmp_path, text, name="cfg.yaml"):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


def jsonl(path):
    return [json.loads(line) for line in Path(path).read_text().splitlines()]


# ----------------------------------------------------------------- allocate


def test_allocate_writes_plan_and_report(run, tmp_path):
    code, out, _ = run("allocate", "--config", TINY, "--out-dir", tmp_path)
    assert code == 0
    plan = BudgetPlan.load(tmp_path / "plan.json")
    assert plan.spent <= plan.budget_limit
    assert "layer" in out and (tmp_path / "allocation.txt").read_text() == out
    # the plan file round-trips
    assert BudgetPlan.from_dict(json.loads((tmp_path / "plan.json").read_text())) == plan


def test_allocate_zero_budget_warns(run, tmp_path):
    cfg = write_config(tmp_path, Path(TINY).read_text().replace("budget_fraction: 0.2", "budget_fraction: 0.0"))
    code, _, err = run("allocate", "--config", cfg, "--out-dir", tmp_path / "o")
    assert code == 0 and "budget_fraction is 0" in err
    assert set(BudgetPlan.load(tmp_path / "o" / "plan.json").ranks.values()) == {0}


def test_policy_reports_differ_only_in_policy_when_order_agrees(run, tmp_path):
    plans = {}
    for policy in ("raw-utility", "utility-per-cost"):
        d = tmp_path / policy
        assert run("allocate", "--config", BLOCK, "--out-dir", d, "--policy", policy)[0] == 0
        plans[policy] = json.loads((d / "plan.json").read_text())
    raw, per = plans["raw-utility"], plans["utility-per-cost"]
    assert (raw["policy"], per["policy"]) == ("raw-utility", "utility-per-cost")
    costs = {e["layer_id"]: e["unit_cost"] for e in raw["layers"]}
    sel_raw = [(s["layer_id"], s["index"]) for s in raw["selections"]]
    sel_per = [(s["layer_id"], s["index"]) for s in per["selections"]]
    if sel_raw == sel_per:
        strip = lambda p: {k: v for k, v in p.items() if k != "policy"}  # noqa: E731
        assert strip(raw) == strip(per)
    else:
        # the orders can only disagree if some selected candidates have different unit costs
        assert len({costs[i] for i, _ in sel_raw + sel_per}) > 1


# -------------------------------------------------------------------- train


def test_train_outputs(run, tmp_path):
    code, out, _ = run("train", "--config", TINY, "--out-dir", tmp_path)
    assert code == 0
    for name in ("plan.json", "allocation.txt", "checkpoint.ckpt", "metrics.jsonl", "metrics.csv",
                 "timing.csv", "summary.txt", "metrics.png"):
        assert (tmp_path / name).exists(), name
    recs = jsonl(tmp_path / "metrics.jsonl")
    assert [r["step"] for r in recs] == list(range(0, 61, 10))
    assert "wall_ms" not in recs[0]
    header = (tmp_path / "metrics.csv").read_text().splitlines()[0].split(",")
    assert header[0] == "step" and "wall_ms" not in header
    assert (tmp_path / "timing.csv").read_text().splitlines()[0] == "step,wall_ms"
    assert "status            completed" in out
    assert load_checkpoint(tmp_path / "checkpoint.ckpt").step == 60


def test_train_steps_zero_initial_eval_only(run, tmp_path):
    code, _, _ = run("train", "--config", TINY, "--out-dir", tmp_path, "--steps", 0, "--no-plot")
    assert code == 0
    recs = jsonl(tmp_path / "metrics.jsonl")
    assert len(recs) == 1 and recs[0]["step"] == 0 and recs[0]["eval_loss"] is not None


def test_baseline_flag_is_sugar(run, tmp_path):
    assert run("train", "--config", TINY, "--out-dir", tmp_path / "a", "--baseline", "lora", "--no-plot")[0] == 0
    forced = write_config(tmp_path, Path(TINY).read_text().replace(
        "train:\n", "train:\n  rank_mode: uniform\n  lambda_start: 0.0\n  lambda_end: 0.0\n"))
    assert run("train", "--config", forced, "--out-dir", tmp_path / "b", "--no-plot")[0] == 0
    for name in ("metrics.jsonl", "metrics.csv", "plan.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_train_with_plan_file(run, tmp_path):
    run("allocate", "--config", TINY, "--out-dir", tmp_path / "alloc")
    plan_path = tmp_path / "alloc" / "plan.json"
    assert run("train", "--config", TINY, "--out-dir", tmp_path / "t", "--plan", plan_path, "--no-plot")[0] == 0
    assert (tmp_path / "t" / "plan.json").read_bytes() == plan_path.read_bytes()


def test_stop_and_resume_continues_numbering(run, tmp_path):
    full, part = tmp_path / "full", tmp_path / "part"
    run("train", "--config", TINY, "--out-dir", full, "--no-plot")
    code, out, _ = run("train", "--config", TINY, "--out-dir", part, "--stop-after", 30, "--no-plot")
    assert code == 0 and "interrupted" in out
    assert run("train", "--config", TINY, "--out-dir", part, "--resume", part / "checkpoint.ckpt", "--no-plot")[0] == 0
    assert [r["step"] for r in jsonl(part / "metrics.jsonl")] == list(range(0, 61, 10))
    for name in ("metrics.jsonl", "metrics.csv", "summary.txt"):
        assert (part / name).read_bytes() == (full / name).read_bytes()


def test_resume_after_kill_drops_uncheckpointed_records(run, tmp_path):
    full, part = tmp_path / "full", tmp_path / "part"
    run("train", "--config", TINY, "--out-dir", full, "--no-plot")
    run("train", "--config", TINY, "--out-dir", part, "--stop-after", 20, "--no-plot")
    shutil.copy(part / "checkpoint.ckpt", tmp_path / "at20.ckpt")
    # keep going to step 40, then pretend the process died right after the step-20 checkpoint
    run("train", "--config", TINY, "--out-dir", part, "--resume", part / "checkpoint.ckpt",
        "--stop-after", 40, "--no-plot")
    assert jsonl(part / "metrics.jsonl")[-1]["step"] == 40
    run("train", "--config", TINY, "--out-dir", part, "--resume", tmp_path / "at20.ckpt", "--no-plot")
    assert (part / "metrics.jsonl").read_bytes() == (full / "metrics.jsonl").read_bytes()


def test_resume_with_different_config_rejected(run, tmp_path):
    run("train", "--config", TINY, "--out-dir", tmp_path, "--stop-after", 10, "--no-plot")
    code, _, err = run("train", "--config", TINY, "--out-dir", tmp_path, "--steps", 80,
                       "--resume", tmp_path / "checkpoint.ckpt", "--no-plot")
    assert code == 2 and "different train config" in err


def test_divergence_exit_code(run, tmp_path):
    cfg = write_config(tmp_path, Path(TINY).read_text().replace("peak_lr: 0.01", "peak_lr: 50.0\n  divergence_factor: 2.0"))
    code, out, err = run("train", "--config", cfg, "--out-dir", tmp_path / "o", "--no-plot")
    assert code == 3 and "diverged" in out and "divergence" in err
    assert (tmp_path / "o" / "checkpoint.ckpt").exists()


# ---------------------------------------------------------- eval and merge


def test_eval_and_merge(run, tmp_path):
    run("train", "--config", TINY, "--out-dir", tmp_path, "--no-plot")
    code, out, _ = run("eval", "--config", TINY, "--out-dir", tmp_path)
    assert code == 0
    report = json.loads(out)
    summary = (tmp_path / "summary.txt").read_text()
    assert f"final_eval_loss   {report['eval_loss']!r}" in summary
    code, out, _ = run("merge", "--config", TINY, "--out-dir", tmp_path)
    assert code == 0
    gap = float(out.split("max_output_gap")[1])
    assert gap < 1e-10
    merged = load_checkpoint(tmp_path / "merged.ckpt")
    assert merged.adapters == {}
    # evaluating the merged network with no adapters reproduces the adapted loss
    code, out, _ = run("eval", "--config", TINY, "--out-dir", tmp_path / "m", "--checkpoint", tmp_path / "merged.ckpt")
    assert abs(json.loads(out)["eval_loss"] - report["eval_loss"]) < 1e-10


def test_missing_checkpoint_is_config_error(run, tmp_path):
    code, _, err = run("eval", "--config", TINY, "--out-dir", tmp_path)
    assert code == 2 and "checkpoint" in err


# --------------------------------------------------------------- gradcheck


@pytest.mark.parametrize("cfg", [TINY, BLOCK])
def test_gradcheck_passes(run, cfg):
    code, out, _ = run("gradcheck", "--config", cfg)
    assert code == 0
    assert [line.split()[0] for line in out.splitlines()] == ["adapter", "penalty", "hutchinson"]


def test_gradcheck_corrupt_names_layer(run):
    code, out, _ = run("gradcheck", "--config", TINY, "--checks", "adapter", "--corrupt", 1)
    assert code == 4
    breaches = [line for line in out.splitlines() if "breach" in line]
    assert breaches and all("layer 1" in line for line in breaches)


def test_gradcheck_filter(run):
    code, out, _ = run("gradcheck", "--config", TINY, "--checks", "penalty")
    assert code == 0 and out.split()[0] == "penalty" and len(out.splitlines()) == 1


def test_gradcheck_unknown_check(run):
    code, _, err = run("gradcheck", "--config", TINY, "--checks", "hessian")
    assert code == 2 and "hessian" in err


# ------------------------------------------------------------ budget curve


def test_budget_curve_rows(run, tmp_path):
    code, _, _ = run("diag-budget-curve", "--config", TINY, "--out-dir", tmp_path, "--budgets", "0.1",
                     "--seeds", "0", "--no-plot")
    assert code == 0
    rows = (tmp_path / "budget_curve.csv").read_text().splitlines()
    assert rows[0] == "budget_fraction,method,final_loss,seed,status"
    assert len(rows) == 1 + 2


def test_budget_curve_parallel_matches_serial(run, tmp_path):
    args = ["diag-budget-curve", "--config", TINY, "--budgets", "0.05,0.1", "--seeds", "0,1", "--no-plot"]
    run(*args, "--out-dir", tmp_path / "s")
    run(*args, "--out-dir", tmp_path / "p", "--jobs", 2)
    serial = (tmp_path / "s" / "budget_curve.csv").read_text()
    assert len(serial.splitlines()) == 1 + 2 * 2 * 2
    assert serial == (tmp_path / "p" / "budget_curve.csv").read_text()


def test_budget_curve_bad_list(run, tmp_path):
    assert run("diag-budget-curve", "--config", TINY, "--out-dir", tmp_path, "--budgets", "x")[0] == 2
    assert run("diag-budget-curve", "--config", TINY, "--out-dir", tmp_path, "--budgets", "2.0")[0] == 2


# -------------------------------------------------------------------- misc


def test_config_errors_exit_2(run, tmp_path):
    bad = write_config(tmp_path, "train:\n  stepz: 3\n")
    code, _, err = run("train", "--config", bad, "--out-dir", tmp_path)
    assert code == 2 and "stepz" in err
    assert run("train", "--config", tmp_path / "nope.yaml")[0] == 2
    assert run("allocate", "--config", TINY, "--jobs", 0)[0] == 2


def test_config_reference_and_show_config(run, tmp_path):
    code, out, _ = run("config-reference")
    assert code == 0 and "| train | refresh_interval | 50 |" in out
    code, out, _ = run("show-config", "--config", TINY, "--seed", 5)
    assert code == 0 and "seed: 5" in out


def test_plot_command(run, tmp_path):
    run("train", "--config", TINY, "--out-dir", tmp_path, "--no-plot")
    code, out, _ = run("plot", "--out-dir", tmp_path)
    assert code == 0 and (tmp_path / "metrics.png").exists()
    assert run("plot", "--out-dir", tmp_path / "empty")[0] == 2


def test_seed_and_log_every_overrides(run, tmp_path):
    run("train", "--config", TINY, "--out-dir", tmp_path / "a", "--seed", 3, "--log-every", 20, "--no-plot")
    recs = jsonl(tmp_path / "a" / "metrics.jsonl")
    assert [r["step"] for r in recs] == [0, 20, 40, 60]
    assert "seed              3" in (tmp_path / "a" / "summary.txt").read_text()
