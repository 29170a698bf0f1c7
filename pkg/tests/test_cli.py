import json
import re

import numpy as np
import pytest

from flowrl import algo, checkpoint
from flowrl.cli import main
from flowrl.config import dump_config, parse_config
from flowrl.envs import DemoSet

SMALL = {
    "hidden_sizes": "32, 32", "sft_epochs": "50", "n_envs": "8", "macro_steps_per_rollout": "4",
    "train_epochs": "3", "minibatch_size": "32", "update_epochs": "2", "eval_every": "3",
    "eval_episodes": "8", "depth": "mlp1", "width": "16", "demo_count": "5",
}


@pytest.fixture
def small_config(tmp_path):
    def make(**overrides):
        cfg = parse_config("", {**SMALL, **{k: str(v) for k, v in overrides.items()}})
        path = tmp_path / f"cfg{len(list(tmp_path.glob('cfg*.ini')))}.ini"
        path.write_text(dump_config(cfg))
        return str(path)

    return make


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture
def sft_checkpoint(tmp_path, small_config):
    cfg = small_config()
    assert run("gen-demos", "--config", cfg, "--out", tmp_path / "d.bin") == 0
    assert run("sft", "--config", cfg, "--demos", tmp_path / "d.bin", "--out", tmp_path / "s.ckpt") == 0
    return cfg, tmp_path / "s.ckpt"


# -- gen-demos ---------------------------------------------------------------------

def test_gen_demos_count_and_bytes(tmp_path, small_config, capsys):
    cfg = small_config()
    assert run("gen-demos", "--config", cfg, "--out", tmp_path / "a.bin") == 0
    assert "wrote 5 episodes" in capsys.readouterr().out
    assert DemoSet.load(tmp_path / "a.bin").n_episodes == 5
    assert run("gen-demos", "--config", cfg, "--out", tmp_path / "b.bin") == 0
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()
    assert run("gen-demos", "--config", cfg, "--seed", "1", "--out", tmp_path / "c.bin") == 0
    assert (tmp_path / "a.bin").read_bytes() != (tmp_path / "c.bin").read_bytes()


def test_zero_demos_is_a_validation_error(tmp_path, capsys):
    assert run("gen-demos", "--set", "demo_count=0", "--out", tmp_path / "a.bin") == 1
    assert "demo_count" in capsys.readouterr().err


def test_unwritable_output(tmp_path):
    assert run("gen-demos", "--set", "demo_count=1", "--out", tmp_path / "missing" / "a.bin") == 1


def test_bad_config_exit_code(tmp_path):
    bad = tmp_path / "bad.ini"
    bad.write_text("[rl]\nclip_ratio = 0\n")
    assert run("diag", "--config", bad) == 1
    assert run("diag", "--config", tmp_path / "nope.ini") == 1


# -- sft ---------------------------------------------------------------------------

def test_sft_probe_loss_decreases(tmp_path, small_config):
    cfg = small_config(demo_count=20, sft_epochs=10, hidden_sizes="128, 128")
    run("gen-demos", "--config", cfg, "--out", tmp_path / "d.bin")
    assert run("sft", "--config", cfg, "--demos", tmp_path / "d.bin", "--out", tmp_path / "s.ckpt") == 0
    rows = [json.loads(line) for line in (tmp_path / "s.ckpt.sft.jsonl").read_text().splitlines()]
    probe = [r["probe_cfm_loss"] for r in rows]
    assert len(probe) == 10
    assert all(b < a for a, b in zip(probe, probe[1:]))


def test_sft_beats_untrained_policy(tmp_path, small_config, capsys):
    cfg = small_config(demo_count=20, sft_epochs=1000, hidden_sizes="128, 128")
    run("gen-demos", "--config", cfg, "--out", tmp_path / "d.bin")
    run("sft", "--config", cfg, "--demos", tmp_path / "d.bin", "--out", tmp_path / "s.ckpt")
    untrained = parse_config("", {"hidden_sizes": "128, 128"}).make_policy().initialize(23)
    checkpoint.save(tmp_path / "u.ckpt", untrained)
    capsys.readouterr()

    def rate(ckpt):
        assert run("eval", "--config", cfg, "--checkpoint", ckpt, "--episodes", 100) == 0
        return float(capsys.readouterr().out.strip().splitlines()[-1].split("=")[-1])

    assert rate(tmp_path / "s.ckpt") > rate(tmp_path / "u.ckpt")


def test_sft_shape_mismatch(tmp_path, small_config, capsys):
    run("gen-demos", "--config", small_config(), "--out", tmp_path / "d.bin")
    cfg10 = small_config(chunk_size=10)
    assert run("sft", "--config", cfg10, "--demos", tmp_path / "d.bin", "--out", tmp_path / "s.ckpt") == 1
    assert "do not match" in capsys.readouterr().err
    assert run("sft", "--config", cfg10, "--demos", tmp_path / "none.bin", "--out", tmp_path / "s.ckpt") == 1


# -- eval --------------------------------------------------------------------------

def test_eval_counts_and_aggregate(sft_checkpoint, capsys):
    cfg, ckpt = sft_checkpoint
    capsys.readouterr()
    multi = ["--set", "task_id=none"]
    assert run("eval", "--config", cfg, *multi, "--checkpoint", ckpt, "--episodes", 100) == 0
    out = capsys.readouterr().out
    per_task = [tuple(map(int, m)) for m in re.findall(r"task \d+: (\d+)/(\d+)", out)]
    wins, total = map(int, re.search(r"aggregate: (\d+)/(\d+)", out).groups())
    assert total == 100 and sum(n for _, n in per_task) == 100
    assert wins == sum(w for w, _ in per_task)
    rate = float(out.strip().splitlines()[-1].split("=")[-1])
    assert rate == pytest.approx(sum(w / n * n for w, n in per_task) / 100, abs=1e-4)
    run("eval", "--config", cfg, *multi, "--checkpoint", ckpt, "--episodes", 100)
    assert capsys.readouterr().out == out


def test_eval_rejects_bad_inputs(sft_checkpoint, tmp_path):
    cfg, ckpt = sft_checkpoint
    assert run("eval", "--config", cfg, "--checkpoint", ckpt, "--episodes", 0) == 1
    (tmp_path / "junk.ckpt").write_bytes(b"junk")
    assert run("eval", "--config", cfg, "--checkpoint", tmp_path / "junk.ckpt") == 1


def test_checkpoint_round_trip_same_eval(sft_checkpoint, tmp_path, capsys):
    cfg, ckpt = sft_checkpoint
    policy, critic, extra = checkpoint.load(ckpt)
    checkpoint.save(tmp_path / "copy.ckpt", policy, critic, extra)
    capsys.readouterr()
    run("eval", "--config", cfg, "--checkpoint", ckpt, "--episodes", 20)
    a = capsys.readouterr().out
    run("eval", "--config", cfg, "--checkpoint", tmp_path / "copy.ckpt", "--episodes", 20)
    assert capsys.readouterr().out == a
    assert ckpt.read_bytes() == (tmp_path / "copy.ckpt").read_bytes()


# -- rl ----------------------------------------------------------------------------

def read_log(path):
    return [json.loads(line) for line in path.read_text().splitlines()]


def test_rl_logs_are_byte_identical(sft_checkpoint, tmp_path):
    cfg, ckpt = sft_checkpoint
    for name in ("a", "b"):
        assert run("rl", "--config", cfg, "--checkpoint", ckpt, "--out", tmp_path / f"{name}.ckpt",
                   "--log", tmp_path / f"{name}.jsonl") == 0
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    rows = read_log(tmp_path / "a.jsonl")
    assert [r["update"] for r in rows] == [0, 1, 2]
    assert "wall_seconds" not in rows[0]
    timing = read_log(tmp_path / "a.jsonl.timing")
    assert [t["update"] for t in timing] == [0, 1, 2]


def test_rl_sample_counts_hybrid_vs_full(sft_checkpoint, tmp_path):
    cfg, ckpt = sft_checkpoint
    counts = {}
    for method in ("flow_sde_hybrid", "flow_sde_full"):
        log = tmp_path / f"{method}.jsonl"
        run("rl", "--config", cfg, "--set", f"method={method}", "--set", "train_epochs=1",
            "--checkpoint", ckpt, "--out", tmp_path / "o.ckpt", "--log", log)
        counts[method] = read_log(log)[0]["n_samples"]
    assert counts["flow_sde_hybrid"] == 8 * 4
    assert counts["flow_sde_full"] == 4 * counts["flow_sde_hybrid"]


def test_rl_grpo_logs_no_value_loss(sft_checkpoint, tmp_path):
    cfg, ckpt = sft_checkpoint
    log = tmp_path / "g.jsonl"
    assert run("rl", "--config", cfg, "--set", "algorithm=grpo", "--set", "group_size=4",
               "--checkpoint", ckpt, "--out", tmp_path / "g.ckpt", "--log", log) == 0
    assert all(r["value_loss"] is None for r in read_log(log))
    _, critic, _ = checkpoint.load(tmp_path / "g.ckpt")
    assert critic is None


def test_rl_nan_keeps_last_good_checkpoint(sft_checkpoint, tmp_path, monkeypatch, capsys):
    cfg, ckpt = sft_checkpoint
    real = algo.ppo_loss
    calls = []

    def poisoned(*args, **kwargs):
        calls.append(1)
        loss, metrics, ratio = real(*args, **kwargs)
        if len(calls) > 2:  # one update of 2 minibatch steps succeeds
            metrics.policy_loss = float("nan")
        return loss, metrics, ratio

    monkeypatch.setattr(algo, "ppo_loss", poisoned)
    out = tmp_path / "r.ckpt"
    assert run("rl", "--config", cfg, "--set", "minibatch_size=64", "--checkpoint", ckpt, "--out", out,
               "--log", tmp_path / "r.jsonl") == 2
    assert "non-finite" in capsys.readouterr().err
    _, _, extra = checkpoint.load(out)
    assert extra["update"] == 0
    assert len(read_log(tmp_path / "r.jsonl")) == 1


def test_rl_incompatible_checkpoint(sft_checkpoint, tmp_path):
    cfg, ckpt = sft_checkpoint
    assert run("rl", "--config", cfg, "--set", "chunk_size=10", "--checkpoint", ckpt,
               "--out", tmp_path / "x.ckpt") == 1


# -- diag and pipeline -------------------------------------------------------------

def test_diag_passes(capsys):
    assert run("diag") == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) >= 10 and all(line.startswith("PASS") for line in lines)


def test_pipeline_writes_everything(tmp_path, small_config):
    out = tmp_path / "run"
    assert run("pipeline", "--config", small_config(), "--out", out, "--episodes", 10) == 0
    for name in ("config.ini", "demos.bin", "sft.ckpt", "rl.ckpt", "metrics.jsonl", "summary.json"):
        assert (out / name).exists(), name
    summary = json.loads((out / "summary.json").read_text())
    assert set(summary) == {"sft_eval_success", "rl_eval_success"}
    assert parse_config((out / "config.ini").read_text()).train_epochs == 3
    assert np.isfinite(summary["rl_eval_success"])
