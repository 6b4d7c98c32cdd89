import io
import json
import re
import sys
from pathlib import Path

import pytest
import torch

from tinydlm.backbone import load_checkpoint, save_checkpoint
from tinydlm.cli import DEFAULTS, build_parser, main, parse_config_file, resolve_config
from tinydlm.corpus import BOS_ID, EOS_ID, encode
from tinydlm.errors import ConfigError
from tinydlm.samplers import DecodeHistory
from tinydlm.tasks import make_generative_records, records_to_conversations, write_jsonl
from tinydlm.corpus import write_sft_jsonl

from conftest import tiny_model

DATA = Path(__file__).parent / "data"
SUBCOMMANDS = ["train", "sample", "chat", "eval", "bench", "visualize", "gen-data"]


@pytest.fixture
def ckpt(tmp_path):
    return str(save_checkpoint(tiny_model(seed=0), tmp_path / "m.ckpt"))


@pytest.fixture
def copy_data(tmp_path):
    path = tmp_path / "copy.jsonl"
    write_sft_jsonl(path, records_to_conversations(make_generative_records("copy", 20, 0)))
    return str(path)


def run(argv, capsys, stdin=None, monkeypatch=None):
    if stdin is not None:
        monkeypatch.setattr(sys, "stdin", io.StringIO(stdin))
    code = main(argv)
    out = capsys.readouterr()
    return code, out.out, out.err


# -- help and config -------------------------------------------------------------


@pytest.mark.parametrize("cmd", SUBCOMMANDS)
def test_help_lists_every_flag_with_default(cmd):
    parser = build_parser()
    sub = parser._subparsers._group_actions[0].choices[cmd]
    text = sub.format_help()
    for action in sub._actions:
        if action.dest in ("help",) or not action.option_strings:
            continue
        assert action.help and ("default" in action.help or action.required), action.dest
        assert action.option_strings[-1] in text


def test_help_exits_cleanly(capsys):
    with pytest.raises(SystemExit) as e:
        main(["sample", "--help"])
    assert e.value.code == 0
    assert "--max-new-tokens" in capsys.readouterr().out


def test_precedence_and_provenance(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("train.lr_peak = 1e-3  # from file\ntrain.total_steps = 50\n")
    rc = resolve_config(parse_config_file(cfg), {"train.lr_peak": "3e-4"})
    assert rc.values["train.lr_peak"] == 3e-4 and rc.provenance["train.lr_peak"] == "cli"
    assert rc.values["train.total_steps"] == 50 and rc.provenance["train.total_steps"] == "file"
    assert rc.provenance["train.seed"] == "default"
    assert set(rc.values) == set(DEFAULTS)
    assert "train.lr_peak = 0.0003  # cli" in rc.snapshot()


def test_config_file_errors(tmp_path):
    bad = tmp_path / "bad.cfg"
    bad.write_text("train.nonsense = 3\n")
    with pytest.raises(ConfigError, match="unknown key"):
        parse_config_file(bad)
    bad.write_text("just words\n")
    with pytest.raises(ConfigError):
        parse_config_file(bad)
    with pytest.raises(ConfigError):
        resolve_config({"train.total_steps": "many"}, {})


# -- train --------------------------------------------------------------------------


def test_train_zero_steps(tmp_path, capsys):
    cfg = tmp_path / "copy.cfg"
    cfg.write_text("model.d_model = 16\nmodel.n_layers = 1\nmodel.n_heads = 2\nmodel.d_ff = 32\nmodel.max_seq_len = 128\n")
    code, out, _ = run(["train", "--config", str(cfg), "--total-steps", "0", "--run-root", str(tmp_path), "--name", "z"], capsys)
    assert code == 0
    run_dir = tmp_path / "z"
    assert sorted(p.name for p in run_dir.iterdir()) == ["config.snapshot", "step-0"]
    assert "train.total_steps = 0  # cli" in (run_dir / "config.snapshot").read_text()
    assert load_checkpoint(run_dir / "step-0" / "model.ckpt").config.d_model == 16


def test_train_writes_run_directory(tmp_path, capsys, copy_data):
    argv = [
        "train", "--data", copy_data, "--run-root", str(tmp_path), "--name", "r",
        "--d-model", "16", "--n-layers", "1", "--n-heads", "2", "--d-ff", "32", "--max-seq-len", "128",
        "--total-steps", "4", "--batch-rows", "4", "--eval-every", "2", "--log-every", "1", "--deterministic",
    ]
    code, out, _ = run(argv, capsys)
    assert code == 0
    records = [json.loads(line) for line in out.splitlines()[:-1]]
    assert [r["step"] for r in records] == [0, 1, 2, 3, 4]
    assert all("wall_time" not in r for r in records)
    run_dir = tmp_path / "r"
    for name in ("config.snapshot", "train_report.jsonl", "train_timing.jsonl", "loss.png", "step-4"):
        assert (run_dir / name).exists(), name
    # second run, same seed: byte-identical stdout and report
    report = (run_dir / "train_report.jsonl").read_bytes()
    code, out2, _ = run(argv[:6] + ["r2"] + argv[7:], capsys)
    assert out2.replace("/r2/", "/r/") == out
    assert (tmp_path / "r2" / "train_report.jsonl").read_bytes() == report


def test_train_missing_dataset(tmp_path, capsys):
    code, _, err = run(["train", "--data", str(tmp_path / "nope.jsonl"), "--run-root", str(tmp_path)], capsys)
    assert code == 3 and "not found" in err


def test_train_unwritable_run_dir(tmp_path, capsys, copy_data):
    blocker = tmp_path / "file"
    blocker.write_text("")
    code, _, err = run(["train", "--data", copy_data, "--run-root", str(blocker)], capsys)
    assert code == 5 and "error" in err


def test_train_bad_flag_value(tmp_path, capsys, copy_data):
    code, _, err = run(["train", "--data", copy_data, "--run-root", str(tmp_path), "--warmup-frac", "2"], capsys)
    assert code == 2


def test_run_root_env(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("TINYDLM_RUN_ROOT", str(tmp_path / "env"))
    code, _, _ = run(["train", "--total-steps", "0", "--d-model", "16", "--n-heads", "2", "--n-layers", "1", "--d-ff", "16"], capsys)
    assert code == 0 and (tmp_path / "env" / "run" / "step-0" / "model.ckpt").exists()


# -- sample / chat ------------------------------------------------------------------------


def test_sample_empty(ckpt, capsys):
    code, out, _ = run(["sample", "--checkpoint", ckpt, "--prompt", "", "--max-new-tokens", "0"], capsys)
    assert code == 0 and out == "\n"


def test_sample_is_deterministic(ckpt, capsys, tmp_path):
    argv = ["sample", "--checkpoint", ckpt, "--prompt", "abc", "--max-new-tokens", "8",
            "--temperature", "1.0", "--seed", "7", "--deterministic"]
    a = run(argv + ["--history", str(tmp_path / "h1.jsonl")], capsys)
    b = run(argv + ["--history", str(tmp_path / "h2.jsonl")], capsys)
    assert a == b and a[0] == 0
    assert (tmp_path / "h1.jsonl").read_bytes() == (tmp_path / "h2.jsonl").read_bytes()


def test_sample_reads_stdin(ckpt, capsys, monkeypatch):
    code, out, _ = run(["sample", "--checkpoint", ckpt, "--max-new-tokens", "4"], capsys, "hello", monkeypatch)
    assert code == 0


def test_sample_bad_config_and_checkpoint(ckpt, capsys, tmp_path):
    code, _, err = run(["sample", "--checkpoint", ckpt, "--prompt", "a", "--top-p", "0"], capsys)
    assert code == 2 and "top_p" in err
    code, _, err = run(["sample", "--checkpoint", str(tmp_path / "none.ckpt"), "--prompt", "a"], capsys)
    assert code == 3
    broken = tmp_path / "broken.ckpt"
    broken.write_bytes(b"not a checkpoint at all")
    code, _, err = run(["sample", "--checkpoint", str(broken), "--prompt", "a"], capsys)
    assert code == 5 and "magic" in err


def test_chat_golden_transcript(ckpt, capsys, monkeypatch):
    script = (DATA / "chat_script.txt").read_text()
    code, out, _ = run(["chat", "--checkpoint", ckpt, "--max-new-tokens", "6", "--deterministic"], capsys, script, monkeypatch)
    assert code == 0
    assert out == (DATA / "chat_golden.txt").read_text()


# -- eval / bench / visualize / gen-data -----------------------------------------------------


def test_eval_prints_table_and_writes_reports(ckpt, capsys, tmp_path):
    task = tmp_path / "copy.jsonl"
    write_jsonl(task, make_generative_records("copy", 3, 5), {"name": "copy", "kind": "generative_exact_match"})
    code, out, _ = run(["eval", "--checkpoint", ckpt, "--task", str(task), "--max-new-tokens", "8", "--deterministic",
                        "--out", str(tmp_path / "rep")], capsys)
    assert code == 0
    header, rule, row = out.splitlines()
    assert header.split() == ["task", "metric", "value", "records", "seed"]
    assert row.split()[:2] == ["copy", "exact_match"]
    rec = json.loads((tmp_path / "rep" / "eval.jsonl").read_text())
    assert f"{rec['value']:.4f}" == row.split()[2]


def test_eval_sweep_and_errors(ckpt, capsys, tmp_path):
    task = tmp_path / "copy.jsonl"
    write_jsonl(task, make_generative_records("copy", 2, 5), {"name": "copy"})
    base = ["eval", "--checkpoint", ckpt, "--task", str(task), "--max-new-tokens", "8", "--deterministic"]
    code, out, _ = run(base + ["--sweep", "tokens_per_step", "--values", "1,4", "--out", str(tmp_path / "s")], capsys)
    assert code == 0 and len(out.splitlines()) == 4
    assert (tmp_path / "s" / "sweep_tokens_per_step.png").exists()
    code, _, err = run(base + ["--sweep", "warp", "--values", "1"], capsys)
    assert code == 2 and "valid knobs" in err
    code, _, err = run(["eval", "--checkpoint", ckpt, "--task", str(tmp_path / "none.jsonl")], capsys)
    assert code == 3
    empty = tmp_path / "empty.jsonl"
    empty.write_text("")
    code, _, err = run(["eval", "--checkpoint", ckpt, "--task", str(empty)], capsys)
    assert code == 3 and "no records" in err


def test_eval_multiple_choice(ckpt, capsys, tmp_path):
    task = tmp_path / "mc.jsonl"
    code, _, _ = run(["gen-data", "--task", "retrieval", "--n", "2", "--out", str(task)], capsys)
    code, out, _ = run(["eval", "--checkpoint", ckpt, "--task", str(task), "--mc-samples", "4", "--deterministic"], capsys)
    assert code == 0 and "accuracy" in out


def test_bench_with_baseline(ckpt, capsys, tmp_path):
    base = ["bench", "--checkpoint", ckpt, "--prompts", "2", "--max-new-tokens", "8"]
    code, _, _ = run(base + ["--out", str(tmp_path / "a")], capsys)
    assert code == 0
    code, out, _ = run(base + ["--baseline", str(tmp_path / "a" / "bench.jsonl"), "--out", str(tmp_path / "b")], capsys)
    assert code == 0 and "speedup" in out.splitlines()[0]
    assert (tmp_path / "b" / "throughput.png").exists()
    code, out, _ = run(base + ["--deterministic"], capsys)
    assert "tokens_per_s" not in out


def test_visualize_golden(capsys, tmp_path):
    prompt = [BOS_ID] + encode("Q: é?\n")
    n = len(prompt)
    gen = encode("oké") + [EOS_ID]
    h = DecodeHistory(prompt, 5)
    for pos, conf, left in (([2], 0.9, 4), ([0, 4], 0.8, 2), ([3], 0.6, 1), ([1], 0.5, 0)):
        h.record([n + p for p in pos], [gen[p] for p in pos], [conf] * len(pos), left)
    path = tmp_path / "h.jsonl"
    h.write(path)
    code, out, _ = run(["visualize", "--history", str(path), "--no-color", "--width", "6"], capsys)
    assert code == 0
    assert out == (DATA / "golden_replay_nocolor.txt").read_text(encoding="utf-8")
    assert "\x1b" not in out
    code, _, _ = run(["visualize", "--history", str(tmp_path / "none.jsonl")], capsys)
    assert code == 3


@pytest.mark.parametrize("task,fmt", [("copy", "task"), ("reverse", "sft"), ("addition", "task"), ("corpus", "task")])
def test_gen_data(task, fmt, capsys, tmp_path):
    out = tmp_path / "out"
    code, _, _ = run(["gen-data", "--task", task, "--n", "5", "--format", fmt, "--out", str(out)], capsys)
    assert code == 0 and out.stat().st_size > 0


def test_train_init_from_causal_checkpoint(tmp_path, capsys, copy_data):
    small = ["--d-model", "16", "--n-layers", "1", "--n-heads", "2", "--d-ff", "32", "--max-seq-len", "128",
             "--batch-rows", "4", "--deterministic", "--no-plot", "--run-root", str(tmp_path)]
    corpus = tmp_path / "corpus.txt"
    run(["gen-data", "--task", "corpus", "--n", "20", "--out", str(corpus)], capsys)
    code, _, _ = run(["train", "--data", str(corpus), "--objective", "ar", "--total-steps", "2", "--name", "ar"] + small, capsys)
    assert code == 0
    src = load_checkpoint(tmp_path / "ar" / "step-2" / "model.ckpt")
    code, _, _ = run(["train", "--data", copy_data, "--init", str(tmp_path / "ar" / "step-2" / "model.ckpt"),
                      "--right-shift-logits", "true", "--prepend-bos", "true", "--total-steps", "0", "--name", "mdlm"] + small, capsys)
    assert code == 0
    adapted = load_checkpoint(tmp_path / "mdlm" / "step-0" / "model.ckpt")
    assert adapted.config.right_shift_logits and adapted.meta["adapted_from"] == "ar"
    assert torch.allclose(adapted.tok_emb.weight[0], src.tok_emb.weight[1:].mean(0))
