"""``tinydlm`` command line: train / sample / chat / eval / bench / visualize.

Configuration is resolved as built-in defaults <- config file <- CLI flags.
Config files are flat ``section.key = value`` lines (``#`` starts a comment).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch

from . import __version__
from .backbone import Backbone, BackboneConfig, load_checkpoint, save_checkpoint, set_deterministic
from .corpus import (
    EOS_ID,
    IGNORE_INDEX,
    NoAttentionMaskWrapper,
    PretrainCollator,
    PrependBOSWrapper,
    SFTCollator,
    apply_chat_template,
    conversation_to_example,
    encode,
    iter_documents,
    read_sft_jsonl,
)
from .errors import ConfigError, DataError, TinyDLMError
from .samplers import DecodeHistory, SamplerConfig, get_sampler
from .trainers import TrainConfig, adapt_from_autoregressive, train, write_reports

log = logging.getLogger("tinydlm")

RUN_ROOT_ENV = "TINYDLM_RUN_ROOT"

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4, 5


def _bool(s) -> bool:
    if isinstance(s, bool):
        return s
    v = str(s).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _opt_int(s):
    return None if s in (None, "", "none", "None") else int(s)


# key: (type, default, help)
DEFAULTS: dict[str, tuple] = {
    "model.d_model": (int, 256, "model width"),
    "model.n_layers": (int, 6, "transformer layers"),
    "model.n_heads": (int, 8, "attention heads"),
    "model.d_ff": (int, 1024, "feed-forward width"),
    "model.max_seq_len": (int, 1024, "longest sequence (two-stream training needs 2x the row width)"),
    "model.rope_base": (float, 10000.0, "rotary base"),
    "model.right_shift_logits": (_bool, False, "predict position i from hidden state i-1"),
    "data.max_len": (int, 64, "row width cap"),
    "data.eos_fill": (_bool, True, "relabel SFT padding as EOS targets"),
    "data.pad_to": (_opt_int, None, "pad SFT rows to at least this width so EOS fill covers the sampling window"),
    "data.no_attention_mask": (_bool, True, "let every position see padding"),
    "data.prepend_bos": (_bool, False, "prepend BOS to every row"),
    "train.objective": (str, "mdlm", "mdlm | bd3lm | ar"),
    "train.block_size": (_opt_int, None, "block size for bd3lm"),
    "train.lr_peak": (float, 3e-4, "peak learning rate"),
    "train.warmup_frac": (float, 0.10, "fraction of steps spent warming up"),
    "train.total_steps": (int, 1000, "optimizer steps"),
    "train.batch_rows": (int, 16, "rows per micro-batch"),
    "train.grad_accum": (int, 1, "micro-batches per step"),
    "train.weight_decay": (float, 0.0, "decoupled weight decay"),
    "train.grad_clip_norm": (float, 1.0, "gradient clipping norm"),
    "train.seed": (int, 0, "random seed"),
    "train.eval_every": (int, 0, "held-out loss interval (0 = off)"),
    "train.checkpoint_every": (int, 0, "checkpoint interval (0 = end only)"),
    "train.log_every": (int, 10, "report interval"),
    "train.maskable_policy": (str, "loss_only", "loss_only | non_pad"),
}


@dataclass
class ResolvedConfig:
    values: dict = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)

    def section(self, name: str) -> dict:
        p = name + "."
        return {k[len(p) :]: v for k, v in self.values.items() if k.startswith(p)}

    def snapshot(self) -> str:
        return "".join(
            f"{k} = {json.dumps(v)}  # {self.provenance[k]}\n" for k, v in sorted(self.values.items())
        )


def parse_config_file(path: str | Path) -> dict[str, str]:
    out = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config file {path}: {e}") from e
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'section.key = value'")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in DEFAULTS:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        out[key] = val.strip('"')
    return out


def _convert(key: str, raw):
    typ = DEFAULTS[key][0]
    try:
        return typ(raw) if raw is not None else None
    except (TypeError, ValueError) as e:
        raise ConfigError(f"bad value for {key}: {raw!r} ({e})") from e


def resolve_config(file_values: dict, cli_values: dict) -> ResolvedConfig:
    rc = ResolvedConfig()
    for key, (_, default, _) in DEFAULTS.items():
        rc.values[key], rc.provenance[key] = default, "default"
        if key in file_values:
            rc.values[key], rc.provenance[key] = _convert(key, file_values[key]), "file"
        if cli_values.get(key) is not None:
            rc.values[key], rc.provenance[key] = _convert(key, cli_values[key]), "cli"
    return rc


def _flag(key: str) -> str:
    return "--" + key.split(".", 1)[1].replace("_", "-")


def _dest(key: str) -> str:
    return "cfg__" + key.replace(".", "__")


# -- argument parsing ------------------------------------------------------


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--deterministic", action="store_true", help="bit-stable mode; timing is kept out of stdout and reports (default: off)")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr (default: off)")


def _sampler_flags(p: argparse.ArgumentParser) -> None:
    d = SamplerConfig()
    p.add_argument("--sampler", choices=["mdlm", "fastdllm", "bd3lm"], default="mdlm", help="decoding algorithm (default: %(default)s)")
    p.add_argument("--max-new-tokens", type=int, default=d.max_new_tokens, help="pre-allocated generation window (default: %(default)s)")
    p.add_argument("--steps", type=int, default=None, help="decoding steps (default: max-new-tokens)")
    p.add_argument("--temperature", type=float, default=d.temperature, help="0 = greedy (default: %(default)s)")
    p.add_argument("--top-p", type=float, default=d.top_p, help="nucleus mass (default: %(default)s)")
    p.add_argument("--cfg", type=float, default=d.cfg_scale, help="guidance scale (default: %(default)s)")
    p.add_argument("--threshold", type=float, default=d.confidence_threshold, help="parallel-decoding confidence threshold (default: %(default)s)")
    p.add_argument("--cache-block", type=int, default=None, help="decode block size for fastdllm (default: whole window)")
    p.add_argument("--min-new-tokens", type=int, default=d.min_new_tokens, help="suppress EOS before this index (default: %(default)s)")
    p.add_argument("--tokens-per-step", type=int, default=None, help="fixed tokens finalized per step (default: even split)")
    p.add_argument("--block-size", type=int, default=None, help="bd3lm block size (default: from checkpoint)")
    p.add_argument("--no-cache", action="store_true", help="disable KV caching (default: off)")
    p.add_argument("--no-parallel", action="store_true", help="one token per inner step in fastdllm (default: off)")
    p.add_argument("--seed", type=int, default=d.seed, help="sampling seed (default: %(default)s)")


def sampler_config_from(args) -> SamplerConfig:
    return SamplerConfig(
        max_new_tokens=args.max_new_tokens,
        steps=args.steps,
        temperature=args.temperature,
        top_p=args.top_p,
        cfg_scale=args.cfg,
        min_new_tokens=args.min_new_tokens,
        tokens_per_step=args.tokens_per_step,
        confidence_threshold=args.threshold,
        cache_block_size=args.cache_block,
        cache_enabled=not args.no_cache,
        parallel_enabled=not args.no_parallel,
        block_size=args.block_size,
        seed=args.seed,
    ).validate()


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tinydlm", description="Train, sample, evaluate and visualize small diffusion LMs.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a backbone", formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    _common(p)
    p.add_argument("--config", help="key = value config file (default: none)")
    p.add_argument("--data", help="SFT .jsonl or pretraining .txt (default: none)")
    p.add_argument("--name", default="run", help="run name under the run root (default: %(default)s)")
    p.add_argument("--run-root", default=None, help=f"run root directory (default: ${RUN_ROOT_ENV} or ./runs)")
    p.add_argument("--init", default=None, help="initialise from this checkpoint (default: random)")
    p.add_argument("--no-plot", action="store_true", help="skip the loss-curve figure (default: off)")
    for key, (_, default, hlp) in DEFAULTS.items():
        p.add_argument(_flag(key), dest=_dest(key), default=None, help=f"{hlp} (default: {default})")

    p = sub.add_parser("sample", help="generate from a prompt")
    _common(p)
    p.add_argument("--checkpoint", required=True, help="model checkpoint")
    p.add_argument("--prompt", default=None, help="prompt text (default: read stdin)")
    p.add_argument("--raw", action="store_true", help="do not wrap the prompt in the chat template (default: off)")
    p.add_argument("--history", default=None, help="write the decode history here (default: none)")
    _sampler_flags(p)

    p = sub.add_parser("chat", help="line-oriented chat loop on stdin/stdout")
    _common(p)
    p.add_argument("--checkpoint", required=True, help="model checkpoint")
    _sampler_flags(p)

    p = sub.add_parser("eval", help="evaluate on a task file")
    _common(p)
    p.add_argument("--checkpoint", required=True, help="model checkpoint")
    p.add_argument("--task", required=True, help="task .jsonl")
    p.add_argument("--mc-samples", type=int, default=128, help="Monte-Carlo draws per option (default: %(default)s)")
    p.add_argument("--sweep", default=None, help="sampler knob to vary (default: none)")
    p.add_argument("--values", default=None, help="comma-separated knob values (default: none)")
    p.add_argument("--out", default=None, help="report directory (default: none)")
    _sampler_flags(p)

    p = sub.add_parser("bench", help="measure decoding throughput")
    _common(p)
    p.add_argument("--checkpoint", required=True, help="model checkpoint")
    p.add_argument("--prompts", type=int, default=4, help="number of synthetic copy prompts (default: %(default)s)")
    p.add_argument("--prompt-seed", type=int, default=0, help="seed for the synthetic prompts (default: %(default)s)")
    p.add_argument("--warmup", type=int, default=1, help="untimed warmup generations (default: %(default)s)")
    p.add_argument("--baseline", default=None, help="earlier bench report (.jsonl) to compute speedup against (default: none)")
    p.add_argument("--out", default=None, help="report directory (default: none)")
    _sampler_flags(p)

    p = sub.add_parser("visualize", help="render a decode history")
    _common(p)
    p.add_argument("--history", required=True, help="history record file")
    p.add_argument("--mode", choices=["replay", "summary"], default="replay", help="render mode (default: %(default)s)")
    p.add_argument("--width", type=int, default=80, help="wrap width (default: %(default)s)")
    p.add_argument("--delay-ms", type=int, default=0, help="pause between replay frames (default: %(default)s)")
    p.add_argument("--no-color", action="store_true", help="plain text without escape sequences (default: off)")

    p = sub.add_parser("gen-data", help="write a synthetic task or corpus file")
    _common(p)
    p.add_argument("--task", choices=["copy", "reverse", "addition", "retrieval", "corpus"], required=True, help="what to generate")
    p.add_argument("--n", type=int, default=1000, help="records (default: %(default)s)")
    p.add_argument("--seed", type=int, default=0, help="generator seed (default: %(default)s)")
    p.add_argument("--format", choices=["task", "sft"], default="task", help="task records or SFT conversations (default: %(default)s)")
    p.add_argument("--out", required=True, help="output file")
    return parser


# -- commands ------------------------------------------------------------------


def _load(path) -> Backbone:
    if not Path(path).exists():
        raise DataError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


def load_dataset(path: str, max_len: int):
    """(items, base collator) for an SFT .jsonl or a pretraining text file."""
    p = Path(path)
    if not p.exists():
        raise DataError(f"dataset not found: {path}")
    if p.suffix == ".jsonl":
        items = [conversation_to_example(c) for c in read_sft_jsonl(p)]
        kind = "sft"
    else:
        items = [encode(d) + [EOS_ID] for d in iter_documents(p)]
        kind = "text"
    if not items:
        raise DataError(f"dataset {path} is empty")
    return items, kind


def cmd_train(args) -> int:
    file_values = parse_config_file(args.config) if args.config else {}
    cli_values = {k: getattr(args, _dest(k)) for k in DEFAULTS}
    rc = resolve_config(file_values, cli_values)
    root = Path(args.run_root or os.environ.get(RUN_ROOT_ENV, "runs"))
    run_dir = root / args.name
    try:
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "config.snapshot").write_text(rc.snapshot())
    except OSError as e:
        print(f"error: cannot write run directory {run_dir}: {e}", file=sys.stderr)
        return EXIT_IO

    mcfg = BackboneConfig(vocab_size=260, **rc.section("model"))
    tcfg = TrainConfig(**rc.section("train"))
    data = rc.section("data")
    if args.init:
        model = _load(args.init)
        if model.meta.get("objective") == "ar" and tcfg.objective != "ar":
            adapt_from_autoregressive(model, mcfg.right_shift_logits)
        else:
            model.config.right_shift_logits = mcfg.right_shift_logits
    else:
        torch.manual_seed(tcfg.seed)
        model = Backbone(mcfg)

    if tcfg.total_steps == 0:
        items = []
        if args.data:
            items, _ = load_dataset(args.data, data["max_len"])
        save_checkpoint(model, run_dir / "step-0" / "model.ckpt")
        print(json.dumps({"step": 0, "checkpoint": str(run_dir / "step-0" / "model.ckpt")}))
        return EXIT_OK
    if not args.data:
        raise DataError("--data is required when total_steps > 0")
    items, kind = load_dataset(args.data, data["max_len"])
    if kind == "sft":
        collator = SFTCollator(data["max_len"], EOS_ID if data["eos_fill"] else IGNORE_INDEX, pad_to=data["pad_to"])
    else:
        collator = PretrainCollator(data["max_len"])
    if data["no_attention_mask"]:
        collator = NoAttentionMaskWrapper(collator)
    if data["prepend_bos"]:
        collator = PrependBOSWrapper(collator, mcfg.max_seq_len)
    eval_batch = collator(items[: min(len(items), 32)]) if tcfg.eval_every else None

    timing = not args.deterministic

    def emit(rep):
        print(json.dumps(rep.to_record(timing=timing), sort_keys=True), flush=True)

    result = train(model, items, tcfg, collator, run_dir=run_dir, eval_batch=eval_batch, on_report=emit)
    write_reports(result.reports, run_dir / "train_report.jsonl", timing=False)
    write_reports(result.reports, run_dir / "train_timing.jsonl", timing=True)
    if not args.no_plot:
        from .plots import plot_training_curve

        plot_training_curve(result.reports, run_dir / "loss.png")
    print(json.dumps({"checkpoint": str(result.checkpoint)}))
    return EXIT_OK


def cmd_sample(args) -> int:
    model = _load(args.checkpoint)
    cfg = sampler_config_from(args)
    text = args.prompt if args.prompt is not None else sys.stdin.read()
    prompt = encode(text) if args.raw else apply_chat_template([{"role": "user", "content": text}], True)
    out = get_sampler(args.sampler, model).sample(prompt, cfg)
    if args.history:
        out.history.write(args.history)
    print(out.text)
    return EXIT_OK


def cmd_chat(args) -> int:
    model = _load(args.checkpoint)
    cfg = sampler_config_from(args)
    sampler = get_sampler(args.sampler, model)
    messages = []
    interactive = sys.stdin.isatty()
    while True:
        if interactive:
            sys.stdout.write("> ")
            sys.stdout.flush()
        line = sys.stdin.readline()
        if not line:
            break
        line = line.rstrip("\n")
        if line.strip() in ("/exit", "/quit"):
            break
        if line.strip() == "/reset":
            messages = []
            continue
        messages.append({"role": "user", "content": line})
        out = sampler.sample(apply_chat_template(messages, add_generation_prompt=True), cfg)
        reply = out.text
        messages.append({"role": "assistant", "content": reply})
        print(f"user: {line}")
        print(f"assistant: {reply}")
        sys.stdout.flush()
    return EXIT_OK


def _parse_values(knob: str, raw: str) -> list:
    default = getattr(SamplerConfig(), knob)
    vals = []
    for s in raw.split(","):
        s = s.strip()
        if s.lower() == "none":
            vals.append(None)
        elif isinstance(default, bool):
            vals.append(_bool(s))
        elif isinstance(default, float):
            vals.append(float(s))
        else:
            vals.append(int(s))
    return vals


def cmd_eval(args) -> int:
    from .evaluator import (
        eval_generative,
        eval_multiple_choice,
        eval_table,
        load_task,
        sweep,
        write_records,
    )

    if not Path(args.task).exists():
        raise DataError(f"task file not found: {args.task}")
    model = _load(args.checkpoint)
    task = load_task(args.task)
    cfg = sampler_config_from(args)
    timing = not args.deterministic
    knob = None
    if args.sweep:
        if not args.values:
            raise ConfigError("--sweep needs --values")
        if args.sweep not in SamplerConfig.knobs():
            raise ConfigError(f"unknown knob {args.sweep!r}; valid knobs: {', '.join(SamplerConfig.knobs())}")
        knob = args.sweep
        reports = sweep(model, task, knob, _parse_values(knob, args.values), args.sampler, cfg)
    elif task.kind == "multiple_choice":
        reports = [eval_multiple_choice(model, task, args.mc_samples, args.seed)]
    else:
        reports = [eval_generative(model, get_sampler(args.sampler, model), task, cfg)]
    table = eval_table(reports, knob, timing=timing)
    print(table)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_records([r.to_record(timing=timing) for r in reports], out / "eval.jsonl")
        (out / "eval.txt").write_text(table + "\n")
        if knob:
            from .plots import plot_sweep

            plot_sweep(reports, knob, out / f"sweep_{knob}.png")
    return EXIT_OK


def cmd_bench(args) -> int:
    from .evaluator import ThroughputReport, bench_throughput, format_table, write_records
    from .tasks import make_generative_records

    model = _load(args.checkpoint)
    cfg = sampler_config_from(args)
    recs = make_generative_records("copy", args.prompts, args.prompt_seed)
    prompts = [apply_chat_template([{"role": "user", "content": r["prompt"]}], True) for r in recs]
    baseline = None
    if args.baseline:
        try:
            first = Path(args.baseline).read_text().splitlines()[0]
            baseline = ThroughputReport(**json.loads(first))
        except (OSError, IndexError, TypeError, json.JSONDecodeError) as e:
            raise DataError(f"cannot read baseline report {args.baseline}: {e}") from e
    rep = bench_throughput(model, args.sampler, prompts, cfg, warmup=args.warmup, baseline=baseline)
    timing = not args.deterministic
    cols = ["sampler", "max_new_tokens", "generations", "tokens", "nfe", "token_positions"]
    if timing:
        cols += ["wall_s", "tokens_per_s"] + (["speedup"] if baseline else [])
    table = format_table([rep.to_record(timing)], cols)
    print(table)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_records([rep.to_record(timing=True)], out / "bench.jsonl")
        (out / "bench.txt").write_text(table + "\n")
        from .plots import plot_throughput

        plot_throughput([baseline, rep] if baseline else [rep], out / "throughput.png")
    return EXIT_OK


def cmd_visualize(args) -> int:
    from .visualizer import play, render_history

    if not Path(args.history).exists():
        raise DataError(f"history file not found: {args.history}")
    hist = DecodeHistory.read(args.history)
    frames = render_history(hist, args.mode, args.width, color=not args.no_color)
    play(frames, args.delay_ms, color=not args.no_color)
    return EXIT_OK


def cmd_gen_data(args) -> int:
    from .corpus import write_sft_jsonl
    from .tasks import (
        make_generative_records,
        make_retrieval_records,
        make_text_corpus,
        records_to_conversations,
        write_jsonl,
    )

    if args.task == "corpus":
        Path(args.out).write_text("\n\n".join(make_text_corpus(args.n, args.seed)) + "\n")
    elif args.task == "retrieval":
        write_jsonl(args.out, make_retrieval_records(args.n, args.seed), {"name": "retrieval", "kind": "multiple_choice"})
    else:
        recs = make_generative_records(args.task, args.n, args.seed)
        if args.format == "sft":
            write_sft_jsonl(args.out, records_to_conversations(recs))
        else:
            write_jsonl(args.out, recs, {"name": args.task, "kind": "generative_exact_match"})
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "sample": cmd_sample,
    "chat": cmd_chat,
    "eval": cmd_eval,
    "bench": cmd_bench,
    "visualize": cmd_visualize,
    "gen-data": cmd_gen_data,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.deterministic:
        set_deterministic(True)
    try:
        return COMMANDS[args.command](args)
    except TinyDLMError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except (FileNotFoundError, IsADirectoryError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
