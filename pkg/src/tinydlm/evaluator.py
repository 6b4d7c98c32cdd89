"""Evaluation harness: exact-match generation, ELBO multiple choice,
throughput benchmarks and one-knob-at-a-time sensitivity sweeps."""

from __future__ import annotations

import json
import logging
import math
import re
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .backbone import Backbone
from .corpus import Batch, apply_chat_template, encode
from .errors import EvalError, TinyDLMError
from .noising import T_FLOOR, MaskablePolicy, forward_mask, make_rng
from .samplers import Sampler, SamplerConfig, get_sampler
from .trainers import mdlm_loss

log = logging.getLogger(__name__)

KINDS = ("generative_exact_match", "multiple_choice")


@dataclass
class TaskSpec:
    name: str
    kind: str
    records: list[dict]
    extraction_rule: str | None = None
    sampler_overrides: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise EvalError(f"task kind must be one of {KINDS}, got {self.kind!r}")
        if self.kind == "multiple_choice":
            for i, r in enumerate(self.records):
                opts = r.get("options", [])
                if len(opts) < 2 or not 0 <= int(r.get("gold", -1)) < len(opts):
                    raise EvalError(f"record {i}: need >= 2 options and a valid gold index")
        bad = set(self.sampler_overrides) - set(SamplerConfig.knobs())
        if bad:
            raise EvalError(f"unknown sampler overrides {sorted(bad)}")


def load_task(path: str | Path, name: str | None = None) -> TaskSpec:
    """Read a JSONL task; an optional leading ``{"config": {...}}`` line configures it."""
    records, header = [], {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise EvalError(f"{path}:{lineno}: invalid JSON ({e})") from e
            if "config" in obj and not records and not header:
                header = obj["config"]
            else:
                records.append(obj)
    kind = header.get("kind")
    if kind is None:
        kind = "multiple_choice" if records and "options" in records[0] else "generative_exact_match"
    return TaskSpec(
        name=header.get("name", name or Path(path).stem),
        kind=kind,
        records=records,
        extraction_rule=header.get("extraction_rule"),
        sampler_overrides=header.get("sampler_overrides", {}),
    )


@dataclass
class EvalReport:
    task: str
    metric: str
    value: float
    records: int
    config: dict
    seed: int
    tokens_per_s: float | None = None

    def to_record(self, timing: bool = True) -> dict:
        rec = asdict(self)
        if not timing or self.tokens_per_s is None:
            rec.pop("tokens_per_s")
        return rec


def extract_answer(text: str, rule: str | None) -> str:
    text = text.strip()
    if not rule:
        return text
    m = re.search(rule, text)
    if m is None:
        return ""
    return (m.group(1) if m.groups() else m.group(0)).strip()


def resolve_config(base: SamplerConfig | None, overrides: dict) -> SamplerConfig:
    return replace(base or SamplerConfig(), **overrides).validate()


def chat_prompt(text: str) -> list[int]:
    return apply_chat_template([{"role": "user", "content": text}], add_generation_prompt=True)


def eval_generative(
    model: Backbone, sampler: Sampler | str, task: TaskSpec, config: SamplerConfig | None = None
) -> EvalReport:
    if task.kind != "generative_exact_match":
        raise EvalError(f"task {task.name!r} is {task.kind}, not generative")
    if not task.records:
        raise EvalError(f"task {task.name!r} has no records")
    if isinstance(sampler, str):
        sampler = get_sampler(sampler, model)
    cfg = resolve_config(config or sampler.config, task.sampler_overrides)
    hits, n_tokens, elapsed = 0, 0, 0.0
    for i, rec in enumerate(task.records):
        start = time.perf_counter()
        try:
            out = sampler.sample(chat_prompt(rec["prompt"]), cfg)
        except TinyDLMError as e:
            log.warning("record %d of %s failed: %s", i, task.name, e)
            continue
        elapsed += time.perf_counter() - start
        n_tokens += len(out.generated)
        hits += extract_answer(out.text, task.extraction_rule) == rec["target"]
    return EvalReport(
        task=task.name,
        metric="exact_match",
        value=hits / len(task.records),
        records=len(task.records),
        config={"sampler": sampler.name, **asdict(cfg)},
        seed=cfg.seed,
        tokens_per_s=n_tokens / elapsed if elapsed > 0 else 0.0,
    )


# -- likelihood scoring -----------------------------------------------------


def antithetic_times(n: int, rng: np.random.Generator, t_floor: float = T_FLOOR) -> torch.Tensor:
    half = (n + 1) // 2
    t = rng.uniform(t_floor, 1.0, size=half)
    pair = np.clip(1.0 - t, t_floor, 1.0)
    return torch.from_numpy(np.stack([t, pair], axis=1).reshape(-1)[:n]).float()


def elbo_nll(
    model: Backbone,
    prompt: Sequence[int],
    continuation: Sequence[int],
    mc_samples: int,
    rng: np.random.Generator,
    chunk: int = 256,
) -> float:
    """Monte-Carlo masked-diffusion bound on the per-token NLL of ``continuation``."""
    if mc_samples < 1:
        raise EvalError(f"mc_samples must be >= 1, got {mc_samples}")
    row = list(prompt) + list(continuation)
    ids = torch.tensor(row, dtype=torch.long)
    lmask = torch.zeros(len(row), dtype=torch.bool)
    lmask[len(prompt) :] = True
    labels = torch.where(lmask, ids, torch.full_like(ids, -100))
    ts = antithetic_times(mc_samples, rng)
    total = 0.0
    with torch.no_grad():
        for s in range(0, mc_samples, chunk):
            t = ts[s : s + chunk]
            b = len(t)
            batch = Batch(
                ids.repeat(b, 1), lmask.repeat(b, 1), labels.repeat(b, 1), None,
                torch.full((b,), len(prompt)),
            )
            noised = forward_mask(batch, t, rng, MaskablePolicy.LOSS_ONLY)
            total += float(mdlm_loss(model(noised.x_t), noised, batch).per_row.sum())
    return total / mc_samples


def eval_multiple_choice(model: Backbone, task: TaskSpec, mc_samples: int = 128, seed: int = 0) -> EvalReport:
    if task.kind != "multiple_choice":
        raise EvalError(f"task {task.name!r} is {task.kind}, not multiple choice")
    if mc_samples < 1:
        raise EvalError(f"mc_samples must be >= 1, got {mc_samples}")
    if not task.records:
        raise EvalError(f"task {task.name!r} has no records")
    was_training = model.training
    model.eval()
    rng = make_rng(seed, f"mc/{task.name}")
    hits = 0
    for rec in task.records:
        prompt = chat_prompt(rec["prompt"])
        nlls = [elbo_nll(model, prompt, encode(o), mc_samples, rng) for o in rec["options"]]
        pred = min(range(len(nlls)), key=lambda i: (nlls[i], i))
        hits += pred == int(rec["gold"])
    model.train(was_training)
    return EvalReport(
        task=task.name,
        metric="accuracy",
        value=hits / len(task.records),
        records=len(task.records),
        config={"mc_samples": mc_samples, "estimator": "antithetic"},
        seed=seed,
    )


# -- throughput -----------------------------------------------------------


@dataclass
class ThroughputReport:
    sampler: str
    max_new_tokens: int
    generations: int
    tokens: int
    wall_s: float
    tokens_per_s: float
    nfe: int
    token_positions: int
    warmup_s: float
    per_generation_s: list[float]
    speedup: float | None = None
    config: dict = field(default_factory=dict)

    def to_record(self, timing: bool = True) -> dict:
        rec = asdict(self)
        if not timing:
            for k in ("wall_s", "tokens_per_s", "warmup_s", "per_generation_s", "speedup"):
                rec.pop(k)
        return rec


def bench_throughput(
    model: Backbone,
    sampler: Sampler | str,
    prompts: Sequence[Sequence[int]],
    config: SamplerConfig,
    warmup: int = 1,
    baseline: ThroughputReport | None = None,
) -> ThroughputReport:
    if isinstance(sampler, str):
        sampler = get_sampler(sampler, model)
    if not prompts:
        raise EvalError("no prompts to benchmark")
    config = config.validate()
    if config.max_new_tokens == 0:
        raise EvalError("zero-length generations cannot be benchmarked")
    t0 = time.perf_counter()
    for i in range(warmup):
        sampler.sample(prompts[i % len(prompts)], config)
    warm = time.perf_counter() - t0
    times, tokens, nfe, work = [], 0, 0, 0
    for p in prompts:
        start = time.perf_counter()
        out = sampler.sample(p, config)
        times.append(time.perf_counter() - start)
        tokens += len(out.generated)
        nfe += out.nfe
        work += out.token_positions
    if tokens == 0:
        raise EvalError("benchmark produced zero tokens")
    wall = sum(times)
    rep = ThroughputReport(
        sampler=sampler.name,
        max_new_tokens=config.max_new_tokens,
        generations=len(prompts),
        tokens=tokens,
        wall_s=wall,
        tokens_per_s=tokens / wall,
        nfe=nfe,
        token_positions=work,
        warmup_s=warm,
        per_generation_s=times,
        config=asdict(config),
    )
    if baseline is not None:
        rep.speedup = rep.tokens_per_s / baseline.tokens_per_s
    return rep


# -- sweeps ----------------------------------------------------------------


def sweep(
    model: Backbone,
    task: TaskSpec,
    knob: str,
    values: Sequence,
    sampler: str = "mdlm",
    config: SamplerConfig | None = None,
) -> list[EvalReport]:
    """One report per knob value, everything else held at the task's resolved config."""
    valid = SamplerConfig.knobs()
    if knob not in valid:
        raise EvalError(f"unknown knob {knob!r}; valid knobs: {', '.join(valid)}")
    base = resolve_config(config, task.sampler_overrides)
    reports = []
    for v in values:
        cfg = replace(base, **{knob: v})
        rep = eval_generative(model, get_sampler(sampler, model), replace(task, sampler_overrides={}), cfg)
        rep.config["sweep_knob"] = knob
        reports.append(rep)
    return reports


# -- report output ------------------------------------------------------------


def write_records(records: Sequence[dict], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for r in records:
            f.write(json.dumps(r, sort_keys=True) + "\n")


def format_table(rows: Sequence[dict], columns: Sequence[str]) -> str:
    def cell(v):
        if isinstance(v, float):
            return f"{v:.4f}"
        return str(v)

    body = [[cell(r.get(c, "")) for c in columns] for r in rows]
    widths = [max(len(c), *(len(b[i]) for b in body)) if body else len(c) for i, c in enumerate(columns)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(columns, widths)).rstrip()]
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(v.ljust(w) for v, w in zip(b, widths)).rstrip() for b in body]
    return "\n".join(lines)


def eval_table(reports: Sequence[EvalReport], knob: str | None = None, timing: bool = True) -> str:
    rows = []
    for r in reports:
        row = {"task": r.task, "metric": r.metric, "value": r.value, "records": r.records, "seed": r.seed}
        if knob:
            row[knob] = r.config.get(knob)
        if timing and r.tokens_per_s is not None:
            row["tokens/s"] = r.tokens_per_s
        rows.append(row)
    cols = ["task"] + ([knob] if knob else []) + ["metric", "value", "records", "seed"]
    if timing and any(r.tokens_per_s is not None for r in reports):
        cols.append("tokens/s")
    return format_table(rows, cols)
