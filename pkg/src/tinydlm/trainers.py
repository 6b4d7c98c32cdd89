"""Masked / block diffusion objectives and the optimisation loop.

Both objectives reweight the masked cross-entropy by 1/t and normalise each
row by its count of loss-eligible positions.  The block objective is trained
in a single pass over the concatenated ``[x_t ; x_0]`` streams.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .backbone import AttentionMaskSpec, Backbone, save_checkpoint
from .corpus import IGNORE_INDEX, MASK_ID, PAD_ID, Batch
from .errors import CheckpointError, ConfigError, LossError, TrainingAborted
from .noising import (
    T_FLOOR,
    BlockLayout,
    MaskablePolicy,
    NoisedBatch,
    block_forward_mask,
    forward_mask,
    make_rng,
    sample_time,
)

log = logging.getLogger(__name__)

OBJECTIVES = ("mdlm", "bd3lm", "ar")


@dataclass
class TrainConfig:
    objective: str = "mdlm"
    block_size: int | None = None
    lr_peak: float = 3e-4
    warmup_frac: float = 0.10
    total_steps: int = 1000
    batch_rows: int = 16
    grad_accum: int = 1
    weight_decay: float = 0.0
    betas: tuple[float, float] = (0.9, 0.95)
    eps: float = 1e-8
    grad_clip_norm: float = 1.0
    seed: int = 0
    eval_every: int = 0
    checkpoint_every: int = 0
    log_every: int = 1
    maskable_policy: str = MaskablePolicy.LOSS_ONLY.value
    shared_block_t: bool = False

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ConfigError(f"objective must be one of {OBJECTIVES}, got {self.objective!r}")
        if self.objective == "bd3lm" and not self.block_size:
            raise ConfigError("bd3lm objective needs block_size")
        if not 0 <= self.warmup_frac < 1:
            raise ConfigError(f"warmup_frac must lie in [0, 1), got {self.warmup_frac}")
        if self.grad_accum < 1:
            raise ConfigError(f"grad_accum must be >= 1, got {self.grad_accum}")
        if self.total_steps < 0 or self.batch_rows < 1:
            raise ConfigError("total_steps must be >= 0 and batch_rows >= 1")
        self.betas = tuple(self.betas)
        MaskablePolicy(self.maskable_policy)

    @property
    def warmup_steps(self) -> int:
        return int(math.floor(self.warmup_frac * self.total_steps + 0.5))


@dataclass
class TrainReport:
    step: int
    loss: float
    lr: float
    tokens_seen: int
    wall_time: float
    eval_loss: float | None = None

    def to_record(self, timing: bool = True) -> dict:
        rec = asdict(self)
        if self.eval_loss is None:
            rec.pop("eval_loss")
        if timing:
            rec["tokens_per_s"] = self.tokens_seen / self.wall_time if self.wall_time > 0 else 0.0
        else:
            rec.pop("wall_time")
        return rec


@dataclass
class LossOutput:
    loss: torch.Tensor
    per_row: torch.Tensor
    n_eligible: torch.Tensor


# -- objectives ------------------------------------------------------------


def _token_nll(logits: torch.Tensor, labels: torch.Tensor, select: torch.Tensor) -> torch.Tensor:
    logp = F.log_softmax(logits, dim=-1)
    nll = -logp.gather(-1, labels.clamp(min=0)[..., None])[..., 0]
    return torch.where(select, nll, torch.zeros_like(nll))


def _weighted_loss(logits, t_pos, selected, batch: Batch) -> LossOutput:
    if bool((t_pos < T_FLOOR * (1 - 1e-6)).any()):
        raise LossError(f"noise level below t_floor={T_FLOOR}: min t = {float(t_pos.min())}")
    sel = selected & batch.loss_mask
    if bool((sel & (batch.labels == IGNORE_INDEX)).any()):
        raise LossError("loss would read an ignored label")
    n_b = batch.loss_mask.sum(dim=1)
    nll = _token_nll(logits, batch.labels, sel)
    weight = 1.0 / (t_pos.to(nll.dtype) * n_b.clamp(min=1)[:, None].to(nll.dtype))
    per_row = (nll * weight).sum(dim=1)
    valid = n_b > 0
    if bool(valid.any()):
        loss = per_row[valid].sum() / valid.sum()
    else:
        loss = per_row.sum() * 0.0
    return LossOutput(loss, per_row.detach(), n_b)


def mdlm_loss(logits: torch.Tensor, noised: NoisedBatch, batch: Batch) -> LossOutput:
    """Masked-diffusion ELBO: per row, (1 / (t n_b)) * sum of masked NLLs."""
    return _weighted_loss(logits, noised.t_per_position(), noised.mask_indicator, batch)


def bd3lm_loss(
    logits: torch.Tensor, noised: NoisedBatch, batch: Batch, layout: BlockLayout
) -> LossOutput:
    """Block-diffusion loss; only the noised stream (first L positions) is read."""
    width = batch.input_ids.shape[1]
    if layout.seq_len != width or noised.x_t.shape[1] != width:
        raise LossError(f"layout seq_len {layout.seq_len} does not match batch width {width}")
    if logits.shape[1] not in (width, 2 * width):
        raise LossError(f"logits width {logits.shape[1]} is neither L nor 2L (L={width})")
    t_pos = noised.t[:, layout.block_ids()] if noised.t.dim() == 2 else noised.t_per_position()
    return _weighted_loss(logits[:, :width], t_pos, noised.mask_indicator, batch)


def ar_loss(logits: torch.Tensor, batch: Batch) -> LossOutput:
    """Next-token NLL (used to pretrain a causal model before adaptation)."""
    sel = batch.loss_mask[:, 1:]
    nll = _token_nll(logits[:, :-1], batch.labels[:, 1:], sel)
    n = sel.sum(dim=1)
    per_row = nll.sum(dim=1) / n.clamp(min=1)
    return LossOutput(nll.sum() / sel.sum().clamp(min=1), per_row.detach(), n)


def two_stream_forward(model: Backbone, noised: NoisedBatch, batch: Batch, block_size: int):
    tokens = torch.cat([noised.x_t, batch.input_ids], dim=1)
    am = batch.attention_mask
    if am is not None:
        am = torch.cat([am, am], dim=1)
    return model(tokens, AttentionMaskSpec.two_stream(block_size), attention_mask=am)


def objective_loss(model: Backbone, batch: Batch, config: TrainConfig, rng) -> LossOutput:
    if config.objective == "ar":
        logits = model(batch.input_ids, AttentionMaskSpec.causal(), attention_mask=batch.attention_mask)
        return ar_loss(logits, batch)
    if config.objective == "bd3lm":
        layout = BlockLayout(batch.input_ids.shape[1], config.block_size)
        noised = block_forward_mask(
            batch, layout, rng, config.maskable_policy, shared_t=config.shared_block_t
        )
        return bd3lm_loss(two_stream_forward(model, noised, batch, config.block_size), noised, batch, layout)
    t = sample_time(batch.input_ids.shape[0], rng)
    noised = forward_mask(batch, t, rng, config.maskable_policy)
    logits = model(noised.x_t, attention_mask=batch.attention_mask)
    return mdlm_loss(logits, noised, batch)


def estimate_loss(model: Backbone, batch: Batch, config: TrainConfig, seed: int = 1234, draws: int = 8) -> float:
    """Loss averaged over a fixed set of noise draws (same draws every call)."""
    rng = make_rng(seed, "eval")
    was_training = model.training
    model.eval()
    with torch.no_grad():
        total = sum(float(objective_loss(model, batch, config, rng).loss) for _ in range(draws))
    model.train(was_training)
    return total / draws


def adapt_from_autoregressive(model: Backbone, right_shift: bool = True) -> Backbone:
    """Prepare a causally pretrained backbone for masked-diffusion training.

    With ``right_shift`` the logits at position i come from hidden state i-1,
    so the next-token head is reused as is (pair it with BOS prepending).  The
    mask token never occurs in causal pretraining, so its embedding row still
    holds its random init; it is reset to the mean of the other rows, the usual
    start for a newly added token.
    """
    model.config.right_shift_logits = right_shift
    with torch.no_grad():
        emb = model.tok_emb.weight
        others = torch.arange(emb.shape[0]) != MASK_ID
        emb[MASK_ID] = emb[others].mean(dim=0)
    model.meta["adapted_from"] = model.meta.get("objective", "ar")
    return model


# -- schedule --------------------------------------------------------------


def cosine_lr(step: int, config: TrainConfig) -> float:
    if not 0 <= step <= config.total_steps:
        raise ConfigError(f"step {step} outside [0, {config.total_steps}]")
    warm = config.warmup_steps
    if step < warm:
        return config.lr_peak * step / warm
    rest = config.total_steps - warm
    progress = 1.0 if rest == 0 else (step - warm) / rest
    return config.lr_peak * 0.5 * (1.0 + math.cos(math.pi * progress))


# -- loop ------------------------------------------------------------------


def iterate_minibatches(dataset: Sequence, rows: int, seed: int) -> Iterator[list]:
    """Endless epoch-shuffled minibatches of dataset items."""
    if not len(dataset):
        raise ConfigError("dataset is empty")
    rng = make_rng(seed, "data")
    order: list[int] = []
    while True:
        chunk = []
        while len(chunk) < rows:
            if not order:
                order = rng.permutation(len(dataset)).tolist()
            chunk.append(dataset[order.pop()])
        yield chunk


def _digest(batch: Batch) -> str:
    return hashlib.sha256(batch.input_ids.numpy().tobytes()).hexdigest()[:16]


@dataclass
class TrainResult:
    model: Backbone
    reports: list[TrainReport] = field(default_factory=list)
    checkpoint: Path | None = None


def make_optimizer(model: Backbone, config: TrainConfig) -> torch.optim.Optimizer:
    return torch.optim.AdamW(
        model.parameters(),
        lr=0.0,
        betas=config.betas,
        eps=config.eps,
        weight_decay=config.weight_decay,
    )


def train(
    model: Backbone,
    dataset: Sequence,
    config: TrainConfig,
    collator: Callable[[list], Batch],
    run_dir: str | Path | None = None,
    eval_batch: Batch | None = None,
    on_report: Callable[[TrainReport], None] | None = None,
    stop_when: Callable[[int, Backbone], bool] | None = None,
) -> TrainResult:
    """Optimise ``model`` in place and return it with the report stream.

    ``stop_when(step, model)`` is polled after every ``eval_every`` steps and
    may end training early (the final checkpoint is still written).
    """
    if not len(dataset):
        raise ConfigError("dataset is empty")
    torch.manual_seed(config.seed)
    run_dir = Path(run_dir) if run_dir is not None else None
    result = TrainResult(model)
    meta = {"objective": config.objective}
    if config.block_size:
        meta["block_size"] = config.block_size
    model.meta.update(meta)

    def checkpoint(step: int):
        if run_dir is None:
            return
        path = run_dir / f"step-{step}" / "model.ckpt"
        try:
            save_checkpoint(model, path)
        except OSError as e:
            raise CheckpointError(
                f"writing {path} failed ({e}); last good checkpoint: {result.checkpoint}",
                field="path",
            ) from e
        result.checkpoint = path

    if config.total_steps == 0:
        checkpoint(0)
        return result

    opt = make_optimizer(model, config)
    batches = iterate_minibatches(dataset, config.batch_rows, config.seed)
    noise_rng = make_rng(config.seed, "noise")
    tokens_seen = 0
    start = time.perf_counter()
    model.train()
    if eval_batch is not None and config.eval_every:
        initial = estimate_loss(model, eval_batch, config)
        first = TrainReport(0, initial, 0.0, 0, 0.0, initial)
        result.reports.append(first)
        if on_report:
            on_report(first)
    for step in range(1, config.total_steps + 1):
        lr = cosine_lr(step, config)
        for g in opt.param_groups:
            g["lr"] = lr
        step_loss = 0.0
        for _ in range(config.grad_accum):
            batch = collator(next(batches))
            out = objective_loss(model, batch, config, noise_rng)
            if not torch.isfinite(out.loss):
                raise TrainingAborted(
                    f"non-finite loss at step {step} (batch {_digest(batch)})",
                    step=step,
                    digest=_digest(batch),
                )
            (out.loss / config.grad_accum).backward()
            step_loss += float(out.loss.detach()) / config.grad_accum
            tokens_seen += int((batch.input_ids != PAD_ID).sum())
        if config.grad_clip_norm:
            torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip_norm)
        opt.step()
        opt.zero_grad(set_to_none=True)

        eval_loss = None
        evaluate = config.eval_every and step % config.eval_every == 0
        if evaluate and eval_batch is not None:
            eval_loss = estimate_loss(model, eval_batch, config)
        if step % config.log_every == 0 or step == config.total_steps or eval_loss is not None:
            rep = TrainReport(step, step_loss, lr, tokens_seen, time.perf_counter() - start, eval_loss)
            result.reports.append(rep)
            if on_report:
                on_report(rep)
        if config.checkpoint_every and step % config.checkpoint_every == 0:
            checkpoint(step)
        if evaluate and stop_when is not None and stop_when(step, model):
            log.info("stopping early at step %d", step)
            break
    model.eval()
    if result.checkpoint is None or result.checkpoint.parent.name != f"step-{step}":
        checkpoint(step)
    return result


def write_reports(reports: Sequence[TrainReport], path: str | Path, timing: bool = True) -> None:
    with open(path, "w") as f:
        for r in reports:
            f.write(json.dumps(r.to_record(timing=timing), sort_keys=True) + "\n")


class MDLMTrainer:
    """Trainer facade; swap the class (or ``objective``) to change the loss."""

    objective = "mdlm"

    def __init__(self, model, train_dataset, args: TrainConfig, data_collator, run_dir=None, eval_batch=None):
        if args.objective != self.objective:
            args = TrainConfig(**{**asdict(args), "objective": self.objective})
        self.model, self.dataset, self.args = model, train_dataset, args
        self.collator, self.run_dir, self.eval_batch = data_collator, run_dir, eval_batch

    def train(self, **kw) -> TrainResult:
        return train(self.model, self.dataset, self.args, self.collator, self.run_dir, self.eval_batch, **kw)


class BD3LMTrainer(MDLMTrainer):
    objective = "bd3lm"


class ARTrainer(MDLMTrainer):
    objective = "ar"
