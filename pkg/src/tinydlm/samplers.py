"""Reverse-process samplers behind one ``Sampler(model).sample(prompt)`` surface.

All samplers pre-allocate ``max_new_tokens`` mask tokens after the prompt and
finalize positions in confidence order.  Finalized tokens are never revised.
Every sampler records a :class:`DecodeHistory` so decoding order can be
replayed or visualized later.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import torch

from .backbone import AttentionMaskSpec, Backbone
from .corpus import BOS_ID, EOS_ID, MASK_ID, detokenize
from .errors import SamplerError


@dataclass(frozen=True)
class SamplerConfig:
    max_new_tokens: int = 64
    steps: int | None = None  # None: one finalization per step
    temperature: float = 0.0
    top_p: float = 1.0
    cfg_scale: float = 0.0
    min_new_tokens: int = 0  # EOS suppressed before this generated index
    tokens_per_step: int | None = None  # fixed per-step count, overrides the even split
    confidence_threshold: float = 0.9
    cache_block_size: int | None = None  # None: the whole window is one decode block
    cache_enabled: bool = True
    parallel_enabled: bool = True
    block_size: int | None = None  # BD3LM block size; defaults to the trained layout
    seed: int = 0

    def validate(self) -> "SamplerConfig":
        g = self.max_new_tokens
        if g < 0:
            raise SamplerError(f"max_new_tokens must be >= 0, got {g}")
        if self.temperature < 0:
            raise SamplerError(f"temperature must be >= 0, got {self.temperature}")
        if not 0 < self.top_p <= 1:
            raise SamplerError(f"top_p must lie in (0, 1], got {self.top_p}")
        if self.cfg_scale < 0:
            raise SamplerError(f"cfg_scale must be >= 0, got {self.cfg_scale}")
        if self.min_new_tokens < 0:
            raise SamplerError("min_new_tokens must be >= 0")
        if self.tokens_per_step is not None and self.tokens_per_step < 1:
            raise SamplerError(f"tokens_per_step must be >= 1, got {self.tokens_per_step}")
        if not 0 < self.confidence_threshold <= 1:
            raise SamplerError(f"confidence_threshold must lie in (0, 1], got {self.confidence_threshold}")
        if self.steps is not None and g and not 1 <= self.steps <= g:
            raise SamplerError(f"steps must lie in [1, max_new_tokens={g}], got {self.steps}")
        if self.cache_block_size is not None:
            if self.cache_block_size < 1 or (g and g % self.cache_block_size):
                raise SamplerError(
                    f"cache_block_size={self.cache_block_size} must divide max_new_tokens={g}"
                )
        if self.block_size is not None and self.block_size < 1:
            raise SamplerError(f"block_size must be >= 1, got {self.block_size}")
        return self

    @classmethod
    def knobs(cls) -> list[str]:
        return [f.name for f in fields(cls)]


@dataclass
class DecodeStep:
    positions: list[int]
    tokens: list[int]
    confidences: list[float]
    masked_remaining: int


@dataclass
class DecodeHistory:
    prompt: list[int]
    gen_len: int
    steps: list[DecodeStep] = field(default_factory=list)

    @property
    def prompt_len(self) -> int:
        return len(self.prompt)

    def record(self, positions, tokens, confidences, masked_remaining) -> None:
        self.steps.append(
            DecodeStep(
                [int(p) for p in positions],
                [int(t) for t in tokens],
                [float(c) for c in confidences],
                int(masked_remaining),
            )
        )

    def replay(self) -> list[int]:
        """Rebuild the full sequence from the masked window and the steps."""
        seq = list(self.prompt) + [MASK_ID] * self.gen_len
        for st in self.steps:
            for p, t in zip(st.positions, st.tokens):
                seq[p] = t
        return seq

    def validate(self) -> None:
        seen: dict[int, int] = {}
        last = self.gen_len
        lo, hi = self.prompt_len, self.prompt_len + self.gen_len
        for i, st in enumerate(self.steps):
            for p in st.positions:
                if p in seen:
                    raise SamplerError(f"position {p} finalized twice (steps {seen[p]} and {i})")
                if not lo <= p < hi:
                    raise SamplerError(f"step {i} finalizes position {p} outside [{lo}, {hi})")
                seen[p] = i
            if st.masked_remaining >= last:
                raise SamplerError(f"masked_remaining does not decrease at step {i}")
            last = st.masked_remaining

    def write(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            f.write(json.dumps({"kind": "header", "prompt": self.prompt, "gen_len": self.gen_len}) + "\n")
            for i, st in enumerate(self.steps):
                f.write(json.dumps({"kind": "step", "step": i, **asdict(st)}) + "\n")

    @classmethod
    def read(cls, path: str | Path) -> "DecodeHistory":
        with open(path, encoding="utf-8") as f:
            lines = [json.loads(line) for line in f if line.strip()]
        if not lines or lines[0].get("kind") != "header":
            raise SamplerError(f"{path}: missing history header")
        hist = cls(prompt=lines[0]["prompt"], gen_len=lines[0]["gen_len"])
        for rec in lines[1:]:
            hist.steps.append(
                DecodeStep(rec["positions"], rec["tokens"], rec["confidences"], rec["masked_remaining"])
            )
        return hist


@dataclass
class SampleOutput:
    tokens: list[int]
    history: DecodeHistory
    nfe: int = 0  # forward passes
    token_positions: int = 0  # query positions processed over all forward passes

    @property
    def prompt_len(self) -> int:
        return self.history.prompt_len

    @property
    def generated(self) -> list[int]:
        return self.tokens[self.prompt_len :]

    @property
    def text(self) -> str:
        return detokenize(self.generated)


@dataclass
class KVCache:
    """Per-layer rotated keys/values for positions ``[lo, hi)`` of a sequence."""

    kv: list
    lo: int
    hi: int
    digest: str
    approximate: bool = False

    @staticmethod
    def digest_of(tokens: torch.Tensor) -> str:
        return hashlib.sha1(tokens.numpy().tobytes()).hexdigest()

    def check(self, seq: torch.Tensor) -> None:
        if not self.approximate and self.digest_of(seq[:, self.lo : self.hi]) != self.digest:
            raise SamplerError(f"stale exact KV cache over positions [{self.lo}, {self.hi})")

    def gather(self, keep: torch.Tensor) -> list:
        return [(k[:, :, keep], v[:, :, keep]) for k, v in self.kv]


# -- logits post-processing -------------------------------------------------


@dataclass
class Adjusted:
    logits: torch.Tensor  # guided, EOS-suppressed logits [N, V]
    probs: torch.Tensor | None  # sampling distribution after temperature/top-p (None: greedy)


def top_p_filter(probs: torch.Tensor, top_p: float) -> torch.Tensor:
    """Keep the smallest prefix of the sorted distribution with mass >= top_p, renormalized."""
    if top_p >= 1.0:
        return probs
    sorted_p, idx = torch.sort(probs, dim=-1, descending=True, stable=True)
    before = torch.cumsum(sorted_p, dim=-1) - sorted_p
    keep_sorted = before < top_p
    keep = torch.zeros_like(keep_sorted).scatter(-1, idx, keep_sorted)
    kept = torch.where(keep, probs, torch.zeros_like(probs))
    return kept / kept.sum(dim=-1, keepdim=True)


def adjust_logits(
    logits_cond: torch.Tensor,
    logits_uncond: torch.Tensor | None,
    config: SamplerConfig,
    gen_index: torch.Tensor | None = None,
) -> Adjusted:
    """Apply guidance, EOS suppression, temperature and nucleus filtering.

    ``gen_index`` gives each row's index inside the generated region; rows with
    index < ``min_new_tokens`` cannot emit EOS.  The mask token is never a
    candidate.
    """
    logits = logits_cond
    if config.cfg_scale > 0:
        if logits_uncond is None:
            raise SamplerError("cfg_scale > 0 needs unconditional logits")
        logits = logits_cond + config.cfg_scale * (logits_cond - logits_uncond)
    logits = logits.clone()
    logits[..., MASK_ID] = float("-inf")
    if config.min_new_tokens and gen_index is not None:
        suppress = gen_index < config.min_new_tokens
        if bool(suppress.any()):
            logits[suppress, EOS_ID] = float("-inf")
    if config.temperature == 0:
        return Adjusted(logits, None)
    probs = torch.softmax(logits / config.temperature, dim=-1)
    return Adjusted(logits, top_p_filter(probs, config.top_p))


def choose(adj: Adjusted, generator: torch.Generator | None) -> tuple[torch.Tensor, torch.Tensor]:
    """Candidate token and its confidence for every row."""
    if adj.probs is None:
        probs = torch.softmax(adj.logits, dim=-1)
        conf, tok = probs.max(dim=-1)
        return tok, conf
    tok = torch.multinomial(adj.probs, 1, generator=generator)[:, 0]
    return tok, adj.probs.gather(-1, tok[:, None])[:, 0]


def top_confident(conf: torch.Tensor, k: int) -> torch.Tensor:
    """Indices of the k largest confidences; ties go to the lower index."""
    order = torch.sort(conf, descending=True, stable=True).indices
    return order[:k]


def even_schedule(total: int, steps: int) -> list[int]:
    return [(total * s) // steps - (total * (s - 1)) // steps for s in range(1, steps + 1)]


def step_schedule(total: int, config: SamplerConfig, steps: int | None = None) -> list[int]:
    if total == 0:
        return []
    if config.tokens_per_step:
        k = config.tokens_per_step
        return [k] * (total // k) + ([total % k] if total % k else [])
    return even_schedule(total, min(total, steps or config.steps or total))


# -- samplers -----------------------------------------------------------------


def unconditional_prompt(seq: torch.Tensor, prompt_len: int) -> torch.Tensor:
    """Mask the prompt (keeping a leading BOS) for the guidance pass."""
    out = seq.clone()
    start = 1 if prompt_len and int(seq[0, 0]) == BOS_ID else 0
    out[:, start:prompt_len] = MASK_ID
    return out


class Sampler:
    """Base class: ``Sampler(model).sample(prompt, config)``."""

    name = "base"

    def __init__(self, model: Backbone, config: SamplerConfig | None = None):
        self.model = model
        self.config = config or SamplerConfig()

    def sample(self, prompt: Sequence[int], config: SamplerConfig | None = None, **overrides) -> SampleOutput:
        cfg = replace(config or self.config, **overrides).validate()
        prompt = [int(t) for t in prompt]
        if len(prompt) + cfg.max_new_tokens > self.model.config.max_seq_len:
            raise SamplerError(
                f"prompt ({len(prompt)}) + max_new_tokens ({cfg.max_new_tokens}) exceeds "
                f"max_seq_len={self.model.config.max_seq_len}"
            )
        was_training = self.model.training
        self.model.eval()
        try:
            with torch.no_grad():
                return self._sample(prompt, cfg)
        finally:
            self.model.train(was_training)

    def _sample(self, prompt: list[int], cfg: SamplerConfig) -> SampleOutput:
        raise NotImplementedError

    # shared helpers
    def _init(self, prompt, cfg):
        seq = torch.tensor([prompt + [MASK_ID] * cfg.max_new_tokens], dtype=torch.long)
        gen = torch.Generator().manual_seed(cfg.seed)
        return seq, gen, DecodeHistory(list(prompt), cfg.max_new_tokens)

    def _full_logits(self, seq, prompt_len, cfg, out: SampleOutput, mask_spec=None):
        cond = self.model(seq, mask_spec)[0]
        out.nfe += 1
        out.token_positions += seq.shape[1]
        uncond = None
        if cfg.cfg_scale > 0:
            uncond = self.model(unconditional_prompt(seq, prompt_len), mask_spec)[0]
            out.nfe += 1
            out.token_positions += seq.shape[1]
        return cond, uncond

    @staticmethod
    def _finalize(seq, positions, tok, conf, pick, hist: DecodeHistory):
        chosen = positions[pick]
        seq[0, chosen] = tok[pick]
        remaining = int((seq[0, hist.prompt_len :] == MASK_ID).sum())
        hist.record(chosen.tolist(), tok[pick].tolist(), conf[pick].tolist(), remaining)


class MDLMSampler(Sampler):
    """Vanilla reverse process: full forward every step, top-n_s confidence unmasking."""

    name = "mdlm"

    def _sample(self, prompt, cfg):
        seq, gen, hist = self._init(prompt, cfg)
        out = SampleOutput([], hist)
        p = len(prompt)
        for n_s in step_schedule(cfg.max_new_tokens, cfg):
            positions = (seq[0] == MASK_ID).nonzero()[:, 0]
            positions = positions[positions >= p]
            cond, uncond = self._full_logits(seq, p, cfg, out)
            adj = adjust_logits(
                cond[positions], None if uncond is None else uncond[positions], cfg, positions - p
            )
            tok, conf = choose(adj, gen)
            self._finalize(seq, positions, tok, conf, top_confident(conf, n_s), hist)
        out.tokens = seq[0].tolist()
        return out


def sample_mdlm(model, prompt, config: SamplerConfig) -> SampleOutput:
    return MDLMSampler(model).sample(prompt, config)


class FastdLLMSampler(Sampler):
    """Block-wise decoding with an approximate KV cache and threshold-parallel unmasking.

    On entering a decode block one full forward refreshes the cache for every
    position; inside the block only the block's positions are recomputed, with
    keys/values for everything else read from that (stale) cache.
    """

    name = "fastdllm"

    def _block_logits(self, seq, lo, hi, cache: KVCache, prompt_len, cfg, out, uncond_cache):
        shift = 1 if self.model.right_shift_logits and lo > 0 else 0
        qlo = lo - shift
        n = seq.shape[1]
        keep = torch.cat([torch.arange(0, qlo), torch.arange(hi, n)])
        pos = torch.arange(qlo, hi)

        def run(src, c):
            c.check(src)
            logits = self.model(src[:, qlo:hi], positions=pos, past=c.gather(keep))
            return logits[0, shift:]

        cond = run(seq, cache)
        out.nfe += 1
        out.token_positions += hi - qlo
        uncond = None
        if cfg.cfg_scale > 0:
            uncond = run(unconditional_prompt(seq, prompt_len), uncond_cache)
            out.nfe += 1
            out.token_positions += hi - qlo
        return cond, uncond

    def _refresh(self, seq, prompt_len, cfg, out):
        logits, kv = self.model(seq, return_kv=True)
        out.nfe += 1
        out.token_positions += seq.shape[1]
        n = seq.shape[1]
        cache = KVCache(kv, 0, n, KVCache.digest_of(seq), approximate=True)
        cond, uncond, ucache = logits[0], None, None
        if cfg.cfg_scale > 0:
            useq = unconditional_prompt(seq, prompt_len)
            ulogits, ukv = self.model(useq, return_kv=True)
            out.nfe += 1
            out.token_positions += n
            ucache = KVCache(ukv, 0, n, KVCache.digest_of(useq), approximate=True)
            uncond = ulogits[0]
        return cond, uncond, cache, ucache

    def _sample(self, prompt, cfg):
        seq, gen, hist = self._init(prompt, cfg)
        out = SampleOutput([], hist)
        p, g = len(prompt), cfg.max_new_tokens
        bsz = cfg.cache_block_size or max(g, 1)
        for lo in range(p, p + g, bsz):
            hi = lo + bsz
            cache = ucache = None
            fresh = None
            if cfg.cache_enabled:
                cond, uncond, cache, ucache = self._refresh(seq, p, cfg, out)
                fresh = (cond[lo:hi], None if uncond is None else uncond[lo:hi])
            while True:
                in_block = (seq[0, lo:hi] == MASK_ID).nonzero()[:, 0]
                if not len(in_block):
                    break
                if fresh is not None:
                    cond, uncond = fresh
                    fresh = None
                elif cfg.cache_enabled:
                    cond, uncond = self._block_logits(seq, lo, hi, cache, p, cfg, out, ucache)
                else:
                    cond, uncond = self._full_logits(seq, p, cfg, out)
                    cond, uncond = cond[lo:hi], None if uncond is None else uncond[lo:hi]
                positions = in_block + lo
                adj = adjust_logits(
                    cond[in_block], None if uncond is None else uncond[in_block], cfg, positions - p
                )
                tok, conf = choose(adj, gen)
                if cfg.parallel_enabled:
                    pick = (conf > cfg.confidence_threshold).nonzero()[:, 0]
                    if not len(pick):
                        pick = top_confident(conf, 1)
                else:
                    pick = top_confident(conf, 1)
                self._finalize(seq, positions, tok, conf, pick, hist)
        out.tokens = seq[0].tolist()
        return out


def sample_mdlm_fastdllm(model, prompt, config: SamplerConfig) -> SampleOutput:
    return FastdLLMSampler(model).sample(prompt, config)


class BD3LMSampler(Sampler):
    """Semi-autoregressive decoding over the trained block layout.

    Blocks are aligned to absolute positions (block k covers [kB, (k+1)B)), as
    during training.  Each block runs the MDLM inner loop against an exact
    cache of the prompt and previously finalized blocks.
    """

    name = "bd3lm"

    def _block_size(self, cfg) -> int:
        trained = self.model.meta.get("block_size")
        if cfg.block_size and trained and cfg.block_size != trained:
            raise SamplerError(f"block_size {cfg.block_size} does not match trained layout {trained}")
        size = cfg.block_size or trained
        if not size:
            raise SamplerError("block size unknown: set block_size or use a block-diffusion checkpoint")
        return int(size)

    def _prefix_kv(self, seq, lo, hi, bsz, cache: KVCache | None, out) -> KVCache:
        """Extend the exact cache with clean positions [lo, hi)."""
        past = None if cache is None else cache.kv
        if cache is not None:
            cache.check(seq)
        # [lo, hi) may span several blocks; lo is always block aligned
        spec = AttentionMaskSpec.block_causal(bsz)
        _, kv = self.model(seq[:, lo:hi], spec, positions=torch.arange(lo, hi), past=past, return_kv=True)
        out.nfe += 1
        out.token_positions += hi - lo
        if cache is not None:
            kv = [(torch.cat([pk, k], 2), torch.cat([pv, v], 2)) for (pk, pv), (k, v) in zip(cache.kv, kv)]
        return KVCache(kv, 0, hi, KVCache.digest_of(seq[:, :hi]))

    def _logits(self, seq, blo, hi, bsz, cache, out):
        if cache is None:
            logits = self.model(seq[:, :hi], AttentionMaskSpec.block_causal(bsz))[0, blo:hi]
            out.token_positions += hi
        else:
            past = None
            if cache.hi:
                cache.check(seq)
                past = cache.kv
            logits = self.model(seq[:, blo:hi], positions=torch.arange(blo, hi), past=past)[0]
            out.token_positions += hi - blo
        out.nfe += 1
        return logits

    def _sample(self, prompt, cfg):
        if self.model.right_shift_logits:
            raise SamplerError("the block sampler does not support right_shift_logits models")
        if cfg.cfg_scale > 0:
            raise SamplerError("the block sampler does not implement classifier-free guidance")
        bsz = self._block_size(cfg)
        p, g = len(prompt), cfg.max_new_tokens
        seq, gen, hist = self._init(prompt, cfg)
        out = SampleOutput([], hist)
        total = p + g
        first = p // bsz
        cache = None
        if cfg.cache_enabled:
            cache = KVCache([], 0, 0, "")
            if first:
                cache = self._prefix_kv(seq, 0, first * bsz, bsz, None, out)
        n_steps = cfg.steps or g
        k = first
        while k * bsz < total and g:
            blo = k * bsz
            lo, hi = max(blo, p), min(blo + bsz, total)
            m = hi - lo
            k_steps = min(m, max(1, math.ceil(n_steps * m / g)))
            for n_s in step_schedule(m, cfg, k_steps):
                in_block = (seq[0, lo:hi] == MASK_ID).nonzero()[:, 0]
                positions = in_block + lo
                logits = self._logits(seq[:, :hi], blo, hi, bsz, cache, out)
                adj = adjust_logits(logits[positions - blo], None, cfg, positions - p)
                tok, conf = choose(adj, gen)
                self._finalize(seq, positions, tok, conf, top_confident(conf, n_s), hist)
            if bool((seq[0, lo:hi] == EOS_ID).all()):
                break
            if cfg.cache_enabled and hi < total:
                cache = self._prefix_kv(seq, blo, hi, bsz, cache if cache.hi else None, out)
            k += 1
        end = hi if g else p
        # positions past an early stop were never generated: drop them from the counts
        for st in hist.steps:
            st.masked_remaining -= total - end
        hist.gen_len = end - p
        out.tokens = seq[0, :end].tolist()
        return out


def sample_bd3lm(model, prompt, config: SamplerConfig) -> SampleOutput:
    return BD3LMSampler(model).sample(prompt, config)


SAMPLERS = {cls.name: cls for cls in (MDLMSampler, FastdLLMSampler, BD3LMSampler)}


def get_sampler(name: str, model: Backbone, config: SamplerConfig | None = None) -> Sampler:
    try:
        return SAMPLERS[name](model, config)
    except KeyError:
        raise SamplerError(f"unknown sampler {name!r}; choose from {sorted(SAMPLERS)}") from None
