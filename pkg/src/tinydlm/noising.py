"""Absorbing-state forward process under the linear schedule.

Every maskable token is replaced by the mask id independently with
probability ``t``.  The block variant draws one ``t`` per (row, block).
"""

from __future__ import annotations

import enum
import math
import zlib
from dataclasses import dataclass

import numpy as np
import torch

from .corpus import MASK_ID, PAD_ID, Batch
from .errors import ConfigError

T_FLOOR = 1e-3


class MaskablePolicy(str, enum.Enum):
    NON_PAD = "non_pad"  # pretraining: every real token may be corrupted
    LOSS_ONLY = "loss_only"  # SFT: prompt stays clean, only loss-eligible positions


def make_rng(seed: int, name: str = "") -> np.random.Generator:
    """A named stream: the same (seed, name) always yields the same draws."""
    key = (zlib.crc32(name.encode()),) if name else ()
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=key))


def split_rng(rng: np.random.Generator, n: int) -> list[np.random.Generator]:
    return [np.random.default_rng(s) for s in rng.bit_generator.seed_seq.spawn(n)]


@dataclass(frozen=True)
class BlockLayout:
    seq_len: int
    block_size: int

    def __post_init__(self):
        if self.block_size <= 0:
            raise ConfigError(f"block_size must be positive, got {self.block_size}")

    @property
    def num_blocks(self) -> int:
        return math.ceil(self.seq_len / self.block_size)

    def block_of(self, i):
        return i // self.block_size

    def block_ids(self) -> torch.Tensor:
        return torch.arange(self.seq_len) // self.block_size

    def span(self, k: int) -> tuple[int, int]:
        return k * self.block_size, min((k + 1) * self.block_size, self.seq_len)


@dataclass(frozen=True)
class NoisedBatch:
    x_t: torch.Tensor  # [B, L]
    mask_indicator: torch.Tensor  # [B, L] bool
    t: torch.Tensor  # [B] (mdlm) or [B, K] (block)
    source: Batch
    layout: BlockLayout | None = None

    def t_per_position(self) -> torch.Tensor:
        if self.t.dim() == 1:
            return self.t[:, None].expand_as(self.x_t)
        return self.t[:, self.layout.block_ids()]


def maskable_positions(batch: Batch, policy: MaskablePolicy | str) -> torch.Tensor:
    policy = MaskablePolicy(policy)
    if policy is MaskablePolicy.LOSS_ONLY:
        return batch.loss_mask.clone()
    return batch.input_ids != PAD_ID


def sample_time(rows: int, rng: np.random.Generator, t_floor: float = T_FLOOR) -> torch.Tensor:
    return torch.from_numpy(rng.uniform(t_floor, 1.0, size=rows)).float()


def _apply(batch: Batch, t_pos: torch.Tensor, rng, policy) -> tuple[torch.Tensor, torch.Tensor]:
    u = torch.from_numpy(rng.random(size=tuple(batch.input_ids.shape)))
    masked = (u < t_pos.double()) & maskable_positions(batch, policy)
    x_t = torch.where(masked, torch.full_like(batch.input_ids, MASK_ID), batch.input_ids)
    return x_t, masked


def forward_mask(
    batch: Batch,
    t: torch.Tensor,
    rng: np.random.Generator,
    policy: MaskablePolicy | str = MaskablePolicy.LOSS_ONLY,
) -> NoisedBatch:
    t = torch.as_tensor(t, dtype=torch.float32)
    if t.shape != (batch.input_ids.shape[0],):
        raise ConfigError(f"t has shape {tuple(t.shape)}, expected ({batch.input_ids.shape[0]},)")
    x_t, masked = _apply(batch, t[:, None].expand_as(batch.input_ids), rng, policy)
    return NoisedBatch(x_t, masked, t, batch)


def block_forward_mask(
    batch: Batch,
    layout: BlockLayout,
    rng: np.random.Generator,
    policy: MaskablePolicy | str = MaskablePolicy.LOSS_ONLY,
    shared_t: bool = False,
    t_floor: float = T_FLOOR,
) -> NoisedBatch:
    rows, width = batch.input_ids.shape
    if layout.seq_len != width:
        raise ConfigError(f"layout covers {layout.seq_len} positions, batch width is {width}")
    if shared_t:
        t = sample_time(rows, rng, t_floor)[:, None].repeat(1, layout.num_blocks)
    else:
        t = torch.from_numpy(rng.uniform(t_floor, 1.0, size=(rows, layout.num_blocks))).float()
    x_t, masked = _apply(batch, t[:, layout.block_ids()], rng, policy)
    return NoisedBatch(x_t, masked, t, batch, layout)
