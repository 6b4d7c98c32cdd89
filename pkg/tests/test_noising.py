import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from tinydlm.corpus import MASK_ID, PAD_ID, collate_sft, eos_label_fill
from tinydlm.noising import (
    T_FLOOR,
    BlockLayout,
    MaskablePolicy,
    block_forward_mask,
    forward_mask,
    make_rng,
    sample_time,
    split_rng,
)


def big_batch(rows=100, width=1000):
    return collate_sft([([], [10 + (i % 200) for i in range(width)])] * rows, max_len=width + 1)


def test_sample_time_deterministic():
    a = sample_time(50, make_rng(3, "t"))
    b = sample_time(50, make_rng(3, "t"))
    assert torch.equal(a, b)
    assert not torch.equal(a, sample_time(50, make_rng(3, "other")))


def test_sample_time_moments():
    n = 100_000
    t = sample_time(n, make_rng(0, "t")).double()
    assert float(t.min()) >= T_FLOOR
    sigma = (1 - T_FLOOR) / math.sqrt(12 * n)
    assert abs(float(t.mean()) - (1 + T_FLOOR) / 2) < 3 * sigma


def test_sample_time_degenerate_floor():
    assert torch.all(sample_time(10, make_rng(0), t_floor=1.0) == 1.0)


def test_split_rng_streams_differ():
    a, b = split_rng(make_rng(0, "x"), 2)
    assert a.random() != b.random()


def test_forward_mask_endpoints():
    b = collate_sft([([5, 6], [7, 8, 9])], max_len=8)
    zero = forward_mask(b, torch.zeros(1), make_rng(0))
    assert torch.equal(zero.x_t, b.input_ids) and not zero.mask_indicator.any()
    one = forward_mask(b, torch.ones(1), make_rng(0))
    assert one.mask_indicator[0].tolist() == [False, False, True, True, True]
    assert torch.all(one.x_t[0, 2:] == MASK_ID) and one.x_t[0, :2].tolist() == [5, 6]
    allpos = forward_mask(b, torch.ones(1), make_rng(0), MaskablePolicy.NON_PAD)
    assert allpos.mask_indicator.all()


@pytest.mark.parametrize("t", [0.1, 0.3, 0.7, 1.0])
def test_forward_mask_binomial(t):
    b = big_batch()
    n = b.input_ids.numel()
    nb = forward_mask(b, torch.full((100,), t), make_rng(1, "mask"))
    frac = float(nb.mask_indicator.double().mean())
    assert abs(frac - t) <= 3 * math.sqrt(t * (1 - t) / n) + 1e-12


def test_forward_mask_respects_pads_and_loss_policy():
    b = eos_label_fill(collate_sft([([5, 6], [7]), ([5], [6, 7, 8, 9])], max_len=8))
    nb = forward_mask(b, torch.ones(2), make_rng(0), MaskablePolicy.LOSS_ONLY)
    assert torch.equal(nb.mask_indicator, b.loss_mask)
    plain = collate_sft([([5, 6], [7]), ([5], [6, 7, 8, 9])], max_len=8)
    nb = forward_mask(plain, torch.ones(2), make_rng(0), MaskablePolicy.NON_PAD)
    assert not (nb.mask_indicator & (plain.input_ids == PAD_ID)).any()


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.0, 1.0), st.sampled_from(list(MaskablePolicy)))
def test_noising_invariants(seed, t, policy):
    b = collate_sft([([5, 6], [7, 8]), ([5], [6, 7, 8, 9, 10])], max_len=10)
    nb = forward_mask(b, torch.full((2,), t), make_rng(seed), policy)
    keep = ~nb.mask_indicator
    assert torch.equal(nb.x_t[keep], b.input_ids[keep])
    assert torch.all(nb.x_t[nb.mask_indicator] == MASK_ID)
    from tinydlm.noising import maskable_positions

    assert not (nb.mask_indicator & ~maskable_positions(b, policy)).any()
    again = forward_mask(b, torch.full((2,), t), make_rng(seed), policy)
    assert torch.equal(again.x_t, nb.x_t)


def test_block_layout():
    lay = BlockLayout(10, 4)
    assert lay.num_blocks == 3
    assert lay.block_ids().tolist() == [0, 0, 0, 0, 1, 1, 1, 1, 2, 2]
    assert [lay.span(k) for k in range(3)] == [(0, 4), (4, 8), (8, 10)]
    with pytest.raises(ValueError):
        BlockLayout(4, 0)


def test_block_forward_mask_shapes():
    b = collate_sft([([], [5, 6, 7, 8])] * 3, max_len=8)
    nb = block_forward_mask(b, BlockLayout(4, 4), make_rng(0))
    assert nb.t.shape == (3, 1)
    nb = block_forward_mask(b, BlockLayout(4, 1), make_rng(0))
    assert nb.t.shape == (3, 4)
    assert len(set(nb.t[0].tolist())) == 4
    with pytest.raises(ValueError):
        block_forward_mask(b, BlockLayout(5, 1), make_rng(0))
    shared = block_forward_mask(b, BlockLayout(4, 2), make_rng(0), shared_t=True)
    assert torch.all(shared.t[:, 0] == shared.t[:, 1])


def test_block_forward_mask_single_block_matches_mdlm_statistics():
    b = big_batch(rows=200, width=500)
    nb = block_forward_mask(b, BlockLayout(500, 500), make_rng(5))
    t = nb.t[:, 0].double()
    frac = nb.mask_indicator.double().mean(1)
    # each row's masked fraction is binomial around its own t
    z = (frac - t) / torch.sqrt(t * (1 - t) / 500).clamp(min=1e-9)
    assert float(z.abs().max()) < 5


def test_block_forward_mask_per_block_binomial():
    width, bs = 4000, 1000
    b = big_batch(rows=20, width=width)
    nb = block_forward_mask(b, BlockLayout(width, bs), make_rng(9))
    for k in range(4):
        frac = nb.mask_indicator[:, k * bs : (k + 1) * bs].double().mean(1)
        t = nb.t[:, k].double()
        sd = torch.sqrt(t * (1 - t) / bs)
        assert torch.all((frac - t).abs() <= 4 * sd + 1e-3)
