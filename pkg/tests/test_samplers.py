import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from tinydlm.corpus import BOS_ID, EOS_ID, MASK_ID, apply_chat_template
from tinydlm.errors import SamplerError
from tinydlm.samplers import (
    BD3LMSampler,
    DecodeHistory,
    FastdLLMSampler,
    MDLMSampler,
    SamplerConfig,
    adjust_logits,
    choose,
    even_schedule,
    get_sampler,
    step_schedule,
    top_p_filter,
    unconditional_prompt,
)

from conftest import TableModel, constant_model, tiny_model


def prompt(i=0):
    return apply_chat_template([{"role": "user", "content": f"p{i} " + "xyz"[: i % 3 + 1]}], True)


# -- schedules and logits adjustment -----------------------------------------


@settings(max_examples=50, deadline=None)
@given(total=st.integers(1, 300), steps=st.integers(1, 300))
def test_even_schedule(total, steps):
    steps = min(steps, total)
    sched = even_schedule(total, steps)
    assert sum(sched) == total and len(sched) == steps
    assert max(sched) - min(sched) <= 1


def test_step_schedule_modes():
    assert step_schedule(8, SamplerConfig(max_new_tokens=8)) == [1] * 8
    assert step_schedule(8, SamplerConfig(max_new_tokens=8, steps=3)) == [2, 3, 3]
    assert step_schedule(10, SamplerConfig(max_new_tokens=10, tokens_per_step=4)) == [4, 4, 2]
    assert step_schedule(0, SamplerConfig(max_new_tokens=0)) == []


def test_top_p_toy():
    probs = torch.tensor([[0.6, 0.3, 0.1]])
    out = top_p_filter(probs, 0.7)
    assert out[0].tolist() == pytest.approx([2 / 3, 1 / 3, 0.0])
    assert torch.equal(top_p_filter(probs, 1.0), probs)
    assert top_p_filter(probs, 0.5)[0].tolist() == pytest.approx([1.0, 0.0, 0.0])


def test_cfg_zero_is_identity():
    cond = torch.randn(4, 260)
    adj = adjust_logits(cond, torch.randn(4, 260), SamplerConfig())
    assert torch.equal(adj.logits[:, 1:], cond[:, 1:])
    assert bool(torch.isinf(adj.logits[:, MASK_ID]).all())


def test_cfg_formula_and_eos_suppression():
    cond, uncond = torch.randn(3, 260), torch.randn(3, 260)
    cfg = SamplerConfig(cfg_scale=0.5, min_new_tokens=2)
    adj = adjust_logits(cond, uncond, cfg, gen_index=torch.tensor([0, 1, 2]))
    want = cond + 0.5 * (cond - uncond)
    assert torch.allclose(adj.logits[2, 1:], want[2, 1:])
    assert adj.logits[0, EOS_ID] == float("-inf") and adj.logits[1, EOS_ID] == float("-inf")
    assert adj.logits[2, EOS_ID] == want[2, EOS_ID]
    with pytest.raises(SamplerError):
        adjust_logits(cond, None, cfg)


def test_choose_greedy_and_sampled():
    logits = torch.full((2, 260), -5.0)
    logits[0, 10] = 3.0
    logits[1, 20] = 4.0
    tok, conf = choose(adjust_logits(logits, None, SamplerConfig()), None)
    assert tok.tolist() == [10, 20]
    assert conf.tolist() == pytest.approx(torch.softmax(logits[:, 1:], -1).max(-1).values.tolist())
    hot = SamplerConfig(temperature=1.0, top_p=0.5)
    tok, conf = choose(adjust_logits(logits, None, hot), torch.Generator().manual_seed(0))
    assert tok.tolist() == [10, 20] and conf.tolist() == [1.0, 1.0]


def test_unconditional_prompt_keeps_bos():
    seq = torch.tensor([[BOS_ID, 50, 51, MASK_ID]])
    assert unconditional_prompt(seq, 3).tolist() == [[BOS_ID, MASK_ID, MASK_ID, MASK_ID]]


@pytest.mark.parametrize(
    "kw",
    [
        dict(temperature=-1),
        dict(top_p=0),
        dict(top_p=1.5),
        dict(cfg_scale=-0.1),
        dict(confidence_threshold=0),
        dict(steps=100),
        dict(cache_block_size=7),
        dict(tokens_per_step=0),
        dict(max_new_tokens=-1),
    ],
)
def test_config_errors_raise_before_forward(kw):
    class Exploding(torch.nn.Module):
        def forward(self, *a, **k):
            raise AssertionError("forward must not run")

    sampler = MDLMSampler(tiny_model())
    sampler.model.forward = Exploding().forward
    with pytest.raises(SamplerError):
        sampler.sample(prompt(), SamplerConfig(**{"max_new_tokens": 16, **kw}))


def test_window_must_fit():
    with pytest.raises(SamplerError, match="max_seq_len"):
        MDLMSampler(tiny_model()).sample(prompt(), max_new_tokens=200)


def test_unknown_sampler():
    with pytest.raises(SamplerError, match="bd3lm"):
        get_sampler("beam", tiny_model())


# -- vanilla sampler -----------------------------------------------------------


def test_one_finalization_per_step(model):
    out = MDLMSampler(model).sample(prompt(), max_new_tokens=12)
    assert len(out.history.steps) == 12
    assert all(len(s.positions) == 1 for s in out.history.steps)
    assert out.nfe == 12
    out.history.validate()
    assert MASK_ID not in out.generated


def test_greedy_determinism(model):
    a = MDLMSampler(model).sample(prompt(), max_new_tokens=10, steps=4)
    b = MDLMSampler(model).sample(prompt(), max_new_tokens=10, steps=4)
    assert a.tokens == b.tokens and a.history == b.history


def test_seeded_sampling_determinism(model):
    cfg = SamplerConfig(max_new_tokens=10, temperature=1.0, top_p=0.9, seed=7)
    a = MDLMSampler(model).sample(prompt(), cfg)
    b = MDLMSampler(model).sample(prompt(), cfg)
    c = MDLMSampler(model).sample(prompt(), cfg, seed=8)
    assert a.tokens == b.tokens and a.history == b.history
    assert a.tokens != c.tokens


def test_hand_built_order():
    p = [BOS_ID, 40]
    table = torch.zeros(16, 260)
    margins = {0: 2.0, 1: 4.0, 2: 1.0, 3: 6.0}
    for j, m in margins.items():
        table[len(p) + j, 100 + j] = m
    model = TableModel(table)
    out = MDLMSampler(model).sample(p, max_new_tokens=4)
    order = [s.positions[0] - len(p) for s in out.history.steps]
    assert order == [3, 1, 0, 2]
    # confidences are the softmax probabilities of the argmax, computed directly
    for s in out.history.steps:
        j = s.positions[0] - len(p)
        row = table[len(p) + j].clone()
        row[MASK_ID] = float("-inf")
        assert s.confidences[0] == pytest.approx(float(torch.softmax(row, -1).max()))
    assert out.generated == [100, 101, 102, 103]


def test_ties_go_to_lowest_position():
    model = TableModel(torch.zeros(16, 260))
    out = MDLMSampler(model).sample([BOS_ID], max_new_tokens=5, steps=2)
    assert [s.positions for s in out.history.steps] == [[1, 2], [3, 4, 5]]


def test_min_new_tokens_suppresses_eos():
    model = constant_model(EOS_ID)
    out = MDLMSampler(model).sample([BOS_ID], max_new_tokens=6, min_new_tokens=3)
    assert EOS_ID not in out.generated[:3]
    assert out.generated[3:] == [EOS_ID] * 3


def test_cfg_runs_two_passes(model):
    out = MDLMSampler(model).sample(prompt(), max_new_tokens=4, cfg_scale=0.5)
    assert out.nfe == 8


def test_zero_length_generation(model):
    for name in ("mdlm", "fastdllm"):
        out = get_sampler(name, model).sample(prompt(), max_new_tokens=0)
        assert out.generated == [] and out.history.steps == [] and out.text == ""


# -- Fast-dLLM ---------------------------------------------------------------


@pytest.mark.parametrize("seed", range(5))
def test_fastdllm_degenerate_equivalence(seed):
    model = tiny_model(seed=seed)
    base = MDLMSampler(model).sample(prompt(seed), max_new_tokens=12)
    fast = FastdLLMSampler(model).sample(
        prompt(seed), max_new_tokens=12, cache_enabled=False, parallel_enabled=False, confidence_threshold=1.0
    )
    assert fast.tokens == base.tokens and fast.history == base.history


def test_tiny_threshold_finalizes_block_at_once(model):
    out = FastdLLMSampler(model).sample(prompt(), max_new_tokens=12, cache_block_size=4, confidence_threshold=1e-9)
    assert [len(s.positions) for s in out.history.steps] == [4, 4, 4]
    assert out.nfe == 3


def test_fastdllm_blocks_go_left_to_right(model):
    out = FastdLLMSampler(model).sample(prompt(), max_new_tokens=12, cache_block_size=4, parallel_enabled=False)
    p = len(prompt())
    blocks = [(s.positions[0] - p) // 4 for s in out.history.steps]
    assert blocks == sorted(blocks)
    out.history.validate()


@pytest.mark.parametrize("parallel", [True, False])
def test_cached_work_is_not_larger(model, parallel):
    kw = dict(max_new_tokens=16, cache_block_size=4, parallel_enabled=parallel, confidence_threshold=0.5)
    cached = FastdLLMSampler(model).sample(prompt(), cache_enabled=True, **kw)
    plain = FastdLLMSampler(model).sample(prompt(), cache_enabled=False, **kw)
    if cached.history == plain.history:
        assert cached.token_positions <= plain.token_positions
    assert cached.token_positions < cached.nfe * (len(prompt()) + 16)


def test_fastdllm_cfg_and_right_shift():
    model = tiny_model(right_shift_logits=True)
    out = FastdLLMSampler(model).sample(prompt(), max_new_tokens=8, cache_block_size=4, cfg_scale=0.5)
    out.history.validate()
    assert len(out.generated) == 8


# -- BD3LM -----------------------------------------------------------------------


def block_model(seed=0, block=4):
    m = tiny_model(seed=seed)
    m.meta["block_size"] = block
    return m


@pytest.mark.parametrize("seed", range(4))
def test_bd3lm_exact_cache_matches_recompute(seed):
    model = block_model(seed)
    a = BD3LMSampler(model).sample(prompt(seed), max_new_tokens=16, steps=8)
    b = BD3LMSampler(model).sample(prompt(seed), max_new_tokens=16, steps=8, cache_enabled=False)
    assert a.tokens == b.tokens and a.history == b.history
    assert a.token_positions < b.token_positions


def test_bd3lm_single_block_collapses_to_mdlm():
    model = block_model(block=64)
    p = [BOS_ID]
    a = BD3LMSampler(model).sample(p, max_new_tokens=20, steps=5)
    b = MDLMSampler(model).sample(p, max_new_tokens=20, steps=5)
    assert a.tokens == b.tokens and a.history == b.history


def test_bd3lm_early_stop():
    model = constant_model(EOS_ID)
    model.meta["block_size"] = 4
    p = [BOS_ID, 50, 51, 52]  # prompt fills block 0 exactly
    out = BD3LMSampler(model).sample(p, max_new_tokens=16)
    assert out.generated == [EOS_ID] * 4
    assert out.history.gen_len == 4
    assert out.history.steps[-1].masked_remaining == 0
    out.history.validate()


def test_bd3lm_partial_prompt_block():
    model = block_model(block=4)
    p = [BOS_ID, 50, 51, 52, 53, 54]  # generation starts mid-block
    out = BD3LMSampler(model).sample(p, max_new_tokens=6)
    firsts = sorted(s.positions[0] for s in out.history.steps[:2])
    assert firsts == [6, 7]
    out.history.validate()


def test_bd3lm_errors():
    with pytest.raises(SamplerError, match="does not match"):
        BD3LMSampler(block_model(block=4)).sample(prompt(), max_new_tokens=8, block_size=8)
    with pytest.raises(SamplerError, match="block size unknown"):
        BD3LMSampler(tiny_model()).sample(prompt(), max_new_tokens=8)
    with pytest.raises(SamplerError):
        BD3LMSampler(block_model()).sample(prompt(), max_new_tokens=8, cfg_scale=1.0)


# -- history ---------------------------------------------------------------------


@pytest.mark.parametrize(
    "name,kw",
    [
        ("mdlm", dict(steps=5)),
        ("fastdllm", dict(cache_block_size=5, confidence_threshold=0.3)),
        ("bd3lm", dict(block_size=4)),
    ],
)
def test_history_replay_and_roundtrip(tmp_path, name, kw):
    out = get_sampler(name, tiny_model(seed=9)).sample(prompt(1), max_new_tokens=10, temperature=0.8, **kw)
    assert out.history.replay() == out.tokens
    out.history.validate()
    assert out.history.steps[-1].masked_remaining == 0
    path = tmp_path / "h.jsonl"
    out.history.write(path)
    assert DecodeHistory.read(path) == out.history


def test_history_validation_errors():
    h = DecodeHistory([BOS_ID], 2)
    h.record([1], [10], [0.5], 1)
    h.record([1], [11], [0.5], 0)
    with pytest.raises(SamplerError, match="twice"):
        h.validate()
    h = DecodeHistory([BOS_ID], 2)
    h.record([5], [10], [0.5], 1)
    with pytest.raises(SamplerError, match="outside"):
        h.validate()
