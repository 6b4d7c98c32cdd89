"""Byte-level tokenizer, chat template, dataset readers and the collator stack.

The collators mirror the wrapper style used for diffusion finetuning: a base
collator builds padded rows, and thin wrappers rewrite the resulting batch
(drop the attention mask, relabel padding as EOS, prepend BOS).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import torch

from .errors import CorpusError

IGNORE_INDEX = -100

USER_MARKER = "<|user|>\n"
ASSISTANT_MARKER = "<|assistant|>\n"


@dataclass(frozen=True)
class VocabSpec:
    mask_id: int = 0
    bos_id: int = 1
    eos_id: int = 2
    pad_id: int = 3
    num_specials: int = 4

    @property
    def vocab_size(self) -> int:
        return self.num_specials + 256

    def is_special(self, token_id: int) -> bool:
        return token_id < self.num_specials


VOCAB = VocabSpec()
MASK_ID, PAD_ID, BOS_ID, EOS_ID = VOCAB.mask_id, VOCAB.pad_id, VOCAB.bos_id, VOCAB.eos_id


def encode(text: str) -> list[int]:
    return [b + VOCAB.num_specials for b in text.encode("utf-8")]


def decode(ids: Iterable[int], errors: str = "replace") -> str:
    """Decode token ids to text; special tokens are dropped."""
    data = bytes(int(i) - VOCAB.num_specials for i in ids if int(i) >= VOCAB.num_specials)
    return data.decode("utf-8", errors=errors)


def trim_trailing_eos(ids: Sequence[int]) -> list[int]:
    ids = list(ids)
    while ids and ids[-1] == EOS_ID:
        ids.pop()
    return ids


def detokenize(ids: Sequence[int]) -> str:
    """Text of a generated region: the maximal trailing EOS run is trimmed."""
    return decode(trim_trailing_eos(ids))


# -- chat template ---------------------------------------------------------


@dataclass(frozen=True)
class Message:
    role: str
    content: str

    @classmethod
    def from_dict(cls, d: dict) -> "Message":
        return cls(role=d["role"], content=d["content"])


def _check_roles(messages: Sequence[Message]) -> None:
    for i, m in enumerate(messages):
        expected = "user" if i % 2 == 0 else "assistant"
        if m.role != expected:
            raise CorpusError(
                f"message {i} has role {m.role!r}, expected {expected!r} "
                "(roles must alternate starting with user)",
                indices=[i],
            )


def _marker(role: str) -> str:
    return USER_MARKER if role == "user" else ASSISTANT_MARKER


def apply_chat_template(
    messages: Sequence[Message | dict], add_generation_prompt: bool = False
) -> list[int]:
    msgs = [m if isinstance(m, Message) else Message.from_dict(m) for m in messages]
    _check_roles(msgs)
    ids = [BOS_ID]
    for m in msgs:
        ids += encode(_marker(m.role) + m.content)
        ids.append(EOS_ID)
    if add_generation_prompt:
        ids += encode(ASSISTANT_MARKER)
    return ids


def conversation_to_example(messages: Sequence[Message | dict]) -> tuple[list[int], list[int]]:
    """Split a conversation ending in an assistant turn into (prompt, response)."""
    msgs = [m if isinstance(m, Message) else Message.from_dict(m) for m in messages]
    _check_roles(msgs)
    if not msgs or msgs[-1].role != "assistant":
        raise CorpusError("conversation must end with an assistant message")
    prompt = apply_chat_template(msgs[:-1], add_generation_prompt=True)
    return prompt, encode(msgs[-1].content) + [EOS_ID]


# -- dataset readers -------------------------------------------------------


def read_sft_jsonl(path: str | Path) -> list[list[Message]]:
    convs = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                convs.append([Message.from_dict(m) for m in obj["messages"]])
            except (json.JSONDecodeError, KeyError, TypeError) as e:
                raise CorpusError(f"{path}:{lineno}: malformed SFT record ({e})", [lineno]) from e
    return convs


def iter_documents(path: str | Path) -> Iterator[str]:
    """Yield documents from a plain-text file; documents are separated by a blank line."""
    text = Path(path).read_text(encoding="utf-8")
    for doc in text.split("\n\n"):
        doc = doc.strip("\n")
        if doc:
            yield doc


def write_sft_jsonl(path: str | Path, convs: Iterable[Sequence[Message | dict]]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for conv in convs:
            msgs = [m if isinstance(m, dict) else {"role": m.role, "content": m.content} for m in conv]
            f.write(json.dumps({"messages": msgs}, ensure_ascii=False) + "\n")


# -- batches ---------------------------------------------------------------


@dataclass(frozen=True)
class Batch:
    input_ids: torch.Tensor  # [B, L] long
    loss_mask: torch.Tensor  # [B, L] bool
    labels: torch.Tensor  # [B, L] long, IGNORE_INDEX where not trained
    attention_mask: torch.Tensor | None  # [B, L] bool, None == full visibility
    prompt_lens: torch.Tensor  # [B] long

    @property
    def shape(self) -> tuple[int, int]:
        return tuple(self.input_ids.shape)

    @property
    def pad_mask(self) -> torch.Tensor:
        return self.input_ids == PAD_ID

    def check(self) -> None:
        if bool((self.loss_mask & (self.labels == IGNORE_INDEX)).any()):
            raise CorpusError("loss_mask set on an ignored label")
        if self.attention_mask is not None and bool((~self.attention_mask & ~self.pad_mask).any()):
            raise CorpusError("attention_mask hides a non-pad position")


def _stack(rows: list[list[int]], width: int, fill: int) -> torch.Tensor:
    out = torch.full((len(rows), width), fill, dtype=torch.long)
    for i, r in enumerate(rows):
        if r:
            out[i, : len(r)] = torch.tensor(r, dtype=torch.long)
    return out


def collate_sft(
    examples: Sequence[tuple[Sequence[int], Sequence[int]]],
    max_len: int,
    max_prompt_len: int | None = None,
    pad_to: int | None = None,
) -> Batch:
    """Right-pad (prompt, response) pairs; loss only on response tokens.

    Prompts longer than ``max_prompt_len`` lose their left end, responses that
    overflow ``max_len`` lose their right end.  Rows are padded to the longest
    row, or to ``pad_to`` (capped at ``max_len``) if that is wider.
    """
    bad = []
    rows, masks, plens = [], [], []
    for i, (prompt, response) in enumerate(examples):
        prompt, response = list(prompt), list(response)
        if max_prompt_len is not None and len(prompt) > max_prompt_len:
            prompt = prompt[len(prompt) - max_prompt_len :]
        if len(prompt) >= max_len:
            bad.append(i)
            continue
        response = response[: max_len - len(prompt)]
        rows.append(prompt + response)
        masks.append([False] * len(prompt) + [True] * len(response))
        plens.append(len(prompt))
    if bad:
        raise CorpusError(f"prompt does not fit in max_len={max_len} for rows {bad}", bad)
    width = max((len(r) for r in rows), default=0)
    if pad_to is not None:
        width = max(width, min(pad_to, max_len))
    input_ids = _stack(rows, width, PAD_ID)
    loss_mask = torch.zeros((len(rows), width), dtype=torch.bool)
    for i, m in enumerate(masks):
        loss_mask[i, : len(m)] = torch.tensor(m, dtype=torch.bool)
    labels = torch.where(loss_mask, input_ids, torch.full_like(input_ids, IGNORE_INDEX))
    attention = torch.zeros_like(loss_mask)
    for i, r in enumerate(rows):
        attention[i, : len(r)] = True
    return Batch(input_ids, loss_mask, labels, attention, torch.tensor(plens, dtype=torch.long))


def collate_pretrain(docs: Sequence[Sequence[int]], max_len: int) -> Batch:
    """Pretraining rows: each document (already ending in EOS) truncated to max_len."""
    return collate_sft([([], list(d)[:max_len]) for d in docs], max_len=max_len + 1)


def wrap_no_attention_mask(batch: Batch) -> Batch:
    return replace(batch, attention_mask=None)


def eos_label_fill(batch: Batch) -> Batch:
    pads = batch.pad_mask
    return replace(
        batch,
        labels=torch.where(pads, torch.full_like(batch.labels, EOS_ID), batch.labels),
        loss_mask=batch.loss_mask | pads,
    )


def wrap_prepend_bos(batch: Batch, max_len: int | None = None) -> Batch:
    b, width = batch.input_ids.shape
    if max_len is not None and width + 1 > max_len:
        raise CorpusError(f"prepending BOS gives width {width + 1} > max_len {max_len}")

    def shift(x: torch.Tensor, first) -> torch.Tensor:
        return torch.cat([torch.full((b, 1), first, dtype=x.dtype), x], dim=1)

    return Batch(
        input_ids=shift(batch.input_ids, BOS_ID),
        loss_mask=shift(batch.loss_mask, False),
        labels=shift(batch.labels, IGNORE_INDEX),
        attention_mask=None if batch.attention_mask is None else shift(batch.attention_mask, True),
        prompt_lens=batch.prompt_lens + 1,
    )


# -- collator objects (composable, as in the trainer recipes) --------------


class SFTCollator:
    """Builds SFT batches; ``label_pad_token_id=EOS_ID`` turns on EOS label fill."""

    def __init__(self, max_len: int, label_pad_token_id: int = IGNORE_INDEX, max_prompt_len=None, pad_to=None):
        self.max_len = max_len
        self.label_pad_token_id = label_pad_token_id
        self.max_prompt_len = max_prompt_len
        self.pad_to = pad_to

    def __call__(self, examples) -> Batch:
        batch = collate_sft(examples, self.max_len, self.max_prompt_len, self.pad_to)
        if self.label_pad_token_id == EOS_ID:
            batch = eos_label_fill(batch)
        return batch


class PretrainCollator:
    def __init__(self, max_len: int):
        self.max_len = max_len

    def __call__(self, docs) -> Batch:
        return collate_pretrain(docs, self.max_len)


class NoAttentionMaskWrapper:
    def __init__(self, inner):
        self.inner = inner

    def __call__(self, examples) -> Batch:
        return wrap_no_attention_mask(self.inner(examples))


class PrependBOSWrapper:
    def __init__(self, inner, max_len: int | None = None):
        self.inner = inner
        self.max_len = max_len

    def __call__(self, examples) -> Batch:
        return wrap_prepend_bos(self.inner(examples), self.max_len)
