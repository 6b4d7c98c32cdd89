"""Synthetic desk-scale tasks and a tiny pretraining corpus.

Everything here is generated from a seed so fixtures can be rebuilt on demand.
"""

from __future__ import annotations

import json
import string
from pathlib import Path

from .errors import ConfigError
from .noising import make_rng

GENERATIVE_TASKS = ("copy", "reverse", "addition")
MC_TASKS = ("retrieval",)


def _word(rng, lo: int, hi: int, alphabet: str = string.ascii_lowercase) -> str:
    n = int(rng.integers(lo, hi + 1))
    return "".join(alphabet[i] for i in rng.integers(0, len(alphabet), size=n))


def make_generative_records(name: str, n: int, seed: int, min_len: int = 3, max_len: int = 8) -> list[dict]:
    rng = make_rng(seed, f"task/{name}")
    out = []
    for _ in range(n):
        if name == "copy":
            s = _word(rng, min_len, max_len)
            out.append({"prompt": s, "target": s})
        elif name == "reverse":
            s = _word(rng, min_len, max_len)
            out.append({"prompt": s, "target": s[::-1]})
        elif name == "addition":
            a, b = (int(x) for x in rng.integers(10, 100, size=2))
            out.append({"prompt": f"{a}+{b}=", "target": str(a + b)})
        else:
            raise ConfigError(f"unknown generative task {name!r}; choose from {GENERATIVE_TASKS}")
    return out


def make_retrieval_records(n: int, seed: int, n_options: int = 4) -> list[dict]:
    """Key/value lookup: the prompt lists pairs, the gold option is the queried value."""
    rng = make_rng(seed, "task/retrieval")
    out = []
    for _ in range(n):
        keys = [_word(rng, 2, 2) for _ in range(n_options)]
        vals = [_word(rng, 3, 3) for _ in range(n_options)]
        q = int(rng.integers(n_options))
        ctx = " ".join(f"{k}={v}" for k, v in zip(keys, vals))
        out.append({"prompt": f"{ctx} ? {keys[q]}", "options": vals, "gold": q})
    return out


def records_to_conversations(records: list[dict]) -> list[list[dict]]:
    return [
        [{"role": "user", "content": r["prompt"]}, {"role": "assistant", "content": r["target"]}]
        for r in records
    ]


_SUBJECTS = ["the cat", "a dog", "my friend", "the teacher", "a bird", "the farmer", "our team"]
_VERBS = ["sees", "likes", "finds", "helps", "watches", "follows", "calls"]
_OBJECTS = ["the ball", "a tree", "the river", "a small house", "the garden", "an old book"]
_TAILS = ["today.", "at night.", "in the morning.", "again.", "every day.", "with care."]


def make_text_corpus(n_docs: int, seed: int) -> list[str]:
    """Short documents of templated English sentences."""
    rng = make_rng(seed, "corpus")

    def pick(xs):
        return xs[int(rng.integers(len(xs)))]

    docs = []
    for _ in range(n_docs):
        sents = []
        for _ in range(int(rng.integers(1, 3))):
            s = f"{pick(_SUBJECTS)} {pick(_VERBS)} {pick(_OBJECTS)} {pick(_TAILS)}"
            sents.append(s[0].upper() + s[1:])
        docs.append(" ".join(sents))
    return docs


def write_jsonl(path: str | Path, records, header: dict | None = None) -> None:
    with open(path, "w", encoding="utf-8") as f:
        if header is not None:
            f.write(json.dumps({"config": header}, sort_keys=True) + "\n")
        for r in records:
            f.write(json.dumps(r, ensure_ascii=False, sort_keys=True) + "\n")
