"""Terminal rendering of decode histories.

``replay`` mode yields one frame per decoding step (masked cells shown as a
placeholder, freshly finalized cells highlighted for one frame); ``summary``
mode yields a single frame colored by when each token was finalized.
"""

from __future__ import annotations

import enum
import sys
import time
from dataclasses import dataclass
from typing import Iterable

from .corpus import EOS_ID, MASK_ID, VOCAB, decode
from .errors import VisualizerError
from .samplers import DecodeHistory

PLACEHOLDER = "░"
UNDECODABLE = "·"
EOS_GLYPH = "∎"

RESET = "\x1b[0m"
STYLE = {
    "masked": "\x1b[2m",
    "just_finalized": "\x1b[1;7m",
    "finalized": "",
    "prompt": "\x1b[2;3m",
    "early": "\x1b[34m",
    "mid": "\x1b[33m",
    "late": "\x1b[31m",
}
CLEAR = "\x1b[2J\x1b[H"


class CellState(str, enum.Enum):
    MASKED = "masked"
    JUST_FINALIZED = "just_finalized"
    FINALIZED = "finalized"


@dataclass(frozen=True)
class Cell:
    state: CellState
    glyph: str
    style: str = ""


@dataclass(frozen=True)
class RenderFrame:
    step: int
    cells: tuple[Cell, ...]


def _utf8_len(lead: int) -> int:
    if lead < 0x80:
        return 1
    if 0xC2 <= lead <= 0xDF:
        return 2
    if 0xE0 <= lead <= 0xEF:
        return 3
    if 0xF0 <= lead <= 0xF4:
        return 4
    return 0


def glyphs(tokens: list[int | None]) -> list[str]:
    """Display glyph per token (None = still masked).

    EOS is drawn as a small block, other special tokens are empty.  A multi-byte character is drawn in
    its first cell once all its bytes are known; continuation cells are empty
    and bytes that do not form a character render as a dot.
    """
    out = [""] * len(tokens)
    i = 0
    while i < len(tokens):
        t = tokens[i]
        if t is None:
            out[i] = PLACEHOLDER
            i += 1
            continue
        if VOCAB.is_special(t):
            out[i] = EOS_GLYPH if t == EOS_ID else ""
            i += 1
            continue
        n = _utf8_len(t - VOCAB.num_specials)
        chunk = tokens[i : i + n] if n else []
        if n and len(chunk) == n and all(c is not None and not VOCAB.is_special(c) for c in chunk):
            try:
                out[i] = bytes(c - VOCAB.num_specials for c in chunk).decode("utf-8")
                i += n
                continue
            except UnicodeDecodeError:
                pass
        out[i] = UNDECODABLE
        i += 1
    return out


def _check(history: DecodeHistory) -> None:
    seen: dict[int, int] = {}
    lo, hi = history.prompt_len, history.prompt_len + history.gen_len
    for i, st in enumerate(history.steps):
        for p in st.positions:
            if p in seen:
                raise VisualizerError(f"position {p} finalized twice (step {seen[p]} and step {i})", step=i)
            if not lo <= p < hi:
                raise VisualizerError(f"step {i} finalizes position {p} outside the generated window", step=i)
            seen[p] = i


def build_frames(history: DecodeHistory, mode: str = "replay") -> list[RenderFrame]:
    _check(history)
    p = history.prompt_len
    n_steps = len(history.steps)
    if mode == "summary":
        if not history.gen_len:
            return [RenderFrame(0, ())]
        finalized_at: dict[int, int] = {}
        for i, st in enumerate(history.steps):
            for pos in st.positions:
                finalized_at[pos] = i
        toks = [t if t != MASK_ID else None for t in history.replay()[p:]]
        cells = []
        for j, g in enumerate(glyphs(toks)):
            step = finalized_at.get(p + j)
            if step is None:
                cells.append(Cell(CellState.MASKED, g, STYLE["masked"]))
                continue
            bucket = ("early", "mid", "late")[min(2, 3 * step // max(1, n_steps))]
            cells.append(Cell(CellState.FINALIZED, g, STYLE[bucket]))
        return [RenderFrame(n_steps, tuple(cells))]
    if mode != "replay":
        raise VisualizerError(f"unknown render mode {mode!r}")
    state: list[int | None] = [None] * history.gen_len
    frames = []
    for i, st in enumerate(history.steps):
        for pos, tok in zip(st.positions, st.tokens):
            state[pos - p] = tok
        fresh = {pos - p for pos in st.positions}
        cells = []
        for j, g in enumerate(glyphs(state)):
            if state[j] is None:
                cells.append(Cell(CellState.MASKED, g, STYLE["masked"]))
            elif j in fresh:
                cells.append(Cell(CellState.JUST_FINALIZED, g, STYLE["just_finalized"]))
            else:
                cells.append(Cell(CellState.FINALIZED, g, STYLE["finalized"]))
        frames.append(RenderFrame(i + 1, tuple(cells)))
    return frames


def _wrap(pieces: Iterable[tuple[str, str]], width: int, color: bool) -> str:
    lines, cur, col = [], [], 0
    for text, style in pieces:
        for ch in text:
            if ch == "\n":
                lines.append("".join(cur))
                cur, col = [], 0
                continue
            if col >= width:
                lines.append("".join(cur))
                cur, col = [], 0
            cur.append(f"{style}{ch}{RESET}" if color and style else ch)
            col += 1
    lines.append("".join(cur))
    return "\n".join(lines)


def render_frame(frame: RenderFrame, total_steps: int, prompt: str, width: int = 80, color: bool = True) -> str:
    header = f"step {frame.step}/{total_steps}"
    pieces = [(prompt, STYLE["prompt"])] + [(c.glyph, c.style) for c in frame.cells]
    return header + "\n" + _wrap(pieces, width, color)


def render_history(
    history: DecodeHistory, mode: str = "replay", width: int = 80, color: bool = True, show_prompt: bool = True
) -> list[str]:
    if width < 1:
        raise VisualizerError(f"width must be >= 1, got {width}")
    frames = build_frames(history, mode)
    if mode == "replay" and not frames:
        return []
    prompt = decode(history.prompt) if show_prompt else ""
    return [render_frame(f, len(history.steps), prompt, width, color) for f in frames]


def play(frames: list[str], delay_ms: int = 0, color: bool = True, stream=None) -> None:
    stream = stream or sys.stdout  # looked up per call so redirected stdout is honored
    for i, f in enumerate(frames):
        if delay_ms and color:
            stream.write(CLEAR)
        elif i:
            stream.write("\n")
        stream.write(f + "\n")
        stream.flush()
        if delay_ms:
            time.sleep(delay_ms / 1000)


class TerminalVisualizer:
    def __init__(self, width: int = 80, color: bool = True, delay_ms: int = 0):
        self.width, self.color, self.delay_ms = width, color, delay_ms

    def visualize(self, history: DecodeHistory, mode: str = "replay", stream=None) -> None:
        play(render_history(history, mode, self.width, self.color), self.delay_ms, self.color, stream)
