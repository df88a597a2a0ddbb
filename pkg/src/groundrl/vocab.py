"""Closed synthetic vocabulary.

Token ids are positions in :data:`TOKENS`. The special ids are fixed so that
models and datasets written separately always agree.
"""

from __future__ import annotations

from enum import Enum

COLORS = ("red", "green", "blue", "yellow", "magenta", "cyan")
SHAPES = ("square", "ring", "cross", "wedge")
COUNTS = ("one", "two", "three", "four")
MAX_GRID = 8

SPECIALS = ("<pad>", "<img>", "<think>", "</think>", "<eos>")
WORDS = ("what", "color", "shape", "is", "the", "in", "how", "many", "look", "at")

TOKENS: tuple[str, ...] = (
    SPECIALS
    + WORDS
    + COLORS
    + SHAPES
    + COUNTS
    + tuple(f"row{r}" for r in range(MAX_GRID))
    + tuple(f"col{c}" for c in range(MAX_GRID))
)
TOKEN_ID = {t: i for i, t in enumerate(TOKENS)}

PAD = TOKEN_ID["<pad>"]
IMG = TOKEN_ID["<img>"]
BEGIN_THINK = TOKEN_ID["<think>"]
END_THINK = TOKEN_ID["</think>"]
EOS = TOKEN_ID["<eos>"]
SPECIAL_IDS = frozenset(TOKEN_ID[t] for t in SPECIALS)

VOCAB_SIZE = len(TOKENS)


class Segment(str, Enum):
    VISUAL = "V"
    PROMPT = "P"
    THINK = "T"
    ANSWER = "A"


def ids(words: str | list[str]) -> list[int]:
    if isinstance(words, str):
        words = words.split()
    return [TOKEN_ID[w] for w in words]


def words(token_ids) -> list[str]:
    return [TOKENS[int(i)] if 0 <= int(i) < VOCAB_SIZE else f"<{int(i)}>" for i in token_ids]


def row_token(r: int) -> int:
    return TOKEN_ID[f"row{r}"]


def col_token(c: int) -> int:
    return TOKEN_ID[f"col{c}"]
