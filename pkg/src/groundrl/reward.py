"""Accuracy, format and saliency-alignment rewards."""

from __future__ import annotations

import math
import re
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .model import SegmentedSequence
from .saliency import SaliencyMap
from .vocab import BEGIN_THINK, END_THINK, EOS, PAD, SPECIAL_IDS


class RewardError(ValueError):
    pass


@dataclass(frozen=True)
class BoundingBox:
    """Pixel box, half-open on the max side: x0 <= x < x1, y0 <= y < y1."""

    x0: int
    y0: int
    x1: int
    y1: int

    def validate(self, width: int, height: int) -> "BoundingBox":
        if not (0 <= self.x0 < self.x1 <= width and 0 <= self.y0 < self.y1 <= height):
            raise RewardError(f"box {self} does not fit a {width}x{height} image")
        return self

    def as_list(self) -> list[int]:
        return [self.x0, self.y0, self.x1, self.y1]

    @classmethod
    def from_list(cls, v: Sequence[int]) -> "BoundingBox":
        return cls(*(int(x) for x in v))

    @property
    def area(self) -> int:
        return (self.x1 - self.x0) * (self.y1 - self.y0)


def box_mask(boxes: Sequence[BoundingBox], width: int, height: int) -> np.ndarray:
    """Boolean (height, width) union of the boxes."""
    mask = np.zeros((height, width), dtype=bool)
    for b in boxes:
        b.validate(width, height)
        mask[b.y0 : b.y1, b.x0 : b.x1] = True
    return mask


def alignment_score(smap: SaliencyMap, boxes: Sequence[BoundingBox], image_w: int, image_h: int) -> float:
    """Share of saliency mass that falls inside the union of ``boxes``."""
    if not boxes:
        raise RewardError("alignment needs at least one bounding box")
    rows, cols = smap.grid
    if image_w % cols or image_h % rows or image_w // cols != image_h // rows:
        raise RewardError(f"{rows}x{cols} map does not tile a {image_w}x{image_h} image")
    pix = smap.to_pixels(image_w // cols)
    total = pix.sum()
    if total <= 0:
        return 0.0
    inside = pix[box_mask(boxes, image_w, image_h)].sum()
    return float(min(1.0, inside / total))


_TEXT_FORMAT = re.compile(r"\s*<think>(?P<think>.*?)</think>(?P<answer>.*)", re.DOTALL)


def format_reward(response: SegmentedSequence | Sequence[int] | str) -> int:
    if isinstance(response, str):
        m = _TEXT_FORMAT.fullmatch(response)
        if not m or "</think>" in m["answer"] or "<think>" in m["answer"]:
            return 0
        answer = m["answer"].replace("<eos>", "")
        return int(bool(answer.strip()))
    toks = response.response_tokens() if isinstance(response, SegmentedSequence) else list(response)
    if not toks or toks[0] != BEGIN_THINK or toks.count(END_THINK) != 1:
        return 0
    after = toks[toks.index(END_THINK) + 1 :]
    return int(any(t not in SPECIAL_IDS for t in after))


def extract_answer(response: SegmentedSequence | Sequence[int]) -> list[int]:
    """Tokens after the last ``</think>``; the whole response when it has none."""
    toks = response.response_tokens() if isinstance(response, SegmentedSequence) else list(response)
    if END_THINK in toks:
        toks = toks[len(toks) - toks[::-1].index(END_THINK) :]
    return toks


def _normalise(toks: Sequence[int]) -> list[int]:
    return [int(t) for t in toks if t not in (PAD, EOS)]


def accuracy_reward(predicted: Sequence[int], gold: Sequence[int]) -> int:
    gold = _normalise(gold)
    if not gold:
        raise RewardError("gold answer is empty")
    return int(_normalise(predicted) == gold)


@dataclass(frozen=True)
class RewardBreakdown:
    accuracy: float
    format: float
    saliency: float
    overall: float

    def to_dict(self) -> dict:
        return asdict(self)


def overall_reward(accuracy: float, format: float, saliency: float) -> RewardBreakdown:  # noqa: A002
    if accuracy not in (0, 1) or format not in (0, 1):
        raise RewardError(f"accuracy and format must be 0 or 1, got {accuracy}, {format}")
    if not (math.isfinite(saliency) and 0.0 <= saliency <= 1.0):
        raise RewardError(f"saliency reward {saliency} outside [0, 1]")
    if format == 0:
        saliency = 0.0
    return RewardBreakdown(float(accuracy), float(format), float(saliency), float(accuracy) + float(format) + float(saliency))
