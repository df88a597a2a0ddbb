"""First-order logit attribution to context tokens and visual saliency maps.

With pre-norm blocks the last residual stream is

    h[L, i] = h[0, i] + sum_l F[l, i] + sum_l sum_h sum_p alpha[l, h, i, p] * vout[l, h, p]

and the final RMSNorm is linear once its rms statistic is fixed at the
predicting position. Projecting the attention terms onto one unembedding
column gives each context position's direct contribution to that logit; the
embedding and FFN terms stay behind as an unattributed scalar remainder.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import ForwardTrace, SegmentError, SegmentedSequence
from .vocab import EOS, Segment


@dataclass
class ContributionVector:
    position: int
    target: int
    contributions: np.ndarray  # (position + 1,)
    remainder: float
    logit: float
    grid: tuple[int, int]

    def total(self) -> float:
        return float(np.sum(self.contributions) + self.remainder)


@dataclass
class SaliencyMap:
    values: np.ndarray  # (rows, cols), non-negative

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError(f"saliency map must be 2-d, got shape {self.values.shape}")
        if np.any(self.values < 0):
            raise ValueError("saliency map entries must be non-negative")

    @property
    def grid(self) -> tuple[int, int]:
        return self.values.shape

    def to_pixels(self, patch_px: int) -> np.ndarray:
        """Nearest-neighbour expansion: every cell becomes a patch_px square."""
        return np.kron(self.values, np.ones((patch_px, patch_px)))

    def __add__(self, other: "SaliencyMap") -> "SaliencyMap":
        return SaliencyMap(self.values + other.values)

    def to_json(self) -> dict:
        rows, cols = self.grid
        return {"grid_rows": rows, "grid_cols": cols, "values": self.values.reshape(-1).tolist()}

    @classmethod
    def from_json(cls, d: dict) -> "SaliencyMap":
        return cls(np.array(d["values"], dtype=np.float64).reshape(d["grid_rows"], d["grid_cols"]))

    def write_pgm(self, path: str | Path, patch_px: int = 1) -> None:
        pix = self.to_pixels(patch_px)
        top = pix.max()
        scaled = np.zeros_like(pix) if top <= 0 else pix / top
        data = np.round(scaled * 255).astype(np.uint8)
        h, w = data.shape
        Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + data.tobytes())


@dataclass
class BottleneckRollout:
    matrices: np.ndarray  # (L, H, num_visual, num_answer)
    think_positions: list[int]
    answer_steps: list[tuple[int, int]]  # (query position, realized token)

    def column_sums(self) -> np.ndarray:
        return self.matrices.sum(axis=2)


def _logit_direction(trace: ForwardTrace, position: int, target: int) -> np.ndarray:
    # final RMSNorm with the statistic frozen at `position`, folded into the unembedding column
    return trace.final_gain * trace.unembed[:, target] / trace.final_sigma[position]


def direct_contributions(trace: ForwardTrace, i: int, target: int) -> ContributionVector:
    """Split the logit of ``target`` at position ``i`` over context positions 0..i."""
    if not 0 <= i < trace.length:
        raise IndexError(f"position {i} outside sequence of length {trace.length}")
    w = _logit_direction(trace, i, target)
    proj = trace.vout[:, :, : i + 1] @ w  # (L, H, i+1)
    contrib = np.einsum("lhp,lhp->p", trace.alpha[:, :, i, : i + 1], proj)
    remainder = float((trace.h[0, i] + trace.ffn[:, i].sum(axis=0)) @ w)
    return ContributionVector(
        position=i,
        target=int(target),
        contributions=contrib,
        remainder=remainder,
        logit=float(trace.logits[i, target]),
        grid=tuple(trace.grid),
    )


def token_saliency_map(contrib: ContributionVector, seq: SegmentedSequence) -> SaliencyMap:
    vis = seq.positions(Segment.VISUAL)
    if not vis:
        raise SegmentError("sequence has no visual positions")
    rows, cols = contrib.grid
    if rows * cols != len(vis):
        raise SegmentError(f"grid {contrib.grid} does not match {len(vis)} visual positions")
    vals = np.zeros(len(vis))
    n = min(len(vis), contrib.contributions.shape[0])
    vals[:n] = contrib.contributions[:n]
    return SaliencyMap(np.maximum(vals, 0.0).reshape(rows, cols))


def generated_token_maps(trace: ForwardTrace, seq: SegmentedSequence) -> list[SaliencyMap]:
    """One direct-contribution map per generated token, attributed at the step that emitted it."""
    return [
        token_saliency_map(direct_contributions(trace, pos - 1, seq.tokens[pos]), seq)
        for pos in seq.generated_positions()
    ]


def answer_steps(seq: SegmentedSequence) -> list[tuple[int, int]]:
    """(emitting position, token) for every content answer token.

    The logit that produced answer token ``t`` at position ``k`` lives at
    position ``k - 1``; that row of attention is the answer's query.
    End-of-sequence markers carry no content and are skipped.
    """
    return [(k - 1, seq.tokens[k]) for k in seq.positions(Segment.ANSWER) if seq.tokens[k] != EOS]


def bottleneck_rollout(trace: ForwardTrace, seq: SegmentedSequence) -> BottleneckRollout:
    think = seq.positions(Segment.THINK)
    steps = answer_steps(seq)
    if not think or not steps:
        raise SegmentError("rollout needs at least one thinking token and one answer token")
    vis = seq.positions(Segment.VISUAL)
    queries = [q for q, _ in steps]
    # a_vt[l, h, v, t]: weight thinking position t puts on visual position v
    a_vt = np.swapaxes(trace.alpha[:, :, think][:, :, :, vis], 2, 3)
    # a_ta[l, h, t, a]: weight answer query a puts on thinking position t
    a_ta = np.swapaxes(trace.alpha[:, :, queries][:, :, :, think], 2, 3)
    return BottleneckRollout(a_vt @ a_ta, think, steps)


def transitional_maps(trace: ForwardTrace, seq: SegmentedSequence, rollout: BottleneckRollout | None = None) -> list[SaliencyMap]:
    """Per-answer-token maps with rollout weights standing in for visual attention."""
    if rollout is None:
        rollout = bottleneck_rollout(trace, seq)
    vis = seq.positions(Segment.VISUAL)
    rows, cols = trace.grid
    vout_vis = trace.vout[:, :, vis]  # (L, H, V, d)
    maps = []
    for a, (q, tok) in enumerate(rollout.answer_steps):
        proj = vout_vis @ _logit_direction(trace, q, tok)  # (L, H, V)
        contrib = np.einsum("lhv,lhv->v", rollout.matrices[:, :, :, a], proj)
        maps.append(SaliencyMap(np.maximum(contrib, 0.0).reshape(rows, cols)))
    return maps


def holistic_saliency_map(trace: ForwardTrace, seq: SegmentedSequence) -> SaliencyMap:
    maps = transitional_maps(trace, seq)
    total = np.zeros_like(maps[0].values)
    for m in maps:
        total += m.values
    return SaliencyMap(total)


def save_map_json(path: str | Path, smap: SaliencyMap) -> None:
    Path(path).write_text(json.dumps(smap.to_json()))
