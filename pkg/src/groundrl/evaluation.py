"""Faithfulness, pointing-game and counterfactual-noise evaluation at patch granularity."""

from __future__ import annotations

import csv
import io
import json
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import DataSample
from .model import (
    ForwardTrace,
    ModelParams,
    SegmentError,
    SegmentedSequence,
    generate_many,
    prompt_sequence,
    response_logprobs,
    trace_batch,
)
from .reward import BoundingBox, accuracy_reward, alignment_score, box_mask, extract_answer
from .saliency import SaliencyMap, direct_contributions, holistic_saliency_map
from .vocab import Segment

DEFAULT_FRACTIONS = (0.05, 0.15, 0.30)


class LikelihoodError(ValueError):
    pass


@dataclass
class PerturbationCurve:
    fractions: list[float]
    normalized_scores: list[float]

    def __post_init__(self):
        if len(self.fractions) != len(self.normalized_scores):
            raise ValueError("fractions and scores differ in length")

    def at(self, fraction: float) -> float:
        return self.normalized_scores[self.fractions.index(fraction)]


# ------------------------------------------------------------ perturbation

def rank_patches(smap: SaliencyMap) -> np.ndarray:
    """Flat patch indices by descending saliency, ties in row-major order."""
    return np.argsort(-smap.values.reshape(-1), kind="stable")


def num_selected(fraction: float, num_patches: int) -> int:
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"fraction {fraction} outside [0, 1]")
    return int(math.floor(fraction * num_patches + 0.5))


def patch_selection_mask(order: np.ndarray, k: int, grid: tuple[int, int], patch_px: int) -> np.ndarray:
    rows, cols = grid
    chosen = np.zeros(rows * cols, dtype=bool)
    chosen[order[:k]] = True
    return np.kron(chosen.reshape(rows, cols), np.ones((patch_px, patch_px), dtype=bool)).astype(bool)


def perturb_by_order(image: np.ndarray, order: np.ndarray, k: int, mode: str, grid: tuple[int, int]) -> np.ndarray:
    h = image.shape[0]
    sel = patch_selection_mask(order, k, grid, h // grid[0])
    if mode == "delete":
        out = image.copy()
        out[sel] = 0.0
    elif mode == "insert":
        out = np.zeros_like(image)
        out[sel] = image[sel]
    else:
        raise ValueError(f"mode must be 'delete' or 'insert', got {mode!r}")
    return out


def perturb_topk(image: np.ndarray, smap: SaliencyMap, fraction: float, mode: str) -> np.ndarray:
    """Zero (delete) or keep only (insert) the top ``fraction`` most salient patches."""
    rows, cols = smap.grid
    k = num_selected(fraction, rows * cols)
    return perturb_by_order(image, rank_patches(smap), k, mode, smap.grid)


# -------------------------------------------------------------- likelihood

def mean_logprobs(params: ModelParams, images: np.ndarray, seq: SegmentedSequence) -> np.ndarray:
    """Mean per-token log-probability of ``seq``'s generated tokens under each image."""
    images = np.asarray(images, dtype=np.float64)
    lp, mask = response_logprobs(params, params.config, images, [seq] * len(images))
    return (lp.data * mask).sum(axis=1) / mask.sum(axis=1)


def normalize_score(raw: float, blank: float, original: float) -> float:
    span = original - blank
    if abs(span) <= 1e-12:
        raise LikelihoodError(f"blank and original references coincide ({blank!r})")
    return 100.0 * (raw - blank) / span


class LikelihoodScorer:
    """Teacher-forced likelihood of one response, scaled so blank=0 and original=100."""

    def __init__(self, params: ModelParams, image: np.ndarray, seq: SegmentedSequence):
        self.params = params
        self.image = np.asarray(image, dtype=np.float64)
        self.seq = seq
        self.original, self.blank = mean_logprobs(params, np.stack([self.image, np.zeros_like(self.image)]), seq)
        normalize_score(self.original, self.blank, self.original)  # raises on degenerate references

    def raw(self, images: np.ndarray) -> np.ndarray:
        return mean_logprobs(self.params, images, self.seq)

    def normalized(self, images: np.ndarray) -> list[float]:
        return [normalize_score(r, self.blank, self.original) for r in self.raw(images)]


def normalized_likelihood(params: ModelParams, image_variant: np.ndarray, original_image: np.ndarray, seq: SegmentedSequence) -> float:
    return LikelihoodScorer(params, original_image, seq).normalized(np.asarray(image_variant)[None])[0]


def _curve(scorer: LikelihoodScorer, order: np.ndarray, grid, fractions, mode) -> PerturbationCurve:
    fractions = [float(f) for f in fractions]
    if fractions != sorted(fractions):
        raise ValueError("fractions must be sorted ascending")
    n = grid[0] * grid[1]
    variants = np.stack([perturb_by_order(scorer.image, order, num_selected(f, n), mode, grid) for f in fractions])
    return PerturbationCurve(fractions, scorer.normalized(variants))


def deletion_curve(scorer: LikelihoodScorer, smap: SaliencyMap, fractions=DEFAULT_FRACTIONS) -> PerturbationCurve:
    return _curve(scorer, rank_patches(smap), smap.grid, fractions, "delete")


def insertion_curve(scorer: LikelihoodScorer, smap: SaliencyMap, fractions=DEFAULT_FRACTIONS) -> PerturbationCurve:
    return _curve(scorer, rank_patches(smap), smap.grid, fractions, "insert")


def contribution_order(trace: ForwardTrace, seq: SegmentedSequence) -> np.ndarray:
    """Patches ranked by their summed direct contribution to every generated token's logit."""
    nv = len(seq.positions(Segment.VISUAL))
    total = np.zeros(nv)
    for pos in seq.generated_positions():
        total += direct_contributions(trace, pos - 1, seq.tokens[pos]).contributions[:nv]
    return np.argsort(-total, kind="stable")


def deletion_curve_for_order(scorer: LikelihoodScorer, order: np.ndarray, grid, fractions=DEFAULT_FRACTIONS) -> PerturbationCurve:
    return _curve(scorer, np.asarray(order), grid, fractions, "delete")


# ---------------------------------------------------------- pointing game

def pointing_game_hit(smap: SaliencyMap, boxes: Sequence[BoundingBox], image_w: int, image_h: int) -> int:
    v = smap.values
    if v.size == 0:
        raise ValueError("empty saliency map")
    if not np.any(v > 0):
        return 0
    rows, cols = smap.grid
    r, c = divmod(int(np.argmax(v)), cols)  # argmax returns the first maximum in row-major order
    ph, pw = image_h / rows, image_w / cols
    x, y = (c + 0.5) * pw, (r + 0.5) * ph
    return int(any(b.x0 <= x < b.x1 and b.y0 <= y < b.y1 for b in boxes))


def energy_pg(smap: SaliencyMap, boxes: Sequence[BoundingBox], image_w: int, image_h: int) -> float:
    return alignment_score(smap, boxes, image_w, image_h)


# ------------------------------------------------------------- generation

def greedy_responses(params: ModelParams, images: np.ndarray, questions: Sequence[Sequence[int]], max_new: int = 16) -> list[SegmentedSequence]:
    """Greedy decoding, batched over prompts of equal length, results in input order."""
    nv = params.config.num_patches
    prompts = [prompt_sequence(nv, q) for q in questions]
    groups: dict[int, list[int]] = defaultdict(list)
    for i, p in enumerate(prompts):
        groups[len(p)].append(i)
    out: list[SegmentedSequence | None] = [None] * len(prompts)
    for length in sorted(groups):
        idx = groups[length]
        for start in range(0, len(idx), 64):
            chunk = idx[start : start + 64]
            seqs = generate_many(params, images[chunk], [prompts[i] for i in chunk], 0.0, max_new, [0] * len(chunk))
            for i, s in zip(chunk, seqs):
                out[i] = s
    return out


def holistic_maps(params: ModelParams, images: np.ndarray, seqs: Sequence[SegmentedSequence]) -> list[SaliencyMap | None]:
    out = []
    for start in range(0, len(seqs), 32):
        chunk = list(seqs[start : start + 32])
        for tr, s in zip(trace_batch(params, images[start : start + 32], chunk), chunk):
            try:
                out.append(holistic_saliency_map(tr, s))
            except SegmentError:
                out.append(None)
    return out


# ---------------------------------------------------------------- reports

@dataclass
class EvalReport:
    records: list[dict]
    columns: list[str]
    meta: dict = field(default_factory=dict)

    def aggregates(self) -> dict:
        agg = {}
        for col in self.columns:
            vals = [r[col] for r in self.records if r.get(col) is not None]
            agg[col] = math.fsum(vals) / len(vals) if vals else None
            agg[f"{col}_n"] = len(vals)
        return agg

    def to_json(self) -> str:
        return json.dumps({"meta": self.meta, "aggregate": self.aggregates(), "records": self.records}, indent=1, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["id", *self.columns])
        for r in self.records:
            w.writerow([r["id"], *("" if r.get(c) is None else repr(r[c]) for c in self.columns)])
        return buf.getvalue()

    def write(self, out_dir: str | Path) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(self.to_json())
        (out / "report.csv").write_text(self.to_csv())
        return out


def _stack(samples: Sequence[DataSample]) -> np.ndarray:
    return np.stack([s.image for s in samples])


def _zero_map(params: ModelParams) -> SaliencyMap:
    return SaliencyMap(np.zeros(params.config.grid))


def evaluate_pointing(params: ModelParams, samples: Sequence[DataSample], max_new: int = 16) -> EvalReport:
    images = _stack(samples)
    seqs = greedy_responses(params, images, [s.question for s in samples], max_new)
    maps = holistic_maps(params, images, seqs)
    records = []
    for s, seq, m in zip(samples, seqs, maps):
        h, w, _ = s.image.shape
        m = m if m is not None else _zero_map(params)
        records.append(
            {
                "id": s.id,
                "accuracy": accuracy_reward(extract_answer(seq), s.answer),
                "pg_hit": pointing_game_hit(m, s.boxes, w, h),
                "energy_pg": energy_pg(m, s.boxes, w, h),
            }
        )
    return EvalReport(records, ["accuracy", "pg_hit", "energy_pg"], {"metric": "pointing_game", "n": len(samples)})


def evaluate_faithfulness(
    params: ModelParams,
    samples: Sequence[DataSample],
    fractions: Sequence[float] = DEFAULT_FRACTIONS,
    max_new: int = 16,
    random_seed: int | None = None,
) -> EvalReport:
    """Deletion/insertion curves per sample; optionally a uniform-random-ranking deletion baseline."""
    images = _stack(samples)
    seqs = greedy_responses(params, images, [s.question for s in samples], max_new)
    maps = holistic_maps(params, images, seqs)
    fractions = [float(f) for f in fractions]
    cols = [f"deletion_{f:g}" for f in fractions] + [f"insertion_{f:g}" for f in fractions]
    if random_seed is not None:
        cols += [f"random_deletion_{f:g}" for f in fractions]
    cols += ["pg_hit", "energy_pg"]
    records = []
    for idx, (s, seq, m) in enumerate(zip(samples, seqs, maps)):
        h, w, _ = s.image.shape
        m = m if m is not None else _zero_map(params)
        rec: dict = {"id": s.id, "pg_hit": pointing_game_hit(m, s.boxes, w, h), "energy_pg": energy_pg(m, s.boxes, w, h)}
        try:
            scorer = LikelihoodScorer(params, s.image, seq)
        except LikelihoodError:
            scorer = None
        dele = deletion_curve(scorer, m, fractions) if scorer else None
        ins = insertion_curve(scorer, m, fractions) if scorer else None
        for i, f in enumerate(fractions):
            rec[f"deletion_{f:g}"] = dele.normalized_scores[i] if dele else None
            rec[f"insertion_{f:g}"] = ins.normalized_scores[i] if ins else None
        if random_seed is not None:
            order = np.random.default_rng([random_seed, idx]).permutation(m.values.size)
            rnd = deletion_curve_for_order(scorer, order, m.grid, fractions) if scorer else None
            for i, f in enumerate(fractions):
                rec[f"random_deletion_{f:g}"] = rnd.normalized_scores[i] if rnd else None
        records.append(rec)
    return EvalReport(records, cols, {"metric": "faithfulness", "fractions": fractions, "n": len(samples)})


# ---------------------------------------------------------- counterfactual

def add_region_noise(
    image: np.ndarray,
    boxes: Sequence[BoundingBox],
    sigma: float,
    region: str,
    rng: np.random.Generator,
) -> np.ndarray:
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    h, w, _ = image.shape
    inside = box_mask(boxes, w, h)
    if region == "foreground":
        sel = inside
    elif region == "background":
        sel = ~inside
    else:
        raise ValueError(f"region must be 'foreground' or 'background', got {region!r}")
    noise = rng.normal(0.0, 1.0, size=image.shape) * sigma
    out = image.copy()
    out[sel] = np.clip(image[sel] + noise[sel], 0.0, 1.0)
    return out


def counterfactual_accuracy(
    params: ModelParams,
    samples: Sequence[DataSample],
    sigma: float,
    region: str,
    seed: int,
    max_new: int = 16,
) -> tuple[float, list[int]]:
    """Greedy exact-match accuracy after seeded Gaussian noise inside or outside the boxes."""
    noisy = np.stack(
        [
            add_region_noise(s.image, s.boxes, sigma, region, np.random.default_rng([seed, i]))
            if sigma > 0
            else s.image
            for i, s in enumerate(samples)
        ]
    )
    seqs = greedy_responses(params, noisy, [s.question for s in samples], max_new)
    hits = [accuracy_reward(extract_answer(q), s.answer) for s, q in zip(samples, seqs)]
    return math.fsum(hits) / len(hits), hits


def evaluate_counterfactual(
    params: ModelParams,
    samples: Sequence[DataSample],
    sigmas: Sequence[float],
    seed: int,
    regions: Sequence[str] = ("foreground", "background"),
    max_new: int = 16,
) -> EvalReport:
    cols = [f"{r}_{s:g}" for r in regions for s in sigmas]
    per: dict[str, list[int]] = {}
    for r in regions:
        for s in sigmas:
            per[f"{r}_{s:g}"] = counterfactual_accuracy(params, samples, s, r, seed, max_new)[1]
    records = [{"id": smp.id, **{c: per[c][i] for c in cols}} for i, smp in enumerate(samples)]
    return EvalReport(records, cols, {"metric": "counterfactual", "sigmas": list(sigmas), "seed": seed, "n": len(samples)})
