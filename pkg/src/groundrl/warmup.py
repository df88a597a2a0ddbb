"""Supervised cold start on scripted think/answer responses."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .data import DataSample, SceneObject, pointer_phrase, scripted_response
from .model import ModelParams, prompt_sequence, response_logprobs, response_sequence
from .optim import Adam, clip_by_global_norm


class DivergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class WarmupConfig:
    steps: int = 1500
    batch_size: int = 16
    lr: float = 1e-3
    seed: int = 0
    # share of examples whose scripted pointer names the wrong cells
    distractor_rate: float = 0.0
    max_grad_norm: float = 1.0

    def validate(self) -> "WarmupConfig":
        if self.steps < 0 or self.batch_size < 1 or self.lr < 0:
            raise ValueError(f"bad warm-up config {self}")
        if not 0.0 <= self.distractor_rate <= 1.0:
            raise ValueError("distractor_rate must be in [0, 1]")
        return self


def distracted_response(sample: DataSample, grid: tuple[int, int], rng: np.random.Generator) -> list[int]:
    """Scripted response whose pointer names random non-target cells."""
    rows, cols = grid
    n = (len(sample.warmup_response) - 4) // 2  # <think> look (r c)* </think> ans <eos>
    target_cells = {(b.y0, b.x0) for b in sample.boxes}
    p = sample.boxes[0].x1 - sample.boxes[0].x0
    free = [c for c in range(rows * cols) if (c // cols * p, c % cols * p) not in target_cells]
    picks = sorted(rng.choice(free, size=n, replace=False))
    fake = [SceneObject(int(c // cols), int(c % cols), "red", "square") for c in picks]
    return scripted_response(pointer_phrase(fake), sample.answer)


def supervised_batch(samples: Sequence[DataSample], num_visual: int, responses: Sequence[Sequence[int]]):
    seqs = [response_sequence(prompt_sequence(num_visual, s.question), r) for s, r in zip(samples, responses)]
    images = np.stack([s.image for s in samples])
    return images, seqs


def nll_loss(arrays: dict[str, T.Tensor], params: ModelParams, images, seqs) -> T.Tensor:
    lp, mask = response_logprobs(arrays, params.config, images, seqs)
    return T.neg(T.sum(T.mul(lp, mask))) / float(mask.sum())


def warmup(
    params: ModelParams,
    samples: Sequence[DataSample],
    cfg: WarmupConfig,
    log_path: str | Path | None = None,
) -> tuple[ModelParams, list[dict]]:
    """Next-token training on scripted responses. Returns new params and the per-step log."""
    cfg.validate()
    if not samples:
        raise ValueError("warm-up needs at least one sample")
    params = params.copy()
    num_visual = params.config.num_patches
    rng = np.random.default_rng([cfg.seed, 7])
    opt = Adam(lr=cfg.lr)
    log = []
    fh = open(log_path, "w") if log_path else None
    try:
        for step in range(cfg.steps):
            idx = rng.integers(len(samples), size=cfg.batch_size)
            batch = [samples[i] for i in idx]
            responses = [
                distracted_response(s, params.config.grid, rng) if rng.random() < cfg.distractor_rate else s.warmup_response
                for s in batch
            ]
            images, seqs = supervised_batch(batch, num_visual, responses)
            leaves = params.tensors(requires_grad=True)
            with T.GradientTape() as tape:
                loss = nll_loss(leaves, params, images, seqs)
            grads = {k: g.data for k, g in T.backward(tape, loss, leaves).items()}
            norm = clip_by_global_norm(grads, cfg.max_grad_norm)
            rec = {"step": step, "loss": loss.item(), "grad_norm": norm, "seed": cfg.seed}
            if not (math.isfinite(rec["loss"]) and math.isfinite(norm)):
                if fh:
                    fh.write(json.dumps({**rec, "diverged": True}) + "\n")
                raise DivergenceError(f"warm-up diverged at step {step}: {rec}")
            opt.step(params.arrays, grads)
            log.append(rec)
            if fh:
                fh.write(json.dumps(rec) + "\n")
    finally:
        if fh:
            fh.close()
    return params, log


def config_dict(cfg: WarmupConfig) -> dict:
    return asdict(cfg)
