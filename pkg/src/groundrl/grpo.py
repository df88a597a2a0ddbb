"""Group relative policy optimisation with accuracy, format and saliency rewards."""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .data import DataSample
from .model import (
    CapacityError,
    ModelParams,
    SegmentError,
    SegmentedSequence,
    generate_many,
    prompt_sequence,
    response_logprobs,
    save_checkpoint,
    trace_batch,
)
from .optim import Adam, clip_by_global_norm
from .reward import RewardBreakdown, accuracy_reward, alignment_score, extract_answer, format_reward, overall_reward
from .saliency import SaliencyMap, holistic_saliency_map
from .tensor import UsageError
from .warmup import DivergenceError

STD_FLOOR = 1e-8


class DegenerateRolloutError(ValueError):
    pass


@dataclass(frozen=True)
class Hyperparams:
    group_size: int = 8
    eps_clip: float = 0.2
    beta: float = 0.001
    lr: float = 1e-3
    temperature: float = 1.0
    steps: int = 1000
    seed: int = 0
    max_new: int = 16
    use_saliency_reward: bool = True
    ratio_level: str = "token"  # or "sequence"
    max_grad_norm: float = 1.0
    checkpoint_every: int = 0

    def validate(self) -> "Hyperparams":
        if self.group_size < 2:
            raise UsageError("group size must be at least 2")
        if not 0 < self.eps_clip < 1:
            raise UsageError("eps_clip must lie in (0, 1)")
        if self.beta < 0:
            raise UsageError("beta must be non-negative")
        if not self.lr >= 0:
            raise UsageError("learning rate must be non-negative")
        if self.temperature < 0 or self.steps < 0 or self.max_new < 1:
            raise UsageError(f"bad hyperparameters {self}")
        if self.ratio_level not in ("token", "sequence"):
            raise UsageError(f"ratio_level must be 'token' or 'sequence', got {self.ratio_level!r}")
        return self


@dataclass
class PolicyState:
    theta: ModelParams
    theta_old: ModelParams
    ref: ModelParams
    optimizer: Adam

    @classmethod
    def from_checkpoint(cls, params: ModelParams, lr: float) -> "PolicyState":
        return cls(params.copy(), params.copy(), params.copy(), Adam(lr=lr))

    def refresh_old(self) -> None:
        self.theta_old = self.theta.copy()


@dataclass
class RolloutGroup:
    sample: DataSample
    responses: list[SegmentedSequence]
    old_logp: np.ndarray  # (G, T-1), rows aligned with `mask`
    ref_logp: np.ndarray
    mask: np.ndarray
    rewards: list[RewardBreakdown]
    alignment: list[float]
    advantages: np.ndarray
    maps: list[SaliencyMap | None] = field(default_factory=list)

    @property
    def images(self) -> np.ndarray:
        return np.repeat(self.sample.image[None], len(self.responses), axis=0)


# ----------------------------------------------------------------- pieces

def standardize_advantages(rewards: Sequence[float]) -> np.ndarray:
    r = np.asarray(rewards, dtype=np.float64)
    if r.ndim != 1 or r.size < 2:
        raise UsageError("advantage standardisation needs at least two rewards")
    centred = r - r.mean()
    std = np.sqrt(np.mean(centred**2))
    if std < STD_FLOOR:
        return np.zeros_like(r)
    return centred / std


def clipped_surrogate(ratio: float, advantage: float, eps_clip: float) -> float:
    clipped = min(max(ratio, 1.0 - eps_clip), 1.0 + eps_clip)
    return min(ratio * advantage, clipped * advantage)


def kl_penalty(logp_theta: float, logp_ref: float) -> float:
    d = logp_ref - logp_theta
    # r - log r - 1 with r = exp(d); expm1 keeps precision near r = 1
    return float(np.expm1(d) - d)


def grpo_objective(
    logp: T.Tensor,
    mask: np.ndarray,
    old_logp: np.ndarray,
    ref_logp: np.ndarray,
    advantages: np.ndarray,
    hp: Hyperparams,
) -> tuple[T.Tensor, dict]:
    """Differentiable group objective from per-token log-probabilities.

    ``logp`` is (G, T) under the current policy; ``mask`` marks the generated
    tokens of each row. Each row contributes the mean over its tokens of the
    clipped surrogate minus ``beta`` times the mean per-token KL estimate.
    """
    mask = np.asarray(mask, dtype=np.float64)
    counts = mask.sum(axis=1)
    if np.any(counts == 0):
        raise DegenerateRolloutError("a rollout has no generated tokens")
    g = mask.shape[0]
    adv = np.asarray(advantages, dtype=np.float64)[:, None]
    inv = (1.0 / counts)[:, None]

    log_ratio = T.sub(logp, old_logp * mask)
    log_ratio = T.mul(log_ratio, mask)
    if hp.ratio_level == "token":
        ratio = T.exp(log_ratio)
        surr = T.minimum(T.mul(ratio, adv), T.mul(T.clip(ratio, 1 - hp.eps_clip, 1 + hp.eps_clip), adv))
        surr_term = T.sum(T.mul(surr, mask * inv))
    else:
        ratio = T.exp(T.sum(log_ratio, axis=1))
        a = adv[:, 0]
        surr = T.minimum(T.mul(ratio, a), T.mul(T.clip(ratio, 1 - hp.eps_clip, 1 + hp.eps_clip), a))
        surr_term = T.sum(surr)

    # KL estimator r - log r - 1 with r = pi_ref / pi_theta, per token
    d = T.mul(T.sub(ref_logp * mask, logp), mask)
    kl_tok = T.sub(T.sub(T.exp(d), d), 1.0)
    kl_term = T.sum(T.mul(kl_tok, mask * inv))

    objective = T.div(T.sub(surr_term, T.mul(kl_term, hp.beta)), float(g))
    stats = {"surrogate": surr_term.item() / g, "kl": kl_term.item() / g}
    return objective, stats


# -------------------------------------------------------------- rollouts

def rollout_seed(seed: int, step: int, i: int) -> int:
    return int(np.random.SeedSequence([seed, step, i]).generate_state(1)[0])


def score_response(
    resp: SegmentedSequence,
    trace,
    sample: DataSample,
    use_saliency: bool,
) -> tuple[RewardBreakdown, float, SaliencyMap | None]:
    h, w, _ = sample.image.shape
    fmt = format_reward(resp)
    acc = accuracy_reward(extract_answer(resp), sample.answer)
    smap = None
    align = 0.0
    try:
        smap = holistic_saliency_map(trace, resp)
        align = alignment_score(smap, sample.boxes, w, h)
    except SegmentError:
        pass
    return overall_reward(acc, fmt, align if use_saliency else 0.0), align, smap


def sample_group(state: PolicyState, sample: DataSample, hp: Hyperparams, step: int = 0) -> RolloutGroup:
    hp.validate()
    cfg = state.theta_old.config
    prompt = prompt_sequence(cfg.num_patches, sample.question)
    if len(prompt) + hp.max_new > cfg.max_len:
        raise CapacityError(f"prompt of {len(prompt)} plus {hp.max_new} new tokens exceeds max_len {cfg.max_len}")
    g = hp.group_size
    images = np.repeat(sample.image[None], g, axis=0)
    seeds = [rollout_seed(hp.seed, step, i) for i in range(g)]
    responses = generate_many(state.theta_old, images, [prompt] * g, hp.temperature, hp.max_new, seeds)

    kept = [i for i, r in enumerate(responses) if r.generated_positions()]
    if len(kept) < len(responses):
        warnings.warn(f"dropping {len(responses) - len(kept)} rollouts with no generated tokens")
        if len(kept) < 2:
            raise DegenerateRolloutError("fewer than two usable rollouts in the group")
        responses = [responses[i] for i in kept]
        images = images[: len(kept)]

    traces = trace_batch(state.theta_old, images, responses)
    scored = [score_response(r, tr, sample, hp.use_saliency_reward) for r, tr in zip(responses, traces)]
    rewards = [s[0] for s in scored]
    old_lp, mask = response_logprobs(state.theta_old, cfg, images, responses)
    ref_lp, _ = response_logprobs(state.ref, cfg, images, responses)
    return RolloutGroup(
        sample=sample,
        responses=responses,
        old_logp=old_lp.data,
        ref_logp=ref_lp.data,
        mask=mask,
        rewards=rewards,
        alignment=[s[1] for s in scored],
        advantages=standardize_advantages([r.overall for r in rewards]),
        maps=[s[2] for s in scored],
    )


def group_objective(arrays, cfg, group: RolloutGroup, hp: Hyperparams) -> tuple[T.Tensor, dict]:
    """Objective of ``group`` under the parameter tensors ``arrays``."""
    lp, mask = response_logprobs(arrays, cfg, group.images, group.responses)
    return grpo_objective(lp, mask, group.old_logp, group.ref_logp, group.advantages, hp)


# ----------------------------------------------------------------- train

def _mean(xs) -> float:
    return math.fsum(xs) / len(xs)


def grpo_step(state: PolicyState, sample: DataSample, hp: Hyperparams, step: int) -> dict:
    state.refresh_old()
    group = sample_group(state, sample, hp, step)
    leaves = state.theta.tensors(requires_grad=True)
    with T.GradientTape() as tape:
        obj, stats = group_objective(leaves, state.theta.config, group, hp)
    grads = {k: g.data for k, g in T.backward(tape, obj, leaves).items()}
    norm = clip_by_global_norm(grads, hp.max_grad_norm)
    rec = {
        "step": step,
        "sample_id": sample.id,
        "mean_reward": _mean([r.overall for r in group.rewards]),
        "mean_accuracy": _mean([r.accuracy for r in group.rewards]),
        "mean_format": _mean([r.format for r in group.rewards]),
        "mean_saliency": _mean([r.saliency for r in group.rewards]),
        "mean_alignment": _mean(group.alignment),
        "objective": obj.item(),
        "kl": stats["kl"],
        "grad_norm": norm,
        "seed": hp.seed,
        "rollouts": [{**r.to_dict(), "alignment": a} for r, a in zip(group.rewards, group.alignment)],
    }
    if not all(math.isfinite(v) for v in (rec["objective"], rec["kl"], norm)):
        raise DivergenceError(json.dumps({**rec, "diverged": True}))
    state.optimizer.step(state.theta.arrays, grads, maximize=True)
    return rec


def train(
    state: PolicyState,
    samples: Sequence[DataSample],
    hp: Hyperparams,
    log_path: str | Path | None = None,
    checkpoint_dir: str | Path | None = None,
    on_step: Callable[[dict], None] | None = None,
) -> list[dict]:
    """Run ``hp.steps`` GRPO updates, one question per step."""
    hp.validate()
    if not samples:
        raise UsageError("training needs a non-empty dataset")
    state.optimizer.lr = hp.lr
    rng = np.random.default_rng([hp.seed, 11])
    log = []
    fh = open(log_path, "w") if log_path else None
    try:
        for step in range(hp.steps):
            sample = samples[int(rng.integers(len(samples)))]
            try:
                rec = grpo_step(state, sample, hp, step)
            except DivergenceError as exc:
                if fh:
                    fh.write(str(exc) + "\n")
                raise
            log.append(rec)
            if fh:
                fh.write(json.dumps(rec) + "\n")
            if on_step:
                on_step(rec)
            if checkpoint_dir and hp.checkpoint_every and (step + 1) % hp.checkpoint_every == 0:
                Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
                save_checkpoint(Path(checkpoint_dir) / f"step_{step + 1:05d}.json", state.theta, {"step": step + 1})
    finally:
        if fh:
            fh.close()
    return log


def hyperparams_dict(hp: Hyperparams) -> dict:
    return asdict(hp)
